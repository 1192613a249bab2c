"""Command-line entry point: gen-data, train, render, eval, gradcheck.

Exit codes: 0 success, 2 configuration/validation error, 3 numeric
failure (divergence or a failed gradient check).  All commands are
deterministic under a fixed seed; --threads 1 guarantees bit-exact
reproducibility.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import (RunConfig, apply_override, config_to_dict, load_config,
                     schema_entries)
from .dataset_io import load_dataset, write_dataset, _parse_camera
from .errors import (ConfigValidationError, DivergenceDetected, DualsplatError,
                     ManifestParseError, MissingFile, NonFiniteGradient,
                     UnknownPreset)
from .gradcheck import GRAD_TOL, SUITES, run_suites
from .image_io import export_buffers, write_png
from .oracle import PRESET_NAMES, generate_dataset, preset_scene
from .trainer import Trainer

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _out_root() -> Path:
    return Path(os.environ.get("DUALSPLAT_OUT_ROOT", "."))


def _resolve_out(arg):
    path = Path(arg)
    return path if path.is_absolute() else _out_root() / path


def cmd_gen_data(args) -> int:
    if args.preset not in PRESET_NAMES:
        raise UnknownPreset(
            f"unknown preset '{args.preset}'; choose from {PRESET_NAMES}")
    scene = preset_scene(args.preset)
    meta = {"preset": args.preset, "views": args.views,
            "test_views": args.test_views, "resolution": args.res,
            "seed": args.seed}
    train, test = generate_dataset(scene, args.views, args.test_views,
                                   args.res, args.seed, meta=meta)
    out = _resolve_out(args.out)
    write_dataset(train, out / "train")
    write_dataset(test, out / "test")
    print(f"wrote {len(train)} train / {len(test)} test views to {out}")
    return EXIT_OK


def _build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for override in args.set or []:
        apply_override(cfg, override)
    if args.dataset:
        cfg.dataset = args.dataset
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if not cfg.dataset:
        raise ConfigValidationError("config key 'dataset' is required")
    if not cfg.out_dir:
        raise ConfigValidationError("config key 'out_dir' is required")
    return cfg


def cmd_train(args) -> int:
    cfg = _build_config(args)
    dataset = load_dataset(cfg.dataset)
    out = _resolve_out(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as f:
        json.dump(config_to_dict(cfg), f, indent=1)
    t0 = time.time()
    if args.resume:
        trainer = Trainer.load(args.resume, dataset, out_dir=out)
    else:
        trainer = Trainer(dataset, cfg, out_dir=out)
    trainer.run()
    trainer.save(out / "final.ckpt.npz")
    trainer.write_log(out / "losses.csv")
    report = trainer.evaluate()
    with open(out / "train_metrics.json", "w") as f:
        json.dump(report, f, indent=1)
    agg = report["aggregate"]
    mae = f" mae={agg['mae_deg']:.2f}deg" if "mae_deg" in agg else ""
    print(f"trained in {time.time() - t0:.1f}s; train psnr="
          f"{agg['psnr']:.2f}dB ssim={agg['ssim']:.4f}{mae}")
    return EXIT_OK


def cmd_render(args) -> int:
    dataset = load_dataset(args.dataset) if args.dataset else None
    if args.camera:
        with open(args.camera) as f:
            cam = _parse_camera(json.load(f), 0)
    elif dataset is not None:
        cam = dataset.cameras[args.view]
    else:
        raise ConfigValidationError("render needs --camera or --dataset")
    if dataset is None:
        from .dataset_io import SceneDataset
        blank = np.zeros((cam.height, cam.width, 3), dtype=np.float32)
        dataset = SceneDataset(cameras=[cam, cam], images=[blank, blank])
    trainer = Trainer.load(args.checkpoint, dataset)
    rendered = trainer.render_view(cam)
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / "composed.png", rendered["composed"])
    write_png(out / "scat.png", rendered["scat"])
    if "refl" in rendered:
        write_png(out / "refl.png", rendered["refl"])
        write_png(out / "reflectivity.png", rendered["reflectivity"])
        write_png(out / "normal.png", 0.5 * (rendered["normal_refl"] + 1.0))
    else:
        write_png(out / "normal.png", 0.5 * (rendered["normal_scat"] + 1.0))
    from .renderer import rasterize
    buf = rasterize(trainer.scat, cam, trainer.config.render,
                    threads=trainer.config.threads)
    export_buffers(buf, out, "scat_buffers")
    print(f"rendered to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = load_dataset(args.dataset)
    trainer = Trainer.load(args.checkpoint, dataset)
    report = trainer.evaluate(dataset)
    text = json.dumps(report, indent=1)
    if args.out:
        out = _resolve_out(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as f:
            f.write(text)
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    scope = args.scope
    if scope != "all" and scope not in SUITES:
        raise ConfigValidationError(
            f"unknown gradcheck scope '{scope}'; choose from "
            f"{('all',) + tuple(SUITES)}")
    reports = run_suites(scope)
    ok = True
    for name, report in reports.items():
        status = "pass" if report.passed(GRAD_TOL) else "FAIL"
        print(f"{name:<12} {status}  max rel err {report.max_rel_err:.3e} "
              f"({report.n_checked} coords; worst {report.worst_param}"
              f"[{report.worst_index}])")
        ok = ok and report.passed(GRAD_TOL)
    return EXIT_OK if ok else EXIT_NUMERIC


def _config_help() -> str:
    lines = ["config keys (JSON file and --set overrides):"]
    for key, default in schema_entries():
        lines.append(f"  {key} = {default!r}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualsplat",
        description="Dual Gaussian splatting for transmissive scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="trace a synthetic dataset")
    p.add_argument("preset", help=f"one of {', '.join(PRESET_NAMES)}")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=20)
    p.add_argument("--test-views", type=int, default=5)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run the three-stage fit",
                       epilog=_config_help(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (dotted path)")
    p.add_argument("--dataset", help="dataset directory (overrides config)")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="render views from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--camera", help="JSON camera spec")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval", help="metrics report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="finite-difference verification suites")
    p.add_argument("scope", nargs="?", default="all",
                   help=f"all or one of {', '.join(SUITES)}")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigValidationError, UnknownPreset, MissingFile,
            ManifestParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceDetected, NonFiniteGradient) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DualsplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
