"""Parameter registry with per-group freezing, Adam updates, and the
finite-difference gradient checker used by the verification suites."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from .errors import NonFiniteGradient


class ParamGroup:
    """One named parameter array with its own Adam state and learning rate.

    tag is the freeze unit: freezing a tag makes every group carrying it a
    no-op (parameters and Adam state untouched).  Updates happen in place,
    so views held elsewhere (e.g. the scene arrays) stay current.
    """

    def __init__(self, name: str, param: np.ndarray, lr: float, tag: str,
                 lr_final: Optional[float] = None,
                 lr_decay_steps: Optional[int] = None,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.name = name
        self.param = param
        self.lr = lr
        self.lr_final = lr_final
        self.lr_decay_steps = lr_decay_steps
        self.tag = tag
        self.frozen = False
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros_like(param)
        self.v = np.zeros_like(param)
        self.step_count = 0

    def effective_lr(self) -> float:
        """Log-linear decay from lr to lr_final over lr_decay_steps."""
        if self.lr_final is None or self.lr_decay_steps is None:
            return self.lr
        t = min(self.step_count / max(self.lr_decay_steps, 1), 1.0)
        return float(np.exp((1.0 - t) * np.log(self.lr)
                            + t * np.log(self.lr_final)))

    def resize_rows(self, keep_idx, n_new: int):
        """Keep Adam state rows for surviving entries, zeros for new ones.

        Only meaningful for arrays whose leading axis indexes disks; the
        caller swaps in the resized parameter array afterwards.
        """
        tail = self.m.shape[1:]
        m = np.zeros((len(keep_idx) + n_new,) + tail)
        v = np.zeros_like(m)
        m[:len(keep_idx)] = self.m[keep_idx]
        v[:len(keep_idx)] = self.v[keep_idx]
        self.m = m
        self.v = v

    def state_arrays(self, prefix: str):
        return {f"{prefix}.m": self.m, f"{prefix}.v": self.v,
                f"{prefix}.step": np.array(self.step_count)}

    def load_state_arrays(self, prefix: str, state):
        self.m = np.ascontiguousarray(state[f"{prefix}.m"], dtype=np.float64)
        self.v = np.ascontiguousarray(state[f"{prefix}.v"], dtype=np.float64)
        self.step_count = int(state[f"{prefix}.step"])


def adam_step(group: ParamGroup, grads: np.ndarray):
    """Bias-corrected Adam update in place; frozen groups are untouched."""
    if group.frozen:
        return group.param
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != group.param.shape:
        raise NonFiniteGradient(
            f"group '{group.name}': gradient shape {grads.shape} does not "
            f"match parameter shape {group.param.shape}")
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads.reshape(-1)))[0])
        raise NonFiniteGradient(
            f"group '{group.name}': non-finite gradient at flat index {bad}")
    group.step_count += 1
    t = group.step_count
    group.m *= group.beta1
    group.m += (1.0 - group.beta1) * grads
    group.v *= group.beta2
    group.v += (1.0 - group.beta2) * grads * grads
    m_hat = group.m / (1.0 - group.beta1 ** t)
    v_hat = group.v / (1.0 - group.beta2 ** t)
    group.param -= group.effective_lr() * m_hat / (np.sqrt(v_hat) + group.eps)
    return group.param


class ParamRegistry:
    """Named ParamGroups with tag-level freezing and a single-step API."""

    def __init__(self):
        self.groups: Dict[str, ParamGroup] = {}

    def add(self, group: ParamGroup):
        if group.name in self.groups:
            raise ValueError(f"duplicate parameter group '{group.name}'")
        self.groups[group.name] = group

    def set_frozen_tags(self, tags):
        tags = set(tags)
        for g in self.groups.values():
            g.frozen = g.tag in tags

    def step(self, grads_by_name: Dict[str, np.ndarray]):
        for name, grads in grads_by_name.items():
            if name in self.groups:
                adam_step(self.groups[name], grads)

    def state_arrays(self):
        out = {}
        for name, g in self.groups.items():
            out.update(g.state_arrays(f"opt.{name}"))
        return out

    def load_state_arrays(self, state):
        for name, g in self.groups.items():
            g.load_state_arrays(f"opt.{name}", state)


@dataclass
class GradCheckReport:
    max_rel_err: float = 0.0
    worst_param: str = ""
    worst_index: int = -1
    n_checked: int = 0
    per_param: Dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def relative_error(a: float, b: float) -> float:
    """|a-b| / max(|a|, |b|, 1e-6); the floor is the absolute-tolerance
    branch for gradients that are both (near) zero."""
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def grad_check(loss_and_grads: Callable[[], tuple],
               params: Dict[str, np.ndarray],
               step: float = 1e-4,
               max_coords_per_param: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Central-difference check of analytic gradients.

    loss_and_grads() evaluates the loss at the current parameter values
    and returns (loss, {name: gradient array}) for every entry of params.
    The parameter arrays are perturbed in place coordinate by coordinate
    (all coordinates, or a random sample of max_coords_per_param).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    _, analytic = loss_and_grads()
    report = GradCheckReport()
    for name, arr in params.items():
        flat = arr.reshape(-1)
        ana = np.asarray(analytic[name]).reshape(-1)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            coords = rng.choice(flat.size, size=max_coords_per_param,
                                replace=False)
        else:
            coords = range(flat.size)
        worst_here = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_and_grads()[0]
            flat[i] = orig - step
            lm = loss_and_grads()[0]
            flat[i] = orig
            fd = (lp - lm) / (2.0 * step)
            rel = relative_error(float(ana[i]), fd)
            report.n_checked += 1
            if rel > worst_here:
                worst_here = rel
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst_param = name
                report.worst_index = int(i)
        report.per_param[name] = worst_here
    return report
