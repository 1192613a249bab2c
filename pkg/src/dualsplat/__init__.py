"""Differentiable dual Gaussian splatting for transmissive scenes.

A CPU toolkit that reconstructs scenes seen through glass-like surfaces
with two Gaussian disk sets (scattering content and the reflective
surface itself), disentangled by a residual-guided three-stage fit, and
re-renders them with a deferred reflection shading model backed by a
position/direction light-field MLP.  An analytic ray tracer generates
ground-truth datasets and serves as the verification oracle.
"""

from .scene import (Camera, EnvironmentMap, FrameBuffers, GaussianDisk,
                    GaussianSet, ReflectionAttributes, disk_homography,
                    disk_normal, env_query, sh_eval)
from .renderer import (RenderConfig, SplatFragment, depth_to_normal,
                       gaussian_weight, rasterize, rasterize_backward,
                       ray_splat_intersect)
from .shading import (ShadingInputs, compose, deferred_reflection,
                      fresnel_schlick, per_gaussian_env_color, reflect_dir)
from .lightfield import (LightFieldConfig, LightFieldNet, field_backward,
                         field_forward, fourier_encode)
from .losses import (LossWeights, hf_loss, mae_degrees, normal_loss, psnr,
                     rgb_loss, ssim, total_loss)
from .optim import ParamGroup, ParamRegistry, adam_step, grad_check
from .trainer import (Trainer, compute_residuals, densify_and_prune,
                      init_reflection_set)
from .oracle import OracleScene, generate_dataset, preset_scene, trace_view
from .dataset_io import SceneDataset, load_dataset, write_dataset
from .config import RunConfig, load_config

__version__ = "0.1.0"
