"""orbitmesh: desk-scale image-to-3D via orbital video diffusion.

A single input view is expanded into an N-frame orbital image sequence by
a pose-conditioned sequence diffusion model, sharpened by a depth-
conditioned video-to-video refiner, and turned into a triangle mesh by
Gaussian-splat view augmentation followed by SDF surface reconstruction.
"""

__version__ = "0.1.0"

from .camera import (  # noqa: F401
    CameraPose,
    OrbitConfig,
    interpolated_azimuths,
    orbital_trajectory,
    project,
    ray_for_pixel,
)
from .diffcore import (  # noqa: F401
    LatentSequence,
    NoiseDraw,
    Schedule,
    forward_noise,
    grad_check,
    make_schedule,
    sample_loop,
    training_loss,
)
from .gsplat import GaussianSet, fit_gaussians, render_gaussians  # noqa: F401
from .metrics import chamfer, psnr, ssim, volume_iou  # noqa: F401
from .pipeline import RunConfig, Workspace, parse_config, run_pipeline  # noqa: F401
from .sdfrecon import Mesh, SDFField, marching_cubes, optimize_sdf  # noqa: F401
from .stage1 import generate_orbit, train_stage1  # noqa: F401
from .stage2 import degrade, refine_orbit, train_stage2  # noqa: F401
from .synthdata import OrbitSample, Scene, build_scene, render_orbit_dataset  # noqa: F401
