"""Pipeline orchestration: run configuration, training entry points, the
image-to-mesh run, and the evaluation/ablation harnesses.

A run config is a flat key-value text file with dotted section keys
(`stage1.lr = 0.0001`); unknown keys are hard errors. One pipeline run
owns a run directory and writes a manifest listing every artifact with a
content digest, so reruns with the same config and seed are comparable
end to end.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .camera import OrbitConfig, orbital_trajectory
from .errors import CheckpointError, ConfigError
from .gsplat import FitConfig, fit_gaussians, load_gaussians, render_interpolations, save_gaussians
from .metrics import chamfer, psnr, ssim, volume_iou, write_metrics_csv
from .sdfrecon import (
    DenseViewSet,
    Mesh,
    SdfConfig,
    SDFField,
    export_mesh,
    marching_cubes,
    optimize_sdf,
    save_sdf,
)
from .seeding import derive_seed, np_rng
from .seq_denoiser import (
    AutoencoderTrainConfig,
    LatentAutoencoder,
    StageDenoiser,
    load_autoencoder,
    load_denoiser,
    save_autoencoder,
    save_denoiser,
    train_autoencoder,
)
from .stage1 import Stage1Config, generate_orbit, train_stage1
from .stage2 import (
    DegradeConfig,
    DepthConfig,
    DepthRegressor,
    Stage2Config,
    degrade,
    estimate_depth,
    refine_orbit,
    train_depth_regressor,
    train_stage2,
)
from .synthdata import OrbitSample, Scene, build_scene, render_orbit_dataset, save_orbit_sample

__all__ = [
    "DatasetConfig",
    "RunLevelConfig",
    "RunConfig",
    "parse_config",
    "serialize_config",
    "Workspace",
    "build_dataset",
    "elevation_for_scene",
    "orbit_for",
    "gt_mesh_for_scene",
    "reconstruct_from_views",
    "run_pipeline",
    "evaluate_run",
    "ablate_m_sweep",
    "ablate_refinement",
]


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    train_scenes: int = 24
    heldout_scenes: int = 8
    train_seed0: int = 0
    heldout_seed0: int = 1000
    n_views: int = 8
    image_size: int = 64  # stage-2 output resolution; stage-1 runs at half
    radius: float = 1.5
    fov_deg: float = 50.0


@dataclass(frozen=True)
class RunLevelConfig:
    seed: int = 0
    m_views: int = 16
    sample_steps: int = 50


_SECTIONS: dict[str, type] = {
    "dataset": DatasetConfig,
    "autoencoder": AutoencoderTrainConfig,
    "depth": DepthConfig,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "degrade": DegradeConfig,
    "gsplat": FitConfig,
    "sdf": SdfConfig,
    "run": RunLevelConfig,
}
# stage2.degrade is populated from the [degrade] section, not a flat key
_EXCLUDED_FIELDS = {("stage2", "degrade")}


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    autoencoder: AutoencoderTrainConfig = field(default_factory=AutoencoderTrainConfig)
    depth: DepthConfig = field(default_factory=DepthConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    gsplat: FitConfig = field(default_factory=FitConfig)
    sdf: SdfConfig = field(default_factory=SdfConfig)
    run: RunLevelConfig = field(default_factory=RunLevelConfig)

    def __post_init__(self):
        m = self.run.m_views
        n = self.dataset.n_views
        if m < 0:
            raise ConfigError(f"run.m_views must be >= 0, got {m}")
        if m > 0 and m % n != 0:
            raise ConfigError(f"run.m_views ({m}) must be divisible by dataset.n_views ({n})")
        if self.dataset.image_size % 4:
            raise ConfigError("dataset.image_size must be divisible by 4")

    @property
    def degrade(self) -> DegradeConfig:
        return self.stage2.degrade


def _valid_keys() -> list[str]:
    keys = []
    for section, cls in _SECTIONS.items():
        if section == "run":
            prefix = "run"
        else:
            prefix = section
        for f in fields(cls):
            if (section, f.name) in _EXCLUDED_FIELDS:
                continue
            keys.append(f"{prefix}.{f.name}")
    return sorted(keys)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text: str, ref):
    if isinstance(ref, bool):
        low = text.strip().lower()
        if low not in ("true", "false", "0", "1"):
            raise ConfigError(f"expected boolean, got {text!r}")
        return low in ("true", "1")
    if isinstance(ref, tuple):
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != len(ref):
            raise ConfigError(f"expected {len(ref)} comma-separated values, got {text!r}")
        return tuple(_parse_value(p, r) for p, r in zip(parts, ref))
    if isinstance(ref, int):
        return int(text)
    if isinstance(ref, float):
        return float(text)
    return text


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for section, cls in _SECTIONS.items():
        obj = getattr(cfg, "run" if section == "run" else section, None)
        if section == "degrade":
            obj = cfg.stage2.degrade
        for f in fields(cls):
            if (section, f.name) in _EXCLUDED_FIELDS:
                continue
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(sorted(lines)) + "\n"


def parse_config(text: str) -> RunConfig:
    defaults = {name: cls() for name, cls in _SECTIONS.items()}
    overrides: dict[str, dict] = {name: {} for name in _SECTIONS}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {ln}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if "." not in key:
            raise ConfigError(
                f"config line {ln}: unknown key {key!r}; valid keys: {', '.join(_valid_keys())}"
            )
        section, _, name = key.partition(".")
        cls = _SECTIONS.get(section)
        if cls is None or name not in {f.name for f in fields(cls)} or (section, name) in _EXCLUDED_FIELDS:
            raise ConfigError(
                f"config line {ln}: unknown key {key!r}; valid keys: {', '.join(_valid_keys())}"
            )
        ref = getattr(defaults[section], name)
        try:
            overrides[section][name] = _parse_value(val, ref)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"config line {ln}: bad value for {key}: {exc}") from exc
    built = {}
    for section in _SECTIONS:
        if section == "degrade":
            continue
        kwargs = dict(overrides[section])
        if section == "stage2":
            kwargs["degrade"] = DegradeConfig(**overrides["degrade"])
        built[section] = dataclasses.replace(defaults[section], **kwargs) if kwargs else defaults[section]
    return RunConfig(
        dataset=built["dataset"],
        autoencoder=built["autoencoder"],
        depth=built["depth"],
        stage1=built["stage1"],
        stage2=built["stage2"],
        gsplat=built["gsplat"],
        sdf=built["sdf"],
        run=built["run"],
    )


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def elevation_for_scene(scene_seed: int) -> float:
    """Per-scene orbit elevation, uniform in [-10, 40] degrees."""
    return float(np_rng(scene_seed, "elevation").uniform(-10.0, 40.0))


def orbit_for(cfg: DatasetConfig, elevation_deg: float, image_size: int | None = None) -> OrbitConfig:
    return OrbitConfig(
        n_views=cfg.n_views,
        elevation_deg=elevation_deg,
        radius=cfg.radius,
        image_size=image_size or cfg.image_size,
        fov_deg=cfg.fov_deg,
    )


def build_dataset(cfg: DatasetConfig, which: str = "train") -> list[OrbitSample]:
    """Render the train or heldout scene set at the HR resolution."""
    if which == "train":
        seeds = range(cfg.train_seed0, cfg.train_seed0 + cfg.train_scenes)
    elif which == "heldout":
        seeds = range(cfg.heldout_seed0, cfg.heldout_seed0 + cfg.heldout_scenes)
    else:
        raise ConfigError(f"unknown dataset split {which!r}")
    out = []
    for seed in seeds:
        scene = build_scene(seed)
        orbit = orbit_for(cfg, elevation_for_scene(seed))
        out.append(render_orbit_dataset(scene, orbit, scene_seed=seed))
    return out


def downscale_sample(sample: OrbitSample, factor: int = 2) -> np.ndarray:
    """Area-downscaled copy of a sample's images (stage-1 resolution)."""
    imgs = torch.as_tensor(sample.images)
    return F.avg_pool2d(imgs, factor).numpy()


def gt_mesh_for_scene(scene: Scene, grid: int) -> Mesh:
    """Reference mesh: marching cubes over the scene's analytic SDF."""
    axis = np.linspace(-0.6, 0.6, grid)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    vals = scene.sdf(pts).reshape(grid, grid, grid)
    colors = np.full((grid, grid, grid, 3), 0.5)
    fld = SDFField(
        values=torch.as_tensor(vals), colors=torch.as_tensor(colors),
        log_s=torch.tensor(0.0, dtype=torch.float64),
    )
    return marching_cubes(fld)


# ---------------------------------------------------------------------------
# workspace (checkpoints) and training entry points
# ---------------------------------------------------------------------------

class Workspace:
    """Checkpoint directory for one configuration."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.ckpt_dir = self.root / "checkpoints"

    def path(self, name: str) -> Path:
        return self.ckpt_dir / f"{name}.ckpt"

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise CheckpointError(
                f"missing {name} checkpoint: {p}; run the train-{name.replace('_', '-')} "
                "subcommand first"
            )
        return p

    def load_autoencoder(self) -> LatentAutoencoder:
        return load_autoencoder(self.require("autoencoder"))

    def load_depth(self) -> DepthRegressor:
        arrays_path = self.require("depth")
        from .checkpoint import load_arrays

        arrays = load_arrays(arrays_path)
        width = int(arrays["config/width"].reshape(-1)[0])
        model = DepthRegressor(width)
        state = model.state_dict()
        model.load_state_dict(
            {
                k: torch.as_tensor(arrays[f"param/{k}"], dtype=state[k].dtype).reshape(state[k].shape)
                for k in state
            }
        )
        model.eval()
        return model

    def save_depth(self, model: DepthRegressor) -> None:
        from .checkpoint import save_arrays

        arrays = {"config/width": np.asarray(float(model.width)), "format/version": np.asarray(1.0)}
        for k, v in model.state_dict().items():
            arrays[f"param/{k}"] = v.detach().cpu().numpy().astype(np.float64)
        save_arrays(self.path("depth"), arrays)

    def load_stage(self, name: str) -> StageDenoiser:
        return load_denoiser(self.require(name))


def depth_training_pairs(cfg: RunConfig, dataset: list[OrbitSample]) -> list[tuple[np.ndarray, np.ndarray]]:
    """(image, depth) pairs at the LR resolution, with degraded variants.

    Degraded copies (paired with the clean depth) make the regressor
    robust to the refiner's corrupted inputs.
    """
    pairs = []
    for sample in dataset:
        lr_imgs = downscale_sample(sample)
        lr_depths = F.avg_pool2d(torch.as_tensor(sample.depths)[:, None], 2)[:, 0].numpy()
        for k in range(lr_imgs.shape[0]):
            pairs.append((lr_imgs[k], lr_depths[k]))
        deg = degrade(sample.images, seed=derive_seed(cfg.run.seed, f"depthaug-{sample.scene_seed}"),
                      config=cfg.degrade)
        for k in range(deg.shape[0]):
            pairs.append((deg[k], lr_depths[k]))
    return pairs


def train_all(cfg: RunConfig, ws: Workspace, dataset: list[OrbitSample] | None = None,
              include_nodepth: bool = False) -> None:
    """Train every model the pipeline needs, in dependency order."""
    dataset = dataset or build_dataset(cfg.dataset, "train")
    frames = np.concatenate([s.images for s in dataset])
    lr_frames = np.concatenate([downscale_sample(s) for s in dataset])
    ae = train_autoencoder(np.concatenate([frames,
                                           _upscale(lr_frames, cfg.dataset.image_size)]),
                           cfg.autoencoder)
    save_autoencoder(ws.path("autoencoder"), ae)
    depth_model = train_depth_regressor(depth_training_pairs(cfg, dataset), cfg.depth)
    ws.save_depth(depth_model)
    lr_dataset = [_lr_sample(s) for s in dataset]
    s1, _ = train_stage1(lr_dataset, ae, cfg.stage1)
    save_denoiser(ws.path("stage1"), s1)
    s2, _ = train_stage2(dataset, ae, depth_model, cfg.stage2)
    save_denoiser(ws.path("stage2"), s2)
    if include_nodepth:
        nodepth = dataclasses.replace(cfg.stage2, use_depth=False)
        s2n, _ = train_stage2(dataset, ae, depth_model, nodepth)
        save_denoiser(ws.path("stage2_nodepth"), s2n)


def _upscale(frames: np.ndarray, size: int) -> np.ndarray:
    return F.interpolate(torch.as_tensor(frames), size=(size, size), mode="bilinear",
                         align_corners=False).numpy()


def _lr_sample(sample: OrbitSample) -> OrbitSample:
    lr = downscale_sample(sample)
    return OrbitSample(
        images=lr,
        depths=F.avg_pool2d(torch.as_tensor(sample.depths)[:, None], 2)[:, 0].numpy(),
        poses=sample.poses,
        elevation_deg=sample.elevation_deg,
        condition_index=sample.condition_index,
        scene_seed=sample.scene_seed,
        radius=sample.radius,
        fov_deg=sample.fov_deg,
    )


# ---------------------------------------------------------------------------
# reconstruction back-end and the full run
# ---------------------------------------------------------------------------

def reconstruct_from_views(
    images: np.ndarray,
    orbit: OrbitConfig,
    cfg: RunConfig,
    m_views: int | None = None,
    seed: int | None = None,
):
    """Gaussian fit, view augmentation, SDF optimization, mesh extraction.

    Returns (gaussians, interpolations, sdf field, mesh).
    """
    m = cfg.run.m_views if m_views is None else m_views
    seed = cfg.run.seed if seed is None else seed
    poses = orbital_trajectory(orbit)
    gset, _ = fit_gaussians(
        images, poses, orbit, dataclasses.replace(cfg.gsplat, seed=derive_seed(seed, "gsplat"))
    )
    interps = render_interpolations(gset, orbit, m) if m > 0 else []
    all_images = np.concatenate([np.asarray(images, dtype=np.float32)]
                                + ([np.stack([i for i, _ in interps])] if interps else []))
    all_poses = list(poses) + [p for _, p in interps]
    views = DenseViewSet(images=all_images, poses=all_poses, camera=orbit)
    field, _ = optimize_sdf(
        views, dataclasses.replace(cfg.sdf, seed=derive_seed(seed, "sdf"))
    )
    mesh = marching_cubes(field)
    return gset, interps, field, mesh


def _save_frames(frames: np.ndarray, directory: Path, prefix: str) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for k in range(frames.shape[0]):
        arr = np.round(np.clip(frames[k], 0, 1).transpose(1, 2, 0) * 255.0).astype(np.uint8)
        p = directory / f"{prefix}_{k}.png"
        Image.fromarray(arr, mode="RGB").save(p)
        out.append(p)
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_pipeline(
    cfg: RunConfig,
    input_image: np.ndarray,
    elevation_deg: float,
    ws: Workspace,
    run_dir: Path | str,
    gt_scene_seed: int | None = None,
) -> dict:
    """Full image-to-mesh run; writes all artifacts plus a manifest.

    The manifest lists (artifact class, relative path, sha256) for every
    written file; on a stage failure a partial manifest marking the
    completed stages is written before the error propagates.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    artifacts: list[tuple[str, Path]] = []
    completed: list[str] = []
    seed = cfg.run.seed
    size = cfg.dataset.image_size

    def finish(status: str) -> dict:
        lines = []
        for cls, p in sorted(artifacts, key=lambda t: str(t[1].relative_to(run_dir))):
            lines.append(f"{cls} {p.relative_to(run_dir)} {_sha256(p)}")
        lines.append(f"status {status}")
        (run_dir / "manifest.txt").write_text("\n".join(lines) + "\n")
        return {
            "dir": run_dir,
            "artifacts": {str(p.relative_to(run_dir)): cls for cls, p in artifacts},
            "status": status,
            "completed": completed,
        }

    try:
        ae = ws.load_autoencoder()
        depth_model = ws.load_depth()
        s1 = ws.load_stage("stage1")
        s2 = ws.load_stage("stage2")

        img = torch.as_tensor(np.asarray(input_image, dtype=np.float32))
        if img.ndim != 3 or img.shape[0] != 3:
            raise ConfigError(f"input image must be (3, H, W), got {tuple(img.shape)}")
        if tuple(img.shape[-2:]) != (size, size):
            img = F.interpolate(img[None], size=(size, size), mode="bilinear",
                                align_corners=False)[0]
        cond_hr = img.numpy()
        cond_lr = F.avg_pool2d(img[None], 2)[0].numpy()

        lr_frames = generate_orbit(
            cond_lr, elevation_deg, s1, ae,
            seed=derive_seed(seed, "stage1-sample"),
            steps=cfg.run.sample_steps, n_views=cfg.dataset.n_views,
        )
        for p in _save_frames(lr_frames, run_dir / "stage1", "frame"):
            artifacts.append(("stage1_frames", p))
        completed.append("stage1")

        refined = refine_orbit(
            lr_frames, cond_hr, elevation_deg, s2, ae, depth_model,
            seed=derive_seed(seed, "stage2-sample"), steps=cfg.run.sample_steps,
        )
        for p in _save_frames(refined, run_dir / "refined", "frame"):
            artifacts.append(("refined_frames", p))
        completed.append("stage2")

        orbit = orbit_for(cfg.dataset, elevation_deg)
        gset, interps, field, mesh = reconstruct_from_views(refined, orbit, cfg)
        gs_path = run_dir / "gaussians.bin"
        save_gaussians(gs_path, gset)
        artifacts.append(("gaussians", gs_path))
        completed.append("gsplat")

        if interps:
            for j, (img_j, _) in enumerate(interps):
                p = run_dir / "interp" / f"view_{j}.png"
                p.parent.mkdir(parents=True, exist_ok=True)
                arr = np.round(np.clip(img_j, 0, 1).transpose(1, 2, 0) * 255.0).astype(np.uint8)
                Image.fromarray(arr, mode="RGB").save(p)
                artifacts.append(("interpolations", p))
            completed.append("interpolation")

        sdf_path = run_dir / "sdf.ckpt"
        save_sdf(sdf_path, field)
        artifacts.append(("sdf", sdf_path))
        completed.append("sdf")

        mesh_path = run_dir / "mesh.obj"
        export_mesh(mesh, mesh_path)
        artifacts.append(("mesh", mesh_path))
        completed.append("mesh")

        if gt_scene_seed is not None:
            scene = build_scene(gt_scene_seed)
            gt = render_orbit_dataset(scene, orbit, scene_seed=gt_scene_seed)
            ref_mesh = gt_mesh_for_scene(scene, cfg.sdf.grid)
            row = {
                "scene_seed": gt_scene_seed,
                "psnr": float(np.mean([psnr(refined[k], gt.images[k])
                                       for k in range(gt.images.shape[0])])),
                "ssim": float(np.mean([ssim(refined[k], gt.images[k])
                                       for k in range(gt.images.shape[0])])),
                "chamfer": chamfer(mesh, ref_mesh) if len(mesh.triangles) else float("nan"),
                "iou": volume_iou(mesh, ref_mesh, grid=64) if len(mesh.triangles) else 0.0,
            }
            csv_path = run_dir / "metrics.csv"
            write_metrics_csv(csv_path, [row])
            artifacts.append(("metrics", csv_path))
            completed.append("metrics")
    except Exception:
        finish("partial failed_after=" + (completed[-1] if completed else "none"))
        raise
    return finish("complete")


def evaluate_run(run_dir: Path | str, cfg: RunConfig, scene_seed: int) -> Path:
    """Recompute the metrics CSV for an existing run directory."""
    run_dir = Path(run_dir)
    refined_dir = run_dir / "refined"
    frames = []
    k = 0
    while (refined_dir / f"frame_{k}.png").exists():
        arr = np.asarray(Image.open(refined_dir / f"frame_{k}.png"), dtype=np.float32) / 255.0
        frames.append(arr.transpose(2, 0, 1))
        k += 1
    if not frames:
        raise ConfigError(f"no refined frames found under {run_dir}")
    refined = np.stack(frames)
    scene = build_scene(scene_seed)
    orbit = orbit_for(cfg.dataset, elevation_for_scene(scene_seed))
    gt = render_orbit_dataset(scene, orbit, scene_seed=scene_seed)
    from .sdfrecon import import_mesh

    row = {
        "scene_seed": scene_seed,
        "psnr": float(np.mean([psnr(refined[j], gt.images[j]) for j in range(len(frames))])),
        "ssim": float(np.mean([ssim(refined[j], gt.images[j]) for j in range(len(frames))])),
        "chamfer": None,
        "iou": None,
    }
    mesh_path = run_dir / "mesh.obj"
    if mesh_path.exists():
        mesh = import_mesh(mesh_path)
        ref_mesh = gt_mesh_for_scene(scene, cfg.sdf.grid)
        row["chamfer"] = chamfer(mesh, ref_mesh)
        row["iou"] = volume_iou(mesh, ref_mesh, grid=64)
    out = run_dir / "metrics.csv"
    write_metrics_csv(out, [row])
    return out


def ablate_m_sweep(cfg: RunConfig, m_values: list[int], scene_seeds: list[int]) -> list[dict]:
    """Reconstruction-only interpolation sweep over ground-truth views.

    Each scene's Gaussian fit is shared across all M values (only the SDF
    stage sees different view sets); results are mean Chamfer and Volume
    IoU against the analytic reference mesh.
    """
    per_m: dict[int, dict[str, list[float]]] = {m: {"chamfer": [], "iou": []} for m in m_values}
    for seed in scene_seeds:
        scene = build_scene(seed)
        orbit = orbit_for(cfg.dataset, elevation_for_scene(seed))
        sample = render_orbit_dataset(scene, orbit, scene_seed=seed)
        poses = orbital_trajectory(orbit)
        ref_mesh = gt_mesh_for_scene(scene, cfg.sdf.grid)
        gset = None
        if any(m > 0 for m in m_values):
            gset, _ = fit_gaussians(
                sample.images, poses, orbit,
                dataclasses.replace(cfg.gsplat, seed=derive_seed(cfg.run.seed, f"gs-{seed}")),
            )
        for m in m_values:
            if m > 0:
                interps = render_interpolations(gset, orbit, m)
                images = np.concatenate(
                    [sample.images, np.stack([i for i, _ in interps])]
                )
                all_poses = list(poses) + [p for _, p in interps]
            else:
                images = sample.images
                all_poses = list(poses)
            views = DenseViewSet(images=images, poses=all_poses, camera=orbit)
            field, _ = optimize_sdf(
                views,
                dataclasses.replace(cfg.sdf, seed=derive_seed(cfg.run.seed, f"sdf-{seed}-{m}")),
            )
            mesh = marching_cubes(field)
            per_m[m]["chamfer"].append(chamfer(mesh, ref_mesh))
            per_m[m]["iou"].append(volume_iou(mesh, ref_mesh, grid=64))
    return [
        {"m": m, "chamfer": float(np.mean(per_m[m]["chamfer"])),
         "iou": float(np.mean(per_m[m]["iou"]))}
        for m in m_values
    ]


def ablate_refinement(
    cfg: RunConfig,
    ws: Workspace,
    scene_seeds: list[int],
    no_depth: bool = False,
    no_refine: bool = False,
) -> dict:
    """Refinement-quality ablation on held-out scenes.

    Degrades each scene's GT orbit, refines it with the selected model
    variant (or skips refinement), and reports mean PSNR against the HR
    ground truth.
    """
    ae = ws.load_autoencoder()
    depth_model = ws.load_depth()
    model = None
    if not no_refine:
        model = ws.load_stage("stage2_nodepth" if no_depth else "stage2")
    vals = []
    for seed in scene_seeds:
        scene = build_scene(seed)
        orbit = orbit_for(cfg.dataset, elevation_for_scene(seed))
        sample = render_orbit_dataset(scene, orbit, scene_seed=seed)
        lr = degrade(sample.images, seed=derive_seed(cfg.run.seed, f"ablate-{seed}"),
                     config=cfg.degrade)
        if no_refine:
            up = _upscale(lr, cfg.dataset.image_size)
            out = up
        else:
            out = refine_orbit(
                lr, sample.images[sample.condition_index], sample.elevation_deg,
                model, ae, depth_model,
                seed=derive_seed(cfg.run.seed, f"ablate-sample-{seed}"),
                steps=cfg.run.sample_steps,
            )
        vals.append(np.mean([psnr(out[k], sample.images[k])
                             for k in range(sample.images.shape[0])]))
    setting = "no_refine" if no_refine else ("no_depth" if no_depth else "full")
    return {"setting": setting, "psnr": float(np.mean(vals))}
