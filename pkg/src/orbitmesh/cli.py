"""Command-line surface for dataset generation, training, reconstruction,
the full image-to-mesh run, evaluation, and ablation sweeps.

Every subcommand reads the flat key-value run config, writes into the
output directory (HI3D_RUNS_DIR or --out), and exits nonzero with a one-
line machine-parseable reason on error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import pipeline
from .errors import OrbitMeshError
from .pipeline import (
    RunConfig,
    Workspace,
    ablate_m_sweep,
    ablate_refinement,
    build_dataset,
    elevation_for_scene,
    evaluate_run,
    orbit_for,
    parse_config,
    reconstruct_from_views,
    run_pipeline,
    serialize_config,
)
from .seq_denoiser import save_autoencoder, save_denoiser, train_autoencoder
from .stage1 import train_stage1
from .stage2 import train_depth_regressor, train_stage2
from .synthdata import build_scene, render_orbit_dataset, save_orbit_sample

DEFAULT_RUNS_DIR = "runs"


def _load_config(path: str | None, seed: int | None) -> RunConfig:
    cfg = parse_config(Path(path).read_text()) if path else RunConfig()
    if seed is not None:
        cfg = dataclasses.replace(
            cfg,
            run=dataclasses.replace(cfg.run, seed=seed),
            stage1=dataclasses.replace(cfg.stage1, seed=seed),
            stage2=dataclasses.replace(cfg.stage2, seed=seed),
            autoencoder=dataclasses.replace(cfg.autoencoder, seed=seed),
            depth=dataclasses.replace(cfg.depth, seed=seed),
        )
    return cfg


def _out_dir(args) -> Path:
    root = args.out or os.environ.get("HI3D_RUNS_DIR") or DEFAULT_RUNS_DIR
    return Path(root)


def _load_image(path: str) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config, args.seed)
    out = _out_dir(args) / "dataset"
    for which in ("train", "heldout"):
        for sample in build_dataset(cfg.dataset, which):
            save_orbit_sample(out, sample.scene_seed, sample)
    n = cfg.dataset.train_scenes + cfg.dataset.heldout_scenes
    print(f"wrote {n} scene directories under {out}")
    return 0


def cmd_train_autoencoder(args) -> int:
    cfg = _load_config(args.config, args.seed)
    ws = Workspace(_out_dir(args))
    dataset = build_dataset(cfg.dataset, "train")
    frames = np.concatenate([s.images for s in dataset])
    lr = np.concatenate([pipeline.downscale_sample(s) for s in dataset])
    ae = train_autoencoder(
        np.concatenate([frames, pipeline._upscale(lr, cfg.dataset.image_size)]),
        cfg.autoencoder,
    )
    save_autoencoder(ws.path("autoencoder"), ae)
    print(f"wrote {ws.path('autoencoder')}")
    return 0


def cmd_train_depth(args) -> int:
    cfg = _load_config(args.config, args.seed)
    ws = Workspace(_out_dir(args))
    dataset = build_dataset(cfg.dataset, "train")
    model = train_depth_regressor(pipeline.depth_training_pairs(cfg, dataset), cfg.depth)
    ws.save_depth(model)
    print(f"wrote {ws.path('depth')}")
    return 0


def cmd_train_stage1(args) -> int:
    cfg = _load_config(args.config, args.seed)
    ws = Workspace(_out_dir(args))
    ae = ws.load_autoencoder()
    dataset = [pipeline._lr_sample(s) for s in build_dataset(cfg.dataset, "train")]
    model, curve = train_stage1(dataset, ae, cfg.stage1)
    save_denoiser(ws.path("stage1"), model)
    _write_curve(ws.root / "stage1_loss.csv", curve)
    print(f"wrote {ws.path('stage1')}")
    return 0


def cmd_train_stage2(args) -> int:
    cfg = _load_config(args.config, args.seed)
    ws = Workspace(_out_dir(args))
    ae = ws.load_autoencoder()
    depth_model = ws.load_depth()
    dataset = build_dataset(cfg.dataset, "train")
    stage_cfg = cfg.stage2
    name = "stage2"
    if args.no_depth:
        stage_cfg = dataclasses.replace(stage_cfg, use_depth=False)
        name = "stage2_nodepth"
    model, curve = train_stage2(dataset, ae, depth_model, stage_cfg)
    save_denoiser(ws.path(name), model)
    _write_curve(ws.root / f"{name}_loss.csv", curve)
    print(f"wrote {ws.path(name)}")
    return 0


def _write_curve(path: Path, curve) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["step,loss"] + [f"{s},{v:.8f}" for s, v in curve]
    path.write_text("\n".join(lines) + "\n")


def cmd_reconstruct(args) -> int:
    cfg = _load_config(args.config, args.seed)
    out = _out_dir(args)
    scene_seed = args.scene_seed
    scene = build_scene(scene_seed)
    orbit = orbit_for(cfg.dataset, elevation_for_scene(scene_seed))
    sample = render_orbit_dataset(scene, orbit, scene_seed=scene_seed)
    run_dir = out / f"recon-{scene_seed}-{time.strftime('%Y%m%d-%H%M%S')}"
    run_dir.mkdir(parents=True, exist_ok=True)
    gset, interps, fld, mesh = reconstruct_from_views(sample.images, orbit, cfg)
    from .gsplat import save_gaussians
    from .sdfrecon import export_mesh, save_sdf

    save_gaussians(run_dir / "gaussians.bin", gset)
    save_sdf(run_dir / "sdf.ckpt", fld)
    export_mesh(mesh, run_dir / "mesh.obj")
    print(f"reconstructed scene {scene_seed} into {run_dir}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args.config, args.seed)
    out = _out_dir(args)
    ws = Workspace(out)
    image = _load_image(args.input)
    run_dir = out / f"run-{time.strftime('%Y%m%d-%H%M%S')}-s{cfg.run.seed}"
    result = run_pipeline(cfg, image, args.elevation, ws, run_dir,
                          gt_scene_seed=args.scene_seed)
    print(f"run complete: {result['dir']} ({len(result['artifacts'])} artifacts)")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config, args.seed)
    out = evaluate_run(args.run, cfg, args.scene_seed)
    print(f"wrote {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config, args.seed)
    out = _out_dir(args)
    seeds = list(range(cfg.dataset.heldout_seed0,
                       cfg.dataset.heldout_seed0 + cfg.dataset.heldout_scenes))
    lines = []
    if args.m_sweep:
        ms = [int(x) for x in args.m_sweep.split(",")]
        rows = ablate_m_sweep(cfg, ms, seeds)
        lines.append("setting,chamfer,iou")
        for row in rows:
            lines.append(f"M={row['m']},{row['chamfer']:.6f},{row['iou']:.6f}")
    else:
        ws = Workspace(out)
        lines.append("setting,psnr")
        full = ablate_refinement(cfg, ws, seeds)
        lines.append(f"{full['setting']},{full['psnr']:.4f}")
        if args.no_refine:
            row = ablate_refinement(cfg, ws, seeds, no_refine=True)
            lines.append(f"{row['setting']},{row['psnr']:.4f}")
        if args.no_depth:
            row = ablate_refinement(cfg, ws, seeds, no_depth=True)
            lines.append(f"{row['setting']},{row['psnr']:.4f}")
    table = "\n".join(lines) + "\n"
    (out / "ablation.csv").write_text(table)
    sys.stdout.write(table)
    return 0


def cmd_show_config(args) -> int:
    cfg = _load_config(args.config, args.seed)
    sys.stdout.write(serialize_config(cfg))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="orbitmesh",
        description="Desk-scale image-to-3D: orbital diffusion, splatting, SDF meshing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run config file (flat key = value)")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--out", help="output root (default $HI3D_RUNS_DIR or ./runs)")

    p = sub.add_parser("gen-data", help="render the synthetic dataset to disk")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-autoencoder", help="pre-train the latent autoencoder")
    common(p)
    p.set_defaults(fn=cmd_train_autoencoder)

    p = sub.add_parser("train-depth", help="train the depth regressor")
    common(p)
    p.set_defaults(fn=cmd_train_depth)

    p = sub.add_parser("train-stage1", help="train the orbital sequence generator")
    common(p)
    p.set_defaults(fn=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="train the video-to-video refiner")
    common(p)
    p.add_argument("--no-depth", action="store_true",
                   help="train the depth-ablated variant (stage2_nodepth)")
    p.set_defaults(fn=cmd_train_stage2)

    p = sub.add_parser("reconstruct", help="reconstruction-only from ground-truth views")
    common(p)
    p.add_argument("--scene-seed", type=int, required=True)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("run", help="full image-to-mesh pipeline")
    common(p)
    p.add_argument("--input", required=True, help="condition image (PNG)")
    p.add_argument("--elevation", type=float, required=True, help="orbit elevation in degrees")
    p.add_argument("--scene-seed", type=int, default=None,
                   help="ground-truth scene seed for metrics (optional)")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("evaluate", help="recompute metrics for a run directory")
    common(p)
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--scene-seed", type=int, required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="trend ablations (M sweep, depth, refinement)")
    common(p)
    p.add_argument("--m-sweep", help="comma-separated interpolation counts, e.g. 0,16,32")
    p.add_argument("--no-depth", action="store_true")
    p.add_argument("--no-refine", action="store_true")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("show-config", help="print the effective configuration")
    common(p)
    p.set_defaults(fn=cmd_show_config)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except OrbitMeshError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: FileNotFoundError: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
