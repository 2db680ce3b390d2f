"""Stage-1 training and inference: one condition image + elevation in, an
N-view orbital image sequence out, at base resolution.

Training regresses the added noise over encoded orbit sequences with the
reference-latent / semantic-token / elevation conditioning. Inference
weights are an exponential moving average of the training weights.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .diffcore import LatentSequence, Schedule, make_schedule, sample_loop, training_loss
from .errors import ConditionError, ConfigError, NumericError
from .seeding import derive_seed, torch_gen
from .seq_denoiser import (
    ConditionSet,
    DenoiserConfig,
    LatentAutoencoder,
    StageDenoiser,
    denoise,
    encode_latent,
    encode_sequence,
)
from .synthdata import OrbitSample

__all__ = ["Stage1Config", "train_stage1", "generate_orbit", "smooth_curve"]


@dataclass(frozen=True)
class Stage1Config:
    steps: int = 2000
    lr: float = 1e-4
    batch_size: int = 1
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    schedule_T: int = 1000
    seed: int = 0
    width: int = 64
    width_mid: int = 128
    log_every: int = 25

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(stage="stage1", width=self.width, width_mid=self.width_mid)


class _Ema:
    """Bias-warmed exponential moving average of module parameters."""

    def __init__(self, module: torch.nn.Module, decay: float):
        self.decay = decay
        self.count = 0
        self.shadow = {
            k: v.detach().clone() for k, v in module.state_dict().items()
        }

    def update(self, module: torch.nn.Module):
        self.count += 1
        d = min(self.decay, (1 + self.count) / (10 + self.count))
        with torch.no_grad():
            for k, v in module.state_dict().items():
                if v.dtype.is_floating_point:
                    self.shadow[k].mul_(d).add_(v.detach(), alpha=1 - d)
                else:
                    self.shadow[k].copy_(v)

    def module_copy(self, module: torch.nn.Module) -> torch.nn.Module:
        out = copy.deepcopy(module)
        out.load_state_dict(self.shadow)
        out.eval()
        return out


def smooth_curve(curve: list[tuple[int, float]], window: int = 50) -> tuple[float, float]:
    """(initial, final) mean loss over the first/last `window` entries."""
    vals = [v for _, v in curve]
    w = min(window, max(1, len(vals) // 4))
    return float(np.mean(vals[:w])), float(np.mean(vals[-w:]))


def _prepare_samples(dataset: list[OrbitSample], ae: LatentAutoencoder):
    prepared = []
    for sample in dataset:
        images = torch.as_tensor(sample.images, dtype=torch.float32)
        cond_img = images[sample.condition_index]
        prepared.append(
            {
                "z0": encode_sequence(ae, images),
                "ref": encode_latent(ae, cond_img),
                "cond_img": cond_img,
                "elevation": float(sample.elevation_deg),
            }
        )
    return prepared


def train_stage1(
    dataset: list[OrbitSample],
    ae: LatentAutoencoder,
    config: Stage1Config = Stage1Config(),
) -> tuple[StageDenoiser, list[tuple[int, float]]]:
    """Train the stage-1 denoiser; returns (EMA model, loss curve).

    Deterministic in (dataset, config): model init, batch order, timestep
    and noise draws all derive from config.seed.
    """
    if len(dataset) == 0:
        raise ConfigError("stage-1 training dataset is empty")
    torch.manual_seed(derive_seed(config.seed, "stage1-init"))
    model = StageDenoiser(config.denoiser_config())
    schedule = make_schedule(config.schedule_T)
    prepared = _prepare_samples(dataset, ae)

    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    ema = _Ema(model, config.ema_decay)
    picker = torch_gen(config.seed, "stage1-batch")
    curve: list[tuple[int, float]] = []

    model.train()
    for step in range(config.steps):
        idx = torch.randint(0, len(prepared), (config.batch_size,), generator=picker)
        batch = []
        for i in idx.tolist():
            item = prepared[i]
            cond = ConditionSet(
                reference_latent=item["ref"],
                semantic_tokens=model.semantic(item["cond_img"]),
                elevation_deg=item["elevation"],
            )
            batch.append((item["z0"], cond))
        opt.zero_grad()
        loss = training_loss(
            lambda z_t, t, c: denoise(model, z_t, t, c),
            batch,
            schedule,
            seed=derive_seed(config.seed, f"stage1-step{step}"),
        )
        loss.backward()
        if not math.isfinite(loss.item()):
            raise NumericError(f"stage-1 loss non-finite at step {step}")
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        ema.update(model)
        curve.append((step, loss.item()))
    return ema.module_copy(model), curve


def generate_orbit(
    image,
    elevation_deg: float,
    model: StageDenoiser,
    ae: LatentAutoencoder,
    seed: int = 0,
    steps: int = 50,
    n_views: int = 16,
    schedule: Schedule | None = None,
) -> np.ndarray:
    """Sample an (N, 3, H, W) orbit sequence conditioned on one image.

    Frame 0 corresponds to the condition viewpoint. Output pixels are in
    [0, 1] after decode clamping.
    """
    if model.stage != "stage1":
        raise ConditionError(f"generate_orbit needs stage1 parameters, got {model.stage}")
    schedule = schedule or make_schedule(1000)
    img = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    ref = encode_latent(ae, img)
    with torch.no_grad():
        tokens = model.semantic(img)
        cond = ConditionSet(
            reference_latent=ref, semantic_tokens=tokens, elevation_deg=float(elevation_deg)
        )
        shape = (n_views,) + tuple(ref.shape)
        z = sample_loop(
            lambda z_t, t, c: denoise(model, z_t, t, c),
            cond,
            schedule,
            steps=steps,
            seed=seed,
            shape=shape,
        )
        frames = ae.decode_clamped(z.data)
    return frames.numpy()
