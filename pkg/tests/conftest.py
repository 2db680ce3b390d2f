"""Session fixtures: the acceptance-scale datasets and trained models.

Everything trains once per pytest session with fixed seeds, so all
trained-model tests (module examples and the acceptance suite) share one
deterministic set of checkpoints. Budgets are sized for a 2-core CPU box.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest
import torch
import torch.nn.functional as F

torch.set_num_threads(2)

from orbitmesh.pipeline import (
    DatasetConfig,
    RunConfig,
    RunLevelConfig,
    Workspace,
    build_dataset,
    depth_training_pairs,
    downscale_sample,
    _lr_sample,
    _upscale,
)
from orbitmesh.gsplat import FitConfig
from orbitmesh.sdfrecon import SdfConfig
from orbitmesh.seq_denoiser import (
    AutoencoderTrainConfig,
    save_autoencoder,
    save_denoiser,
    train_autoencoder,
)
from orbitmesh.stage1 import Stage1Config, train_stage1
from orbitmesh.stage2 import DepthConfig, Stage2Config, train_depth_regressor, train_stage2


def acceptance_config() -> RunConfig:
    """Desk-scale acceptance configuration (HR 64px, N=8 views)."""
    return RunConfig(
        dataset=DatasetConfig(
            train_scenes=24, heldout_scenes=16, n_views=8, image_size=64
        ),
        autoencoder=AutoencoderTrainConfig(steps=3000, seed=0),
        depth=DepthConfig(steps=800, seed=0),
        stage1=Stage1Config(steps=1500, seed=0),
        stage2=Stage2Config(steps=2000, seed=0),
        # reconstruction budgets for the end-to-end pipeline runs
        gsplat=FitConfig(n_primitives=1024, iterations=400, prune_every=200,
                         prune_opacity=0.01),
        sdf=SdfConfig(grid=48, iterations=500, ray_batch=768, n_samples=40),
        run=RunLevelConfig(seed=0, m_views=16, sample_steps=50),
    )


@pytest.fixture(scope="session")
def accept_cfg() -> RunConfig:
    return acceptance_config()


@pytest.fixture(scope="session")
def train_set(accept_cfg):
    return build_dataset(accept_cfg.dataset, "train")


@pytest.fixture(scope="session")
def heldout_set(accept_cfg):
    return build_dataset(accept_cfg.dataset, "heldout")


@pytest.fixture(scope="session")
def autoencoder(accept_cfg, train_set):
    frames = np.concatenate([s.images for s in train_set])
    lr = np.concatenate([downscale_sample(s) for s in train_set])
    both = np.concatenate([frames, _upscale(lr, accept_cfg.dataset.image_size)])
    return train_autoencoder(both, accept_cfg.autoencoder)


@pytest.fixture(scope="session")
def depth_model(accept_cfg, train_set):
    return train_depth_regressor(
        depth_training_pairs(accept_cfg, train_set), accept_cfg.depth
    )


@pytest.fixture(scope="session")
def stage1_bundle(accept_cfg, train_set, autoencoder):
    lr_train = [_lr_sample(s) for s in train_set]
    model, curve = train_stage1(lr_train, autoencoder, accept_cfg.stage1)
    return model, curve


@pytest.fixture(scope="session")
def stage2_bundle(accept_cfg, train_set, autoencoder, depth_model):
    model, curve = train_stage2(train_set, autoencoder, depth_model, accept_cfg.stage2)
    return model, curve


@pytest.fixture(scope="session")
def stage2_nodepth_bundle(accept_cfg, train_set, autoencoder, depth_model):
    cfg = dataclasses.replace(accept_cfg.stage2, use_depth=False)
    model, curve = train_stage2(train_set, autoencoder, depth_model, cfg)
    return model, curve


@pytest.fixture(scope="session")
def workspace(tmp_path_factory, autoencoder, depth_model, stage1_bundle, stage2_bundle,
              stage2_nodepth_bundle) -> Workspace:
    """A checkpoint directory holding every trained model."""
    root = tmp_path_factory.mktemp("workspace")
    ws = Workspace(root)
    save_autoencoder(ws.path("autoencoder"), autoencoder)
    ws.save_depth(depth_model)
    save_denoiser(ws.path("stage1"), stage1_bundle[0])
    save_denoiser(ws.path("stage2"), stage2_bundle[0])
    save_denoiser(ws.path("stage2_nodepth"), stage2_nodepth_bundle[0])
    return ws
