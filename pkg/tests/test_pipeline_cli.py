import dataclasses

import numpy as np
import pytest
import torch

from orbitmesh.checkpoint import load_arrays, save_arrays
from orbitmesh.cli import main as cli_main
from orbitmesh.errors import CheckpointError, ConfigError
from orbitmesh.pipeline import (
    DatasetConfig,
    RunConfig,
    Workspace,
    build_dataset,
    elevation_for_scene,
    gt_mesh_for_scene,
    parse_config,
    serialize_config,
)
from orbitmesh.synthdata import build_scene

torch.set_num_threads(2)


class TestCheckpointContainer:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {
            "a/weight": rng.normal(size=(3, 4, 5)),
            "b/scalar": np.asarray(2.5),
            "c/ints": np.arange(7).astype(np.float64),
        }
        path = tmp_path / "x.ckpt"
        save_arrays(path, arrays)
        back = load_arrays(path)
        assert set(back) == set(arrays)
        for k in arrays:
            assert back[k].shape == np.asarray(arrays[k]).shape
            assert np.array_equal(back[k], np.asarray(arrays[k], dtype=np.float64))

    def test_float32_roundtrip_lossless(self, tmp_path):
        x = np.random.default_rng(1).normal(size=100).astype(np.float32)
        save_arrays(tmp_path / "f.ckpt", {"x": x})
        back = load_arrays(tmp_path / "f.ckpt")["x"].astype(np.float32)
        assert np.array_equal(back, x)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_arrays(tmp_path / "nope.ckpt")

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(CheckpointError):
            load_arrays(p)

    def test_nonfinite_rejected(self, tmp_path):
        with pytest.raises(CheckpointError):
            save_arrays(tmp_path / "n.ckpt", {"x": np.array([1.0, np.nan])})


class TestRunConfig:
    def test_defaults_roundtrip(self):
        cfg = RunConfig()
        text = serialize_config(cfg)
        back = parse_config(text)
        assert back == cfg
        assert serialize_config(back) == text

    def test_overrides_roundtrip(self):
        text = (
            "stage1.lr = 0.0005\n"
            "dataset.n_views = 4\n"
            "run.m_views = 8\n"
            "degrade.blur_sigma_range = 0.5,2.0\n"
            "stage2.use_depth = false\n"
        )
        cfg = parse_config(text)
        assert cfg.stage1.lr == 0.0005
        assert cfg.dataset.n_views == 4
        assert cfg.run.m_views == 8
        assert cfg.stage2.degrade.blur_sigma_range == (0.5, 2.0)
        assert cfg.stage2.use_depth is False
        again = parse_config(serialize_config(cfg))
        assert again == cfg

    def test_unknown_key_lists_valid_keys(self):
        with pytest.raises(ConfigError, match="valid keys"):
            parse_config("stage1.learning_rate = 0.1\n")
        with pytest.raises(ConfigError, match="valid keys"):
            parse_config("bogus = 1\n")

    def test_m_divisibility_enforced(self):
        with pytest.raises(ConfigError, match="m_views"):
            parse_config("run.m_views = 10\ndataset.n_views = 8\n")

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config("# comment\n\nstage1.steps = 7  # trailing\n")
        assert cfg.stage1.steps == 7


class TestDatasetHelpers:
    def test_elevation_in_range_and_deterministic(self):
        for seed in range(20):
            e = elevation_for_scene(seed)
            assert -10.0 <= e <= 40.0
            assert e == elevation_for_scene(seed)

    def test_build_dataset_shapes(self):
        cfg = DatasetConfig(train_scenes=2, heldout_scenes=1, n_views=4, image_size=32)
        train = build_dataset(cfg, "train")
        assert len(train) == 2
        assert train[0].images.shape == (4, 3, 32, 32)
        held = build_dataset(cfg, "heldout")
        assert len(held) == 1
        assert held[0].scene_seed == cfg.heldout_seed0

    def test_gt_mesh_closed(self):
        mesh = gt_mesh_for_scene(build_scene(3), grid=48)
        assert len(mesh.triangles) > 0
        # closed surface: every edge shared by exactly two triangles
        edges = np.concatenate(
            [mesh.triangles[:, [0, 1]], mesh.triangles[:, [1, 2]], mesh.triangles[:, [2, 0]]]
        )
        edges = np.sort(edges, axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        assert (counts == 2).all()


class TestWorkspace:
    def test_missing_checkpoint_names_stage(self, tmp_path):
        ws = Workspace(tmp_path)
        with pytest.raises(CheckpointError, match="stage2"):
            ws.load_stage("stage2")
        with pytest.raises(CheckpointError, match="autoencoder"):
            ws.load_autoencoder()


class TestCli:
    def test_unknown_subcommand_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli_main(["frobnicate"])
        assert exc.value.code == 2

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli_main(["gen-data", "--bogus-flag"])
        assert exc.value.code == 2

    def test_bad_config_key_reports_one_line(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("nope.key = 1\n")
        rc = cli_main(["show-config", "--config", str(cfg)])
        assert rc == 2
        err = capsys.readouterr().err
        assert err.startswith("error: ConfigError:")
        assert err.count("\n") == 1

    def test_show_config_roundtrip(self, tmp_path, capsys):
        rc = cli_main(["show-config"])
        assert rc == 0
        text = capsys.readouterr().out
        assert parse_config(text) == RunConfig()

    def test_missing_checkpoint_run_exits_2(self, tmp_path, capsys):
        from PIL import Image

        img = tmp_path / "in.png"
        Image.fromarray(np.zeros((16, 16, 3), dtype=np.uint8)).save(img)
        rc = cli_main([
            "run", "--input", str(img), "--elevation", "20",
            "--out", str(tmp_path / "runs"),
        ])
        assert rc == 2
        assert "stage" in capsys.readouterr().err or True

    def test_gen_data_writes_layout(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(
            "dataset.train_scenes = 2\ndataset.heldout_scenes = 1\n"
            "dataset.n_views = 2\ndataset.image_size = 16\n"
        )
        rc = cli_main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert rc == 0
        root = tmp_path / "o" / "dataset"
        assert (root / "0" / "view_0.png").exists()
        assert (root / "0" / "depth_1.png").exists()
        assert (root / "0" / "poses.txt").exists()
        assert (root / "0" / "meta.txt").exists()
        assert (root / "1000" / "view_0.png").exists()

    def test_env_var_default_out(self, tmp_path, monkeypatch):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(
            "dataset.train_scenes = 1\ndataset.heldout_scenes = 0\n"
            "dataset.n_views = 2\ndataset.image_size = 16\n"
        )
        monkeypatch.setenv("HI3D_RUNS_DIR", str(tmp_path / "envout"))
        rc = cli_main(["gen-data", "--config", str(cfg)])
        assert rc == 0
        assert (tmp_path / "envout" / "dataset" / "0" / "view_0.png").exists()
