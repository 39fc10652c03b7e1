"""Command-line interface tests: pipeline smoke, determinism, error lines."""

import json

import numpy as np
import pytest

from kpfield.cli import main
from kpfield.io import load_cloud, load_keypoints, load_slice_csv
from kpfield.metrics import read_metric_csv

TINY_OVERRIDES = [
    "model.c1=8",
    "model.c2=8",
    "model.ce=8",
    "model.volume_resolution=8,8,8",
    "model.encoder_variant=lite",
    "model.decoder_width=16",
    "model.decoder_blocks=1",
    "train.n_grids=4",
    "train.grid_resolution=4,4,4",
    "train.grid_scale=6",
    "train.batch_size=1",
    "train.epochs_first=1",
    "train.epochs_total=2",
    "train.epoch_steps=2",
    "train.n_pos=32",
    "train.n_neg=32",
    "extract.infer_grid_resolution=12,12,12",
    "extract.n_steps=2",
    "extract.saliency_threshold=0.2",
    "extract.occupancy_threshold=0.5",
    "extract.max_keypoints=16",
]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny synth -> train run shared by the checkpoint-using tests."""
    root = tmp_path_factory.mktemp("pipeline")
    cloud = root / "box.ply"
    assert main(["synth", "--kind", "box", "--n", "256", "--seed", "3",
                 "--out", str(cloud)]) == 0
    run_dir = root / "run"
    code = main(["train", "--preset", "lite-overfit", "--cloud", str(cloud),
                 "--out", str(run_dir), "--seed", "0", *TINY_OVERRIDES])
    assert code == 0
    ckpt = run_dir / "epoch_0001.ckpt"
    assert ckpt.exists()
    assert (run_dir / "epoch_0000.ckpt").exists()
    assert (run_dir / "history.json").exists()
    assert (run_dir / "config.ini").exists()
    return {"root": root, "cloud": cloud, "ckpt": ckpt}


class TestSynth:
    def test_writes_cloud_and_corners(self, tmp_path):
        out = tmp_path / "shape.ply"
        corners = tmp_path / "corners.txt"
        code = main(["synth", "--kind", "box", "--n", "128", "--seed", "1",
                     "--out", str(out), "--corners-out", str(corners)])
        assert code == 0
        assert len(load_cloud(out)) == 128
        corner_coords, scores = load_keypoints(corners)
        assert corner_coords.shape == (8, 3)
        assert np.all(scores == 1.0)

    def test_seeded_determinism(self, tmp_path):
        a = tmp_path / "a.ply"
        b = tmp_path / "b.ply"
        for out in (a, b):
            assert main(["synth", "--kind", "sphere", "--n", "64", "--seed", "9",
                         "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_shape_parameter_flag(self, tmp_path):
        out = tmp_path / "s.xyz"
        assert main(["synth", "--kind", "sphere", "--n", "32", "--seed", "0",
                     "--out", str(out), "--param", "radius=0.2"]) == 0
        pts = load_cloud(out)
        assert np.allclose(np.linalg.norm(pts, axis=1), 0.2, atol=1e-9)

    def test_bad_kind_exits_two(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--kind", "pyramid", "--out", "x.ply"])
        assert exc.value.code == 2
        assert "pyramid" in capsys.readouterr().err

    def test_bad_param_is_single_error_line(self, tmp_path, capsys):
        code = main(["synth", "--kind", "box", "--out", str(tmp_path / "x.ply"),
                     "--param", "radius"])
        assert code == 1
        err = capsys.readouterr().err.strip()
        assert err.startswith("error: ")
        assert "\n" not in err


class TestTrain:
    def test_requires_config_or_preset(self, tmp_path, capsys):
        code = main(["train", "--cloud", "x.ply", "--out", str(tmp_path)])
        assert code == 1
        assert "error: " in capsys.readouterr().err

    def test_requires_cloud(self, tmp_path, capsys):
        code = main(["train", "--preset", "lite-overfit", "--out", str(tmp_path)])
        assert code == 1
        assert "--cloud" in capsys.readouterr().err

    def test_rejects_config_and_preset_together(self, tmp_path, capsys):
        code = main(["train", "--config", "c.ini", "--preset", "lite-overfit",
                     "--cloud", "x.ply", "--out", str(tmp_path)])
        assert code == 1
        assert "either" in capsys.readouterr().err

    def test_logs_resolved_config(self, pipeline, tmp_path, capsys):
        cloud = pipeline["cloud"]
        run_dir = tmp_path / "run"
        code = main(["train", "--preset", "lite-overfit", "--cloud", str(cloud),
                     "--out", str(run_dir), "--seed", "5", *TINY_OVERRIDES])
        assert code == 0
        out_lines = capsys.readouterr().out.splitlines()
        resolved = next(ln for ln in out_lines if ln.startswith("resolved: "))
        payload = json.loads(resolved[len("resolved: "):])
        assert payload["command"] == "train"
        assert payload["config"]["model"]["c1"] == 8
        assert payload["config"]["train"]["seed"] == 5
        progress = [ln for ln in out_lines if ln.startswith("epoch=")]
        assert len(progress) == 4

    def test_deterministic_checkpoints(self, pipeline, tmp_path):
        cloud = pipeline["cloud"]
        dirs = [tmp_path / "r1", tmp_path / "r2"]
        for run_dir in dirs:
            assert main(["train", "--preset", "lite-overfit", "--cloud", str(cloud),
                         "--out", str(run_dir), "--seed", "0",
                         *TINY_OVERRIDES]) == 0
        a = (dirs[0] / "epoch_0001.ckpt").read_bytes()
        b = (dirs[1] / "epoch_0001.ckpt").read_bytes()
        assert a == b
        assert a == pipeline["ckpt"].read_bytes()

    def test_unknown_override_key(self, tmp_path, capsys):
        code = main(["train", "--preset", "lite-overfit", "--cloud", "x.ply",
                     "--out", str(tmp_path), "train.bogus=1"])
        assert code == 1
        assert "bogus" in capsys.readouterr().err


class TestExtract:
    def test_writes_keypoint_file(self, pipeline, tmp_path):
        out = tmp_path / "kps.txt"
        code = main(["extract", "--checkpoint", str(pipeline["ckpt"]),
                     "--cloud", str(pipeline["cloud"]), "--out", str(out)])
        assert code == 0
        coords, scores = load_keypoints(out)
        assert coords.shape[1] == 3
        assert len(coords) == len(scores)

    def test_deterministic_output(self, pipeline, tmp_path):
        outs = [tmp_path / "a.txt", tmp_path / "b.txt"]
        for out in outs:
            assert main(["extract", "--checkpoint", str(pipeline["ckpt"]),
                         "--cloud", str(pipeline["cloud"]), "--out", str(out)]) == 0
        assert outs[0].read_bytes() == outs[1].read_bytes()

    def test_missing_checkpoint_is_single_error_line(self, pipeline, tmp_path, capsys):
        code = main(["extract", "--checkpoint", str(tmp_path / "none.ckpt"),
                     "--cloud", str(pipeline["cloud"]),
                     "--out", str(tmp_path / "k.txt")])
        assert code == 1
        err = capsys.readouterr().err.strip()
        assert err.startswith("error: ")
        assert "\n" not in err

    def test_unknown_flag_exits_two(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["extract", "--checkpoint", "c", "--cloud", "p", "--out", "o",
                  "--bogus-flag", "1"])
        assert exc.value.code == 2
        assert "--bogus-flag" in capsys.readouterr().err


class TestReconstruct:
    def test_writes_mesh(self, pipeline, tmp_path):
        out = tmp_path / "mesh.ply"
        code = main(["reconstruct", "--checkpoint", str(pipeline["ckpt"]),
                     "--cloud", str(pipeline["cloud"]), "--out", str(out),
                     "--resolution", "16"])
        assert code == 0
        assert out.exists()
        text = out.read_bytes()[:128]
        assert text.startswith(b"ply")


class TestSlice:
    def test_writes_csv_image(self, pipeline, tmp_path):
        out = tmp_path / "slice.csv"
        code = main(["slice", "--checkpoint", str(pipeline["ckpt"]),
                     "--cloud", str(pipeline["cloud"]), "--out", str(out),
                     "--field", "saliency", "--axis", "y",
                     "--mode", "max-project", "--resolution", "12"])
        assert code == 0
        image = load_slice_csv(out)
        assert image.shape == (12, 12)
        assert np.isfinite(image).all()
        assert np.all((image >= 0.0) & (image <= 1.0))

    def test_rejects_bad_field_choice(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["slice", "--checkpoint", "c", "--cloud", "p", "--out", "o",
                  "--field", "temperature"])
        assert exc.value.code == 2
        assert "temperature" in capsys.readouterr().err


class TestEvalRepeat:
    def test_noise_sweep_report(self, pipeline, tmp_path):
        out = tmp_path / "repeat.csv"
        code = main(["eval-repeat", "--checkpoint", str(pipeline["ckpt"]),
                     "--cloud", str(pipeline["cloud"]), "--out", str(out),
                     "--views", "2", "--seed", "4",
                     "--sweep", "noise", "--sigmas", "0,0.02"])
        assert code == 0
        rows, summary = read_metric_csv(out)
        assert len(rows) == 4  # 2 views x 2 sigmas
        assert "mean_repeatability@0" in summary
        assert "mean_repeatability@0.02" in summary
        assert "monotone_within_tolerance" in summary
        for row in rows:
            assert row["metric"] == "repeatability"
            assert 0.0 <= row["value"] <= 1.0

    def test_plain_run_and_determinism(self, pipeline, tmp_path):
        outs = [tmp_path / "a.csv", tmp_path / "b.csv"]
        for out in outs:
            code = main(["eval-repeat", "--checkpoint", str(pipeline["ckpt"]),
                         "--cloud", str(pipeline["cloud"]), "--out", str(out),
                         "--views", "2", "--seed", "11"])
            assert code == 0
        assert outs[0].read_bytes() == outs[1].read_bytes()
        _, summary = read_metric_csv(outs[0])
        assert "mean_repeatability@0.06" in summary


class TestEvalSemantic:
    def write_keypoints(self, path, coords):
        lines = [f"{x} {y} {z} 0.5" for x, y, z in coords]
        path.write_text("\n".join(lines) + "\n")

    def test_annotated_protocol_perfect_prediction(self, tmp_path):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-0.5, 0.5, size=(200, 3))
        cloud = tmp_path / "cloud.xyz"
        cloud.write_text("\n".join(" ".join(map(str, p)) for p in pts) + "\n")
        kps = pts[:5]
        pred = tmp_path / "pred.txt"
        annot = tmp_path / "annot.txt"
        self.write_keypoints(pred, kps)
        annot.write_text("\n".join(f"{x} {y} {z} 1" for x, y, z in kps) + "\n")
        out = tmp_path / "miou.csv"
        code = main(["eval-semantic", "--pred", str(pred), "--annot", str(annot),
                     "--cloud", str(cloud), "--thresholds", "0.05,0.1",
                     "--out", str(out)])
        assert code == 0
        rows, summary = read_metric_csv(out)
        assert summary["mean_miou"] == 1.0
        assert [row["value"] for row in rows] == [1.0, 1.0]

    def test_pairwise_protocol(self, tmp_path):
        rng = np.random.default_rng(1)
        sources = rng.uniform(-0.5, 0.5, size=(50, 3))
        targets = sources + np.array([2.0, 0.0, 0.0])
        src_file = tmp_path / "src.xyz"
        tgt_file = tmp_path / "tgt.xyz"
        src_file.write_text("\n".join(" ".join(map(str, p)) for p in sources) + "\n")
        tgt_file.write_text("\n".join(" ".join(map(str, p)) for p in targets) + "\n")
        pred = tmp_path / "pred.txt"
        pred2 = tmp_path / "pred2.txt"
        self.write_keypoints(pred, sources[:4])
        self.write_keypoints(pred2, targets[:4])
        out = tmp_path / "miou.csv"
        code = main(["eval-semantic", "--pred", str(pred), "--pred2", str(pred2),
                     "--corr-source", str(src_file), "--corr-target", str(tgt_file),
                     "--thresholds", "0.01", "--out", str(out)])
        assert code == 0
        _, summary = read_metric_csv(out)
        assert summary["mean_miou"] == 1.0

    def test_pairwise_requires_correspondence(self, tmp_path, capsys):
        pred = tmp_path / "pred.txt"
        self.write_keypoints(pred, [[0.0, 0.0, 0.0]])
        code = main(["eval-semantic", "--pred", str(pred), "--pred2", str(pred),
                     "--thresholds", "0.1", "--out", str(tmp_path / "o.csv")])
        assert code == 1
        assert "corr" in capsys.readouterr().err


class TestEvalRegister:
    def test_synthetic_random_baseline(self, tmp_path):
        out = tmp_path / "reg.csv"
        code = main(["eval-register", "--synthetic", "3", "--n", "256",
                     "--budgets", "32", "--seed", "2",
                     "--ransac-iterations", "50", "--out", str(out)])
        assert code == 0
        rows, summary = read_metric_csv(out)
        assert {"fmr@32", "inlier_ratio@32", "rr@32"} <= set(summary)
        assert len(rows) == 6  # 3 pairs x (inlier_ratio + registered)

    def test_requires_pair_source(self, tmp_path, capsys):
        code = main(["eval-register", "--budgets", "16",
                     "--out", str(tmp_path / "o.csv")])
        assert code == 1
        assert "--manifest" in capsys.readouterr().err or \
            "--synthetic" in capsys.readouterr().err


class TestWorkers:
    def test_invalid_worker_count(self, pipeline, tmp_path, capsys):
        code = main(["extract", "--checkpoint", str(pipeline["ckpt"]),
                     "--cloud", str(pipeline["cloud"]),
                     "--out", str(tmp_path / "k.txt"), "--workers", "0"])
        assert code == 1
        assert "--workers" in capsys.readouterr().err

    def test_worker_cap_accepted(self, pipeline, tmp_path):
        code = main(["extract", "--checkpoint", str(pipeline["ckpt"]),
                     "--cloud", str(pipeline["cloud"]),
                     "--out", str(tmp_path / "k.txt"), "--workers", "1"])
        assert code == 0


class TestParserShape:
    def test_unknown_subcommand_exits_two(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["transmogrify"])
        assert exc.value.code == 2

    def test_missing_subcommand_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2
