import csv
import json

import numpy as np
import pytest

from mohba.cli import main
from mohba.trajdata import DatasetMeta, Trajectory, TrajectoryDataset, save_dataset


@pytest.fixture()
def config_path(tmp_path):
    cfg = {
        "corpus": {"domain": "hill", "n_runs": 3, "trajectories_per_run": 4,
                   "episode_len": 8, "seed": 1, "noise_start": 0.0,
                   "noise_end": 0.0},
        "model": {"d_omega": 2, "d_alpha": 2, "gmm_components": 2,
                  "rnn_hidden": 4, "mlp_hidden": 4, "policy_hidden": 4},
        "train": {"steps": 25, "batch_size": 4, "log_every": 10},
        "lstm": {"rnn_hidden": 4, "head_hidden": 4},
        "flat_vae": {"d_omega": 2, "gmm_components": 2, "rnn_hidden": 4,
                     "mlp_hidden": 4, "policy_hidden": 4},
        "concepts": {"head_steps": 40, "n_perms": 50},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture()
def corpus_dir(tmp_path, config_path):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(config_path), "--out", str(out)]) == 0
    return out


@pytest.fixture()
def trained_dir(tmp_path, config_path, corpus_dir):
    out = tmp_path / "run"
    code = main(["train", "--config", str(config_path),
                 "--data", str(corpus_dir / "dataset.jsonl"), "--out", str(out)])
    assert code == 0
    return out


class TestGenData:
    def test_counts_and_artifacts(self, corpus_dir):
        lines = (corpus_dir / "dataset.jsonl").read_text().splitlines()
        assert len(lines) == 1 + 3 * 4
        stats = json.loads((corpus_dir / "stats.json").read_text())
        assert stats["n_trajectories"] == 12
        assert "return_histogram" in stats
        assert (corpus_dir / "meta.json").exists()

    def test_rerun_byte_identical(self, tmp_path, config_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["gen-data", "--config", str(config_path), "--out", str(a)]) == 0
        assert main(["gen-data", "--config", str(config_path), "--out", str(b)]) == 0
        assert (a / "dataset.jsonl").read_bytes() == (b / "dataset.jsonl").read_bytes()
        assert (a / "stats.json").read_bytes() == (b / "stats.json").read_bytes()

    def test_workers_match_serial(self, tmp_path, config_path):
        a, b = tmp_path / "serial", tmp_path / "par"
        assert main(["gen-data", "--config", str(config_path), "--out", str(a)]) == 0
        assert main(["gen-data", "--config", str(config_path), "--out", str(b),
                     "--workers", "2"]) == 0
        assert (a / "dataset.jsonl").read_bytes() == (b / "dataset.jsonl").read_bytes()

    def test_missing_out_is_usage_error(self, config_path):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--config", str(config_path)])
        assert exc.value.code == 2

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"corpus": {"n_rnus": 3}}))
        code = main(["gen-data", "--config", str(path), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "corpus.n_rnus" in capsys.readouterr().err

    def test_unknown_section_rejected(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"corpsu": {}}))
        code = main(["gen-data", "--config", str(path), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "corpsu" in capsys.readouterr().err

    def test_seed_env_override(self, tmp_path, config_path, monkeypatch):
        cfg = json.loads(config_path.read_text())
        cfg["corpus"]["seed"] = 9
        override = tmp_path / "cfg9.json"
        override.write_text(json.dumps(cfg))
        a = tmp_path / "from_config"
        assert main(["gen-data", "--config", str(override), "--out", str(a)]) == 0

        monkeypatch.setenv("MOHBA_SEED", "9")
        b = tmp_path / "from_env"
        assert main(["gen-data", "--config", str(config_path), "--out", str(b)]) == 0
        assert (a / "dataset.jsonl").read_bytes() == (b / "dataset.jsonl").read_bytes()


class TestTrain:
    def test_artifacts(self, trained_dir):
        assert (trained_dir / "checkpoint.bin").exists()
        rows = list(csv.DictReader((trained_dir / "metrics.csv").open()))
        assert [r["step"] for r in rows] == ["0", "10", "20"]
        for name in ("loss", "recon", "kl_local", "kl_joint", "beta"):
            assert name in rows[0]

    def test_resume_matches_straight_run(self, tmp_path, config_path, corpus_dir):
        cfg = json.loads(config_path.read_text())
        data = str(corpus_dir / "dataset.jsonl")

        cfg["train"]["steps"] = 12
        half_cfg = tmp_path / "half.json"
        half_cfg.write_text(json.dumps(cfg))
        half = tmp_path / "half"
        assert main(["train", "--config", str(half_cfg), "--data", data,
                     "--out", str(half)]) == 0

        cfg["train"]["steps"] = 24
        full_cfg = tmp_path / "full.json"
        full_cfg.write_text(json.dumps(cfg))
        straight = tmp_path / "straight"
        resumed = tmp_path / "resumed"
        assert main(["train", "--config", str(full_cfg), "--data", data,
                     "--out", str(straight)]) == 0
        assert main(["train", "--config", str(full_cfg), "--data", data,
                     "--out", str(resumed),
                     "--resume", str(half / "checkpoint.bin")]) == 0
        assert (straight / "checkpoint.bin").read_bytes() == \
            (resumed / "checkpoint.bin").read_bytes()

    def test_nonfinite_exit_code(self, tmp_path, config_path, corpus_dir,
                                 monkeypatch, capsys):
        def explode(*a, **k):
            raise RuntimeError("non-finite loss at step 3: loss=nan")

        monkeypatch.setattr("mohba.cli.train", explode)
        code = main(["train", "--config", str(config_path),
                     "--data", str(corpus_dir / "dataset.jsonl"),
                     "--out", str(tmp_path / "x")])
        assert code == 3
        assert "non-finite" in capsys.readouterr().err


class TestBaseline:
    @pytest.mark.parametrize("method", ["lstm", "vae"])
    def test_runs(self, tmp_path, config_path, corpus_dir, method):
        out = tmp_path / method
        code = main(["baseline", "--method", method, "--config", str(config_path),
                     "--data", str(corpus_dir / "dataset.jsonl"),
                     "--out", str(out)])
        assert code == 0
        assert (out / "checkpoint.bin").exists()
        assert (out / "metrics.csv").exists()

    def test_bad_method_usage_error(self, config_path, corpus_dir, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["baseline", "--method", "transformer", "--config",
                  str(config_path), "--data", str(corpus_dir / "dataset.jsonl"),
                  "--out", str(tmp_path / "o")])
        assert exc.value.code == 2


class TestAnalyze:
    def test_embed_columns(self, tmp_path, corpus_dir, trained_dir):
        out = tmp_path / "an"
        assert main(["analyze", "embed",
                     "--checkpoint", str(trained_dir / "checkpoint.bin"),
                     "--data", str(corpus_dir / "dataset.jsonl"),
                     "--out", str(out)]) == 0
        rows = list(csv.reader((out / "embeddings.csv").open()))
        assert rows[0][:3] == ["traj_id", "z_omega_0", "z_omega_1"]
        assert len(rows) == 1 + 12
        assert len(rows[0]) == 1 + 2 + 3 * 2

    def test_cluster_covers_every_trajectory(self, tmp_path, corpus_dir,
                                             trained_dir):
        out = tmp_path / "an"
        assert main(["analyze", "cluster",
                     "--checkpoint", str(trained_dir / "checkpoint.bin"),
                     "--data", str(corpus_dir / "dataset.jsonl"),
                     "--out", str(out), "--k", "3"]) == 0
        payload = json.loads((out / "clusters.json").read_text())
        assert len(payload["labels"]) == 12
        assert payload["k"] == 3
        assert all(0 <= v < 3 for v in payload["labels"])

    def test_ictd_and_apl(self, tmp_path, corpus_dir, trained_dir):
        out = tmp_path / "an"
        assert main(["analyze", "ictd",
                     "--checkpoint", str(trained_dir / "checkpoint.bin"),
                     "--data", str(corpus_dir / "dataset.jsonl"),
                     "--out", str(out), "--k", "3"]) == 0
        # noise-free corpus: every run's trajectories coincide, so with k=3
        # clusters aligned to runs the within-cluster spread vanishes
        assert json.loads((out / "ictd.json").read_text())["ictd"] == \
            pytest.approx(0.0, abs=1e-9)
        assert main(["analyze", "apl",
                     "--checkpoint", str(trained_dir / "checkpoint.bin"),
                     "--data", str(corpus_dir / "dataset.jsonl"),
                     "--out", str(out)]) == 0
        payload = json.loads((out / "apl.json").read_text())
        assert payload["method"] == "mohba"
        assert payload["apl"] >= 0.0

    def test_track_single_mode_run(self, tmp_path, corpus_dir, trained_dir):
        first = json.loads(
            (corpus_dir / "dataset.jsonl").read_text().splitlines()[1])
        out = tmp_path / "an"
        assert main(["analyze", "track",
                     "--checkpoint", str(trained_dir / "checkpoint.bin"),
                     "--data", str(corpus_dir / "dataset.jsonl"),
                     "--out", str(out), "--k", "2",
                     "--run-id", first["run_id"]]) == 0
        payload = json.loads((out / "track.json").read_text())
        assert payload["changepoints"] == []
        assert len(payload["labels"]) == 4

    def test_track_missing_run_id(self, tmp_path, corpus_dir, trained_dir,
                                  capsys):
        code = main(["analyze", "track",
                     "--checkpoint", str(trained_dir / "checkpoint.bin"),
                     "--data", str(corpus_dir / "dataset.jsonl"),
                     "--out", str(tmp_path / "an"), "--k", "2",
                     "--run-id", "run99:modes={A}"])
        assert code == 2
        assert "not found" in capsys.readouterr().err

    def test_project_outputs(self, tmp_path, corpus_dir, trained_dir):
        out = tmp_path / "an"
        assert main(["analyze", "project",
                     "--checkpoint", str(trained_dir / "checkpoint.bin"),
                     "--data", str(corpus_dir / "dataset.jsonl"),
                     "--out", str(out)]) == 0
        rows = list(csv.reader((out / "projection.csv").open()))
        assert rows[0] == ["traj_id", "pc1", "pc2"]
        assert len(rows) == 13
        assert (out / "projection.png").stat().st_size > 0

    def test_embed_and_apl_from_baseline_checkpoints(self, tmp_path,
                                                     config_path, corpus_dir):
        data = str(corpus_dir / "dataset.jsonl")
        lstm_dir, vae_dir = tmp_path / "lstm", tmp_path / "vae"
        assert main(["baseline", "--method", "lstm", "--config",
                     str(config_path), "--data", data,
                     "--out", str(lstm_dir)]) == 0
        assert main(["baseline", "--method", "vae", "--config",
                     str(config_path), "--data", data,
                     "--out", str(vae_dir)]) == 0

        out = tmp_path / "an"
        assert main(["analyze", "embed",
                     "--checkpoint", str(lstm_dir / "checkpoint.bin"),
                     "--data", data, "--out", str(out)]) == 0
        rows = list(csv.reader((out / "embeddings.csv").open()))
        assert rows[0][:2] == ["traj_id", "emb_0"]
        assert len(rows) == 13

        assert main(["analyze", "apl",
                     "--checkpoint", str(vae_dir / "checkpoint.bin"),
                     "--data", data, "--out", str(out)]) == 0
        assert json.loads((out / "apl.json").read_text())["method"] == \
            "flat_vae"

    def test_missing_checkpoint(self, tmp_path, corpus_dir, capsys):
        code = main(["analyze", "embed", "--checkpoint",
                     str(tmp_path / "nope.bin"),
                     "--data", str(corpus_dir / "dataset.jsonl"),
                     "--out", str(tmp_path / "an")])
        assert code == 2
        assert "checkpoint" in capsys.readouterr().err


class TestConcepts:
    def test_dispersion_report(self, tmp_path, config_path, corpus_dir,
                               trained_dir):
        out = tmp_path / "con"
        code = main(["concepts",
                     "--checkpoint", str(trained_dir / "checkpoint.bin"),
                     "--data", str(corpus_dir / "dataset.jsonl"),
                     "--target", "dispersion", "--m", "3",
                     "--config", str(config_path), "--out", str(out)])
        assert code == 0
        report = json.loads((out / "concepts.json").read_text())
        assert report["target"] == "dispersion"
        assert report["kappa"] == 0.0
        for entry in report["classes"].values():
            assert len(entry["lambda"]) == report["n_concepts"]

    def test_kappa_override_in_metadata(self, tmp_path, config_path, corpus_dir,
                                        trained_dir):
        out = tmp_path / "con"
        code = main(["concepts",
                     "--checkpoint", str(trained_dir / "checkpoint.bin"),
                     "--data", str(corpus_dir / "dataset.jsonl"),
                     "--target", "dispersion", "--m", "3", "--kappa", "0.25",
                     "--config", str(config_path), "--out", str(out)])
        assert code == 0
        report = json.loads((out / "concepts.json").read_text())
        assert report["kappa"] == 0.25

    def test_return_target_needs_rewards(self, tmp_path, config_path,
                                         trained_dir, capsys):
        meta = DatasetMeta(3, 6, (2, 2, 2), 8, False)
        ds = TrajectoryDataset(meta=meta)
        rng = np.random.default_rng(0)
        for _ in range(10):
            ds.append(Trajectory(states=rng.standard_normal((9, 6)),
                                 actions=[rng.standard_normal((8, 2))
                                          for _ in range(3)]))
        path = tmp_path / "norewards.jsonl"
        save_dataset(ds, path)
        code = main(["concepts",
                     "--checkpoint", str(trained_dir / "checkpoint.bin"),
                     "--data", str(path), "--target", "return",
                     "--config", str(config_path),
                     "--out", str(tmp_path / "con")])
        assert code == 2
        assert "rewards" in capsys.readouterr().err
