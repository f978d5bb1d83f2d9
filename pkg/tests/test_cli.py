"""End-to-end tests of the vpgo command line."""
import dataclasses
import json

import numpy as np
import pytest
import yaml

from vpgo import crud
from vpgo.checkpoint import Checkpoint, load_checkpoint, parameter_checksum, save_checkpoint
from vpgo.cli import run
from vpgo.data import export_trajectory, load_trajectory
from vpgo.database import make_session_factory
from vpgo.eval_protocol import read_report
from vpgo.model import build_model
from vpgo.schemas import ModelConfig

TINY = {
    "model": {"channel_scale": 0.125, "feature_channels": 16, "latent_channels": 2, "lstm_hidden": 16},
    "train": {"c": 2, "horizon": 3, "batch_size": 2, "steps": 2, "lr": 1e-3, "log_every": 1},
    "protocol": {"c": 2, "horizon": 3, "n_samples": 2, "fvd_batch": 4},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    assert run(["--no-registry", "gen-data", "--seed", "0", "--n-traj", "3", "--frames", "8",
                "--out-dir", str(out)]) == 0
    return out


class TestDecompose:
    """vpgo decompose."""

    def test_text_output(self, capsys):
        code = run(["--no-registry", "decompose", "--grasp", "0.3,0.1,0.02", "--drop", "-0.2,0.15,0.02",
                    "--top", "0.25"])
        assert code == 0
        out = capsys.readouterr().out
        kinds = [line.split()[0] for line in out.splitlines() if not line.startswith(" ")]
        assert kinds == ["ApproachTop", "DescendAndClose", "Lift", "Transport", "OpenAndDrop"]

    def test_json_output(self, capsys):
        code = run(["--no-registry", "decompose", "--grasp", "0.3,0.1,0.02", "--drop", "-0.2,0.15,0.02",
                    "--top", "0.25", "--json"])
        assert code == 0
        data = json.loads(capsys.readouterr().out)
        np.testing.assert_allclose(data["net_displacement"], [-0.5, 0.05, 0.0], atol=1e-9)

    def test_invalid_grasp_exits_1(self, capsys):
        code = run(["--no-registry", "decompose", "--grasp", "0,0,0.3", "--drop", "0,0,0", "--top", "0.25"])
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_malformed_vector_exits_2(self):
        assert run(["--no-registry", "decompose", "--grasp", "0,0", "--drop", "0,0,0", "--top", "0.25"]) == 2


class TestUsage:
    def test_unknown_flag(self, capsys):
        assert run(["--no-registry", "train", "--out-dir", "x", "--bogus"]) == 2
        assert "unrecognized arguments" in capsys.readouterr().err

    def test_missing_subcommand(self):
        assert run([]) == 2

    def test_invalid_config_names_key(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("train:\n  lr: -1.0\n")
        code = run(["--no-registry", "train", "--config", str(path), "--out-dir", str(tmp_path / "out")])
        assert code == 2
        assert "train.lr" in capsys.readouterr().err

    def test_missing_data_dir(self, tiny_config, tmp_path):
        code = run(["--no-registry", "train", "--config", str(tiny_config), "--data-dir", str(tmp_path / "none"),
                    "--out-dir", str(tmp_path / "out")])
        assert code == 1


class TestPipeline:
    """gen-data, train, eval and predict chained through files."""

    def test_gen_data(self, data_dir):
        files = sorted(data_dir.glob("traj_*.h5"))
        assert [f.name for f in files] == ["traj_0000.h5", "traj_0001.h5", "traj_0002.h5"]
        t = load_trajectory(files[0])
        assert t.frames.shape == (8, 48, 64, 3)
        assert t.stage_labels is not None
        manifest = json.loads((data_dir / "manifest.json").read_text())
        assert manifest["command"] == "gen-data"
        assert manifest["seed"] == 0

    def test_train_zero_steps(self, data_dir, tiny_config, tmp_path):
        out = tmp_path / "run"
        code = run(["--no-registry", "train", "--config", str(tiny_config), "--data-dir", str(data_dir),
                    "--out-dir", str(out), "--steps", "0"])
        assert code == 0
        assert (out / "final.pt").is_file()
        assert json.loads((out / "manifest.json").read_text())["config"]["train"]["steps"] == 0

    def test_train_eval_predict(self, data_dir, tiny_config, tmp_path):
        registry = f"sqlite:///{tmp_path / 'registry.db'}"
        out = tmp_path / "run"
        assert run(["--registry-url", registry, "train", "--config", str(tiny_config),
                    "--data-dir", str(data_dir), "--out-dir", str(out), "--seed", "1"]) == 0
        ckpt = out / "final.pt"

        report_path = tmp_path / "eval" / "report.json"
        assert run(["--registry-url", registry, "eval", "--checkpoint", str(ckpt), "--data-dir", str(data_dir),
                    "--config", str(tiny_config), "--report-out", str(report_path), "--stages",
                    "--table-out", str(tmp_path / "eval" / "table.csv"),
                    "--timestep-out", str(tmp_path / "eval" / "curves.csv")]) == 0
        report = read_report(report_path)
        assert report.n_examples == 3
        assert report.protocol.n_samples == 2
        assert [row.stage for row in report.stages][-1] == "FinalGoal"
        assert (tmp_path / "eval" / "table.csv").is_file()
        assert (tmp_path / "eval" / "curves.csv").is_file()

        samples = tmp_path / "samples"
        assert run(["--registry-url", registry, "predict", "--checkpoint", str(ckpt),
                    "--trajectory", str(data_dir / "traj_0000.h5"), "--n-samples", "2",
                    "--c", "2", "--horizon", "3", "--out-dir", str(samples)]) == 0
        sample = load_trajectory(samples / "sample_000.h5")
        source = load_trajectory(data_dir / "traj_0000.h5")
        assert sample.frames.shape == (5, 48, 64, 3)
        np.testing.assert_array_equal(sample.frames[:2], source.frames[:2])
        assert (samples / "sample_001.h5").is_file()

        sessions = make_session_factory(registry)
        with sessions() as db:
            runs = crud.list_runs(db)
            assert [r.command for r in runs] == ["predict", "eval", "train"]
            assert all(r.status == "succeeded" for r in runs)
            eval_run = runs[1]
            assert len(crud.get_run_reports(db, eval_run.id)) == 1

    def test_failed_run_is_recorded(self, tmp_path):
        registry = f"sqlite:///{tmp_path / 'registry.db'}"
        code = run(["--registry-url", registry, "predict", "--checkpoint", str(tmp_path / "missing.pt"),
                    "--trajectory", str(tmp_path / "missing.h5"), "--out-dir", str(tmp_path / "out")])
        assert code == 1
        with make_session_factory(registry)() as db:
            (only,) = crud.list_runs(db)
            assert only.status == "failed"
            assert "missing.pt" in only.error


def _donor(path, **changes):
    cfg = ModelConfig(**{**TINY["model"], **changes})
    return save_checkpoint(Checkpoint(model_config=cfg, state_dict=build_model(cfg, seed=5).state_dict()), path)


class TestFinetune:
    """vpgo train --init-checkpoint."""

    def test_donor_parameters_loaded_before_first_step(self, data_dir, tiny_config, tmp_path):
        donor = _donor(tmp_path / "donor.pt")
        out = tmp_path / "run"
        assert run(["--no-registry", "train", "--config", str(tiny_config), "--data-dir", str(data_dir),
                    "--init-checkpoint", str(donor), "--out-dir", str(out), "--steps", "0"]) == 0
        final = load_checkpoint(out / "final.pt")
        expected = load_checkpoint(donor)
        assert parameter_checksum(final.state_dict) == parameter_checksum(expected.state_dict)
        fresh = build_model(final.model_config, seed=0).state_dict()
        assert parameter_checksum(final.state_dict) != parameter_checksum(fresh)

    def test_donor_config_mismatch_exits_2(self, data_dir, tiny_config, tmp_path, capsys):
        donor = _donor(tmp_path / "donor.pt", latent_channels=3)
        code = run(["--no-registry", "train", "--config", str(tiny_config), "--data-dir", str(data_dir),
                    "--init-checkpoint", str(donor), "--out-dir", str(tmp_path / "run")])
        assert code == 2
        assert "model" in capsys.readouterr().err
        assert not (tmp_path / "run" / "final.pt").exists()


class TestPredictStates:
    def test_state_conditioned_model_on_stateless_trajectory_exits_1(self, data_dir, tmp_path, capsys):
        ckpt = _donor(tmp_path / "state.pt", use_state=True)
        traj = dataclasses.replace(load_trajectory(data_dir / "traj_0000.h5"), states=None)
        stateless = tmp_path / "stateless.h5"
        export_trajectory(traj, stateless)
        code = run(["--no-registry", "predict", "--checkpoint", str(ckpt), "--trajectory", str(stateless),
                    "--c", "2", "--horizon", "3", "--out-dir", str(tmp_path / "samples")])
        assert code == 1
        assert "states" in capsys.readouterr().err


class TestCompare:
    """vpgo compare."""

    @pytest.fixture
    def report(self, data_dir, tiny_config, tmp_path):
        ckpt = _donor(tmp_path / "model.pt")
        path = tmp_path / "eval" / "report.json"
        assert run(["--no-registry", "eval", "--checkpoint", str(ckpt), "--data-dir", str(data_dir),
                    "--config", str(tiny_config), "--report-out", str(path)]) == 0
        return path

    def test_one_column_group_per_label(self, report, tmp_path, capsys):
        out = tmp_path / "curves.csv"
        assert run(["--no-registry", "compare", "--report", f"a={report}", "--report", f"b={report}",
                    "--timestep-out", str(out)]) == 0
        assert "compared 2 reports" in capsys.readouterr().out
        header, *rows = out.read_text().splitlines()
        columns = header.split(",")
        assert columns[0] == "timestep"
        assert "a:psnr" in columns and "b:psnr" in columns
        assert len(rows) == 3
        values = rows[0].split(",")
        assert values[columns.index("a:psnr")] == values[columns.index("b:psnr")]

    def test_duplicate_label_exits_2(self, report, tmp_path):
        assert run(["--no-registry", "compare", "--report", f"a={report}", "--report", f"a={report}",
                    "--timestep-out", str(tmp_path / "curves.csv")]) == 2

    def test_malformed_report_argument_exits_2(self, report, tmp_path):
        assert run(["--no-registry", "compare", "--report", str(report),
                    "--timestep-out", str(tmp_path / "curves.csv")]) == 2

    def test_missing_report_exits_1(self, tmp_path, capsys):
        code = run(["--no-registry", "compare", "--report", f"a={tmp_path / 'none.json'}",
                    "--timestep-out", str(tmp_path / "curves.csv")])
        assert code == 1
        assert "none.json" in capsys.readouterr().err
