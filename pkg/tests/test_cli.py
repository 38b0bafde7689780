"""CLI surface tests: exit codes, file outputs, determinism."""

import json

import numpy as np
import pytest

from pcnclaws import dataio
from pcnclaws.cli import main


def run(argv):
    return main(argv)


@pytest.fixture()
def scene_config(tmp_path):
    cfg = {
        "scenarios": [
            {
                "name": "elastic_a",
                "material": "elasticity",
                "params": {"E": 1.5e5, "nu": 0.2},
                "geometry": {"cube": 0.1},
                "particles": 27,
                "center": [0.5, 0.3],
                "velocity": [0.0, -0.5],
                "n_frames": 3,
                "split": "train",
                "sim": {"dim": 2, "grid_resolution": 32, "dt": 2e-4,
                        "frame_stride": 10},
            },
            {
                "name": "elastic_b",
                "material": "elasticity",
                "params": {"E": 2.5e5, "nu": 0.25},
                "geometry": {"cube": 0.1},
                "particles": 27,
                "center": [0.5, 0.3],
                "velocity": [0.0, -0.5],
                "n_frames": 3,
                "split": "test",
                "sim": {"dim": 2, "grid_resolution": 32, "dt": 2e-4,
                        "frame_stride": 10},
            },
        ]
    }
    path = tmp_path / "scenes.json"
    path.write_text(json.dumps(cfg))
    return path


class TestExitCodes:
    def test_unknown_command_is_usage_error(self, capsys):
        assert run(["frobnicate"]) == 1

    def test_missing_flag_is_usage_error(self):
        assert run(["simulate", "--analytic"]) == 1

    def test_missing_file_is_runtime_error(self, tmp_path, capsys):
        assert run(["eval", "--pred", str(tmp_path / "no.pcnc"),
                    "--gt", str(tmp_path / "no.pcnc")]) == 2

    def test_bad_file_is_runtime_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.pcnc"
        bad.write_bytes(b"garbage")
        assert run(["eval", "--pred", str(bad), "--gt", str(bad)]) == 2


class TestSimulateEval:
    def test_simulate_writes_trajectory(self, tmp_path, capsys):
        out = tmp_path / "t.pcnc"
        code = run(["simulate", "--analytic", "--material", "elasticity",
                    "--E", "1.8e5", "--nu", "0.13", "--frames", "3",
                    "--particles", "27", "--out", str(out)])
        assert code == 0
        traj = dataio.read_trajectory(out)
        assert traj.n_frames == 4
        assert traj.particle_count == 27

    def test_eval_self_is_zero(self, tmp_path, capsys):
        out = tmp_path / "t.pcnc"
        run(["simulate", "--analytic", "--material", "elasticity",
             "--E", "1.8e5", "--nu", "0.13", "--frames", "3",
             "--particles", "27", "--out", str(out)])
        assert run(["eval", "--pred", str(out), "--gt", str(out)]) == 0
        text = capsys.readouterr().out
        assert "mean=0" in text

    def test_seed_gives_byte_identical_outputs(self, tmp_path, capsys):
        a, b = tmp_path / "a.pcnc", tmp_path / "b.pcnc"
        argv = ["simulate", "--analytic", "--material", "elasticity",
                "--E", "1.5e5", "--nu", "0.2", "--frames", "3",
                "--particles", "27"]
        run(argv + ["--out", str(a)])
        run(argv + ["--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_simulate_does_not_touch_inputs(self, tmp_path, capsys):
        # eval must not mutate its input files
        out = tmp_path / "t.pcnc"
        run(["simulate", "--analytic", "--material", "elasticity",
             "--E", "1.8e5", "--nu", "0.13", "--frames", "2",
             "--particles", "27", "--out", str(out)])
        before = out.read_bytes()
        run(["eval", "--pred", str(out), "--gt", str(out)])
        assert out.read_bytes() == before


class TestGenDataTrainEstimate:
    def test_gen_data(self, tmp_path, scene_config, capsys):
        out = tmp_path / "data"
        assert run(["gen-data", "--config", str(scene_config),
                    "--out", str(out)]) == 0
        entries = dataio.load_manifest(out / "manifest.json")
        assert len(entries) == 2
        assert {e["split"] for e in entries} == {"train", "test"}

    def test_train_writes_checkpoint(self, tmp_path, scene_config, capsys):
        data = tmp_path / "data"
        run(["gen-data", "--config", str(scene_config), "--out", str(data)])
        ckpt = tmp_path / "model.pcnw"
        code = run(["train", "--data", str(data / "manifest.json"),
                    "--out", str(ckpt), "--steps", "2", "--window", "2",
                    "--batch", "1"])
        assert code == 0
        law, dim = dataio.read_checkpoint(ckpt)
        assert dim == 2

    def test_simulate_from_checkpoint(self, tmp_path, scene_config, capsys):
        data = tmp_path / "data"
        run(["gen-data", "--config", str(scene_config), "--out", str(data)])
        ckpt = tmp_path / "model.pcnw"
        run(["train", "--data", str(data / "manifest.json"), "--out", str(ckpt),
             "--steps", "1", "--window", "2", "--batch", "1"])
        out = tmp_path / "pred.pcnc"
        code = run(["simulate", "--ckpt", str(ckpt), "--material", "elasticity",
                    "--E", "2e5", "--nu", "0.2", "--frames", "2",
                    "--particles", "27", "--out", str(out)])
        assert code == 0

    def test_estimate_prints_si_params(self, tmp_path, capsys):
        obs = tmp_path / "obs.pcnc"
        run(["simulate", "--analytic", "--material", "elasticity",
             "--E", "2e5", "--nu", "0.2", "--frames", "6", "--particles", "27",
             "--side", "0.1", "--out", str(obs)])
        capsys.readouterr()
        code = run(["estimate", "--analytic", "--material", "elasticity",
                    "--observed", str(obs), "--E", "1.5e5", "--nu", "0.25",
                    "--particles", "27", "--side", "0.1", "--iters", "3"])
        assert code == 0
        out = capsys.readouterr().out
        assert "estimated: E=" in out and "nu=" in out


class TestCheckGrad:
    def test_check_grad_passes(self, capsys):
        assert run(["check-grad", "--scene", "tiny"]) == 0
        out = capsys.readouterr().out
        assert "max_rel_err=" in out
        assert float(out.split("max_rel_err=")[1]) <= 1e-4
