"""End-to-end runs of the ``freqmoe`` command through ``main(argv)``."""

import csv
import json

import pytest

from freqmoe import cli, serialization
from builders import dense_model

TRAIN = ["--epochs", "1", "--batch-size", "5", "--warmup-steps", "1", "--cosine-epochs", "1",
         "--steady-epochs", "0"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert run("gen-data", "--problem", "heat", "--size", 16, "--samples", 20, "--trajectory-length", 5,
               "--out", d / "heat.bin") == 0
    assert run("gen-data", "--problem", "ns", "--size", 16, "--samples", 20, "--trajectory-length", 5,
               "--k-max", 4, "--n-modes", 3, "--out", d / "ns.bin") == 0
    assert run("train-base", "--data", d / "heat.bin", "--out", d / "base.ckpt", "--width", 8,
               "--layers", 2, "--modes", "2x2", *TRAIN) == 0
    assert run("upcycle", "--base", d / "base.ckpt", "--out", d / "moe.ckpt", "--rank", 2,
               "--chunks", "2x2", "--seed", 3) == 0
    assert run("finetune", "--model", d / "moe.ckpt", "--data", d / "ns.bin", "--out", d / "ft.ckpt",
               *TRAIN) == 0
    return d


class TestPipeline:
    def test_outputs_exist(self, pipeline):
        for name in ("heat.bin", "ns.bin", "base.ckpt", "moe.ckpt", "ft.ckpt", "run.json",
                     "train-base.jsonl", "train-base.csv", "finetune.jsonl", "finetune.csv"):
            assert (pipeline / name).exists(), name

    def test_run_record(self, pipeline):
        rec = json.loads((pipeline / "run.json").read_text())
        assert {"gen-data", "train-base", "upcycle", "finetune"} <= set(rec)
        ft = rec["finetune"]
        assert ft["inputs"]["data"]["sha256"] == serialization.file_sha256(pipeline / "ns.bin")
        assert ft["options"]["epochs"] == 1 and ft["version"] == cli.__version__

    def test_metric_logs(self, pipeline):
        lines = [json.loads(l) for l in (pipeline / "finetune.jsonl").read_text().splitlines()]
        assert [l["epoch"] for l in lines] == [0, 1]
        assert "mean_gate" in lines[1]
        rows = list(csv.DictReader(open(pipeline / "finetune.csv")))
        assert float(rows[1]["val_l2re"]) == lines[1]["val_l2re"]

    def test_finetuned_provenance(self, pipeline):
        ck = serialization.load_checkpoint(pipeline / "ft.ckpt")
        prov = ck.header["provenance"]
        assert ck.kind == "freqmoe" and prov["source"] == "finetune"
        assert prov["parent"]["source"] == "upcycle"
        assert ck.header["upcycle"]["seed"] == 3

    def test_analysis_commands(self, pipeline):
        d = pipeline
        assert run("eval", "--model", d / "ft.ckpt", "--data", d / "ns.bin", "--top-k", 1, "--run-dir", d) == 0
        assert json.loads((d / "eval.json").read_text())["samples"] == 5
        assert run("rollout", "--model", d / "ft.ckpt", "--data", d / "ns.bin", "--steps", 3,
                   "--run-dir", d) == 0
        assert len(list(csv.DictReader(open(d / "rollout.csv")))) == 3
        assert run("inspect-gates", "--model", d / "ft.ckpt", "--data", d / "ns.bin", "--run-dir", d) == 0
        assert json.loads((d / "inspect-gates.json").read_text())["available"]
        assert run("verify", "--base", d / "base.ckpt", "--model", d / "moe.ckpt", "--tolerance", 0,
                   "--run-dir", d) == 0
        assert json.loads((d / "verify.json").read_text())["max_deviation"] == 0.0

    def test_verify_fails_after_finetune(self, pipeline):
        d = pipeline
        assert run("verify", "--base", d / "base.ckpt", "--model", d / "ft.ckpt", "--tolerance", 0,
                   "--run-dir", d / "v") == 2

    def test_dense_model_gate_map(self, pipeline, capsys):
        d = pipeline
        assert run("inspect-gates", "--model", d / "base.ckpt", "--data", d / "heat.bin",
                   "--run-dir", d / "g") == 0
        assert "no gates" in capsys.readouterr().out

    def test_wrong_kind_for_finetune(self, pipeline, capsys):
        d = pipeline
        assert run("finetune", "--model", d / "base.ckpt", "--data", d / "ns.bin",
                   "--out", d / "x.ckpt", *TRAIN) == 1
        assert "architecture kind" in capsys.readouterr().err


class TestGenData:
    def test_deterministic_files(self, tmp_path):
        for name in ("a.bin", "b.bin"):
            assert run("gen-data", "--problem", "ns", "--size", 16, "--samples", 4, "--k-max", 4,
                       "--out", tmp_path / name) == 0
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_config_file_and_override(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"problem": "heat", "size": 16, "samples": 3, "trajectory-length": 3}))
        assert run("gen-data", "--config", cfg, "--samples", 6, "--out", tmp_path / "h.bin") == 0
        ds = serialization.load_dataset(tmp_path / "h.bin")
        assert len(ds) == 6 and ds.meta.grid_size == 16 and ds.meta.trajectory_length == 3

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"resolution": 16}))
        assert run("gen-data", "--config", cfg, "--out", tmp_path / "h.bin") == 1


class TestUpcycleCommand:
    def test_all_bands_verify_at_zero(self, tmp_path, capsys):
        model = dense_model(width=8, layers=1, modes=(4, 4), grid_size=64)
        serialization.save_checkpoint(tmp_path / "b.ckpt", serialization.checkpoint_from_model(model))
        assert run("upcycle", "--base", tmp_path / "b.ckpt", "--out", tmp_path / "m.ckpt",
                   "--chunks", "8x8", "--rank", 4) == 0
        out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert out["max_deviation"] == 0.0
        m = serialization.model_from_checkpoint(serialization.load_checkpoint(tmp_path / "m.ckpt"))
        assert m.moe.n_experts == 63


class TestErrors:
    @pytest.mark.parametrize("argv", [[], ["nope"], ["gen-data", "--bogus"], ["gen-data"],
                                      ["gen-data", "--size", "24", "--out", "x.bin"],
                                      ["bench-modes", "--chunk", "4y"]])
    def test_invalid_input_exits_1(self, argv, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert run(*argv) == 1

    def test_missing_file_exits_1(self, tmp_path):
        assert run("eval", "--model", tmp_path / "none.ckpt", "--data", tmp_path / "none.bin") == 1

    def test_corrupt_checkpoint_exits_1(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"garbage-bytes-here")
        assert run("upcycle", "--base", tmp_path / "bad.ckpt", "--out", tmp_path / "o.ckpt") == 1

    def test_bench_modes(self, tmp_path):
        assert run("bench-modes", "--modes", "4,8", "--run-dir", tmp_path) == 0
        rows = list(csv.DictReader(open(tmp_path / "bench-modes.csv")))
        assert [r["modes"] for r in rows] == ["4", "8"]
