import json

import numpy as np
import pytest

from dynunet.cli import main
from dynunet.io import read_pgm, read_tensor, write_pgm, write_tensor
from dynunet.network import VARIANTS

SMALL = ["--levels", "2", "--classes", "3", "--size", "16", "--samples", "4", "--iters", "3"]


@pytest.fixture(scope="module")
def train_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "train"
    assert main(["train", "--variant", "dcd_unet", "--folds", "2", "--out", str(out)] + SMALL) == 0
    return out


class TestTrain:
    def test_artifacts(self, train_run):
        for name in ("manifest.json", "summary.csv", "loss.png", "fold0/log.csv", "fold1/eval.csv"):
            assert (train_run / name).exists(), name
        manifest = json.loads((train_run / "manifest.json").read_text())
        assert manifest["command"] == "train" and manifest["seed"] == 0
        assert manifest["config"]["variant"] == "dcd_unet" and manifest["config"]["iters"] == 3
        header = (train_run / "summary.csv").read_text().splitlines()[0]
        assert header == "fold,dsc_1,dsc_2,mean"

    def test_identical_args_identical_artifacts(self, train_run, tmp_path):
        again = tmp_path / "again"
        assert main(["train", "--variant", "dcd_unet", "--folds", "2", "--out", str(again)] + SMALL) == 0
        for name in ("summary.csv", "fold0/log.csv", "fold1/eval.csv", "fold0/checkpoint/tensors", "loss.png"):
            a, b = train_run / name, again / name
            if a.is_dir():
                assert sorted(p.name for p in a.iterdir()) == sorted(p.name for p in b.iterdir())
                assert all((a / p.name).read_bytes() == (b / p.name).read_bytes() for p in a.iterdir())
            else:
                assert a.read_bytes() == b.read_bytes(), name

    def test_existing_out_refused(self, train_run, capsys):
        assert main(["train", "--folds", "2", "--out", str(train_run)] + SMALL) == 2
        assert "exists" in capsys.readouterr().err

    def test_config_file_and_precedence(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"iters": 2, "folds": 2, "seed": 5, "variant": "unet"}))
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--seed", "6", "--out", str(out)] + SMALL[:-2]) == 0
        config = json.loads((out / "manifest.json").read_text())["config"]
        assert config["iters"] == 2 and config["seed"] == 6 and config["variant"] == "unet"

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"learning_rate": 1}))
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 2
        assert "unknown config keys" in capsys.readouterr().err
        assert not out.exists()

    @pytest.mark.parametrize(
        "flags",
        [["--size", "18"], ["--folds", "9"], ["--lr0", "-1"]],
    )
    def test_invalid_settings_leave_nothing(self, tmp_path, flags):
        out = tmp_path / "run"
        argv = ["train", "--out", str(out)] + SMALL + flags
        assert main(argv) == 2
        assert not out.exists() and list(tmp_path.iterdir()) == []

    def test_invalid_flag_value(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--iters", "0", "--out", str(tmp_path / "x")])
        assert exc.value.code == 2


class TestEvalPredict:
    def test_eval_synthetic(self, train_run, tmp_path, capsys):
        out = tmp_path / "ev"
        argv = ["eval", "--checkpoint", str(train_run), "--fold", "1", "--size", "16", "--samples", "3"]
        assert main(argv + ["--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "mean" in text
        rows = (out / "eval.csv").read_text().splitlines()
        assert rows[0] == "class,dsc" and len(rows) == 4
        assert (out / "eval.png").exists()

    def test_eval_external_tensors(self, train_run, tmp_path, capsys):
        rng = np.random.default_rng(0)
        write_tensor(tmp_path / "im.dut1", rng.random((2, 1, 16, 16)).astype(np.float32))
        write_tensor(tmp_path / "lb.dut1", rng.integers(0, 3, size=(2, 16, 16)).astype(np.float32))
        argv = ["eval", "--checkpoint", str(train_run), "--images", str(tmp_path / "im.dut1")]
        assert main(argv + ["--labels", str(tmp_path / "lb.dut1")]) == 0
        assert main(argv) == 2
        assert "together" in capsys.readouterr().err

    def test_predict_pgm(self, train_run, tmp_path):
        write_pgm(tmp_path / "in.pgm", np.full((16, 16), 128, np.uint8))
        out = tmp_path / "pred"
        argv = ["predict", "--checkpoint", str(train_run / "fold0" / "checkpoint"), "--input", str(tmp_path / "in.pgm")]
        assert main(argv + ["--out", str(out)]) == 0
        assert read_pgm(out / "labels.pgm").shape == (16, 16)
        assert read_tensor(out / "logits.dut1").shape == (1, 3, 16, 16)

    def test_predict_bad_extent(self, train_run, tmp_path, capsys):
        write_pgm(tmp_path / "odd.pgm", np.zeros((15, 16), np.uint8))
        out = tmp_path / "pred"
        argv = ["predict", "--checkpoint", str(train_run), "--input", str(tmp_path / "odd.pgm"), "--out", str(out)]
        assert main(argv) == 2
        assert not out.exists()

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path)]) == 2


class TestGradcheck:
    def test_primitives_pass(self, tmp_path, capsys):
        out = tmp_path / "gc"
        assert main(["gradcheck", "--target", "primitives", "--seeds", "1", "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "PASS" in text and "FAIL" not in text
        assert "checks passed" in (out / "gradcheck.txt").read_text()

    def test_failure_exit_code(self, monkeypatch):
        from dynunet import cli
        from dynunet.gradcheck import GradReport, TensorCheck

        bad = GradReport("x", 1e-4, [TensorCheck("w", (2,), 0.5, 0.1, 2, False, (1,), 1.0, 2.0)])
        monkeypatch.setattr(cli, "run_suite", lambda target, seeds: [bad])
        assert main(["gradcheck", "--target", "primitives", "--seeds", "1"]) == 1


BENCH = ["bench", "--seeds", "1", "--folds", "2", "--variants", "unet", "dcd_unet"] + SMALL


class TestBench:
    def test_byte_identical_reruns(self, tmp_path, capsys):
        assert main(BENCH + ["--out", str(tmp_path / "a")]) == 0
        assert main(BENCH + ["--out", str(tmp_path / "b")]) == 0
        for name in ("bench.csv", "bench_runs.csv", "bench.png"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        header = (tmp_path / "a" / "bench.csv").read_text().splitlines()[0]
        assert header == "variant,dsc_1,dsc_2,mean"
        assert "unet" in capsys.readouterr().out

    def test_all_variant_rows(self, tmp_path):
        argv = ["bench", "--seeds", "1", "--folds", "2", "--out", str(tmp_path / "all")] + SMALL[:-2] + ["--iters", "1"]
        assert main(argv) == 0
        rows = (tmp_path / "all" / "bench.csv").read_text().splitlines()
        assert [r.split(",")[0] for r in rows[1:]] == list(VARIANTS)
        assert all(len(r.split(",")) == 4 for r in rows)

    def test_cache_reused(self, tmp_path):
        cache = tmp_path / "cache"
        assert main(BENCH + ["--out", str(tmp_path / "a"), "--cache", str(cache)]) == 0
        records = sorted(p.name for p in cache.rglob("*.json"))
        assert len(records) == 4
        assert main(BENCH + ["--out", str(tmp_path / "b"), "--cache", str(cache)]) == 0
        assert (tmp_path / "a" / "bench.csv").read_bytes() == (tmp_path / "b" / "bench.csv").read_bytes()
