import hashlib

import pytest

from phsa import io
from phsa.cli import main

SMALL_DATA = ["--n-train", "16", "--n-dev", "6", "--t-min", "10", "--t-max", "16"]
SMALL_MODEL = ["--layers", "2", "--heads", "2", "--d-model", "16", "--d-h", "8", "--ffn-dim", "32"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen", "--out", str(data), *SMALL_DATA]) == 0
    out = root / "train"
    code = main(["train", "--data", str(data), "--out", str(out), "--variant", "M5", "--phsa-layers", "1",
                 "--epochs", "2", *SMALL_MODEL])
    assert code == 0
    return root, data, out


class TestGen:
    def test_outputs(self, run):
        _, data, _ = run
        assert sorted(p.name for p in data.iterdir()) == ["config.json", "dev.csv", "train.csv"]
        assert len(io.read_dataset(data / "train.csv")) == 16

    def test_byte_identical_rerun(self, run, tmp_path):
        _, data, _ = run
        assert main(["gen", "--out", str(tmp_path / "d"), *SMALL_DATA]) == 0
        for name in ("train.csv", "dev.csv", "config.json"):
            assert digest(tmp_path / "d" / name) == digest(data / name)

    def test_refuses_overwrite(self, run):
        _, data, _ = run
        assert main(["gen", "--out", str(data), *SMALL_DATA]) == 1

    def test_default_location_from_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PHSA_OUT", str(tmp_path / "root"))
        assert main(["gen", *SMALL_DATA]) == 0
        assert (tmp_path / "root" / "data" / "train.csv").exists()

    def test_bad_range(self, tmp_path):
        assert main(["gen", "--out", str(tmp_path), "--t-min", "20", "--t-max", "10"]) == 1


class TestUsage:
    @pytest.mark.parametrize("argv", [[], ["nope"], ["train"], ["analyze", "--which", "par"],
                                      ["gen", "--n-train", "many"]])
    def test_exit_one(self, argv):
        assert main(argv) == 1

    def test_missing_data_dir(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "absent"), "--out", str(tmp_path)]) == 1

    def test_phsa_layers_need_m5(self, run, tmp_path):
        _, data, _ = run
        assert main(["train", "--data", str(data), "--out", str(tmp_path), "--variant", "M2",
                     "--phsa-layers", "1", *SMALL_MODEL]) == 1

    def test_bad_config_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"data": {"bogus": 1}}')
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 1


class TestTrain:
    def test_outputs(self, run):
        _, _, out = run
        assert {p.name for p in out.iterdir()} >= {"run_config.json", "checkpoint.ckpt", "history.csv"}
        cols, rows = io.read_table(out / "history.csv")
        assert cols == ["epoch", "loss", "accuracy"] and len(rows) == 3
        assert io.load_checkpoint(out / "checkpoint.ckpt").epoch == 2

    def test_zero_learning_rate_gives_flat_history(self, run, tmp_path):
        _, data, _ = run
        assert main(["train", "--data", str(data), "--out", str(tmp_path), "--lr", "0", "--weight-decay", "0",
                     "--epochs", "2", *SMALL_MODEL]) == 0
        _, rows = io.read_table(tmp_path / "history.csv")
        assert len({r[1] for r in rows}) == 1

    def test_divergence_exits_two(self, run, tmp_path):
        _, data, _ = run
        with pytest.warns(RuntimeWarning):
            code = main(["train", "--data", str(data), "--out", str(tmp_path), "--lr", "1e12",
                         "--epochs", "2", *SMALL_MODEL])
        assert code == 2


class TestEvalAndAnalyze:
    def test_eval(self, run, tmp_path):
        _, data, out = run
        assert main(["eval", "--checkpoint", str(out / "checkpoint.ckpt"), "--data", str(data),
                     "--out", str(tmp_path)]) == 0
        _, rows = io.read_table(tmp_path / "confusion_dev.csv")
        assert len(rows) == 144
        metrics = dict(io.read_table(tmp_path / "eval_dev.csv")[1])
        assert 0.0 <= float(metrics["accuracy"]) <= 1.0

    def test_ablation(self, run, tmp_path):
        _, data, out = run
        assert main(["analyze", "--checkpoint", str(out / "checkpoint.ckpt"), "--data", str(data),
                     "--which", "ablation", "--out", str(tmp_path)]) == 0
        cols, rows = io.read_table(tmp_path / "ablation.csv")
        assert [r[0] for r in rows] == ["full", "similarity-only", "content-only"]
        assert float(rows[2][cols.index("max_within_map_std")]) <= 1e-6
        assert "similarity_only_entropy_below_content_only=" in (tmp_path / "ablation.csv").read_text()
        for tag in ("full", "similarity-only", "content-only"):
            assert (tmp_path / f"entropy_{tag}.csv").exists()

    def test_par(self, run, tmp_path):
        _, data, out = run
        assert main(["analyze", "--checkpoint", str(out / "checkpoint.ckpt"), "--data", str(data),
                     "--which", "par", "--layer", "0", "--head", "1", "--out", str(tmp_path)]) == 0
        _, rows = io.read_table(tmp_path / "par_L0_H1.csv")
        assert len(rows) == 144
        assert len(io.read_table(tmp_path / "par_symmetry.csv")[1]) == 1

    def test_slopes_entropy_maps(self, run, tmp_path):
        _, data, out = run
        ckpt = str(out / "checkpoint.ckpt")
        for which in ("slopes", "entropy", "maps"):
            assert main(["analyze", "--checkpoint", ckpt, "--data", str(data), "--which", which,
                         "--out", str(tmp_path)]) == 0
        assert len(io.read_table(tmp_path / "slopes.csv")[1]) == 2 * 2
        assert len(list((tmp_path / "maps").glob("L*_H*.csv"))) == 4

    def test_slopes_without_phonetic_layers(self, run, tmp_path):
        _, data, _ = run
        assert main(["train", "--data", str(data), "--out", str(tmp_path), "--variant", "M2",
                     "--epochs", "0", *SMALL_MODEL]) == 0
        assert main(["analyze", "--checkpoint", str(tmp_path / "checkpoint.ckpt"), "--data", str(data),
                     "--which", "slopes", "--out", str(tmp_path)]) == 1

    def test_missing_checkpoint(self, run, tmp_path):
        _, data, _ = run
        assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(data)]) == 1


class TestVerify:
    def test_passes(self, capsys):
        assert main(["verify", "--quick"]) == 0
        assert "verify: PASS" in capsys.readouterr().out

    def test_broken_prelu_backward_is_caught(self, monkeypatch, capsys):
        from phsa import numeric

        real = numeric._prelu_backward

        def broken(xv, av, g):
            gx, ga = real(xv, av, g)
            return gx * 1.01, ga

        monkeypatch.setattr(numeric, "_prelu_backward", broken)
        assert main(["verify", "--quick"]) == 3
        assert "verify: FAIL" in capsys.readouterr().out


def test_bench(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--T", "8", "16", "--iters", "2", "--heads", "2", "--d-model", "16", "--d-h", "8",
                 "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "phSA - SA = +" in text
    assert len(io.read_table(out)[1]) == 2 * 2 * 2
