import json

import numpy as np
import pytest

from cbn.checkpoint import load_params, save_params
from cbn.cnn_core import init_params, predict
from cbn.harness.cli import main
from cbn.te_linalg import pooling_operator


@pytest.fixture
def model(tmp_path):
    p = init_params(8, [1, 3, 1], pooling_operator("blend_avg3", 0.5, n=8), 1.0, 0)
    return save_params(p, tmp_path / "m.cbn")


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


class TestUsage:
    def test_no_command(self, capsys):
        assert run(capsys)[0] == 1

    def test_unknown_option(self, capsys):
        code, _, err = run(capsys, "spectrum", "--bogus")
        assert code == 1 and "error" in err

    def test_missing_file(self, capsys, tmp_path):
        assert run(capsys, "spectrum", "--model", tmp_path / "none.cbn")[0] == 1

    def test_corrupt_checkpoint(self, capsys, tmp_path):
        bad = tmp_path / "bad.cbn"
        bad.write_bytes(b"nope")
        assert run(capsys, "bounds", "--model", bad)[0] == 1

    def test_bad_config(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"task": "nope"}))
        assert run(capsys, "train", "--config", cfg, "--out", tmp_path / "o")[0] == 1


class TestSpectrum:
    def test_deterministic(self, capsys, model, tmp_path):
        code, out, _ = run(capsys, "spectrum", "--model", model)
        assert code == 0
        assert out.splitlines()[0].startswith("layer,")
        run(capsys, "spectrum", "--model", model, "--out", tmp_path / "s.csv")
        assert (tmp_path / "s.csv").read_text() == out


class TestBounds:
    def test_default_probes(self, capsys, model):
        code, out, _ = run(capsys, "bounds", "--model", model)
        d = json.loads(out)
        assert code == 0 and d["rank_m"] is not None and d["activations"] is None

    def test_with_data_and_support(self, capsys, model, tmp_path):
        np.save(tmp_path / "x.npy", np.random.default_rng(0).uniform(size=(4, 8, 1)))
        (tmp_path / "sup.json").write_text(json.dumps([[1, 2, 8]]))
        code, _, _ = run(capsys, "bounds", "--model", model, "--data", tmp_path / "x.npy",
                         "--support", tmp_path / "sup.json", "--out", tmp_path / "b.json")
        d = json.loads((tmp_path / "b.json").read_text())
        assert code == 0 and d["cbn_upper"] > 0


class TestConstruct:
    @pytest.mark.parametrize("depth", [2, 5])
    def test_identity(self, capsys, tmp_path, depth):
        out_path = tmp_path / "id.cbn"
        code, out, _ = run(capsys, "construct", "identity", "--n", 8, "--c", 2, "--depth", depth,
                           "--beta", 0.5, "--out", out_path)
        d = json.loads(out)
        pool = pooling_operator("blend_avg3", 0.5, n=8)
        assert code == 0
        assert d["weight_norm_sq"] == pytest.approx(2 * depth * pool.m_bar, rel=1e-12)
        assert d["norm_sq"] == pytest.approx(d["accounting_total"], abs=1e-9)
        net = load_params(out_path)
        x = np.random.default_rng(0).uniform(-1, 1, (3, 8, 2))
        np.testing.assert_allclose(predict(net, x), x, atol=1e-9)

    def test_2d(self, capsys, tmp_path):
        code, out, _ = run(capsys, "construct", "identity", "--n", "4,5", "--c", 1, "--depth", 3,
                           "--beta", 0.25, "--out", tmp_path / "id.cbn")
        assert code == 0 and load_params(tmp_path / "id.cbn").spatial_shape == (4, 5)

    def test_non_invertible(self, capsys, tmp_path):
        code, _, err = run(capsys, "construct", "identity", "--n", 3, "--c", 1, "--depth", 2,
                           "--beta", 1.0, "--out", tmp_path / "id.cbn")
        assert code == 1 and "error" in err


class TestResample:
    def test_roundtrip(self, capsys, tmp_path):
        n = 12
        x = np.cos(2 * np.pi * np.arange(n) / n).reshape(1, n, 1)
        np.save(tmp_path / "x.npy", x)
        code, out, _ = run(capsys, "resample", "--input", tmp_path / "x.npy", "--out", tmp_path / "y.npy",
                           "--stride", 3)
        assert code == 0 and "(1, 12, 1) -> (1, 12, 1)" in out
        np.testing.assert_allclose(np.load(tmp_path / "y.npy"), x, atol=1e-12)

    def test_down(self, capsys, tmp_path):
        np.save(tmp_path / "x.npy", np.zeros((2, 8, 1)))
        run(capsys, "resample", "--input", tmp_path / "x.npy", "--out", tmp_path / "y.npy", "--op", "down")
        assert np.load(tmp_path / "y.npy").shape == (2, 4, 1)


class TestTrainAndData:
    def test_train(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n": 8, "L": 3, "channels": 3, "steps": 5, "count": 4}))
        code, out, _ = run(capsys, "train", "--config", cfg, "--out", tmp_path / "run")
        assert code == 0 and (tmp_path / "run" / "bounds.json").exists()
        assert "final_data_loss" in out

    def test_divergence_is_runtime_failure(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n": 8, "L": 3, "channels": 3, "steps": 50, "lr": 1e6, "count": 4}))
        code, _, err = run(capsys, "train", "--config", cfg, "--out", tmp_path / "run")
        assert code == 2 and "TrainingDiverged" in err
        assert (tmp_path / "run" / "FAILED").exists()

    def test_data(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n": 8, "count": 5}))
        assert run(capsys, "data", "--config", cfg, "--out", tmp_path / "d.npz")[0] == 0
        with np.load(tmp_path / "d.npz") as z:
            assert z["inputs"].shape == (5, 8, 1)


def test_verify_fast(capsys):
    code, out, _ = run(capsys, "verify", "--fast")
    assert code == 0 and "12/12 checks passed" in out
