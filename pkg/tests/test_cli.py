import csv
import json

import numpy as np
import pytest

from aahqsnet.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from aahqsnet.simdata import dataset_hash, load_dataset

GEN = ["--elements", "200", "--n-train", "4", "--n-test", "2", "--seed", "3"]


def _manifest(d):
    return json.loads((d / "run.json").read_text())


def _no_partials(root):
    assert not list(root.rglob("*.partial"))


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["gen-data", "--out", str(out), *GEN]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def ckpt(data):
    out = data.parent / "ckpt"
    args = ["train", "--data", str(data), "--out", str(out), "--epochs", "1", "--K", "2", "--K1", "1",
            "--K2", "1", "--layers", "3", "--width", "8", "--batch-size", "2"]
    assert main(args) == EXIT_OK
    return out


def test_gen_data_manifest_and_rerun(data, tmp_path):
    man = _manifest(data)
    assert man["format"] == "aahqsnet-run" and man["command"] == "gen-data"
    assert man["seeds"] == {"seed": 3}
    ds = load_dataset(data)
    assert len(ds) == 6 and man["results"]["dataset_hash"] == dataset_hash(ds)
    again = tmp_path / "again"
    assert main(["gen-data", "--out", str(again), *GEN]) == EXIT_OK
    assert _manifest(again)["results"]["dataset_hash"] == man["results"]["dataset_hash"]
    _no_partials(tmp_path)


def test_gen_data_empty_train(tmp_path):
    out = tmp_path / "ds"
    assert main(["gen-data", "--out", str(out), "--elements", "200", "--n-train", "0", "--n-test", "1"]) == EXIT_OK
    ds = load_dataset(out)
    assert ds.indices("train") == [] and len(ds.indices("test")) == 1


def test_default_data_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("AAHQSNET_DATA", str(tmp_path))
    assert main(["gen-data", "--elements", "200", "--n-train", "1", "--n-test", "0"]) == EXIT_OK
    assert (tmp_path / "dataset" / "manifest.json").exists()


def test_train_smoke(ckpt):
    man = _manifest(ckpt)
    assert (ckpt / "params.json").exists()
    assert len(man["results"]["epoch_losses"]) == 1
    assert man["results"]["variant"] == "aa-hqsnet"


def test_train_ablation_flags(data, tmp_path):
    out = tmp_path / "hq"
    assert main(["train", "--data", str(data), "--out", str(out), "--epochs", "1", "--K", "1", "--layers", "3",
                 "--width", "4", "--no-aa-gn", "--no-aa-lpgd"]) == EXIT_OK
    assert _manifest(out)["results"]["variant"] == "hqsnet"


def test_reconstruct_checkpoint(data, ckpt, tmp_path):
    out = tmp_path / "rec"
    assert main(["reconstruct", "--data", str(data), "--checkpoint", str(ckpt), "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert [int(r["index"]) for r in rows] == [4, 5]
    assert set(rows[0]) == {"index", "mse", "ssim", "eiei", "dr", "snr"}
    assert (out / "sigma_4.f64").stat().st_size == 8 * load_dataset(data).mesh.n_T
    man = _manifest(out)
    assert man["results"]["recon_config"]["K"] == 2
    # eval of the saved reconstructions reproduces the metrics file
    ev = tmp_path / "ev"
    assert main(["eval", "--data", str(data), "--recon", str(out), "--out", str(ev)]) == EXIT_OK
    assert (ev / "metrics.csv").read_text() == (out / "metrics.csv").read_text()
    rend = tmp_path / "svg"
    assert main(["render", "--data", str(data), "--recon", str(out), "--out", str(rend)]) == EXIT_OK
    assert sorted(p.name for p in rend.glob("*.svg")) == [
        "classes_4.svg", "classes_5.svg", "recon_4.svg", "recon_5.svg", "truth_4.svg", "truth_5.svg"]
    _no_partials(tmp_path)


def test_reconstruct_gnlm_without_checkpoint(data, tmp_path):
    out = tmp_path / "lm"
    assert main(["reconstruct", "--data", str(data), "--method", "gn-lm", "--lm-lambda", "1.0",
                 "--lm-iters", "3", "--out", str(out), "--eta", "1e-2"]) == EXIT_OK
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert len(rows) == 2
    snr = np.mean([float(r["snr"]) for r in rows])
    assert abs(snr - 42) < 3
    res = _manifest(out)["results"]
    assert res["eta"] == 1e-2 and res["lm_lambda"] == 1.0


def test_reconstruct_needs_checkpoint(data, tmp_path):
    assert main(["reconstruct", "--data", str(data), "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert not (tmp_path / "x").exists()


def test_bench_single_iteration(tmp_path):
    out = tmp_path / "b"
    assert main(["bench-aa", "--out", str(out), "--x0", "0.5,2", "--m", "2", "--iters", "1",
                 "--methods", "GNAA"]) == EXIT_OK
    lines = (out / "bench.csv").read_text().splitlines()
    assert len(lines) == 2


def test_bench_grid(tmp_path):
    out = tmp_path / "b"
    assert main(["bench-aa", "--out", str(out)]) == EXIT_OK
    runs = _manifest(out)["results"]["runs"]
    assert len(runs) == 4 * 2 * 5
    assert {r["m"] for r in runs} == {1, 2, 5, 10, 15}
    ok = [r for r in runs if r["status"] == "converged"]
    assert {r["method"] for r in ok} == {"NAA", "GNAA"}
    # the last ten points of a converging curve trend down and end at their minimum
    rows = list(csv.DictReader(open(out / "bench.csv")))
    for r in ok:
        curve = [float(x["f_norm"]) for x in rows
                 if x["method"] == r["method"] and int(x["m"]) == r["m"] and int(x["x0_id"]) == r["x0_id"]]
        tail = np.log10(np.array(curve[-10:]) + 1e-16)
        assert tail[-1] == tail.min()
        assert np.polyfit(np.arange(tail.size), tail, 1)[0] < 0


@pytest.mark.parametrize("argv", [
    ["gen-data", "--n-train", "-1"],
    ["gen-data", "--bogus"],
    ["bench-aa", "--out", "x", "--x0", "1"],
    ["bench-aa", "--out", "x", "--methods", "FOO"],
    ["train", "--data", "/nonexistent", "--out", "x"],
    ["bench-aa", "--out", "x", "--threads", "0"],
])
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_USAGE
    assert not (tmp_path / "x").exists()


def test_runtime_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["bench-aa", "--out", str(blocker / "sub"), "--iters", "1"]) == EXIT_RUNTIME


def test_help_exits_ok(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "gen-data" in capsys.readouterr().out
