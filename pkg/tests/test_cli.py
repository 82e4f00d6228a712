import json
import os
import subprocess
import sys

import numpy as np
import pytest

from bayestf.cli import main
from bayestf.io import (
    load_cells,
    load_measurement_latents,
    load_metrics,
    load_side_info,
    load_table,
    load_tensor,
)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    data = root / "data"
    assert main(["gen", "--preset", "tiny", "--seed", "1", "--out", str(data)]) == 0
    assert main(["train", "--manifest", str(data / "manifest.json")]) == 0
    return data


def read(p):
    with open(p, "rb") as fh:
        return fh.read()


def test_gen_outputs(tiny):
    for name in ("tensor.tsv", "features-mode0.mtx", "truth.npz", "gen-spec.json", "manifest.json"):
        assert (tiny / name).is_file()
    obs = load_tensor(str(tiny / "tensor.tsv"))
    X = load_side_info(str(tiny / "features-mode0.mtx"))
    assert X.nrows == 60
    with np.load(tiny / "truth.npz") as z:
        assert z["clean"].shape == (len(obs),)


def test_train_outputs_parse(tiny):
    run = tiny / "run"
    pred = load_tensor(str(run / "predictions.tsv"))
    test = load_tensor(str(run / "test-cells.tsv"))
    np.testing.assert_array_equal(pred.indices, test.indices)
    assert np.all(test.indices[:, 2] == 0)
    load_tensor(str(run / "train-predictions.tsv"))
    m = load_metrics(str(run / "test-metrics.tsv"))
    assert m["n_test"] == len(test)
    assert abs(m["test_rmse"] - np.sqrt(np.mean((pred.values - test.values) ** 2))) < 1e-4
    norm, raw = load_measurement_latents(str(run / "measurement-latents.tsv"))
    assert norm.shape == (60, 2, 5)
    # predictions carry 6 significant digits
    line = (run / "predictions.tsv").read_text().splitlines()[1]
    assert len(line.split("\t")[-1].lstrip("-").replace(".", "").lstrip("0")) <= 6


def test_run_config_echoes_parameters(tiny):
    cfg = json.loads((tiny / "run" / "run-config").read_text())
    s = cfg["sampler"]
    assert (s["D"], s["burn_in"], s["n_samples"], s["seed"]) == (5, 60, 60, 1)
    for key in ("kappa0", "nu0", "W0", "alpha_fixed", "lambda_beta"):
        assert key in s["hyper"]
    assert s["cg"]["rel_tolerance"] == 1e-6
    assert cfg["mode_dims"] == [60, 20, 2]
    assert cfg["inputs"]["holdout"]["fraction"] == 0.2


def test_analyze(tiny, tmp_path):
    pairs = tmp_path / "pairs.tsv"
    pairs.write_text("mode0\tmode1\tlabel\n" + "".join(
        f"{i}\t{j}\t{'competitive' if k < 4 else 'noncompetitive'}\n"
        for k, (i, j) in enumerate([(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7), (7, 8)])))
    out = tmp_path / "an"
    assert main(["analyze", "--summary", str(tiny / "run"), "--top-n", "3", "--tau", "3",
                 "--pairs", str(pairs), "--out", str(out)]) == 0
    dims = load_table(str(out / "divergent-dims.tsv"), {"dim": int, "score": float, "selected": int})
    assert len(dims["dim"]) == 5
    metrics = load_metrics(str(out / "analysis-metrics.tsv"))
    assert metrics["n_divergent"] == sum(dims["selected"])
    if metrics["n_divergent"]:
        chat = load_table(str(out / "chat.tsv"), {"rank": int, "protein": int, "q95": float})
        assert chat["rank"] == list(range(1, 21))
        assert sorted(chat["protein"]) == list(range(20))
        assert chat["q95"] == sorted(chat["q95"], reverse=True)
        tb = load_table(str(out / "chat-top-bottom.tsv"))
        assert tb["list"] == ["top"] * 3 + ["bottom"] * 3
    d = load_metrics(str(out / "discrimination.tsv"))
    assert 0 <= d["p_value"] <= 1


def test_predict(tiny, tmp_path):
    cells = tmp_path / "cells.tsv"
    cells.write_text("mode0\tmode1\tmode2\n0\t0\t1\n59\t19\t0\n")
    out = tmp_path / "p.tsv"
    assert main(["predict", "--summary", str(tiny / "run"), "--cells", str(cells), "--out", str(out)]) == 0
    obs = load_tensor(str(out))
    assert len(obs) == 2 and np.all(np.isfinite(obs.values))


def test_predict_matches_training_predictions(tiny, tmp_path):
    # posterior mean over kept samples reproduces the running mean
    out = tmp_path / "p.tsv"
    assert main(["predict", "--summary", str(tiny / "run"), "--cells",
                 str(tiny / "run" / "test-cells.tsv"), "--out", str(out)]) == 0
    assert read(out) == read(tiny / "run" / "predictions.tsv")


def test_predict_out_of_range_names_cell(tiny, tmp_path, capsys):
    cells = tmp_path / "bad.tsv"
    cells.write_text("mode0\tmode1\tmode2\n0\t0\t0\n60\t3\t1\n")
    assert main(["predict", "--summary", str(tiny / "run"), "--cells", str(cells)]) != 0
    err = capsys.readouterr().err.strip()
    assert "(60, 3, 1)" in err
    assert len(err.splitlines()) == 1


def test_train_seed_byte_identical(tiny, tmp_path):
    outs = []
    for k, threads in enumerate(["1", "1", "4"]):
        out = tmp_path / f"r{k}"
        assert main(["train", "--manifest", str(tiny / "manifest.json"), "--seed", "7",
                     "--threads", threads, "--out", str(out)]) == 0
        outs.append(out)
    for name in ("predictions.tsv", "train-predictions.tsv", "measurement-latents.tsv", "test-metrics.tsv"):
        assert read(outs[0] / name) == read(outs[1] / name) == read(outs[2] / name)


@pytest.mark.parametrize("argv", [
    ["train", "--manifest", "/nonexistent/m.json"],
    ["train", "--manifest", "x", "--threads", "zero"],
    ["frobnicate"],
    ["train", "--manifest", "x", "--bogus"],
])
def test_failures_exit_nonzero(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        sys.exit(main(argv))
    assert exc.value.code != 0
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1 and err.startswith("error")


def test_manifest_validation_failure(tmp_path, capsys):
    (tmp_path / "m.json").write_text(json.dumps({"tensor": "t.tsv"}))
    assert main(["train", "--manifest", str(tmp_path / "m.json")]) == 1
    assert "does not exist" in capsys.readouterr().err


def test_console_script(tmp_path):
    exe = [sys.executable, "-m", "bayestf.cli"]
    r = subprocess.run(exe + ["gen", "--preset", "tiny", "--out", str(tmp_path / "d")],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    r = subprocess.run(exe + ["analyze", "--summary", str(tmp_path / "d")], capture_output=True, text=True)
    assert r.returncode != 0
    assert "run-config missing" in r.stderr
