import json

import pytest
from click.testing import CliRunner

from bmm_augment.cli import main
from bmm_augment.dataset import read_dataset
from bmm_augment.mixture import load_model


@pytest.fixture
def run(tmp_path):
    runner = CliRunner()

    def invoke(*args):
        result = runner.invoke(main, ["--out-dir", str(tmp_path), *map(str, args)])
        assert result.exit_code == 0, result.output
        return result.output
    return invoke


def test_split_fit_purity(run, tiny_prefix, tmp_path):
    run("split", "--data", tiny_prefix, "--total", 20, "--train", 14, "--validation", 6)
    assert read_dataset(tmp_path / "train")[0].n == 14
    assert read_dataset(tmp_path / "val")[1].n == 6

    out = json.loads(run("fit", "--data", tiny_prefix, "--k", 3, "--seed", 1))
    assert out["K"] == 3 and load_model(tmp_path / "model.bmm").K == 3

    run("purity", "--model", tmp_path / "model.bmm", "--data", tiny_prefix)
    lines = (tmp_path / "purity.csv").read_text().splitlines()
    assert lines[0].startswith("component_id,size,purity,majority_label") and len(lines) == 4


def test_sweep_k(run, tiny_prefix, tmp_path):
    out = run("sweep-k", "--data", tiny_prefix, "--k-grid", "1:3", "--seeds", "0,1",
              "--model-out", tmp_path / "best.bmm")
    assert out.startswith("best K = ")
    rows = (tmp_path / "aic_selection.csv").read_text().splitlines()
    assert rows[0] == "k,seed,loglik,eta,aic_score" and len(rows) == 7
    assert (tmp_path / "best.bmm").exists()


def test_synthesize_and_cases(run, tiny_prefix, tmp_path):
    run("fit", "--data", tiny_prefix, "--k", 2)
    out = run("synthesize", "--model", tmp_path / "model.bmm", "--data", tiny_prefix,
              "--min-purity", 0, "--min-size", 2, "--target-label", -1, "--n-per-sublabel", 3)
    assert "synthetic digits" in out
    synth_images, synth_labels = read_dataset(tmp_path / "synthetic")
    assert synth_images.n == synth_labels.n and synth_images.n % 3 == 0

    run("split", "--data", tiny_prefix, "--total", 10, "--train", 10, "--validation", 0)
    run("assemble-cases", "--real", tmp_path / "train", "--synthetic", tmp_path / "synthetic",
        "--source", tiny_prefix, "--offset", 20 - synth_images.n)
    sizes = {cid: read_dataset(tmp_path / cid)[0].n for cid in "ABC"}
    assert sizes == {"A": 10, "B": 10 + synth_images.n, "C": 10 + synth_images.n}


def test_classifiers(run, tiny_prefix, tmp_path):
    run("split", "--data", tiny_prefix, "--total", 20, "--train", 14, "--validation", 6)
    train, val = tmp_path / "train", tmp_path / "val"
    assert "error" in run("train-knn", "--train", train, "--val", val, "--k", 1)
    run("train-knn", "--train", train, "--val", val, "--k-grid", "1:3", "--seeds", "0,1")
    run("train-mln", "--train", train, "--val", val, "--epochs", 2, "--batch-size", 5)
    assert len((tmp_path / "mln_history.csv").read_text().splitlines()) == 3
    run("bias-variance", "--algorithm", "knn", "--train", train, "--val", val, "--seeds", "0:2")
    run("compare-cases", "--cases-dir", _cases(run, tiny_prefix, tmp_path), "--eval", val,
        "--algorithms", "knn", "--seeds", "0,1", "--k", 1)
    rows = (tmp_path / "case_comparison.csv").read_text().splitlines()
    assert rows[0].startswith("case,algorithm,seed,total_errors") and len(rows) == 1 + 3 * 2


def _cases(run, tiny_prefix, tmp_path):
    run("fit", "--data", tmp_path / "train", "--k", 1)
    run("synthesize", "--model", tmp_path / "model.bmm", "--data", tmp_path / "train",
        "--min-purity", 0, "--min-size", 1, "--target-label", -1, "--n-per-sublabel", 2)
    cases = tmp_path / "cases"
    cases.mkdir()
    CliRunner().invoke(main, ["--out-dir", str(cases), "assemble-cases", "--real",
                              str(tmp_path / "train"), "--synthetic", str(tmp_path / "synthetic"),
                              "--source", str(tiny_prefix), "--offset", "14"], catch_exceptions=False)
    return cases


def test_pipeline_command(tiny_prefix, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"train_data = {tiny_prefix}\ntotal = 12\ntrain = 8\nvalidation = 4\n"
                   "k_grid = 1\nmin_size = 1\nmin_purity = 0\nn_per_sublabel = 2\n"
                   "knn_k_grid = 1\nclassifier_seeds = 0,1\nepochs = 1\nbatch_size = 4\n")
    result = CliRunner().invoke(main, ["--out-dir", str(tmp_path / "out"), "pipeline",
                                       "--config", str(cfg)])
    assert result.exit_code == 0, result.output
    assert json.loads((tmp_path / "out" / "manifest.json").read_text())["status"] == "ok"


def test_errors_become_clean_messages(tmp_path):
    bad = tmp_path / "bad-images-idx3-ubyte"
    bad.write_bytes(b"\x00\x00\x08\x01" + b"\x00" * 12)
    (tmp_path / "bad-labels-idx1-ubyte").write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x00")
    result = CliRunner().invoke(main, ["fit", "--data", str(tmp_path / "bad"), "--k", 2])
    assert result.exit_code != 0 and "magic" in result.output
    assert "Traceback" not in result.output


def test_config_keys_route_per_command(tiny_prefix, tmp_path):
    from bmm_augment.cli import _command_defaults

    flat = {"k_grid": "10:40:15", "knn_k_grid": "1:3", "em_seeds": "0,1",
            "classifier_seeds": "0:9", "lr": "0.1"}
    assert _command_defaults("train-knn", flat)["k_grid"] == "1:3"
    assert _command_defaults("sweep-k", flat)["seeds"] == "0,1"
    assert _command_defaults("compare-cases", flat)["seeds"] == "0:9"
    assert "k_grid" not in _command_defaults("train-mln", flat)

    cfg = tmp_path / "c.cfg"
    cfg.write_text("k_grid = 1:2\nem_seeds = 3\n")
    result = CliRunner().invoke(main, ["--config", str(cfg), "--out-dir", str(tmp_path),
                                       "sweep-k", "--data", str(tiny_prefix)])
    assert result.exit_code == 0, result.output
    rows = (tmp_path / "aic_selection.csv").read_text().splitlines()[1:]
    assert [r.split(",")[:2] for r in rows] == [["1", "3"], ["2", "3"]]
