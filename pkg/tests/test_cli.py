import csv

import pytest

from scalecal.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main, parse_config_file, resolve_config

TINY = ["--synthetic", "--synthetic-count", "32", "--synthetic-test-count", "20", "--epochs", "1",
        "--depth", "8", "--width", "0.25", "--batch-size", "16", "--deterministic"]


@pytest.fixture(scope="module")
def sbn_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("sbn")
    assert main(["train", *TINY, "--norm", "sbn", "--out-dir", str(out)]) == EXIT_OK
    return out


def test_train_outputs_and_config_echo(sbn_run):
    assert {"model.ckpt", "metrics.csv", "config.txt", "sct_config.json", "test_accuracy.csv"} <= {
        p.name for p in sbn_run.iterdir()}
    echoed = parse_config_file(sbn_run / "config.txt")
    assert echoed["norm"] == "sbn" and echoed["epochs"] == "1" and echoed["scheme"] == "cifar-32-16"
    # The echoed file alone resolves back to the same run configuration.
    assert resolve_config(str(sbn_run / "config.txt"), {})["width"] == 0.25


def test_echoed_config_reproduces_metrics(sbn_run, tmp_path):
    again = tmp_path / "again"
    assert main(["train", "--config", str(sbn_run / "config.txt"), "--out-dir", str(again)]) == EXIT_OK
    assert (again / "metrics.csv").read_bytes() == (sbn_run / "metrics.csv").read_bytes()


def test_config_file_then_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nepochs = 7\nbatch-size = 32\nschedule = cosine\n")
    resolved = resolve_config(str(cfg), {"epochs": "2"})
    assert (resolved["epochs"], resolved["batch_size"], resolved["schedule"]) == (2, 32, "cosine")


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epochs = 1\nlearning_rate = 0.1\n")
    assert main(["train", "--config", str(cfg), "--synthetic"]) == EXIT_USAGE
    assert "learning_rate" in capsys.readouterr().err


def test_usage_errors_exit_one(capsys):
    assert main(["train", "--no-such-flag"]) == EXIT_USAGE
    assert main(["train", "--synthetic", "--depth", "10"]) == EXIT_USAGE
    assert main(["train", "--synthetic", "--norm", "sbn", "--alphas", "1.0"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_missing_data_dir_names_path(tmp_path, capsys):
    missing = tmp_path / "no-cifar-here"
    assert main(["train", "--data-dir", str(missing)]) != EXIT_OK
    assert str(missing) in capsys.readouterr().err


def test_eval_rows_banks_and_row_errors(sbn_run, capsys):
    ckpt = str(sbn_run / "model.ckpt")
    out = sbn_run / "eval.csv"
    assert main(["eval", ckpt, "--synthetic", "--test-size", "16", "16"]) == EXIT_OK
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 1 and rows[0]["bank"] == "1"
    first = out.read_bytes()
    assert main(["eval", ckpt, "--synthetic", "--test-size", "16", "16"]) == EXIT_OK
    assert out.read_bytes() == first

    code = main(["eval", ckpt, "--synthetic", "--test-size", "32", "32", "--test-size", "24", "24",
                 "--test-size", "16", "16"])
    rows = list(csv.DictReader(open(out)))
    assert code == EXIT_RUNTIME and len(rows) == 3
    assert rows[0]["accuracy"] and rows[2]["accuracy"] and not rows[1]["accuracy"]
    assert "registered scales" in rows[1]["error"]

    assert main(["eval", ckpt, "--synthetic", "--test-size", "24", "24", "--nearest-bank"]) == EXIT_OK
    assert list(csv.DictReader(open(out)))[0]["bank"] == "0"


def test_eval_needs_sizes(sbn_run):
    assert main(["eval", str(sbn_run / "model.ckpt"), "--synthetic"]) == EXIT_USAGE


def test_probe_and_plotdata(sbn_run, tmp_path):
    ckpt = str(sbn_run / "model.ckpt")
    assert main(["probe", ckpt, "--synthetic", "--slice-size", "8", "--out-dir", str(tmp_path / "p")]) == EXIT_OK
    dist = list(csv.DictReader(open(tmp_path / "p" / "distributions.csv")))
    div = list(csv.DictReader(open(tmp_path / "p" / "divergence.csv")))
    assert len({(r["stage"], r["scale"]) for r in dist}) == 6
    assert sorted(r["metric"] for r in div) == ["sym-kl"] * 3 + ["w1"] * 3
    first = (tmp_path / "p" / "divergence.csv").read_bytes()
    assert main(["probe", ckpt, "--synthetic", "--slice-size", "8", "--out-dir", str(tmp_path / "p")]) == EXIT_OK
    assert (tmp_path / "p" / "divergence.csv").read_bytes() == first
    assert main(["probe", ckpt, "--synthetic", "--slice-size", "0"]) == EXIT_USAGE

    overlay = tmp_path / "overlay.csv"
    assert main(["plotdata", str(tmp_path / "p" / "distributions.csv"), "--rebin", "4", "--out", str(overlay)]) == EXIT_OK
    rows = list(csv.reader(open(overlay)))
    assert rows[0] == ["stage", "bin_center", "density_scale_0", "density_scale_1"] and len(rows) == 1 + 3 * 16


def test_selftest_passes_and_detects_injected_fault(capsys):
    assert main(["selftest"]) == EXIT_OK
    assert "FAIL" not in capsys.readouterr().out
    assert main(["selftest", "--break", "bn-eps"]) == 1
    out = capsys.readouterr().out
    assert "FAIL  norm/bn-train-statistics" in out and out.count("FAIL") == 1
    assert main(["selftest", "--break", "nonsense"]) == EXIT_USAGE
