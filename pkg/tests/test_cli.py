import csv
import json

import pytest

from fairssvae import cli
from fairssvae.training import NumericalError

SMALL = ["--n", "400", "--d", "4", "--epochs", "2", "--mc-samples", "10", "--batch-size", "100"]


def run(*args):
    return cli.main([str(a) for a in args])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- generate

def test_generate_line_count_and_determinism(tmp_path):
    out = tmp_path / "g.csv"
    assert run("generate", "--n", 1000, "--seed", 4, "--out", out) == 0
    first = out.read_bytes()
    assert len(first.decode().splitlines()) == 1001
    assert (tmp_path / "g.schema.json").exists()
    assert run("generate", "--n", 1000, "--seed", 4, "--out", out, "--force") == 0
    assert out.read_bytes() == first


def test_generate_refuses_overwrite(tmp_path, capsys):
    out = tmp_path / "g.csv"
    assert run("generate", "--n", 10, "--out", out) == 0
    assert run("generate", "--n", 10, "--out", out) == 2
    assert "--force" in capsys.readouterr().err


def test_generate_invalid_rho(tmp_path, capsys):
    assert run("generate", "--rho", 2, "--out", tmp_path / "x.csv") == 2
    assert "rho" in capsys.readouterr().err


def test_unknown_flag_and_bad_choice_are_config_errors(tmp_path):
    assert run("generate", "--bogus", 1) == 2
    assert run("train-eval", "--metric", "ratio") == 2


# -------------------------------------------------------------------- mask

def test_mask_writes_masked_copy(tmp_path):
    src = tmp_path / "g.csv"
    run("generate", "--n", 2000, "--out", src)
    out = tmp_path / "m.csv"
    assert run("mask", "--data", src, "--preset", "sparse", "--out", out) == 0
    rows = read_csv(out)
    miss1 = sum(r["a"] == "" for r in rows if r["a_true"] == "1") / sum(r["a_true"] == "1" for r in rows)
    miss0 = sum(r["a"] == "" for r in rows if r["a_true"] == "0") / sum(r["a_true"] == "0" for r in rows)
    assert abs(miss1 - 0.4) < 0.06 and abs(miss0 - 0.8) < 0.06


def test_mask_needs_data(tmp_path):
    assert run("mask", "--preset", "sparse", "--out", tmp_path / "m.csv") == 2


def test_alpha_without_beta_rejected(tmp_path):
    assert run("train-eval", "--alpha", 0.3, "--out", tmp_path / "r") == 2
    assert run("train-eval", "--alpha", 1.3, "--beta", 0.1, "--out", tmp_path / "r") == 2
    assert run("train-eval", "--preset", "sparse", "--alpha", 0.3, "--beta", 0.1, "--out", tmp_path / "r") == 2


# -------------------------------------------------------------- train-eval

def test_missing_data_file_is_data_error(tmp_path):
    assert run("train-eval", "--data", tmp_path / "nope.csv", "--out", tmp_path / "r") == 3


def test_bad_csv_is_data_error(tmp_path):
    data = tmp_path / "bad.csv"
    data.write_text("x,y,a\n1,5,0\n")
    (tmp_path / "bad.schema.json").write_text('{"label": "y", "group": "a", "columns": {"x": "numeric"}}')
    assert run("train-eval", "--data", data, "--out", tmp_path / "r") == 3


def test_sparse_preset_echoed_and_report_sections(tmp_path):
    out = tmp_path / "r"
    assert run("train-eval", *SMALL, "--preset", "sparse", "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    obs = report["observation_model"]
    assert obs["alpha"] == 0.4 and obs["beta"] == 0.8
    assert {"alpha_hat", "beta_hat", "alpha_error", "beta_error", "matrix"} <= set(obs)
    assert {"accuracy", "deo"} <= set(report["test"])
    assert report["data"]["mask"]["preset"] == "sparse"
    assert (out / "checkpoint.json").exists()


def test_lambda_zero_omits_fairness_risk_column(tmp_path):
    run("train-eval", *SMALL, "--lambda", 0, "--out", tmp_path / "a")
    run("train-eval", *SMALL, "--lambda", 1, "--out", tmp_path / "b")
    with open(tmp_path / "a" / "curves.csv") as fh:
        assert next(csv.reader(fh)) == ["epoch", "loss", "elbo", "train_acc", "val_deo"]
    with open(tmp_path / "b" / "curves.csv") as fh:
        assert next(csv.reader(fh)) == ["epoch", "loss", "elbo", "fairness_risk", "train_acc", "val_deo"]
    assert len(read_csv(tmp_path / "b" / "curves.csv")) == 2


def test_train_eval_is_byte_reproducible(tmp_path):
    for d in ("a", "b"):
        assert run("train-eval", *SMALL, "--seed", 7, "--out", tmp_path / d) == 0
    for name in ("report.json", "curves.csv", "checkpoint.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_then_eval_matches_train_eval(tmp_path):
    assert run("train", *SMALL, "--seed", 2, "--out", tmp_path / "m") == 0
    assert {p.name for p in (tmp_path / "m").iterdir()} == {"checkpoint.json", "curves.csv", "run.json"}
    assert run("eval", "--model", tmp_path / "m", "--out", tmp_path / "e") == 0
    assert run("train-eval", *SMALL, "--seed", 2, "--out", tmp_path / "te") == 0
    ev = json.loads((tmp_path / "e" / "report.json").read_text())
    te = json.loads((tmp_path / "te" / "report.json").read_text())
    assert ev["test"] == te["test"]
    assert ev["observation_model"] == te["observation_model"]


def test_eval_needs_model(tmp_path):
    assert run("eval", "--out", tmp_path / "e") == 2
    assert run("eval", "--model", tmp_path / "none", "--out", tmp_path / "e") == 3


def test_csv_input_round_trip(tmp_path):
    data = tmp_path / "g.csv"
    run("generate", "--n", 300, "--d", 3, "--out", data)
    run("mask", "--data", data, "--preset", "dense", "--out", tmp_path / "m.csv")
    out = tmp_path / "r"
    assert run("train-eval", "--data", tmp_path / "m.csv", "--epochs", 1, "--mc-samples", 5, "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["data"]["source"].endswith("m.csv") and report["data"]["mask"] is None


def test_select_reports_grid(tmp_path):
    out = tmp_path / "s"
    assert run("train-eval", *SMALL, "--select", "--out", out) == 0
    sel = json.loads((out / "report.json").read_text())["selection"]
    assert [c["lambda"] for c in sel["candidates"]] == [0.0, 0.1, 1.0, 10.0]
    assert sel["lambda"] in (0.0, 0.1, 1.0, 10.0) and sel["threshold"] > 0


def test_recover_rates(tmp_path):
    out = tmp_path / "rates.json"
    assert run("recover-rates", *SMALL, "--preset", "medium", "--out", out) == 0
    block = json.loads(out.read_text())
    assert block["alpha"] == 0.2 and block["beta"] == 0.4
    assert 0 < block["alpha_hat"] < 1 and 0 < block["beta_hat"] < 1


def test_numeric_failure_exit_code(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericalError("non-finite loss at epoch 0, batch 0")

    monkeypatch.setattr(cli, "train", boom)
    assert run("train-eval", *SMALL, "--out", tmp_path / "r") == 4


# ------------------------------------------------------------ verify-bound

def test_verify_bound_contains_required_n(tmp_path):
    out = tmp_path / "b.csv"
    assert run("verify-bound", "--epsilon", 0.05, "--delta", 0.05, "--repetitions", 200, "--out", out) == 0
    rows = read_csv(out)
    assert list(rows[0]) == ["N", "epsilon", "bound", "empirical_rate"]
    assert [int(r["N"]) for r in rows] == [10, 100, 738, 1000]
    for r in rows:
        # bound is the analytic value; the harness rate gets the documented 2x slack
        assert float(r["empirical_rate"]) <= 2 * float(r["bound"])


def test_verify_bound_custom_n_and_validation(tmp_path):
    out = tmp_path / "b.csv"
    assert run("verify-bound", "--n-values", "50,5", "--repetitions", 10, "--out", out) == 0
    assert [int(r["N"]) for r in read_csv(out)] == [5, 50]
    assert run("verify-bound", "--repetitions", 0, "--out", tmp_path / "c.csv") == 2
    assert run("verify-bound", "--epsilon", 0, "--out", tmp_path / "c.csv") == 2
    assert run("verify-bound", "--delta", 1.5, "--out", tmp_path / "c.csv") == 2
    assert run("verify-bound", "--n-values", "a,b", "--out", tmp_path / "c.csv") == 2


# ----------------------------------------------------------------- config

def test_precedence_flags_over_config_over_defaults(tmp_path):
    conf = tmp_path / "c.toml"
    conf.write_text('epochs = 3\nseed = 9\n[train-eval]\nlambda = 0.0\nmetric = "md"\n[generate]\nn = 7\n')
    cfg = cli.resolve(["train-eval", "--config", str(conf), "--lambda", "0.5"])
    assert cfg["lambda"] == 0.5          # flag
    assert cfg["epochs"] == 3 and cfg["seed"] == 9 and cfg["metric"] == "md"   # config
    assert cfg["n"] == cli.DEFAULTS["n"]  # other command's table ignored
    assert cfg["mc_samples"] == cli.DEFAULTS["mc_samples"]


@pytest.mark.parametrize("text", ["epochz = 3\n", "[trian]\nx = 1\n", "epochs = [\n"])
def test_bad_config_is_config_error(tmp_path, text):
    conf = tmp_path / "c.toml"
    conf.write_text(text)
    assert run("train-eval", "--config", conf) == 2


def test_missing_config_file(tmp_path):
    assert run("train-eval", "--config", tmp_path / "none.toml") == 2
