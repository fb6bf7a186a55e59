"""Command-line entry point.

Commands: generate, mask, train, eval, train-eval, verify-bound,
recover-rates.  Settings resolve as flags > TOML config (``--config``) >
built-in defaults.  A config file holds top-level keys shared by every
command plus optional tables named after a command, e.g. ``[train-eval]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import (DEFAULT_LABEL_MISSING, PRESETS, DataError, MaskSpec, Standardizer, SyntheticSpec,
                   apply_mask, generate_synthetic, load_csv, load_schema, save_csv, split)
from .fairness import (METRIC_CODES, PredictionBatch, bound_fixture, concentration_harness,
                       empirical_metric, hoeffding_bound, metric_bound, required_sample_size)
from .observation import InconsistentObservation
from .training import (Candidate, NumericalError, TrainConfig, evaluate, extract_rates, init_model,
                       label_test_set, select_model, train)

log = logging.getLogger("fairssvae")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
LAMBDA_GRID = (0.0, 0.1, 1.0, 10.0)
CURVE_COLUMNS = ("epoch", "loss", "elbo", "fairness_risk", "train_acc", "val_deo")


class ConfigError(Exception):
    pass


DEFAULTS = {
    "seed": 0, "out": None, "force": False, "config": None, "verbose": False,
    # synthetic data
    "n": 5000, "d": 10, "balance": 0.5, "rho": 0.4, "class_shift": 1.5, "group_shift": 1.0,
    "group_bias": 0.5,
    # data source and masking
    "data": None, "schema": None, "preset": None, "alpha": None, "beta": None,
    "label_missing": DEFAULT_LABEL_MISSING,
    # training
    "lambda": 1.0, "metric": "deo", "mc_samples": 100, "epochs": 40, "lr": 1e-3,
    "batch_size": 128, "risk": "final", "select": False, "model": None,
    # bound verification
    "epsilon": 0.05, "delta": 0.05, "repetitions": 1000, "n_values": None,
}

# the bound check defaults to a metric with C = 1
COMMAND_DEFAULTS = {"verify-bound": {"metric": "md"}}

COMMANDS = ("generate", "mask", "train", "eval", "train-eval", "verify-bound", "recover-rates")


# ------------------------------------------------------------------ parsing

def _flag(p, name, **kw):
    p.add_argument("--" + name.replace("_", "-"), dest=name, default=argparse.SUPPRESS, **kw)


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="fairssvae", description=__doc__.split("\n\n")[0])
    sub = top.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        p = sub.add_parser(cmd)
        _flag(p, "config", help="TOML configuration file")
        _flag(p, "seed", type=int)
        _flag(p, "out", help="output file or directory")
        _flag(p, "force", action="store_true", help="overwrite existing outputs")
        _flag(p, "verbose", action="store_true")
        if cmd in ("generate", "train", "eval", "train-eval", "recover-rates"):
            for name, typ in (("n", int), ("d", int), ("balance", float), ("rho", float),
                              ("class_shift", float), ("group_shift", float), ("group_bias", float)):
                _flag(p, name, type=typ, help="synthetic generator setting")
        if cmd in ("mask", "train", "eval", "train-eval", "recover-rates"):
            _flag(p, "data", help="CSV file (synthetic data when omitted)")
            _flag(p, "schema", help="JSON/TOML schema (default: <data>.schema.json)")
            _flag(p, "preset", choices=sorted(PRESETS))
            _flag(p, "alpha", type=float, help="missing rate of group 1")
            _flag(p, "beta", type=float, help="missing rate of group 0")
            _flag(p, "label_missing", type=float)
        if cmd in ("train", "eval", "train-eval", "recover-rates"):
            _flag(p, "lambda", type=float, help="fairness weight")
            _flag(p, "metric", choices=sorted(METRIC_CODES))
            _flag(p, "mc_samples", type=int)
            _flag(p, "epochs", type=int)
            _flag(p, "lr", type=float)
            _flag(p, "batch_size", type=int)
            _flag(p, "risk", choices=("final", "vanilla"))
        if cmd == "train-eval":
            _flag(p, "select", action="store_true", help="select lambda from the grid 0, 0.1, 1, 10")
        if cmd == "eval":
            _flag(p, "model", help="directory written by the train command")
        if cmd == "verify-bound":
            _flag(p, "epsilon", type=float)
            _flag(p, "delta", type=float)
            _flag(p, "repetitions", type=int)
            _flag(p, "metric", choices=sorted(METRIC_CODES))
            _flag(p, "n_values", help="comma-separated sample sizes (default: 10,100,1000 and the required N)")
    return top


def _read_config(path, command) -> dict:
    try:
        import tomllib
    except ImportError:  # Python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out = {k.replace("-", "_"): v for k, v in raw.items() if not isinstance(v, dict)}
    for key, table in raw.items():
        if isinstance(table, dict):
            if key not in COMMANDS:
                raise ConfigError(f"{path}: unknown table [{key}]")
            if key == command:
                out.update({k.replace("-", "_"): v for k, v in table.items()})
    unknown = sorted(set(out) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    return out


def resolve(argv=None) -> dict:
    ns = vars(build_parser().parse_args(argv))
    command = ns.pop("command")
    cfg = dict(DEFAULTS)
    cfg.update(COMMAND_DEFAULTS.get(command, {}))
    if "config" in ns:
        cfg.update(_read_config(ns["config"], command))
    cfg.update(ns)
    cfg["command"] = command
    _validate(cfg)
    return cfg


def _validate(cfg):
    if cfg["metric"] not in METRIC_CODES:
        raise ConfigError(f"unknown metric {cfg['metric']!r}")
    if cfg["preset"] is not None and cfg["preset"] not in PRESETS:
        raise ConfigError(f"unknown preset {cfg['preset']!r}")
    if (cfg["alpha"] is None) != (cfg["beta"] is None):
        raise ConfigError("--alpha and --beta must be given together")
    if cfg["preset"] is not None and cfg["alpha"] is not None:
        raise ConfigError("give either --preset or --alpha/--beta, not both")
    for name in ("alpha", "beta", "label_missing"):
        v = cfg[name]
        if v is not None and not 0 <= v <= 1:
            raise ConfigError(f"{name} must lie in [0, 1]")
    for name in ("epochs", "mc_samples", "batch_size", "n", "d"):
        if int(cfg[name]) < 1:
            raise ConfigError(f"{name} must be positive")
    if cfg["lambda"] < 0 or cfg["lr"] <= 0:
        raise ConfigError("lambda must be nonnegative and lr positive")
    if cfg["command"] == "verify-bound":
        if not 0 < cfg["epsilon"] or not 0 < cfg["delta"] < 1:
            raise ConfigError("need epsilon > 0 and 0 < delta < 1")
        if int(cfg["repetitions"]) < 1:
            raise ConfigError("repetitions must be >= 1")


# ---------------------------------------------------------------- utilities

def _claim(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _out_dir(cfg, default) -> Path:
    return Path(cfg["out"] or default)


def _write_json(path: Path, obj, force):
    with open(_claim(path, force), "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_curve(path: Path, curve, lam, force, metric="deo"):
    cols = [c for c in CURVE_COLUMNS if not (c == "fairness_risk" and lam == 0)]
    src = {"val_deo": "val_" + metric}
    with open(_claim(path, force), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in curve:
            w.writerow([_fmt(row.get(src.get(c, c))) for c in cols])


def _schema_path(data: Path) -> Path:
    return data.with_name(data.stem + ".schema.json")


def _mask_spec(cfg):
    if cfg["preset"] is not None:
        return MaskSpec.preset(cfg["preset"], cfg["label_missing"], cfg["seed"])
    if cfg["alpha"] is not None:
        return MaskSpec(cfg["alpha"], cfg["beta"], cfg["label_missing"], cfg["seed"])
    return None


def _synthetic_spec(cfg):
    spec = SyntheticSpec(n=int(cfg["n"]), d=int(cfg["d"]), balance=cfg["balance"], rho=cfg["rho"],
                         class_shift=cfg["class_shift"], group_shift=cfg["group_shift"],
                         group_bias=cfg["group_bias"], seed=cfg["seed"])
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return spec


def _load_source(cfg):
    data = cfg["data"]
    if data is None:
        return generate_synthetic(_synthetic_spec(cfg)), "synthetic"
    path = Path(data)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    schema_file = Path(cfg["schema"]) if cfg["schema"] else _schema_path(path)
    if not schema_file.exists():
        raise DataError(f"schema file not found: {schema_file}")
    try:
        schema = load_schema(schema_file)
    except ValueError as exc:
        raise DataError(f"{schema_file}: {exc}") from None
    return load_csv(path, schema, normalize=False), str(path)


def prepare(cfg):
    """Load or generate data, mask it, split it and z-score it with
    training statistics.  Returns (train, val, test, info)."""
    ds, source = _load_source(cfg)
    spec = _mask_spec(cfg)
    if spec is None and source == "synthetic":
        spec = MaskSpec.preset("medium", cfg["label_missing"], cfg["seed"])
    if spec is not None:
        ds = apply_mask(ds, spec)
    train_ds, val_ds, test_ds = split(ds, seed=cfg["seed"])
    if source == "synthetic":
        st = Standardizer.fit(train_ds.x)
    else:
        # numeric columns only; one-hot blocks stay 0/1
        numeric_cols = {name for name, kind in ds.columns if kind == "numeric"}
        numeric = np.array([nm in numeric_cols for nm in ds.feature_names], dtype=bool)
        st = Standardizer.fit(train_ds.x, numeric)
    train_ds, val_ds, test_ds = (st.transform(d) for d in (train_ds, val_ds, test_ds))
    info = {"source": source, "n_train": len(train_ds), "n_val": len(val_ds), "n_test": len(test_ds),
            "mask": None if spec is None else {"alpha": spec.alpha, "beta": spec.beta,
                                               "label_missing": spec.label_rate,
                                               "preset": cfg["preset"] or (None if cfg["alpha"] is not None
                                                                           else "medium")}}
    return train_ds, val_ds, test_ds, info


def train_config(cfg, lam=None) -> TrainConfig:
    return TrainConfig(lam=cfg["lambda"] if lam is None else lam, lr=cfg["lr"], epochs=int(cfg["epochs"]),
                       batch_size=int(cfg["batch_size"]), mc_samples=int(cfg["mc_samples"]),
                       seed=cfg["seed"], metric=cfg["metric"], risk=cfg["risk"])


def _rates_block(model, info):
    rates = extract_rates(model)
    out = {"mode": rates["mode"], "alpha_hat": rates["alpha"], "beta_hat": rates["beta"],
           "matrix": model.group_channel.to_dict()["matrix"]}
    if info["mask"] is not None:
        out["alpha"] = info["mask"]["alpha"]
        out["beta"] = info["mask"]["beta"]
        out["alpha_error"] = abs(rates["alpha"] - out["alpha"])
        out["beta_error"] = abs(rates["beta"] - out["beta"])
    return out


def _report(cfg, model, curve, val, test, info, tcfg):
    metric = tcfg.metric
    test_eval = evaluate(model, test, metric)
    labels, lab_info = label_test_set(model, test, metric, tcfg.mc_samples, tcfg.seed)
    relabel = {"accuracy": float(np.mean(labels == test.y_true)), "flips": lab_info["flips"],
               "passes": lab_info["passes"], "thresholds": list(lab_info["thresholds"])}
    relabel[metric] = empirical_metric(PredictionBatch(labels.astype(float), test.y_true, test.a_true),
                                       metric).item()
    return {
        "command": cfg["command"], "seed": cfg["seed"], "config": tcfg.to_dict(), "data": info,
        "test": test_eval, "validation": evaluate(model, val, metric),
        "observation_model": _rates_block(model, info), "test_time_labeling": relabel,
        "curve": curve,
    }


def _fit(cfg, train_ds, val_ds, lam=None):
    tcfg = train_config(cfg, lam)
    result = train(train_ds.training_view(), tcfg, validation=val_ds)
    return result, tcfg


# ----------------------------------------------------------------- commands

def cmd_generate(cfg):
    spec = _synthetic_spec(cfg)
    out = Path(cfg["out"] or "synthetic.csv")
    _claim(out, cfg["force"])
    _claim(_schema_path(out), cfg["force"])
    save_csv(generate_synthetic(spec), out, _schema_path(out))
    return f"wrote {out}"


def cmd_mask(cfg):
    if cfg["data"] is None:
        raise ConfigError("mask needs --data")
    spec = _mask_spec(cfg) or MaskSpec.preset("medium", cfg["label_missing"], cfg["seed"])
    ds, _ = _load_source(cfg)
    masked = apply_mask(ds, spec)
    out = Path(cfg["out"] or Path(cfg["data"]).with_name(Path(cfg["data"]).stem + ".masked.csv"))
    _claim(out, cfg["force"])
    _claim(_schema_path(out), cfg["force"])
    save_csv(masked, out, _schema_path(out))
    return f"wrote {out}"


def cmd_train(cfg):
    train_ds, val_ds, _, info = prepare(cfg)
    result, tcfg = _fit(cfg, train_ds, val_ds)
    out = _out_dir(cfg, "run")
    ad.save_checkpoint(result.model.params, _claim(out / "checkpoint.json", cfg["force"]))
    write_curve(out / "curves.csv", result.curve, tcfg.lam, cfg["force"], tcfg.metric)
    run = {k: v for k, v in cfg.items() if k not in ("force", "config", "out", "verbose", "model")}
    _write_json(out / "run.json", run, cfg["force"])
    return f"wrote {out}"


def cmd_eval(cfg):
    if cfg["model"] is None:
        raise ConfigError("eval needs --model (a directory written by train)")
    mdir = Path(cfg["model"])
    try:
        run = json.loads((mdir / "run.json").read_text())
        state = ad.load_checkpoint(mdir / "checkpoint.json")
    except FileNotFoundError as exc:
        raise DataError(f"model directory incomplete: {exc.filename}") from None
    saved = dict(DEFAULTS)
    saved.update(run)
    saved.update(command="eval", out=cfg["out"], force=cfg["force"])
    if cfg["metric"] != DEFAULTS["metric"]:
        saved["metric"] = cfg["metric"]
    train_ds, val_ds, test_ds, info = prepare(saved)
    tcfg = train_config(saved)
    model = init_model(train_ds.training_view(), tcfg)
    model.load_state_dict(state)
    report = _report(saved, model, [], val_ds, test_ds, info, tcfg)
    _write_json(_out_dir(cfg, "eval") / "report.json", report, cfg["force"])
    return json.dumps(report["test"], sort_keys=True)


def cmd_train_eval(cfg):
    train_ds, val_ds, test_ds, info = prepare(cfg)
    out = _out_dir(cfg, "run")
    selection = None
    if cfg["select"]:
        candidates, results = [], {}
        for lam in LAMBDA_GRID:
            result, tcfg = _fit(cfg, train_ds, val_ds, lam)
            results[lam] = (result, tcfg)
            candidates.append(Candidate(lam, evaluate(result.model, val_ds, tcfg.metric)[tcfg.metric],
                                        result.curve[-1]["train_acc"]))
        chosen, threshold = select_model(candidates, results[0.0][0].curve[-1]["train_acc"])
        result, tcfg = results[chosen.lam]
        selection = {"threshold": threshold, "lambda": chosen.lam,
                     "candidates": [{"lambda": c.lam, "val_metric": c.val_deo, "train_acc": c.train_acc}
                                    for c in candidates]}
    else:
        result, tcfg = _fit(cfg, train_ds, val_ds)
    report = _report(cfg, result.model, result.curve, val_ds, test_ds, info, tcfg)
    report["empty_cell_events"] = result.empty_cell_events
    if selection is not None:
        report["selection"] = selection
    _write_json(out / "report.json", report, cfg["force"])
    write_curve(out / "curves.csv", result.curve, tcfg.lam, cfg["force"], tcfg.metric)
    ad.save_checkpoint(result.model.params, _claim(out / "checkpoint.json", cfg["force"]))
    return json.dumps(report["test"], sort_keys=True)


def cmd_recover_rates(cfg):
    train_ds, val_ds, _, info = prepare(cfg)
    result, _ = _fit(cfg, train_ds, val_ds)
    block = _rates_block(result.model, info)
    block["seed"] = cfg["seed"]
    _write_json(_out_dir(cfg, "rates.json"), block, cfg["force"])
    return json.dumps(block, sort_keys=True)


def cmd_verify_bound(cfg):
    eps, delta = cfg["epsilon"], cfg["delta"]
    metric = cfg["metric"]
    C = metric_bound(metric)
    required = required_sample_size(C, eps, delta)
    if cfg["n_values"]:
        try:
            ns = sorted({int(v) for v in str(cfg["n_values"]).split(",") if v.strip()})
        except ValueError:
            raise ConfigError(f"bad --n-values {cfg['n_values']!r}") from None
        if not ns or ns[0] < 1:
            raise ConfigError("sample sizes must be positive")
    else:
        ns = sorted({10, 100, 1000, required})
    post, p = bound_fixture()
    out = Path(cfg["out"] or "bound.csv")
    rows = []
    for N in ns:
        rate = concentration_harness(post, p, metric, eps, delta, int(cfg["repetitions"]), N, C,
                                     seed=cfg["seed"])
        rows.append((N, eps, hoeffding_bound(N, eps, C), rate))
    with open(_claim(out, cfg["force"]), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("N", "epsilon", "bound", "empirical_rate"))
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return f"required N = {required}; wrote {out}"


HANDLERS = {"generate": cmd_generate, "mask": cmd_mask, "train": cmd_train, "eval": cmd_eval,
            "train-eval": cmd_train_eval, "verify-bound": cmd_verify_bound,
            "recover-rates": cmd_recover_rates}


def main(argv=None) -> int:
    try:
        cfg = resolve(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if cfg["verbose"] else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        msg = HANDLERS[cfg["command"]](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError, ad.DomainError, InconsistentObservation) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if msg:
        print(msg)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
