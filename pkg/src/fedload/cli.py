"""Command-line front end.

Every subcommand reads an optional YAML config (``--config``); command-line
flags override config values, which override the built-in defaults below.
Without ``data.paths`` the commands synthesize households from
``data.scenario``, so each one also runs standalone.
"""
from __future__ import annotations

import argparse
import copy
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import yaml

from .data import (
    HouseholdDataset,
    PowerTrace,
    SplitSpec,
    SynthConfig,
    atomic_write_text,
    demo_appliances,
    duty_cycle_household,
    load_house,
    read_dataset_csv,
    synth_household,
    write_dataset_csv,
)
from .experiments import (
    COMPARE_MODELS,
    ExperimentSpec,
    comparison_csv,
    comparison_loss_csv,
    compare_models,
    evaluate_forecasters,
    household_view,
    metrics_csv,
    nilm_estimates,
    read_prediction_csv,
    run_experiment,
    train_forecasters,
)
from .federated import Client, FederatedConfig, robustness_sweep, write_sweep
from .metrics import MetricsReport
from .models import DisaggConfig, ForecastConfig, load_checkpoint, save_checkpoint

SCENARIOS = ("duty-cycle", "demo")


def _dataclass_defaults(cls, skip=("seed",)):
    return {f.name: f.default for f in fields(cls) if f.name not in skip}


DEFAULTS = {
    "seed": 0,
    "out_dir": "fedload-out",
    "data": {"paths": [], "scenario": "duty-cycle", "households": 5, "length": 700,
             "appliances": None, "max_ffill": 180},
    "split": {"train_minutes": 60, "test_minutes": 10},
    "forecast": _dataclass_defaults(ForecastConfig, skip=("seed", "kind")),
    "federated": {"rounds": 20, "local_epochs": 5, "client_fraction": 1.0, "weighting": "uniform"},
    "experiment": {"mode": "integrated", "training": "centralized", "model": "bilstm_attention",
                   "nilm": False, "epochs": 20, "household": None},
    "disagg": {**_dataclass_defaults(DisaggConfig), "epochs": 10, "stride": 1},
    "sweep": {"local_epochs": [5, 50, 80], "client_fractions": [0.5, 1.0], "rounds": 3, "channel": "aggregate"},
    "compare": {"models": list(COMPARE_MODELS)},
    "checkpoints": None,
    "predictions": None,
}


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------

def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{where}{k}"
        if k not in base:
            raise CliError(f"config: unknown key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise CliError(f"config: {key!r} must be a mapping")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults <- YAML file <- dotted-key overrides (e.g. ``{"federated.rounds": 3}``)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise CliError(f"config: {path} must hold a mapping at the top level")
        cfg = _merge(cfg, doc)
    nested: dict = {}
    for dotted, v in (overrides or {}).items():
        *parents, leaf = dotted.split(".")
        d = nested
        for p in parents:
            d = d.setdefault(p, {})
        d[leaf] = v
    return _merge(cfg, nested)


def forecast_config(cfg: dict) -> ForecastConfig:
    return ForecastConfig(seed=int(cfg["seed"]), **cfg["forecast"])


def federated_config(cfg: dict) -> FederatedConfig:
    f = cfg["federated"]
    return FederatedConfig(rounds=int(f["rounds"]), local_epochs=int(f["local_epochs"]),
                           client_fraction=float(f["client_fraction"]), seed=int(cfg["seed"]),
                           forecast=forecast_config(cfg), weighting=f["weighting"])


def disagg_config(cfg: dict) -> DisaggConfig:
    d = {k: v for k, v in cfg["disagg"].items() if k not in ("epochs", "stride")}
    return DisaggConfig(seed=int(cfg["seed"]), **d)


def experiment_spec(cfg: dict, **overrides) -> ExperimentSpec:
    e = {**cfg["experiment"], **overrides}
    fc = forecast_config(cfg)
    return ExperimentSpec(
        mode=e["mode"], training=e["training"], model=e["model"], nilm=bool(e["nilm"]), forecast=fc,
        federated=federated_config(cfg), epochs=int(e["epochs"]), split=SplitSpec(**cfg["split"]),
        disagg=disagg_config(cfg), disagg_epochs=int(cfg["disagg"]["epochs"]),
        disagg_stride=int(cfg["disagg"]["stride"]), household=e["household"],
        out_dir=e.get("out_dir", cfg["out_dir"]),
    )


# --------------------------------------------------------------------------
# data sources
# --------------------------------------------------------------------------

def synthesize(cfg: dict) -> list[HouseholdDataset]:
    d = cfg["data"]
    if d["scenario"] not in SCENARIOS:
        raise CliError(f"data.scenario: must be one of {SCENARIOS}")
    seed, out = int(cfg["seed"]), []
    for i in range(int(d["households"])):
        hid = f"house{i + 1}"
        if d["scenario"] == "duty-cycle":
            out.append(duty_cycle_household(seed + i, int(d["length"]), household_id=hid))
        else:
            out.append(synth_household(SynthConfig(demo_appliances(), int(d["length"]), seed=seed + i,
                                                   household_id=hid)))
    return out


def load_households(cfg: dict) -> list[HouseholdDataset]:
    d = cfg["data"]
    if not d["paths"]:
        return synthesize(cfg)
    out = []
    for p in d["paths"]:
        p = Path(p)
        if p.is_dir():
            out.append(load_house(p, d["appliances"], max_ffill=int(d["max_ffill"])))
        elif p.is_file():
            out.append(read_dataset_csv(p))
        else:
            raise CliError(f"data.paths: {p} does not exist")
    return out


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def _out(cfg: dict) -> Path:
    p = Path(cfg["out_dir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_synth(cfg):
    out = _out(cfg)
    paths = []
    for ds in synthesize(cfg):
        p = out / f"{ds.household_id}.csv"
        write_dataset_csv(ds, p)
        paths.append(p)
    return paths


def cmd_ingest(cfg):
    d = cfg["data"]
    if not d["paths"]:
        raise CliError("data.paths: give one or more UK-DALE house directories with --data")
    out = _out(cfg)
    paths = []
    for p in d["paths"]:
        if not Path(p).is_dir():
            raise CliError(f"data.paths: {p} is not a directory")
        ds = load_house(p, d["appliances"], max_ffill=int(d["max_ffill"]))
        dst = out / f"{ds.household_id}.csv"
        write_dataset_csv(ds, dst)
        paths.append(dst)
    return paths


def cmd_disaggregate(cfg):
    out = _out(cfg)
    dcfg = disagg_config(cfg)
    split = SplitSpec(**cfg["split"])
    paths = []
    for ds in load_households(cfg):
        n_train, _ = split.sample_counts(ds.period)
        est, models = nilm_estimates(ds, dcfg, n_train, int(cfg["disagg"]["epochs"]), int(cfg["disagg"]["stride"]))
        a = ds.aggregate
        nilm = HouseholdDataset(ds.household_id, a, {k: PowerTrace(a.start_time, a.period, v) for k, v in est.items()})
        p = out / f"{ds.household_id}_nilm.csv"
        write_dataset_csv(nilm, p)
        paths.append(p)
        for name, m in models.items():
            p = out / f"disagg_{ds.household_id}_{name}.json"
            save_checkpoint(m, p)
            paths.append(p)
    return paths


def cmd_train(cfg):
    out = _out(cfg)
    spec = experiment_spec(cfg)
    models, _ = train_forecasters(spec, load_households(cfg))
    paths = []
    for name, m in models.items():
        p = out / f"forecaster_{name}.json"
        save_checkpoint(m, p)
        paths.append(p)
    return paths + sorted(out.glob("rounds_*.csv"))


def cmd_forecast(cfg):
    _out(cfg)
    spec = experiment_spec(cfg)
    ckdir = Path(cfg["checkpoints"] or cfg["out_dir"])
    households = load_households(cfg)
    target = spec.household or households[0].household_id
    ds = next((h for h in households if h.household_id == target), None)
    if ds is None:
        raise CliError(f"experiment.household: {target!r} not found")
    view = household_view(ds, spec)
    models = {}
    for name in view.channels:
        p = ckdir / f"forecaster_{name}.json"
        if not p.exists():
            raise CliError(f"checkpoints: missing {p}; run 'train' first")
        models[name] = load_checkpoint(p)
        if models[name].config.kind != spec.model:
            raise CliError(f"checkpoints: {p} holds a {models[name].config.kind} model, not {spec.model}")
    return evaluate_forecasters(models, view, spec).files


def cmd_evaluate(cfg):
    out = _out(cfg)
    if cfg["predictions"]:
        _, truth, pred = read_prediction_csv(cfg["predictions"])
        p = out / "metrics.csv"
        atomic_write_text(p, metrics_csv([MetricsReport.compute(truth, pred, "watts")]))
        return [p]
    households = load_households(cfg)
    modes = ("integrated", "direct") if cfg["experiment"]["mode"] == "both" else (cfg["experiment"]["mode"],)
    rows, paths = [], []
    for mode in modes:
        sub = out / mode
        sub.mkdir(exist_ok=True)
        res = run_experiment(experiment_spec(cfg, mode=mode, out_dir=str(sub)), households)
        paths += res.files
        rows.append([mode, repr(res.report_norm.mae), repr(res.report_norm.rmse),
                     repr(res.report_watts.mae), repr(res.report_watts.rmse)])
    lines = ["mode,mae_norm,rmse_norm,mae_watts,rmse_watts"] + [",".join(r) for r in rows]
    p = out / "evaluation.csv"
    atomic_write_text(p, "\n".join(lines) + "\n")
    return paths + [p]


def cmd_compare(cfg):
    out = _out(cfg)
    rows = compare_models(load_households(cfg), cfg["compare"]["models"], experiment_spec(cfg))
    a, b = out / "comparison.csv", out / "comparison_loss.csv"
    atomic_write_text(a, comparison_csv(rows))
    atomic_write_text(b, comparison_loss_csv(rows))
    return [a, b]


def cmd_sweep(cfg):
    out = _out(cfg)
    s = cfg["sweep"]
    channel = s["channel"]
    spec = experiment_spec(cfg, mode="direct" if channel == "aggregate" else "integrated", nilm=False)
    views = [household_view(ds, spec) for ds in load_households(cfg)]
    W, h = spec.forecast.window_len, spec.forecast.horizon
    for v in views:
        if channel not in v.channels:
            raise CliError(f"sweep.channel: {channel!r} not in household {v.household_id!r}")
    clients = [Client(v.household_id, v.channels[channel].train_samples(W, h)) for v in views]
    val = [v.channels[channel].test_samples(W, h)[0] for v in views]
    val = (np.concatenate([x.X for x in val]), np.concatenate([x.y for x in val]))
    base = replace(federated_config(cfg), rounds=int(s["rounds"]))
    curves = robustness_sweep(clients, base, [int(e) for e in s["local_epochs"]],
                              [float(c) for c in s["client_fractions"]], val)
    return write_sweep(curves, out)


COMMANDS = {
    "synth": (cmd_synth, "write synthetic household CSVs"),
    "ingest": (cmd_ingest, "align UK-DALE house folders into household CSVs"),
    "disaggregate": (cmd_disaggregate, "train CNN-LSTM disaggregators and write NILM estimates"),
    "train": (cmd_train, "train per-channel forecasters and save checkpoints"),
    "forecast": (cmd_forecast, "forecast one household's test block from saved checkpoints"),
    "evaluate": (cmd_evaluate, "run the integrated/direct experiment or score a prediction CSV"),
    "compare": (cmd_compare, "FedDL vs centralized BiLSTM-Attention vs LSTM table"),
    "sweep": (cmd_sweep, "federated loss curves over a local-epochs x client-fraction grid"),
}

# flag -> (config key, type, help); shared flags are added to every subcommand
COMMON_FLAGS = {
    "--seed": ("seed", int, "base random seed"),
    "--out-dir": ("out_dir", str, "output directory"),
    "--data": ("data.paths", None, "household CSV files or UK-DALE house directories"),
}
FLAGS = {
    "synth": {"--households": ("data.households", int, None), "--length": ("data.length", int, None),
              "--scenario": ("data.scenario", str, f"one of {SCENARIOS}")},
    "ingest": {"--appliances": ("data.appliances", None, "appliance labels to keep")},
    "disaggregate": {"--epochs": ("disagg.epochs", int, None), "--stride": ("disagg.stride", int, None)},
    "train": {},
    "forecast": {"--checkpoints": ("checkpoints", str, "directory holding forecaster_*.json")},
    "evaluate": {"--predictions": ("predictions", str, "score this prediction CSV instead of training")},
    "compare": {"--models": ("compare.models", None, f"subset of {sorted(COMPARE_MODELS)}")},
    "sweep": {"--local-epochs": ("sweep.local_epochs", None, None),
              "--client-fractions": ("sweep.client_fractions", None, None),
              "--channel": ("sweep.channel", str, None)},
}
EXPERIMENT_FLAGS = {
    "--mode": ("experiment.mode", str, "integrated, direct (evaluate also accepts both)"),
    "--training": ("experiment.training", str, "centralized or federated"),
    "--model": ("experiment.model", str, "bilstm_attention or lstm"),
    "--nilm": ("experiment.nilm", "flag", "forecast NILM estimates instead of sub-metered channels"),
    "--epochs": ("experiment.epochs", int, None),
    "--household": ("experiment.household", str, None),
    "--rounds": ("federated.rounds", int, None),
    "--local-epochs": ("federated.local_epochs", int, None),
    "--client-fraction": ("federated.client_fraction", float, None),
}
for _cmd in ("train", "forecast", "evaluate", "compare"):
    FLAGS[_cmd] = {**EXPERIMENT_FLAGS, **FLAGS[_cmd]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedload", description="Federated NILM-based load forecasting.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="YAML config file")
        for flag, (key, typ, h) in {**COMMON_FLAGS, **FLAGS[name]}.items():
            if typ == "flag":
                sp.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=h)
            elif typ is None:
                sp.add_argument(flag, dest=key, nargs="+", default=None, help=h)
            else:
                sp.add_argument(flag, dest=key, type=typ, default=None, help=h)
    return parser


def _coerce_lists(overrides: dict) -> dict:
    out = dict(overrides)
    if "sweep.local_epochs" in out:
        out["sweep.local_epochs"] = [int(x) for x in out["sweep.local_epochs"]]
    if "sweep.client_fractions" in out:
        out["sweep.client_fractions"] = [float(x) for x in out["sweep.client_fractions"]]
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    args = parser.parse_args(argv)  # exits 2 on unknown commands/flags
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    ns = vars(args)
    overrides = {k: v for k, v in ns.items() if k not in ("command", "config") and v is not None}
    try:
        cfg = load_config(ns["config"], _coerce_lists(overrides))
        paths = COMMANDS[args.command][0](cfg)
    except KeyboardInterrupt:
        raise
    except Exception as exc:  # one-line diagnostic
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"fedload {args.command}: error: {msg}", file=sys.stderr)
        return 1
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
