"""Command line entry point.

Subcommands: run, sysid, pretrain, synth, gradcheck, config.
Exit codes: 0 success, 1 runtime failure, 2 configuration error.

One JSON configuration per experiment.  Every field has a default (dump
them with ``safeproj config --print-defaults``); a file given with
``--config`` overrides those, and flags or ``--set key=value`` override the
file.  Every output embeds the config hash, seed and package version, and
contains no timing, so reruns of the same triple are byte-identical.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from typing import List, Optional

import numpy as np

from . import __version__
from .baselines import DroopCurve, PController
from .envs.feeder import make_feeder
from .envs.thermal import ThermalZone, ZoneParams
from .envs.traces import TraceError, TraceSet, synth_building_traces, synth_feeder_traces
from .experiments import (
    BUILDING_CONTROLLERS,
    FEEDER_CONTROLLERS,
    PRETRAIN_SEED_OFFSET,
    BuildingRunConfig,
    BuildingSetup,
    FeederRunConfig,
    FeederScenario,
    expert_transitions,
    morning_comfort_rate,
    prepare_feeder,
    pretrain_building,
    run_building,
    run_feeder,
)
from .sysid import IdentifiabilityError, LinearDynamics, fit_thermal
from .training.direct import DirectConfig
from .training.nn import load_checkpoint, save_checkpoint
from .training.ppo import PPOConfig
from .verification import gradcheck

logger = logging.getLogger("safeproj")

TASKS = ("building", "inverter")
CONTROLLERS = {"building": BUILDING_CONTROLLERS, "inverter": FEEDER_CONTROLLERS}
METRIC_COLUMNS = ("step", "timestamp", "cost", "curtailment_or_energy", "violation_count",
                  "infeasible_relaxations")
# fields that never change results and so stay out of the hash
UNHASHED = ("output_dir", "seed")


class ConfigError(ValueError):
    """Invalid configuration; reported with exit code 2."""


# ------------------------------------------------------------------ config

def _drop(d: dict, *keys) -> dict:
    return {k: v for k, v in d.items() if k not in keys}


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def default_config() -> dict:
    building = _drop(asdict(BuildingRunConfig()), "seed", "controller", "steps", "days")
    feeder = asdict(FeederRunConfig())
    scenario = _drop(feeder.pop("scenario"), "seed", "days", "cadence_s")
    feeder = _drop(feeder, "controller", "steps")
    return _plain({
        "task": "building",
        "controller": "prof",
        "seed": 0,
        "days": None,  # building 30, inverter 2
        "cadence_s": None,  # building 300, inverter 1
        "steps": None,
        "output_dir": "safeproj-out",
        "trace_csv": None,
        "checkpoint": None,
        "building": building,
        "pretrain": {"days": 90, "epochs": 20, "lr": 1e-3, "batch": 64, "margin_factor": 1.5},
        "inverter": {**feeder, "scenario": scenario},
        "sysid": {"data_csv": None, "days": 60, "holdout": 0.2},
        "gradcheck": {"instances": 100, "step": 1e-5, "tol": 1e-3},
    })


def _check_type(path: str, default, value):
    if default is None or value is None:
        return  # optional fields accept null and any scalar or list
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list) and len(value) == len(default)
        if ok:
            for i, (d, v) in enumerate(zip(default, value)):
                _check_type(f"{path}[{i}]", d, v)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}"
                          f"{f' of length {len(default)}' if isinstance(default, list) else ''}, "
                          f"got {json.dumps(value)}")


def merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        path = f"{prefix}{k}"
        if k not in out:
            raise ConfigError(f"{path}: unknown field")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{path}: expected an object")
            out[k] = merge(out[k], v, path + ".")
        else:
            _check_type(path, out[k], v)
            out[k] = v
    return out


def set_path(override: dict, key: str, raw: str):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = override
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key}: conflicting overrides")
    node[parts[-1]] = value


def config_hash(cfg: dict) -> str:
    canon = json.dumps(_drop(cfg, *UNHASHED), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _dataclass(cls, values: dict, section: str):
    names = {f.name for f in fields(cls)}
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items() if k in names}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def _require_file(path: Optional[str], name: str):
    if path is not None and not os.path.isfile(path):
        raise ConfigError(f"{name}: file not found: {path}")


def validate(cfg: dict) -> dict:
    """Field-level checks; returns the typed run configuration pieces."""
    if cfg["task"] not in TASKS:
        raise ConfigError(f"task: must be one of {', '.join(TASKS)}, got {cfg['task']!r}")
    if cfg["controller"] not in CONTROLLERS[cfg["task"]]:
        raise ConfigError(f"controller: {cfg['task']} supports "
                          f"{', '.join(CONTROLLERS[cfg['task']])}, got {cfg['controller']!r}")
    for key in ("seed",):
        if not isinstance(cfg[key], int) or cfg[key] < 0:
            raise ConfigError(f"{key}: must be a nonnegative integer")
    for key in ("steps", "days", "cadence_s"):
        v = cfg[key]
        if v is not None and (not isinstance(v, int) or isinstance(v, bool) or v < 1):
            raise ConfigError(f"{key}: must be a positive integer or null")
    _require_file(cfg["trace_csv"], "trace_csv")
    _require_file(cfg["checkpoint"], "checkpoint")
    _require_file(cfg["sysid"]["data_csv"], "sysid.data_csv")
    p = cfg["pretrain"]
    if not isinstance(p["days"], int) or p["days"] < 2:
        raise ConfigError("pretrain.days: must be an integer >= 2")
    if p["epochs"] < 1 or p["batch"] < 1 or p["lr"] <= 0 or p["margin_factor"] < 0:
        raise ConfigError("pretrain: epochs, batch and lr must be positive, margin_factor >= 0")
    s = cfg["sysid"]
    if not 0 <= s["holdout"] < 1 or s["days"] < 1:
        raise ConfigError("sysid: holdout must be in [0, 1) and days >= 1")
    g = cfg["gradcheck"]
    if g["instances"] < 1 or g["step"] <= 0 or g["tol"] <= 0:
        raise ConfigError("gradcheck: instances, step and tol must be positive")

    b = dict(cfg["building"])
    b["ppo"] = _dataclass(PPOConfig, b["ppo"], "building.ppo")
    building = _dataclass(BuildingRunConfig, {
        **b, "seed": cfg["seed"], "controller": cfg["controller"] if cfg["task"] == "building"
        else "prof", "steps": cfg["steps"], "days": cfg["days"] or 30}, "building")
    if building.T < 1 or building.H < 1 or building.hidden < 1 or building.update_days < 1:
        raise ConfigError("building: T, H, hidden and update_days must be positive")
    if building.forecast not in ("perfect", "persistence"):
        raise ConfigError("building.forecast: must be perfect or persistence")
    inv = dict(cfg["inverter"])
    sc = _dataclass(FeederScenario, {**inv.pop("scenario"), "seed": cfg["seed"],
                                     "days": cfg["days"] or 2,
                                     "cadence_s": cfg["cadence_s"] or 1}, "inverter.scenario")
    if sc.n_pv > sc.n_bus or sc.n_bus < 2 or sc.M < 4:
        raise ConfigError("inverter.scenario: need n_bus >= 2, n_pv <= n_bus and M >= 4")
    inv["direct"] = _dataclass(DirectConfig, inv["direct"], "inverter.direct")
    inv["droop"] = _dataclass(DroopCurve, inv["droop"], "inverter.droop")
    feeder = _dataclass(FeederRunConfig, {**inv, "scenario": sc, "steps": cfg["steps"],
                                          "controller": cfg["controller"]
                                          if cfg["task"] == "inverter" else "prof"}, "inverter")
    if feeder.update_every < 1 or feeder.replay < 1 or feeder.start < 0:
        raise ConfigError("inverter: update_every and replay must be positive, start >= 0")
    return {"building": building, "feeder": feeder}


# ----------------------------------------------------------------- outputs

def _header(cfg: dict, h: str) -> List[str]:
    return [f"safeproj {__version__}", f"config_hash={h}", f"seed={cfg['seed']}",
            f"task={cfg['task']}"]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class MetricsWriter:
    """Streams step rows as ``step,timestamp,cost,...,action...,state...``."""

    def __init__(self, path: str, comments: List[str], action_names, state_names):
        self.fh = open(path, "w", newline="")
        for c in comments:
            self.fh.write(f"# {c}\n")
        cols = list(METRIC_COLUMNS) + list(action_names) + list(state_names)
        self.fh.write(",".join(cols) + "\n")
        self.n_action = len(action_names)
        self.n_state = len(state_names)

    def __call__(self, row):
        a = np.asarray(row.action, dtype=np.float64).reshape(-1)
        s = np.asarray(row.state, dtype=np.float64).reshape(-1)
        if a.size != self.n_action or s.size != self.n_state:
            raise RuntimeError("row does not match the metrics schema")
        vals = [str(row.step), str(row.timestamp), _fmt(row.cost), _fmt(row.curtailment_or_energy),
                _fmt(row.violation_count), _fmt(row.infeasible_relaxations)]
        vals += [_fmt(v) for v in a] + [_fmt(v) for v in s]
        self.fh.write(",".join(vals) + "\n")

    def close(self):
        self.fh.close()


def _finite(v):
    if isinstance(v, float) and not np.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _finite(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_finite(x) for x in v]
    return v


def write_json(path: str, doc: dict):
    """Strict JSON: non-finite numbers become null."""
    with open(path, "w") as fh:
        json.dump(_finite(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _stamp(cfg: dict, h: str) -> dict:
    return {"config_hash": h, "seed": cfg["seed"], "version": __version__, "task": cfg["task"]}


def _load_trace(cfg: dict) -> Optional[TraceSet]:
    if cfg["trace_csv"] is None:
        return None
    try:
        return TraceSet.from_csv(cfg["trace_csv"])
    except TraceError as exc:
        raise ConfigError(f"trace_csv: {exc}") from exc


# ---------------------------------------------------------------- commands

def _setup_from_checkpoint(path: str, bc: BuildingRunConfig) -> BuildingSetup:
    try:
        state, meta = load_checkpoint(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"checkpoint: {exc}") from exc
    for k in ("T", "H", "hidden"):
        if meta.get(k) != getattr(bc, k):
            raise ConfigError(f"checkpoint: trained with {k}={meta.get(k)}, "
                              f"config has {getattr(bc, k)}")
    if "model" not in meta or "state_margin" not in meta:
        raise ConfigError("checkpoint: no identified model in its metadata")
    return BuildingSetup(LinearDynamics.from_dict(meta["model"]), float(meta["state_margin"]),
                         state, list(meta.get("imitation_loss", [])), None, None)


def _pretrain(cfg: dict, bc: BuildingRunConfig) -> BuildingSetup:
    p = cfg["pretrain"]
    return pretrain_building(bc.seed, days=p["days"], T=bc.T, H=bc.H, hidden=bc.hidden,
                             epochs=p["epochs"], lr=p["lr"], batch=p["batch"],
                             zone_params=ZoneParams(g_max=bc.g_max),
                             margin_factor=p["margin_factor"], occupied=bc.occupied,
                             unoccupied=bc.unoccupied)


def cmd_run(cfg: dict) -> dict:
    typed = validate(cfg)
    h = config_hash(cfg)
    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    trace = _load_trace(cfg)
    metrics_path = os.path.join(out, "metrics.csv")
    comments = _header(cfg, h) + [f"controller={cfg['controller']}"]
    extra = {}
    if cfg["task"] == "building":
        bc = typed["building"]
        setup = None
        if bc.controller != "pcontroller":
            setup = (_setup_from_checkpoint(cfg["checkpoint"], bc) if cfg["checkpoint"]
                     else _pretrain(cfg, bc))
        writer = MetricsWriter(metrics_path, comments, ("u",), ("x",))
        try:
            res = run_building(bc, setup, on_row=writer, trace=trace)
        finally:
            writer.close()
        tr = trace if trace is not None else synth_building_traces(bc.seed, bc.days)
        extra["morning_comfort_rate"] = morning_comfort_rate(res, tr, bc.occupied)
        if setup is not None:
            extra["state_margin"] = setup.state_margin
    else:
        fc = typed["feeder"]
        setup = prepare_feeder(fc.scenario, trace)
        pv = setup.feeder.pv_buses
        actions = [f"{c}{j}" for j in pv for c in ("p", "q")]
        states = [f"v{i}" for i in range(setup.feeder.n_bus)]
        writer = MetricsWriter(metrics_path, comments, actions, states)
        try:
            res, task, _ = run_feeder(fc, setup, on_row=writer)
        finally:
            writer.close()
        extra["eps_v"] = setup.eps_v
        if fc.lp_reference:
            extra["lp_total_curtailment"] = float(sum(task.lp_curtailment.values()))
    summary = {k: v for k, v in res.summary().items()
               if k not in ("wall_time_s", "policy_time_per_step_ms")}
    doc = {**_stamp(cfg, h), "controller": cfg["controller"], **summary, **extra}
    write_json(os.path.join(out, "summary.json"), doc)
    logger.info("run finished in %.1f s, policy %.2f ms/step", res.wall_time,
                1e3 * res.policy_time / max(len(res.rows), 1))
    return doc


def _read_sysid_csv(path: str):
    """Columns prefixed x (states), u (inputs) and d (disturbances), one row
    per control step; the next row's states are the regression target."""
    try:
        data = np.genfromtxt(path, delimiter=",", names=True, comments="#", dtype=np.float64)
    except (ValueError, OSError) as exc:
        raise ConfigError(f"sysid.data_csv: {exc}") from exc
    names = data.dtype.names or ()
    cols = {p: [n for n in names if n.startswith(p)] for p in ("x", "u", "d")}
    if not cols["x"] or not cols["u"]:
        raise ConfigError("sysid.data_csv: needs x* and u* columns")
    get = lambda ns: np.stack([data[n] for n in ns], axis=1) if ns else np.zeros((len(data), 0))
    X, U, W = get(cols["x"]), get(cols["u"]), get(cols["d"])
    return X[:-1], U[:-1], W[:-1], X[1:]


def cmd_sysid(cfg: dict) -> dict:
    typed = validate(cfg)
    h = config_hash(cfg)
    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    s = cfg["sysid"]
    if cfg["task"] == "building":
        bc = typed["building"]
        if s["data_csv"]:
            X, U, W, Y = _read_sysid_csv(s["data_csv"])
            source = "csv"
        else:
            trace = _load_trace(cfg) or synth_building_traces(cfg["seed"] + PRETRAIN_SEED_OFFSET,
                                                              s["days"])
            zone = ThermalZone(trace, ZoneParams(g_max=bc.g_max), x0=20.0)
            task, us = expert_transitions(zone, PController(), bc.T, bc.H, bc.occupied,
                                          bc.unoccupied)
            xs = np.array(task.x_hist)
            n = len(us)
            X, U, W, Y = xs[:-1], us, zone.disturbances()[:n], xs[1:]
            source = "p-controller"
        try:
            model = fit_thermal(X, U, W, Y, holdout=s["holdout"])
        except IdentifiabilityError as exc:
            raise ConfigError(f"sysid: {exc}") from exc
        write_json(os.path.join(out, "model.json"), {**_stamp(cfg, h), "model": model.to_dict()})
        report = {"source": source, "samples": int(np.shape(X)[0]), "train_rmse": model.train_rmse,
                  "test_rmse": model.test_rmse, "max_abs_residual": model.max_abs_residual,
                  "spectral_radius": model.spectral_radius}
    else:
        setup = prepare_feeder(typed["feeder"].scenario, _load_trace(cfg))
        write_json(os.path.join(out, "model.json"),
                   {**_stamp(cfg, h), "model": setup.model.to_dict()})
        report = {"source": "linearized power flow", "eps_v": setup.eps_v,
                  "n_bus": setup.feeder.n_bus, "pv_buses": [int(j) for j in setup.feeder.pv_buses]}
    doc = {**_stamp(cfg, h), **report}
    write_json(os.path.join(out, "sysid_report.json"), doc)
    return doc


def cmd_pretrain(cfg: dict) -> dict:
    typed = validate(cfg)
    if cfg["task"] != "building":
        raise ConfigError("task: pretrain applies to the building task")
    h = config_hash(cfg)
    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    bc = typed["building"]
    setup = _pretrain(cfg, bc)
    meta = {**_stamp(cfg, h), "T": bc.T, "H": bc.H, "hidden": bc.hidden,
            "model": setup.model.to_dict(), "state_margin": setup.state_margin,
            "imitation_loss": [float(v) for v in setup.imitation_loss]}
    path = os.path.join(out, "policy.ckpt.json")
    save_checkpoint(path, setup.policy_state, meta)
    return {**_stamp(cfg, h), "checkpoint": path, "state_margin": setup.state_margin,
            "final_imitation_loss": meta["imitation_loss"][-1] if meta["imitation_loss"] else None}


def cmd_synth(cfg: dict) -> dict:
    typed = validate(cfg)
    h = config_hash(cfg)
    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    seed = cfg["seed"]
    days = cfg["days"] or 1
    if cfg["task"] == "building":
        trace = synth_building_traces(seed, days, cadence_s=cfg["cadence_s"] or 300)
    else:
        sc = typed["feeder"].scenario
        f = make_feeder(seed, sc.n_bus, sc.n_pv, sc.r_range, sc.x_range, sc.chain_prob)
        trace = synth_feeder_traces(seed, days, sc.n_bus, f.pv_buses,
                                    cadence_s=cfg["cadence_s"] or 1)
    path = os.path.join(out, "trace.csv")
    trace.to_csv(path, comments=_header(cfg, h))
    return {**_stamp(cfg, h), "trace": path, "rows": len(trace), "cadence_s": trace.cadence_s}


def cmd_gradcheck(cfg: dict) -> dict:
    validate(cfg)
    h = config_hash(cfg)
    g = cfg["gradcheck"]
    report = gradcheck(g["instances"], seed=cfg["seed"], step=g["step"], tol=g["tol"])
    doc = {**_stamp(cfg, h), **report.to_dict()}
    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    write_json(os.path.join(out, "gradcheck.json"), doc)
    if not report.passed:
        raise RuntimeError(f"gradient check failed: max relative error "
                           f"{report.max_rel_error:.3g} > {report.tolerance:g}")
    return doc


COMMANDS = {"run": cmd_run, "sysid": cmd_sysid, "pretrain": cmd_pretrain, "synth": cmd_synth,
            "gradcheck": cmd_gradcheck}


def _one_seed(args):
    name, cfg = args
    return COMMANDS[name](cfg)


def _fan_out(name: str, cfg: dict, seeds: List[int], workers: Optional[int]) -> dict:
    jobs = []
    for s in seeds:
        c = copy.deepcopy(cfg)
        c["seed"] = s
        c["output_dir"] = os.path.join(cfg["output_dir"], f"seed_{s}")
        validate(c)
        jobs.append((name, c))
    with ProcessPoolExecutor(max_workers=workers or min(len(jobs), os.cpu_count() or 1)) as ex:
        docs = list(ex.map(_one_seed, jobs))
    numeric = [k for k, v in docs[0].items()
               if isinstance(v, (int, float)) and not isinstance(v, bool) and k != "seed"]
    merged = {"config_hash": config_hash(cfg), "version": __version__, "seeds": seeds,
              "per_seed": docs,
              "mean": {k: float(np.mean([d[k] for d in docs])) for k in numeric}}
    os.makedirs(cfg["output_dir"], exist_ok=True)
    write_json(os.path.join(cfg["output_dir"], "summary.json"), merged)
    return merged


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="safeproj", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"safeproj {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a field, e.g. building.ppo.lr=1e-4 (JSON value)")
    common.add_argument("--task", choices=TASKS)
    common.add_argument("--controller")
    common.add_argument("--seed", type=int)
    common.add_argument("--seeds", help="comma separated seeds run in parallel processes")
    common.add_argument("--workers", type=int, help="process count for --seeds")
    common.add_argument("--steps", type=int)
    common.add_argument("--days", type=int)
    common.add_argument("--cadence", type=int, dest="cadence_s", help="trace cadence in seconds")
    common.add_argument("--trace", dest="trace_csv", help="trace CSV instead of synthetic data")
    common.add_argument("--checkpoint", help="pretrained building policy")
    common.add_argument("--data", help="sysid input CSV (x*, u*, d* columns)")
    common.add_argument("--out", dest="output_dir", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    for name, help_ in (("run", "closed-loop experiment"), ("sysid", "identify the models"),
                        ("pretrain", "imitation-pretrain the building policy"),
                        ("synth", "write a synthetic trace CSV"),
                        ("gradcheck", "check projection gradients by finite differences")):
        sub.add_parser(name, parents=[common], help=help_)
    c = sub.add_parser("config", parents=[common], help="show configuration")
    c.add_argument("--print-defaults", action="store_true", help="dump the embedded defaults")
    return ap


def resolve_config(args) -> dict:
    cfg = default_config()
    if args.config:
        _require_file(args.config, "--config")
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--config: invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("--config: top level must be an object")
        cfg = merge(cfg, doc)
    flags = {}
    for key in ("task", "controller", "seed", "steps", "days", "cadence_s", "trace_csv",
                "checkpoint", "output_dir"):
        v = getattr(args, key, None)
        if v is not None:
            flags[key] = v
    if getattr(args, "data", None):
        flags["sysid"] = {"data_csv": args.data}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set {item}: expected KEY=VALUE")
        k, v = item.split("=", 1)
        set_path(flags, k.strip(), v)
    return merge(cfg, flags)


def main(argv: Optional[List[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        if args.command == "config":
            print(json.dumps(default_config() if args.print_defaults else cfg,
                             indent=2, sort_keys=True))
            return 0
        validate(cfg)
        if args.seeds:
            try:
                seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            except ValueError as exc:
                raise ConfigError(f"--seeds: {exc}") from exc
            if not seeds or min(seeds) < 0:
                raise ConfigError("--seeds: need nonnegative integers")
            doc = _fan_out(args.command, cfg, seeds, args.workers)
        else:
            doc = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"safeproj: configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        logger.exception("safeproj %s failed", args.command)
        print(f"safeproj: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(_finite(doc), indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
