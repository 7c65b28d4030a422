"""Command-line front end.

Subcommands::

    sdnid train         fit one model and write checkpoint, history, metrics
    sdnid sweep         cross-validate Ts/tau over a grid of seeds
    sdnid estimate-bla  normalization from the best linear approximation
    sdnid simulate      free-run a checkpoint on a record
    sdnid make-data     synthetic cascaded-tanks CSV files

Configuration files are flat ``key = value`` text, one ``RunConfig`` field
per line, values written as Python literals (``hidden = 32``,
``lr_schedule = [(0, 0.003), (1000, 0.0009)]``). ``#`` starts a comment.
Command-line flags override file values, which override the defaults.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 training failure. ``SDNID_WORKERS`` sets the sweep worker count.
"""

from __future__ import annotations

import argparse
import ast
import dataclasses
import hashlib
import json
import logging
import math
import subprocess
import sys
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .bla import IdentificationError, fit_bla, tau_bla
from .data import DataError, Pair, Scaler, Signal, load_csv, make_cts_dataset, measured_snr_db
from .data import TankParams, cts_oracle, multisine, split_benchmark, split_fractions, write_table
from .nn import config_hash, load_checkpoint, save_checkpoint
from .sdn import SweepFailed, cross_validate_tau, default_grid, workers_from_env
from .train import RunConfig, TrainingFailed, fit, free_run, resolve_bla_tau, rmse

log = logging.getLogger("sdnid")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 2, 3, 4


class UsageError(Exception):
    pass


# --- configuration -------------------------------------------------------------


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """Parse flat ``key = value`` lines into a dict of Python literals."""
    out = {}
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise UsageError(f"{origin}:{n}: unknown config key {key!r}")
        try:
            out[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            # bare words are strings: tau_mode = trainable
            if value.replace("_", "").isalnum():
                out[key] = value
            else:
                raise UsageError(f"{origin}:{n}: cannot parse value {value!r}") from None
    return out


def build_config(path: str | None, overrides: dict) -> RunConfig:
    values = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        values.update(parse_config_text(p.read_text(), str(p)))
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def parse_set(items: Sequence[str]) -> dict:
    out = {}
    for item in items or ():
        out.update(parse_config_text(item, "--set"))
    return out


def parse_tau_mode(text: str | None) -> dict:
    """``fixed:<ratio>`` | ``fixed`` | ``trainable`` | ``bla`` into config fields."""
    if text is None:
        return {}
    mode, _, arg = text.partition(":")
    if mode == "fixed" and arg:
        try:
            ratio = float(arg)
        except ValueError:
            raise UsageError(f"bad Ts/tau ratio in --tau-mode {text!r}") from None
        return {"tau_mode": "fixed", "tau_init_ratio": ratio}
    if mode in ("fixed", "trainable", "bla") and not arg:
        return {"tau_mode": mode}
    raise UsageError(f"--tau-mode must be fixed:<ratio>, trainable or bla, got {text!r}")


def parse_grid(text: str | None) -> list[float]:
    """Comma list ``0.01,0.1,1`` or ``geom:<lo>:<hi>:<n>``."""
    if not text:
        return default_grid()
    try:
        if text.startswith("geom:"):
            lo, hi, n = text[5:].split(":")
            return default_grid(int(n), float(lo), float(hi))
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse grid {text!r}") from None


# --- data ----------------------------------------------------------------------


def read_pair(path: str, args) -> Pair:
    if not Path(path).is_file():
        raise DataError(f"data file not found: {path}")
    u, y = load_csv(path, args.u_col, args.y_col, args.Ts, args.delimiter)
    return Pair(u, y)


def scale_pair(pair: Pair, su: Scaler, sy: Scaler) -> Pair:
    return Pair(su.apply(pair.u), sy.apply(pair.y))


def load_splits(args) -> tuple[dict[str, Pair], list[str]]:
    """Raw train/val/test records named by the data flags.

    Without ``--val`` the last ``--val-fraction`` of the training file is held
    out. ``--benchmark-val N`` uses the first N test samples instead.
    """
    used = [args.train]
    train = read_pair(args.train, args)
    test = None
    if args.test:
        test = read_pair(args.test, args)
        used.append(args.test)
    if args.benchmark_val:
        if test is None:
            raise UsageError("--benchmark-val needs --test")
        return split_benchmark(train, test, args.benchmark_val), used
    if args.val:
        val = read_pair(args.val, args)
        used.append(args.val)
        out = {"train": train, "val": val}
    else:
        f = args.val_fraction
        out = split_fractions(train, {"train": 1 - f, "val": f})
    if test is not None:
        out["test"] = test
    return out, used


def file_digest(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def source_revision() -> str:
    here = Path(__file__).resolve().parent
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=here, capture_output=True, text=True, timeout=5
        )
        if rev.returncode == 0:
            return rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    digest = hashlib.sha256()
    for f in sorted(here.glob("*.py")):
        digest.update(f.read_bytes())
    return f"{__version__}+src.{digest.hexdigest()[:12]}"


def write_manifest(out: Path, command: str, config: dict, seed, inputs, outputs) -> str:
    """Write ``manifest.json``; the returned id is referenced by every artifact."""
    body = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "source_revision": source_revision(),
        "inputs": {p: file_digest(p) for p in inputs},
        "outputs": {k: str(v) for k, v in outputs.items()},
    }
    manifest_id = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]
    body["manifest_id"] = manifest_id
    (out / "manifest.json").write_text(json.dumps(body, indent=1, sort_keys=True))
    return manifest_id


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=True))


def _rmse_original(params, pair: Pair, config: RunConfig, su: Scaler, sy: Scaler):
    """Free-run predictions and RMSE in the units of the data file."""
    from .ode import IntegrationDiverged

    try:
        yz = free_run(params, scale_pair(pair, su, sy), config)
    except IntegrationDiverged:
        return None, math.inf
    yhat = sy.invert(Signal(yz, pair.Ts)).values
    return yhat, rmse(pair.y.values[config.lag :], yhat)


# --- commands ------------------------------------------------------------------


def cmd_train(args) -> int:
    overrides = {**parse_set(args.set), **parse_tau_mode(args.tau_mode), "seed": args.seed}
    if args.Ts_flag is not None:
        overrides["Ts"] = args.Ts_flag
    config = build_config(args.config, overrides)
    args.Ts = config.Ts
    splits, inputs = load_splits(args)
    su, sy = Scaler.fit(splits["train"].u), Scaler.fit(splits["train"].y)
    z = {k: scale_pair(v, su, sy) for k, v in splits.items()}
    requested = config
    if config.tau_mode == "bla":
        config = resolve_bla_tau(z["train"], config)
        print(f"BLA estimate: Ts/tau = {config.tau_init_ratio:.6g}")
    res = fit(z["train"], z["val"], config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "checkpoint": out / "checkpoint.json",
        "history": out / "history.csv",
        "metrics": out / "metrics.json",
    }
    manifest_id = write_manifest(
        out, "train", requested.to_dict(), config.seed, inputs, paths
    )
    metrics = {"manifest_id": manifest_id, "best_step": res.best_step, "steps": res.steps,
               "skipped_steps": res.skipped}
    for name, pair in splits.items():
        metrics[f"{name}_rmse"] = _rmse_original(res.params, pair, config, su, sy)[1]
    # whole input files, as `simulate` would see them
    metrics["file_rmse"] = {
        p: _rmse_original(res.params, read_pair(p, args), config, su, sy)[1] for p in inputs
    }
    tau = res.params.tau_hat().value.ravel()
    ratios = (config.Ts / tau).tolist()
    # per-state vector reported as its mean
    metrics["ts_over_tau"] = ratios
    metrics["ts_over_tau_mean"] = float(np.mean(ratios))
    extra = {
        "manifest_id": manifest_id,
        "scaler_u": su.to_dict(),
        "scaler_y": sy.to_dict(),
        "run_config": config.to_dict(),
        "train_rmse": metrics["train_rmse"],
    }
    save_checkpoint(paths["checkpoint"], res.params, requested.to_dict(), config.seed, extra)
    write_table(paths["history"], {k: [row.get(k, math.nan) for row in res.history]
                                   for k in (res.history[0] if res.history else {"step": 0})})
    write_json(paths["metrics"], metrics)
    for name in ("train", "val", "test"):
        if f"{name}_rmse" in metrics:
            print(f"{name} RMSE: {metrics[f'{name}_rmse']:.6g}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = build_config(args.config, {**parse_set(args.set), "seed": args.seed})
    if args.Ts_flag is not None:
        config = config.replace(Ts=args.Ts_flag)
    args.Ts = config.Ts
    grid = parse_grid(args.grid)
    splits, inputs = load_splits(args)
    su, sy = Scaler.fit(splits["train"].u), Scaler.fit(splits["train"].y)
    z = {k: scale_pair(v, su, sy) for k, v in splits.items()}
    budget = args.budget or config.max_steps
    try:
        result = cross_validate_tau(
            z["train"], z["val"], grid, args.seeds, budget, config, z.get("test"),
            workers_from_env(),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"table": out / "sweep.csv", "summary": out / "summary.json"}
    manifest_id = write_manifest(out, "sweep", config.to_dict(), config.seed, inputs, paths)
    result.to_table(paths["table"])
    med = result.medians()
    write_json(paths["summary"], {
        "manifest_id": manifest_id,
        "chosen_ts_over_tau": result.chosen,
        "median_val_rmse": {repr(g): med[g] for g in result.grid},
        "failed_points": result.failed_points(),
        "budget": budget,
    })
    print(f"chosen Ts/tau = {result.chosen:.6g}")
    return EXIT_OK


def cmd_estimate_bla(args) -> int:
    if args.order < 1:
        raise UsageError("--order must be >= 1")
    if args.lag < 1:
        raise UsageError("--lag must be >= 1")
    pair = read_pair(args.train, args)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        tau = tau_bla(pair, args.order, args.lag)
    for w in caught:
        log.warning("%s", w.message)
    report = {"tau": tau, "ts_over_tau": args.Ts / tau, "order": args.order, "lag": args.lag,
              "warnings": [str(w.message) for w in caught]}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report": out / "bla.json"}
        report["manifest_id"] = write_manifest(
            out, "estimate-bla", {"order": args.order, "lag": args.lag, "Ts": args.Ts},
            None, [args.train], paths,
        )
        write_json(paths["report"], report)
    print(f"tau = {tau:.6g} s, Ts/tau = {args.Ts / tau:.6g}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    try:
        params, doc = load_checkpoint(args.checkpoint)
        extra = doc["extra"]
        config = RunConfig.from_dict(extra["run_config"])
        su, sy = Scaler.from_dict(extra["scaler_u"]), Scaler.from_dict(extra["scaler_y"])
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"unreadable checkpoint {args.checkpoint}: {exc}") from None
    args.Ts = config.Ts
    pair = read_pair(args.data, args)
    yhat, err = _rmse_original(params, pair, config, su, sy)
    if args.out:
        lag = config.lag
        cols = {"k": list(range(lag, len(pair)))}
        for i, name in enumerate(pair.y.names):
            cols[name] = pair.y.values[lag:, i]
            cols[name + "_hat"] = (
                yhat[:, i] if yhat is not None else np.full(len(pair) - lag, math.nan)
            )
        write_table(args.out, cols)
    print(f"RMSE: {err:.17g}")
    return EXIT_OK


def cmd_make_data(args) -> int:
    if args.system != "cts":
        raise UsageError(f"unknown system {args.system!r}")
    params = TankParams(*(args.tank or ()))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.zero_input:
        u = Signal(np.zeros(args.K), args.Ts, ("u",))
        y = cts_oracle(u, params, (0.0, 0.0))
        records = {"est": (u, y)}
    else:
        records = make_cts_dataset(
            args.K, args.Ts, params, args.f_max, args.noise_snr, args.seed,
            args.offset, args.amplitude,
        )
    paths = {}
    for name, (u, y) in records.items():
        paths[name] = out / f"{name}.csv"
        write_table(paths[name], {"u": u.values[:, 0], "y": y.values[:, 0]})
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "out")}
    write_manifest(out, "make-data", cfg, args.seed, [], paths)
    if args.noise_snr is not None and not args.zero_input:
        u, y = records["est"]
        clean = cts_oracle(u, params, params.equilibrium(args.offset)).values
        print(f"measured SNR (est): {measured_snr_db(clean, y.values):.3f} dB")
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


# --- parser --------------------------------------------------------------------


def _data_flags(p: argparse.ArgumentParser, splits: bool = True) -> None:
    p.add_argument("--u-col", action="append", default=None, help="input column (repeatable)")
    p.add_argument("--y-col", action="append", default=None, help="output column (repeatable)")
    p.add_argument("--delimiter", default=",")
    if splits:
        p.add_argument("--train", required=True, help="training CSV")
        p.add_argument("--val", help="validation CSV; default: held-out tail of --train")
        p.add_argument("--test", help="test CSV, only evaluated after training")
        p.add_argument("--val-fraction", type=float, default=0.25)
        p.add_argument("--benchmark-val", type=int, default=0, metavar="N",
                       help="early-stop on the first N test samples")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdnid", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit one model")
    p.add_argument("--config")
    p.add_argument("--tau-mode", help="fixed:<Ts/tau> | trainable | bla")
    p.add_argument("--seed", type=int)
    p.add_argument("--Ts", dest="Ts_flag", type=float)
    p.add_argument("--set", action="append", help="override one config key: key=value")
    p.add_argument("--out", default="run")
    _data_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="cross-validate Ts/tau")
    p.add_argument("--config")
    p.add_argument("--grid", help="comma list or geom:<lo>:<hi>:<n>")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--budget", type=int, help="steps per run (default: max_steps)")
    p.add_argument("--seed", type=int)
    p.add_argument("--Ts", dest="Ts_flag", type=float)
    p.add_argument("--set", action="append")
    p.add_argument("--out", default="sweep")
    _data_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("estimate-bla", help="normalization from the BLA")
    p.add_argument("--train", required=True)
    p.add_argument("--Ts", type=float, required=True)
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--lag", type=int, default=10)
    p.add_argument("--out")
    _data_flags(p, splits=False)
    p.set_defaults(func=cmd_estimate_bla)

    p = sub.add_parser("simulate", help="free-run a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="trajectory CSV")
    _data_flags(p, splits=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("make-data", help="synthetic cascaded-tanks records")
    p.add_argument("--system", default="cts")
    p.add_argument("--K", type=int, default=2000)
    p.add_argument("--Ts", type=float, default=4.0)
    p.add_argument("--f-max", type=float, default=0.01)
    p.add_argument("--offset", type=float, default=2.5)
    p.add_argument("--amplitude", type=float, default=0.8)
    p.add_argument("--tank", type=float, nargs=5, metavar=("K1", "K2", "K3", "K4", "XMAX"))
    p.add_argument("--noise-snr", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zero-input", action="store_true")
    p.add_argument("--out", default="data")
    p.set_defaults(func=cmd_make_data)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s"
    )
    if hasattr(args, "u_col"):
        args.u_col = args.u_col or ["u"]
        args.y_col = args.y_col or ["y"]
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, IdentificationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingFailed, SweepFailed) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
