"""Desk-scale normalization study on the synthetic cascaded-tanks oracle.

One :class:`DeskSetup` pins down everything a study depends on. The
runs are expensive (tens of minutes on one core), so results are cached as
JSON keyed by a hash of the setup and the package version. Set
``SDNID_RECOMPUTE=1`` to ignore the cache and ``SDNID_RESULTS`` to move it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bla import tau_bla
from .data import Pair, Scaler, load_csv, make_cts_dataset, split_benchmark
from .sdn import cross_validate_tau, workers_from_env
from .train import RunConfig, TrainingFailed, fit, free_run_rmse

log = logging.getLogger(__name__)

DEFAULT_RESULTS = Path(__file__).resolve().parents[2] / "results"


def _grid5() -> tuple:
    return tuple(float(g) for g in np.geomspace(1e-3, 40.0, 5))


@dataclass(frozen=True)
class DeskSetup:
    K: int = 2000
    Ts: float = 4.0
    snr_db: float = 30.0
    data_seed: int = 0
    val_fraction: float = 0.25
    hidden: int = 32
    J: int = 128
    batch: int = 32
    steps: int = 3000
    seeds: int = 5
    grid: tuple = field(default_factory=_grid5)
    baseline_ratio: float = 4.0
    trainable_init: float = 0.1

    def run_config(self, **changes) -> RunConfig:
        cfg = RunConfig(hidden=self.hidden, J=self.J, batch=self.batch, max_steps=self.steps,
                        Ts=self.Ts)
        return cfg.replace(**changes)

    def key(self) -> str:
        blob = json.dumps({"setup": dataclasses.asdict(self), "version": __version__},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class DeskData:
    raw_train: Pair
    train: Pair
    val: Pair
    test: Pair
    scaler_y: Scaler

    @property
    def y_scale(self) -> float:
        return float(self.scaler_y.std[0])


def desk_data(setup: DeskSetup) -> DeskData:
    d = make_cts_dataset(K=setup.K, Ts=setup.Ts, snr_db=setup.snr_db, seed=setup.data_seed)
    est, test = Pair(*d["est"]), Pair(*d["test"])
    n = int(round(len(est) * (1.0 - setup.val_fraction)))
    train, val = est[:n], est[n:]
    su, sy = Scaler.fit(train.u), Scaler.fit(train.y)

    def z(p: Pair) -> Pair:
        return Pair(su.apply(p.u), sy.apply(p.y))

    return DeskData(train, z(train), z(val), z(test), sy)


def bla_ratio(setup: DeskSetup, data: DeskData | None = None) -> float:
    """``Ts / tau_BLA`` on the raw training split."""
    data = data or desk_data(setup)
    return setup.Ts / tau_bla(data.raw_train)


def _runs_to_rows(result, scale: float) -> list[dict]:
    return [
        {"ratio": r.ratio, "seed": r.seed, "val_rmse": r.val_rmse,
         "test_rmse": r.test_rmse * scale, "diverged": r.diverged, "steps": r.steps}
        for r in result.runs
    ]


def _sweep(setup, data, grid) -> dict:
    res = cross_validate_tau(
        data.train, data.val, list(grid), setup.seeds, setup.steps, setup.run_config(),
        data.test, workers_from_env(),
    )
    return {"chosen": res.chosen, "runs": _runs_to_rows(res, data.y_scale)}


def _trainable(setup, data) -> list[dict]:
    out = []
    for seed in range(setup.seeds):
        cfg = setup.run_config(tau_mode="trainable", tau_init_ratio=setup.trainable_init,
                               seed=seed)
        try:
            res = fit(data.train, data.val, cfg)
        except TrainingFailed as exc:
            log.info("trainable seed %d failed: %s", seed, exc)
            out.append({"seed": seed, "diverged": True, "ratio_trace": [], "test_rmse": math.inf})
            continue
        cols = sorted(k for k in res.history[0] if k.startswith("ts_over_tau_"))
        trace = np.mean([res.column(c) for c in cols], axis=0)
        out.append({
            "seed": seed,
            "diverged": False,
            "ratio_trace": trace.tolist(),
            "test_rmse": free_run_rmse(res.params, data.test, cfg) * data.y_scale,
            "best_step": res.best_step,
        })
    return out


def run_desk(setup: DeskSetup, parts=("sweep", "baseline", "trainable")) -> dict:
    data = desk_data(setup)
    out = {"setup": dataclasses.asdict(setup), "version": __version__,
           "bla_ratio": bla_ratio(setup, data)}
    if "sweep" in parts:
        out["sweep"] = _sweep(setup, data, setup.grid)
    if "baseline" in parts:
        out["baseline"] = _sweep(setup, data, [setup.baseline_ratio])
    if "trainable" in parts:
        out["trainable"] = _trainable(setup, data)
    return out


def _encode(obj):
    # json has no inf; store it as a string and read it back
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, dict):
        return {k: _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    return obj


def _decode(obj):
    if obj in ("inf", "-inf", "nan"):
        return float(obj)
    if isinstance(obj, dict):
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


def cache_path(setup: DeskSetup, root: str | Path | None = None) -> Path:
    root = Path(root or os.environ.get("SDNID_RESULTS") or DEFAULT_RESULTS)
    return root / f"desk-{setup.key()}.json"


def desk_results(setup: DeskSetup | None = None, root=None, recompute: bool | None = None) -> dict:
    """Cached :func:`run_desk`."""
    setup = setup or DeskSetup()
    path = cache_path(setup, root)
    if recompute is None:
        recompute = os.environ.get("SDNID_RECOMPUTE", "") not in ("", "0")
    if path.is_file() and not recompute:
        return _decode(json.loads(path.read_text()))
    text = json.dumps(_encode(run_desk(setup)), indent=1)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return _decode(json.loads(text))


def benchmark_study(
    path: str | Path,
    seeds: int = 20,
    steps: int = 20000,
    ratio: float | None = None,
    root=None,
    recompute: bool | None = None,
) -> dict:
    """Full-size runs on the public cascaded-tanks record (``dataBenchmark.csv``).

    Every model uses the default :class:`RunConfig` at ``Ts = 4``. Early
    stopping reads the first 512 test samples (the benchmark protocol).
    ``ratio`` defaults to the BLA estimate on the estimation record.
    """
    Ts = 4.0
    est = Pair(*load_csv(path, ["uEst"], ["yEst"], Ts))
    test = Pair(*load_csv(path, ["uVal"], ["yVal"], Ts))
    if ratio is None:
        ratio = Ts / tau_bla(est)
    key = hashlib.sha256(json.dumps(
        {"file": hashlib.sha256(Path(path).read_bytes()).hexdigest(), "seeds": seeds, "steps": steps,
         "ratio": ratio, "version": __version__}, sort_keys=True).encode()).hexdigest()[:12]
    out_path = Path(root or os.environ.get("SDNID_RESULTS") or DEFAULT_RESULTS)
    out_path = out_path / f"benchmark-{key}.json"
    if recompute is None:
        recompute = os.environ.get("SDNID_RECOMPUTE", "") not in ("", "0")
    if out_path.is_file() and not recompute:
        return _decode(json.loads(out_path.read_text()))
    splits = split_benchmark(est, test, 512)
    su, sy = Scaler.fit(est.u), Scaler.fit(est.y)
    z = {k: Pair(su.apply(v.u), sy.apply(v.y)) for k, v in splits.items()}
    res = cross_validate_tau(z["train"], z["val"], [ratio], seeds, steps, RunConfig(Ts=Ts),
                             z["test"], workers_from_env())
    rows = _runs_to_rows(res, float(sy.std[0]))
    finite = [r["test_rmse"] for r in rows if not r["diverged"]]
    out = {"ratio": ratio, "runs": rows,
           "best_test_rmse": min(finite) if finite else math.inf,
           "mean_test_rmse": float(np.mean(finite)) if finite else math.inf,
           "diverged": sum(r["diverged"] for r in rows)}
    text = json.dumps(_encode(out), indent=1)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(text)
    return _decode(json.loads(text))


# --- summaries -------------------------------------------------------------------


def medians(runs: list[dict], metric: str = "test_rmse") -> dict[float, float]:
    by = {}
    for r in runs:
        by.setdefault(r["ratio"], []).append(math.inf if r["diverged"] else r[metric])
    return {g: float(np.median(v)) for g, v in sorted(by.items())}


def nearest_grid_point(grid, ratio: float) -> float:
    """Grid value closest to ``ratio`` on a log scale."""
    return min(grid, key=lambda g: abs(math.log(g / ratio)))


def valley(grid, med: dict[float, float]) -> tuple[float, float, float]:
    """``(lo, best, hi)``: best median and its two grid neighbours."""
    grid = list(grid)
    i = min(range(len(grid)), key=lambda j: (med[grid[j]], grid[j]))
    return grid[max(i - 1, 0)], grid[i], grid[min(i + 1, len(grid) - 1)]


def final_window_change(trace, fraction: float = 0.1) -> float:
    """Relative change of a trace across its last ``fraction`` of entries."""
    trace = np.asarray(trace, float)
    n = max(2, int(math.ceil(fraction * len(trace))))
    a, b = trace[-n], trace[-1]
    return abs(b - a) / abs(a)


def summarize(results: dict) -> dict:
    grid = results["setup"]["grid"]
    runs = results["sweep"]["runs"]
    med = medians(runs)
    lo, best, hi = valley(grid, med)
    out = {
        "bla_ratio": results["bla_ratio"],
        "test_medians": med,
        "val_medians": medians(runs, "val_rmse"),
        "cv_winner": results["sweep"]["chosen"],
        "bla_point": nearest_grid_point(grid, results["bla_ratio"]),
        "valley": (lo, hi),
        "valley_best": best,
        "valley_best_median": med[best],
    }
    if "baseline" in results:
        out["baseline_median"] = medians(results["baseline"]["runs"])[
            results["setup"]["baseline_ratio"]
        ]
    if "trainable" in results:
        traces = [r["ratio_trace"] for r in results["trainable"] if not r["diverged"]]
        if traces:
            n = min(len(t) for t in traces)
            mean_trace = np.mean([t[:n] for t in traces], axis=0)
            out["trainable_final_ratio"] = float(mean_trace[-1])
            out["trainable_window_change"] = final_window_change(mean_trace)
            out["trainable_test_median"] = float(
                np.median([r["test_rmse"] for r in results["trainable"]])
            )
    return out
