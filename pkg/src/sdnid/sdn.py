"""The state-derivative normalization factor and its estimators.

``tau`` divides the state network output. It can be fixed, trained
jointly with the network (clamped at ``eps``), picked by cross-validation
over a grid of ``Ts / tau`` values, or computed from the variance ratio of
approximate state and state-derivative trajectories.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)


class DegenerateTrajectory(ValueError):
    pass


class SweepFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class NormFactor:
    """Raw normalization values; the effective value is ``max(eps, raw)``."""

    raw: np.ndarray
    eps: float = 1e-6
    trainable: bool = False

    def __post_init__(self):
        object.__setattr__(self, "raw", np.atleast_1d(np.asarray(self.raw, dtype=float)))
        if not self.eps > 0:
            raise ValueError("eps must be > 0")

    @property
    def kind(self) -> str:
        return "scalar" if self.raw.size == 1 else "vector"

    def tensor(self) -> ad.Tensor:
        return ad.Tensor(self.raw, requires_grad=self.trainable, name="tau")


def effective_tau(nf: NormFactor, n_x: int | None = None) -> np.ndarray:
    """Elementwise ``max(eps, raw)``, broadcast to ``n_x`` entries if given."""
    out = np.maximum(nf.raw, nf.eps)
    if n_x is not None and out.size == 1:
        out = np.full(n_x, out[0])
    return out


def _samples(z) -> np.ndarray:
    v = getattr(z, "values", z)
    v = np.asarray(v, dtype=float)
    return v[:, None] if v.ndim == 1 else v


def mean_square(z) -> float:
    """Time average of ``||z_k||^2 / n``, the (uncentered) variance measure."""
    v = _samples(z)
    return float(np.mean(np.sum(v * v, axis=1)) / v.shape[1])


def tau_from_variances(x, xdot) -> float:
    """``sqrt(var(x) / var(xdot))`` with var the per-state mean square."""
    xv, dv = _samples(x), _samples(xdot)
    if xv.shape != dv.shape:
        raise ValueError(f"trajectory shapes differ: {xv.shape} vs {dv.shape}")
    if xv.shape[0] < 2:
        raise ValueError("need at least two samples")
    vd = mean_square(dv)
    if not vd > 0:
        raise DegenerateTrajectory("state derivative is identically zero (constant trajectory)")
    return math.sqrt(mean_square(xv) / vd)


def normalize_check(x, xdot) -> tuple[float, float, tuple[float, float]]:
    """Scale ``gamma`` and ``tau`` that normalize a trajectory, and the result.

    Returns ``(gamma, tau, (var(x / gamma), var(tau * xdot / gamma)))``; both
    variances equal one up to rounding.
    """
    tau = tau_from_variances(x, xdot)
    xv, dv = _samples(x), _samples(xdot)
    gamma = math.sqrt(mean_square(xv))
    return gamma, tau, (mean_square(xv / gamma), mean_square(tau * dv / gamma))


def dft_omegas(N: int, Ts: float) -> np.ndarray:
    """Angular frequency of each DFT bin, with bins above N/2 mapped negative."""
    m = np.arange(N)
    m = np.where(m > N // 2, m - N, m)
    return 2 * np.pi * m / (N * Ts)


def tau_frequency_domain(U: np.ndarray, G: np.ndarray, Ts: float, N: int | None = None) -> float:
    """Normalization from input DFT bins and the input-to-state response.

    Parameters
    ----------
    U
        Input DFT over all ``N`` bins, shape (N,) or (N, n_u).
    G
        Response at each bin: (N,) scalar, (N, n_x) for one input, or
        (N, n_x, n_u).
    Ts, N
        Sampling interval and period; ``N`` defaults to ``len(U)``.
    """
    U = np.asarray(U, dtype=complex)
    G = np.asarray(G, dtype=complex)
    N = len(U) if N is None else N
    if len(U) != N or len(G) != N:
        raise ValueError("U and G must cover all N bins")
    if U.ndim == 1:
        U = U[:, None]
    if G.ndim == 1:
        G = G[:, None, None]
    elif G.ndim == 2:
        G = G[:, :, None]
    X = np.einsum("mxu,mu->mx", G, U)
    power = np.sum(np.abs(X) ** 2, axis=1)
    w2 = dft_omegas(N, Ts) ** 2
    den = float(np.sum(w2 * power))
    if not den > 0:
        raise DegenerateTrajectory("no excitation away from DC")
    return math.sqrt(float(np.sum(power)) / den)


# --- cross-validation ----------------------------------------------------------


@dataclass
class SweepRun:
    ratio: float
    seed: int
    val_rmse: float
    test_rmse: float
    diverged: bool
    steps: int


@dataclass
class SweepResult:
    """Per-run validation results over a grid of ``Ts / tau`` values."""

    grid: list[float]
    runs: list[SweepRun] = field(default_factory=list)
    chosen: float | None = None

    def rmse_by_point(self, metric: str = "val_rmse") -> dict[float, list[float]]:
        out = {g: [] for g in self.grid}
        for r in self.runs:
            out[r.ratio].append(math.inf if r.diverged else getattr(r, metric))
        return out

    def medians(self, metric: str = "val_rmse") -> dict[float, float]:
        """Median over seeds; a point where every run diverged is ``inf``."""
        return {g: float(np.median(v)) if v else math.inf for g, v in self.rmse_by_point(metric).items()}

    def failed_points(self) -> list[float]:
        return [g for g, v in self.rmse_by_point().items() if v and all(math.isinf(x) for x in v)]

    def to_table(self, path, delimiter: str = ",") -> None:
        from .data import write_table

        write_table(
            path,
            {
                "ts_over_tau": [r.ratio for r in self.runs],
                "seed": [r.seed for r in self.runs],
                "val_rmse": [r.val_rmse for r in self.runs],
                "test_rmse": [r.test_rmse for r in self.runs],
                "diverged": [r.diverged for r in self.runs],
                "steps": [r.steps for r in self.runs],
            },
            delimiter,
        )


def choose(result: SweepResult) -> float:
    """Grid point with least median validation RMSE; ties go to larger tau."""
    med = result.medians()
    live = [g for g in result.grid if math.isfinite(med[g])]
    if not live:
        raise SweepFailed("every grid point diverged on all seeds")
    # smaller Ts/tau means larger tau
    return min(live, key=lambda g: (med[g], g))


def _sweep_cell(args) -> SweepRun:
    from .train import TrainingFailed, fit, free_run_rmse

    train, val, test, config, ratio, seed = args
    cfg = config.replace(tau_mode="fixed", tau_init_ratio=ratio, seed=seed)
    try:
        res = fit(train, val, cfg)
    except TrainingFailed as exc:
        log.info("Ts/tau=%g seed=%d failed: %s", ratio, seed, exc)
        return SweepRun(ratio, seed, math.inf, math.inf, True, 0)
    test_rmse = free_run_rmse(res.params, test, cfg) if test is not None else math.nan
    unstable = not math.isfinite(res.best_val) or res.best_val > 1e9
    if test is not None and not (test_rmse <= 1e9):
        unstable = True
    return SweepRun(ratio, seed, res.best_val, test_rmse, unstable, res.steps)


def workers_from_env(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("SDNID_WORKERS", default)))
    except ValueError:
        return default


def cross_validate_tau(
    train,
    val,
    grid: Sequence[float],
    seeds: int | Sequence[int],
    budget: int,
    config=None,
    test=None,
    workers: int | None = None,
) -> SweepResult:
    """Train one model per (grid point, seed) and pick the best ``Ts / tau``.

    ``budget`` is the optimization step limit per run. ``test`` is only
    evaluated for reporting and never influences the choice.
    """
    from .train import RunConfig

    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("empty grid")
    if any(a >= b for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be strictly increasing")
    if budget <= 0:
        raise ValueError("budget must be > 0")
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    config = (config or RunConfig()).replace(max_steps=budget)
    cells = [(train, val, test, config, g, s) for g in grid for s in seed_list]
    workers = workers or workers_from_env()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            runs = list(pool.map(_sweep_cell, cells))
    else:
        runs = [_sweep_cell(c) for c in cells]
    result = SweepResult(grid, runs)
    result.chosen = choose(result)
    return result


def default_grid(n: int = 10, lo: float = 1e-4, hi: float = 40.0) -> list[float]:
    return np.geomspace(lo, hi, n).tolist()
