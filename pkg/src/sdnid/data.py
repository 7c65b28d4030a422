"""Sampled signals, CSV ingestion, z-scoring, splits and a synthetic
cascaded-tanks simulator.

CSV layout: first row is a header, one sample per row, decimal-point
floats. The public cascaded-tanks file ``dataBenchmark.csv`` carries the
columns ``uEst, uVal, yEst, yVal`` (estimation and validation records,
T_s = 4 s); point ``--u-col/--y-col`` at the relevant pair.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Signal:
    """Uniformly sampled multichannel series, ``values`` is K x n."""

    values: np.ndarray
    Ts: float
    names: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1:
            raise DataError(f"signal needs K >= 1 samples, got shape {v.shape}")
        if not self.Ts > 0:
            raise DataError(f"sampling interval must be positive, got {self.Ts}")
        if not np.isfinite(v).all():
            raise DataError("signal contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        names = tuple(self.names) or tuple(f"ch{i}" for i in range(v.shape[1]))
        if len(names) != v.shape[1]:
            raise DataError(f"{len(names)} names for {v.shape[1]} channels")
        object.__setattr__(self, "names", names)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def __getitem__(self, key: slice) -> "Signal":
        if not isinstance(key, slice):
            raise TypeError("signals are sliced along time only")
        return Signal(self.values[key], self.Ts, self.names)


def load_csv(
    path: str | Path,
    u_cols: Sequence[str],
    y_cols: Sequence[str],
    Ts: float,
    delimiter: str = ",",
) -> tuple[Signal, Signal]:
    """Read aligned input and output signals from a header-first CSV file."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        idx = {}
        for col in (*u_cols, *y_cols):
            if col not in header:
                raise DataError(f"{path}: missing column {col!r} (have {header})")
            idx[col] = header.index(col)
        rows = []
        for r, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            vals = []
            for col in (*u_cols, *y_cols):
                cell = row[idx[col]] if idx[col] < len(row) else ""
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: non-numeric cell {cell!r} at row {r}, column {col!r}"
                    ) from None
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.array(rows)
    nu = len(u_cols)
    return Signal(arr[:, :nu], Ts, tuple(u_cols)), Signal(arr[:, nu:], Ts, tuple(y_cols))


def write_table(
    path: str | Path, columns: Mapping[str, Sequence], delimiter: str = ","
) -> None:
    """Write equal-length columns with a header; floats at 17 significant digits."""
    names = list(columns)
    cols = [list(columns[n]) for n in names]
    if len({len(c) for c in cols}) > 1:
        raise DataError("columns differ in length")

    def fmt(v):
        if isinstance(v, (bool, np.bool_)):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            return "%.17g" % v
        return str(v)

    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(names)
        for row in zip(*cols):
            w.writerow([fmt(v) for v in row])


def read_table(path: str | Path, delimiter: str = ",") -> dict[str, list[str]]:
    """Read a header-first table back as raw string columns."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader)
        out = {h: [] for h in header}
        for row in reader:
            for h, c in zip(header, row):
                out[h].append(c)
    return out


def save_csv(path, u: Signal, y: Signal, delimiter: str = ",") -> None:
    cols = {}
    for sig in (u, y):
        for i, name in enumerate(sig.names):
            cols[name] = sig.values[:, i]
    write_table(path, cols, delimiter)


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, signal: Signal) -> "Scaler":
        if len(signal) < 2:
            raise DataError("z-score needs at least 2 samples")
        mean = signal.values.mean(axis=0)
        std = signal.values.std(axis=0)
        bad = [n for n, s in zip(signal.names, std) if not s > 0]
        if bad:
            raise DataError(f"constant channel(s) cannot be z-scored: {bad}")
        return cls(mean, std)

    def apply(self, signal: Signal) -> Signal:
        return Signal((signal.values - self.mean) / self.std, signal.Ts, signal.names)

    def invert(self, signal: Signal) -> Signal:
        return Signal(signal.values * self.std + self.mean, signal.Ts, signal.names)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Scaler":
        return cls(np.array(d["mean"], float), np.array(d["std"], float))


def zscore_fit(signal: Signal) -> Scaler:
    return Scaler.fit(signal)


# --- synthetic cascaded tanks -------------------------------------------------


@dataclass(frozen=True)
class TankParams:
    """Two-tank constants.

    Upper tank ``x1`` is fed by the pump and drains into the lower tank
    ``x2``. Levels are clamped to ``[0, x_max]``: water above ``x_max``
    overflows and is lost. Around the default operating point the linearized
    time constants are a few tens of seconds.
    """

    k1: float = 0.12
    k2: float = 0.12
    k3: float = 0.10
    k4: float = 0.10
    x_max: float = 10.0
    substeps: int = 20

    def equilibrium(self, u: float) -> tuple[float, float]:
        """Steady levels for a constant pump input, ignoring overflow."""
        s1 = self.k4 * max(u, 0.0) / self.k1
        s2 = self.k2 * s1 / self.k3
        return (min(s1 * s1, self.x_max), min(s2 * s2, self.x_max))

    def __post_init__(self):
        vals = (self.k1, self.k2, self.k3, self.k4, self.x_max)
        if not all(np.isfinite(v) for v in vals):
            raise DataError("tank constants must be finite")
        if self.substeps < 1:
            raise DataError("substeps must be >= 1")


def _tank_rhs(x: np.ndarray, u: float, p: TankParams) -> np.ndarray:
    s1 = np.sqrt(max(0.0, x[0]))
    s2 = np.sqrt(max(0.0, x[1]))
    return np.array([-p.k1 * s1 + p.k4 * u, p.k2 * s1 - p.k3 * s2])


def cts_states(
    u: Signal, params: TankParams = TankParams(), x0=(0.0, 0.0)
) -> np.ndarray:
    """Tank levels at each sample (K x 2) under zero-order-hold input."""
    p = params
    h = u.Ts / p.substeps
    x = np.clip(np.array(x0, dtype=float), 0.0, p.x_max)
    out = np.empty((len(u), 2))
    for k, uk in enumerate(u.values[:, 0]):
        out[k] = x
        for _ in range(p.substeps):
            k1 = _tank_rhs(x, uk, p)
            k2 = _tank_rhs(x + 0.5 * h * k1, uk, p)
            k3 = _tank_rhs(x + 0.5 * h * k2, uk, p)
            k4 = _tank_rhs(x + h * k3, uk, p)
            x = np.clip(x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), 0.0, p.x_max)
    return out


def cts_oracle(
    u: Signal,
    params: TankParams = TankParams(),
    x0=(0.0, 0.0),
    noise_std: float = 0.0,
    seed: int | None = None,
) -> Signal:
    """Lower-tank level ``y = x2 + w`` with white measurement noise ``w``."""
    if not np.isfinite(noise_std) or noise_std < 0:
        raise DataError("noise_std must be finite and >= 0")
    y = cts_states(u, params, x0)[:, 1].copy()
    if noise_std > 0:
        y += np.random.default_rng(seed).normal(0.0, noise_std, size=y.shape)
    return Signal(y, u.Ts, ("y",))


def multisine(
    K: int,
    Ts: float,
    f_max: float,
    offset: float = 3.0,
    amplitude: float = 1.0,
    seed: int | None = None,
    n_lines: int | None = None,
) -> Signal:
    """Random-phase multisine, flat amplitude over (0, f_max] Hz, period K."""
    rng = np.random.default_rng(seed)
    f0 = 1.0 / (K * Ts)
    lines = np.arange(1, max(1, int(f_max / f0)) + 1)
    if n_lines is not None:
        lines = lines[:n_lines]
    t = np.arange(K) * Ts
    phases = rng.uniform(0, 2 * np.pi, size=lines.size)
    u = np.cos(2 * np.pi * f0 * np.outer(t, lines) + phases).sum(axis=1)
    u *= amplitude / u.std()
    return Signal(offset + u, Ts, ("u",))


def make_cts_dataset(
    K: int = 2000,
    Ts: float = 4.0,
    params: TankParams = TankParams(),
    f_max: float = 0.01,
    snr_db: float | None = None,
    seed: int = 0,
    offset: float = 2.5,
    amplitude: float = 0.8,
) -> dict:
    """Estimation and test records from two independent multisine realizations.

    Both records start at the equilibrium of the mean pump input.
    """
    ss = np.random.SeedSequence(seed)
    s_est, s_test, s_nest, s_ntest = (int(s.generate_state(1)[0]) for s in ss.spawn(4))
    out = {}
    for name, su, sn in (("est", s_est, s_nest), ("test", s_test, s_ntest)):
        u = multisine(K, Ts, f_max, offset, amplitude, seed=su)
        x0 = params.equilibrium(offset)
        clean = cts_oracle(u, params, x0)
        std = 0.0
        if snr_db is not None:
            std = float(np.sqrt(clean.values.var() / 10 ** (snr_db / 10)))
        out[name] = (u, cts_oracle(u, params, x0, noise_std=std, seed=sn))
    return out


def measured_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    noise = np.asarray(noisy) - np.asarray(clean)
    return float(10 * np.log10(np.var(clean) / np.var(noise)))


# --- splits --------------------------------------------------------------------


@dataclass(frozen=True)
class Pair:
    u: Signal
    y: Signal

    def __post_init__(self):
        if len(self.u) != len(self.y):
            raise DataError(f"input/output lengths differ: {len(self.u)} vs {len(self.y)}")

    def __len__(self) -> int:
        return len(self.u)

    def __getitem__(self, key: slice) -> "Pair":
        return Pair(self.u[key], self.y[key])

    @property
    def Ts(self) -> float:
        return self.u.Ts


def split(pair: Pair, scheme: Mapping[str, tuple[int, int]]) -> dict[str, Pair]:
    """Cut contiguous, non-overlapping ``[start, stop)`` ranges."""
    spans = sorted(scheme.items(), key=lambda kv: kv[1][0])
    for name, (a, b) in spans:
        if not 0 <= a < b <= len(pair):
            raise DataError(f"split {name!r} range [{a}, {b}) outside data of length {len(pair)}")
    for (n1, (_, b1)), (n2, (a2, _)) in zip(spans, spans[1:]):
        if a2 < b1:
            raise DataError(f"splits {n1!r} and {n2!r} overlap")
    return {name: pair[a:b] for name, (a, b) in scheme.items()}


def split_fractions(
    pair: Pair, fractions: Mapping[str, float] = {"train": 0.7, "val": 0.15, "test": 0.15}
) -> dict[str, Pair]:
    """Contiguous splits in the given order, sized by fraction of the record."""
    total = sum(fractions.values())
    if total > 1 + 1e-12:
        raise DataError(f"fractions sum to {total} > 1")
    K = len(pair)
    scheme, start, acc = {}, 0, 0.0
    for name, frac in fractions.items():
        acc += frac
        stop = int(round(acc * K))
        scheme[name] = (start, stop)
        start = stop
    return split(pair, scheme)


def split_benchmark(train: Pair, test: Pair, n_val: int = 512) -> dict[str, Pair]:
    """Benchmark protocol: validation is the first ``n_val`` test samples.

    This reads the test record during training (for early stopping only),
    so it is logged and only used when explicitly requested.
    """
    if n_val > len(test):
        raise DataError(f"validation prefix {n_val} longer than test record {len(test)}")
    log.warning("benchmark split: early stopping on the first %d test samples", n_val)
    return {"train": train, "val": test[:n_val], "test": test}
