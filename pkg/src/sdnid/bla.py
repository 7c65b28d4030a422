"""Best linear approximation and the variance-ratio normalization heuristic.

The linear model is estimated in three stages:

1. ARX(p) by truncated-SVD least squares. Band-limited inputs make the
   lagged regressors nearly collinear; directions with singular values
   below ``rcond`` times the largest are dropped instead of fitted,
2. a balanced Ho-Kalman realization of order ``n`` from the ARX impulse
   response,
3. conversion to continuous time by inverting the zero-order-hold map
   (matrix logarithm), or by the bilinear map when the logarithm does not
   exist.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .data import Pair, Signal
from .ode import DIVERGENCE_THRESHOLD
from .sdn import tau_from_variances


class IdentificationError(ValueError):
    pass


@dataclass
class LinearSS:
    """Continuous-time ``dx/dt = A x + B u``, ``y = C x + D u``.

    ``discrete`` keeps the intermediate sampled realization (A_d, B_d, C_d,
    D_d) at interval ``Ts``. ``conversion`` is ``"zoh"`` or ``"tustin"``.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Ts: float
    conversion: str = "zoh"
    warning: str | None = None
    discrete: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, float))
        self.B = np.atleast_2d(np.asarray(self.B, float))
        self.C = np.atleast_2d(np.asarray(self.C, float))
        self.D = np.atleast_2d(np.asarray(self.D, float))
        n = self.A.shape[0]
        if (
            self.A.shape != (n, n)
            or self.B.shape[0] != n
            or self.C.shape[1] != n
            or self.D.shape != (self.C.shape[0], self.B.shape[1])
        ):
            raise ValueError("inconsistent state-space dimensions")

    @property
    def order(self) -> int:
        return self.A.shape[0]

    @property
    def poles(self) -> np.ndarray:
        return np.linalg.eigvals(self.A)

    def is_stable(self) -> bool:
        return bool(np.all(self.poles.real < 0))

    def to_document(self) -> dict:
        return {
            "format": "sdnid-linear-ss",
            "version": 1,
            "Ts": self.Ts,
            "conversion": self.conversion,
            "warning": self.warning,
            "matrices": {
                k: {"shape": list(m.shape), "values": m.ravel().tolist()}
                for k, m in (("A", self.A), ("B", self.B), ("C", self.C), ("D", self.D))
            },
        }

    @classmethod
    def from_document(cls, doc: dict) -> "LinearSS":
        if doc.get("format") != "sdnid-linear-ss":
            raise ValueError("not a linear state-space document")
        mats = {
            k: np.array(v["values"], float).reshape(v["shape"]) for k, v in doc["matrices"].items()
        }
        return cls(Ts=doc["Ts"], conversion=doc["conversion"], warning=doc["warning"], **mats)


def zoh_discretize(A: np.ndarray, B: np.ndarray, Ts: float) -> tuple[np.ndarray, np.ndarray]:
    n, m = B.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n] = A
    M[:n, n:] = B
    E = linalg.expm(M * Ts)
    return E[:n, :n], E[:n, n:]


def _hold_integral(Ac: np.ndarray, Ts: float) -> np.ndarray:
    # integral_0^Ts expm(Ac s) ds, valid for singular Ac
    n = Ac.shape[0]
    M = np.zeros((2 * n, 2 * n))
    M[:n, :n] = Ac
    M[:n, n:] = np.eye(n)
    return linalg.expm(M * Ts)[:n, n:]


def _log_defined(Ad: np.ndarray) -> bool:
    ev = np.linalg.eigvals(Ad)
    on_axis = (np.abs(ev.imag) <= 1e-12 * max(1.0, np.abs(ev).max())) & (ev.real <= 0)
    return not on_axis.any()


def d2c(Ad, Bd, Cd, Dd, Ts: float) -> LinearSS:
    """Invert the ZOH map; fall back to the bilinear map if ``log(Ad)`` is undefined."""
    n = Ad.shape[0]
    if _log_defined(Ad):
        Ac = linalg.logm(Ad) / Ts
        if np.iscomplexobj(Ac):
            Ac = Ac.real
        Bc = np.linalg.solve(_hold_integral(Ac, Ts), Bd)
        return LinearSS(Ac, Bc, Cd, Dd, Ts, "zoh", None, (Ad, Bd, Cd, Dd))
    msg = "discrete pole on the closed negative real axis; used bilinear conversion"
    warnings.warn(msg, RuntimeWarning, stacklevel=2)
    I = np.eye(n)
    Ac = (2.0 / Ts) * np.linalg.solve((Ad + I).T, (Ad - I).T).T
    Bc = (I - 0.5 * Ts * Ac) @ Bd / Ts
    return LinearSS(Ac, Bc, Cd, Dd, Ts, "tustin", msg, (Ad, Bd, Cd, Dd))


ARX_RCOND = 1e-3


def fit_arx(
    u: np.ndarray, y: np.ndarray, lag: int, rcond: float = ARX_RCOND
) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares ARX ``y_k = sum_i Ay_i y_{k-i} + sum_{i=0}^{p} Bu_i u_{k-i}``.

    Returns ``Ay`` (p, ny, ny) and ``Bu`` (p+1, ny, nu).
    """
    u = np.asarray(u, float).reshape(len(u), -1)
    y = np.asarray(y, float).reshape(len(y), -1)
    K, nu = u.shape
    ny = y.shape[1]
    p = lag
    if p < 1:
        raise IdentificationError("ARX lag must be >= 1")
    rows = K - p
    n_reg = p * ny + (p + 1) * nu
    if rows < 2 * n_reg:
        raise IdentificationError(f"{K} samples too few for ARX lag {p} ({n_reg} regressors)")
    Phi_y = np.hstack([y[p - i : K - i] for i in range(1, p + 1)])
    Phi_u = np.hstack([u[p - i : K - i] for i in range(0, p + 1)])
    if np.linalg.matrix_rank(Phi_u) == 0:
        raise IdentificationError("input carries no excitation; regression is rank deficient")
    Phi = np.hstack([Phi_y, Phi_u])
    # unit-RMS columns so the cutoff does not depend on signal units
    scale = np.sqrt(np.mean(Phi * Phi, axis=0))
    scale[scale == 0] = 1.0
    theta, *_ = np.linalg.lstsq(Phi / scale, y[p:], rcond=rcond)
    theta = theta / scale[:, None]
    Ay = theta[: p * ny].reshape(p, ny, ny).transpose(0, 2, 1)
    Bu = theta[p * ny :].reshape(p + 1, nu, ny).transpose(0, 2, 1)
    return Ay, Bu


def arx_markov(Ay: np.ndarray, Bu: np.ndarray, count: int) -> np.ndarray:
    """Impulse response ``M_0 .. M_{count-1}`` of an ARX model, (count, ny, nu)."""
    p, ny, nu = Ay.shape[0], Bu.shape[1], Bu.shape[2]
    M = np.zeros((count, ny, nu))
    for k in range(count):
        acc = Bu[k].copy() if k < Bu.shape[0] else np.zeros((ny, nu))
        for i in range(1, min(k, p) + 1):
            acc += Ay[i - 1] @ M[k - i]
        M[k] = acc
    return M


def ho_kalman(markov: np.ndarray, order: int, rows: int, cols: int):
    """Balanced realization from Markov parameters ``M_0, M_1, ...``."""
    _, ny, nu = markov.shape
    if markov.shape[0] < rows + cols + 1:
        raise IdentificationError("not enough Markov parameters for the Hankel size")
    H = np.block([[markov[1 + i + j] for j in range(cols)] for i in range(rows)])
    Hs = np.block([[markov[2 + i + j] for j in range(cols)] for i in range(rows)])
    U, s, Vt = np.linalg.svd(H)
    n = order
    if n > len(s):
        raise IdentificationError(f"order {n} exceeds Hankel rank bound {len(s)}")
    if s[0] == 0.0:
        # zero impulse response
        return np.zeros((n, n)), np.zeros((n, nu)), np.zeros((ny, n)), markov[0].copy()
    sn = np.maximum(s[:n], s[0] * 1e-14)
    sq = np.sqrt(sn)
    Ad = (U[:, :n].T @ Hs @ Vt[:n].T) / np.outer(sq, sq)
    Bd = (sq[:, None] * Vt[:n])[:, :nu]
    Cd = (U[:, :n] * sq[None, :])[:ny]
    return Ad, Bd, Cd, markov[0].copy()


def fit_bla(
    pair: Pair, order: int = 2, lag: int = 10, hankel: int | None = None, rcond: float = ARX_RCOND
) -> LinearSS:
    """Continuous-time linear model from input/output records."""
    if order < 1:
        raise IdentificationError("order must be >= 1")
    Ay, Bu = fit_arx(pair.u.values, pair.y.values, lag, rcond)
    size = hankel or max(20, 2 * order + 1, lag)
    markov = arx_markov(Ay, Bu, 2 * size + 2)
    Ad, Bd, Cd, Dd = ho_kalman(markov, order, size, size)
    model = d2c(Ad, Bd, Cd, Dd, pair.Ts)
    if not model.is_stable():
        warnings.warn("fitted continuous-time model is not Hurwitz", RuntimeWarning, stacklevel=2)
    return model


def frf_state(model: LinearSS, omegas: np.ndarray) -> np.ndarray:
    """Input-to-state response ``(j w I - A)^{-1} B`` at each frequency."""
    n = model.order
    return np.stack([np.linalg.solve(1j * w * np.eye(n) - model.A, model.B) for w in omegas])


def bla_states(model: LinearSS, u: Signal) -> tuple[Signal, Signal]:
    """State and exact state derivative on the sample grid, from ``x(0) = 0``."""
    if u.n != model.B.shape[1]:
        raise ValueError(f"input has {u.n} channels, model expects {model.B.shape[1]}")
    Ad, Bd = zoh_discretize(model.A, model.B, u.Ts)
    K = len(u)
    uv = u.values
    x = np.zeros((K, model.order))
    for k in range(K - 1):
        x[k + 1] = Ad @ x[k] + Bd @ uv[k]
        if not np.abs(x[k + 1]).max() <= DIVERGENCE_THRESHOLD:
            raise IdentificationError(f"BLA state simulation diverged at sample {k + 1}")
    xdot = x @ model.A.T + uv @ model.B.T
    names = tuple(f"x{i}" for i in range(model.order))
    return Signal(x, u.Ts, names), Signal(xdot, u.Ts, tuple("d" + n for n in names))


def _centered(pair: Pair) -> Pair:
    # deviations from the operating point; tau is invariant to the scaling
    return Pair(
        Signal(pair.u.values - pair.u.values.mean(axis=0), pair.Ts, pair.u.names),
        Signal(pair.y.values - pair.y.values.mean(axis=0), pair.Ts, pair.y.names),
    )


def tau_bla(pair: Pair, order: int = 2, lag: int = 10) -> float:
    """Normalization ``sqrt(var(x_BLA) / var(xdot_BLA))`` in seconds.

    The linear model is fitted to, and driven by, the mean-removed record.
    """
    pair = _centered(pair)
    model = fit_bla(pair, order, lag)
    x, xdot = bla_states(model, pair.u)
    return tau_from_variances(x, xdot)
