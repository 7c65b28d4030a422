"""Fixed-step RK4 integration of a normalized vector field.

The integrated field is ``diag(1/tau) f(x, u)``. Rather than scaling
``f`` and then multiplying by the step, every stage uses the effective
step ``h / tau`` directly. A rollout at step ``h`` with normalization
``tau`` is therefore bit-identical to a rollout at step ``h / tau`` with
``tau = 1``, which is the time-rescaling view of the normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DIVERGENCE_THRESHOLD = 1e9

VectorField = Callable[[Tensor, Tensor], Tensor]


class IntegrationDiverged(FloatingPointError):
    def __init__(self, step: int, stage: int | None = None, reason: str = "non-finite"):
        self.step = step
        self.stage = stage
        where = f"step {step}" + (f", stage {stage}" if stage is not None else "")
        super().__init__(f"integration diverged at {where} ({reason})")


@dataclass(frozen=True)
class OdeStepSpec:
    """Step size ``h`` (seconds) and the normalization ``tau``.

    ``tau`` may be a float, a length-n_x array, or a (1, n_x) Tensor (possibly
    trainable). Inputs are held constant over the step (zero-order hold).
    """

    h: float
    tau: object = 1.0
    substeps: int = 1
    threshold: float = DIVERGENCE_THRESHOLD

    def __post_init__(self):
        if not (self.h > 0 and np.isfinite(self.h)):
            raise ValueError(f"step size must be positive and finite, got {self.h}")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        tv = self.tau.value if isinstance(self.tau, Tensor) else np.asarray(self.tau, float)
        if not (np.isfinite(tv).all() and (tv > 0).all()):
            raise ValueError("normalization entries must be finite and > 0")

    def step_factor(self):
        """Effective per-state step ``(h / substeps) / tau``."""
        h = self.h / self.substeps
        if isinstance(self.tau, Tensor):
            return ad.div(h, self.tau)
        tau = np.asarray(self.tau, dtype=float)
        if tau.ndim == 0:
            return h / float(tau)
        return Tensor(h / tau.reshape(1, -1))


def _check(x: Tensor, stages, threshold: float, step: int) -> None:
    v = x.value
    if np.isfinite(v).all():
        if np.abs(v).max(initial=0.0) > threshold:
            raise IntegrationDiverged(step, None, f"|x| > {threshold:g}")
        return
    # a non-finite stage poisons the update, so only inspect stages on failure
    for i, k in enumerate(stages, start=1):
        if not np.isfinite(k.value).all():
            raise IntegrationDiverged(step, i, "non-finite stage value")
    raise IntegrationDiverged(step, None, "non-finite")


def rk4_step(
    f: VectorField, x: Tensor, u: Tensor, spec: OdeStepSpec, *, _step: int = 0, _c=None
) -> Tensor:
    """One classical RK4 step of ``dx/dt = f(x, u) / tau`` with ``u`` held."""
    x = ad.as_tensor(x)
    u = ad.as_tensor(u)
    c = spec.step_factor() if _c is None else _c
    if isinstance(c, Tensor):
        c2, c6 = ad.scale(c, 0.5), ad.div(c, 6.0)
    else:
        c2, c6 = c * 0.5, c / 6.0
    for _ in range(spec.substeps):
        k1 = f(x, u)
        k2 = f(ad.axpy(x, c2, k1), u)
        k3 = f(ad.axpy(x, c2, k2), u)
        k4 = f(ad.axpy(x, c, k3), u)
        x = ad.axpy(x, c6, ad.lincomb((1.0, 2.0, 2.0, 1.0), (k1, k2, k3, k4)))
        _check(x, (k1, k2, k3, k4), spec.threshold, _step)
    return x


def simulate(
    f: VectorField, x0: Tensor, u_seq: Sequence[Tensor] | np.ndarray, spec: OdeStepSpec
) -> list[Tensor]:
    """Iterate :func:`rk4_step` over an input sequence.

    ``u_seq`` is a sequence of (B, n_u) inputs, or an array shaped (J, n_u)
    or (J, B, n_u). Returns ``J + 1`` states starting with ``x0``.
    """
    x = ad.as_tensor(x0)
    if isinstance(u_seq, np.ndarray) and u_seq.ndim == 2:
        u_seq = u_seq[:, None, :]
    c = spec.step_factor()
    traj = [x]
    for j, u in enumerate(u_seq):
        x = rk4_step(f, x, ad.as_tensor(u), spec, _step=j, _c=c)
        traj.append(x)
    return traj


def rescale_grid(signal, tau: float):
    """Move a signal onto the normalized time grid ``T_s / tau``.

    Sample values and sample count are unchanged.
    """
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    return replace(signal, Ts=signal.Ts / tau)
