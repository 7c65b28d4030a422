"""Truncated simulation error minimization with an encoder.

Each optimization step draws ``batch`` start indices ``k``, encodes
``x_{k|k}`` from the preceding lag window, rolls the normalized state
network forward ``J - 1`` RK4 steps and penalizes the output error over
the ``J`` predicted samples. The objective adds the constraint-network
penalty, an L2 weight penalty and the negative-definiteness barrier on
``A``.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Pair
from .nn import Dims, ModelParams, _g, d_forward, encode_window, init_params, lag_window, state_field
from .ode import IntegrationDiverged, OdeStepSpec, simulate

log = logging.getLogger(__name__)

TAU_MODES = ("fixed", "trainable", "bla")


class TrainingFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Every hyperparameter of a training run, with the published defaults."""

    n_x: int = 4
    n_a: int = 5
    n_b: int = 5
    hidden: int = 64
    depth: int = 2
    batch: int = 64
    J: int = 128
    max_steps: int = 20000
    lr_schedule: tuple = ((0, 0.003), (1000, 0.0009), (3000, 0.00027))
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    barrier_moment_reset: bool = True
    weight_decay: float = 1e-8
    lambda_N: float = 1e12
    lambda_D: float = 1e3
    early_stop_patience: int = 2000
    val_interval: int = 50
    Ts: float = 4.0
    tau_mode: str = "fixed"
    tau_init_ratio: float = 0.1
    tau_kind: str = "auto"
    tau_eps: float | None = None
    substeps: int = 1
    output_uses_input: bool = True
    init_scale: float = 0.01
    leaky_slope: float = 0.01
    bla_order: int = 2
    bla_lag: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.tau_mode not in TAU_MODES:
            raise ValueError(f"tau_mode must be one of {TAU_MODES}, got {self.tau_mode!r}")
        if self.batch < 1 or self.J < 1:
            raise ValueError("batch and J must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if not self.Ts > 0 or not self.tau_init_ratio > 0:
            raise ValueError("Ts and tau_init_ratio must be > 0")
        sched = tuple((int(s), float(lr)) for s, lr in self.lr_schedule)
        if not sched or sched[0][0] != 0 or any(a[0] >= b[0] for a, b in zip(sched, sched[1:])):
            raise ValueError("lr_schedule must start at step 0 and be strictly increasing")
        object.__setattr__(self, "lr_schedule", sched)

    def dims(self, n_u: int, n_y: int) -> Dims:
        return Dims(self.n_x, n_u, n_y, self.n_a, self.n_b, self.hidden, self.depth)

    @property
    def lag(self) -> int:
        return max(self.n_a, self.n_b)

    @property
    def resolved_tau_kind(self) -> str:
        if self.tau_kind != "auto":
            return self.tau_kind
        return "vector" if self.tau_mode == "trainable" else "scalar"

    def lr_at(self, step: int) -> float:
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if step >= start:
                lr = value
        return lr

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_schedule"] = [list(p) for p in self.lr_schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def init_model(config: RunConfig, n_u: int, n_y: int, seed=None) -> ModelParams:
    return init_params(
        config.dims(n_u, n_y),
        config.seed if seed is None else seed,
        config.Ts,
        tau_ratio=config.tau_init_ratio,
        tau_kind=config.resolved_tau_kind,
        tau_trainable=config.tau_mode == "trainable",
        tau_eps=config.tau_eps,
        init_scale=config.init_scale,
        slope=config.leaky_slope,
        output_uses_input=config.output_uses_input,
    )


# --- batches -------------------------------------------------------------------


@dataclass(frozen=True)
class Batch:
    starts: np.ndarray  # (B,)
    window: np.ndarray  # (B, window)
    u: np.ndarray  # (J, B, n_u)
    y: np.ndarray  # (J, B, n_y)

    @property
    def size(self) -> int:
        return len(self.starts)


def make_batch(pair: Pair, starts: Sequence[int], config: RunConfig) -> Batch:
    starts = np.asarray(starts, dtype=int)
    K, J, lag = len(pair), config.J, config.lag
    if starts.size == 0:
        raise ValueError("empty batch")
    if starts.min() < lag or starts.max() + J > K:
        raise ValueError(f"start indices must lie in [{lag}, {K - J}]")
    u, y = pair.u.values, pair.y.values
    idx = starts[:, None] + np.arange(-lag, 0)[None, :]
    dims = config.dims(pair.u.n, pair.y.n)
    window = lag_window(u[idx], y[idx], dims)
    jdx = starts[None, :] + np.arange(J)[:, None]
    return Batch(starts, window, u[jdx], y[jdx])


def admissible_starts(K: int, config: RunConfig) -> np.ndarray:
    starts = np.arange(config.lag, K - config.J + 1)
    if starts.size == 0:
        raise ValueError(f"data length {K} too short for J={config.J} and lag {config.lag}")
    return starts


def sample_batch(rng: np.random.Generator, pair: Pair, config: RunConfig) -> Batch:
    starts = admissible_starts(len(pair), config)
    pick = rng.choice(starts, size=min(config.batch, starts.size), replace=False)
    return make_batch(pair, pick, config)


# --- objective -----------------------------------------------------------------


def barrier_LN(A: Tensor, lambda_N: float) -> Tensor:
    """Smooth negative-definiteness barrier on the symmetric part of ``A``.

    With ``S = (A + A^T) / 2`` and leading minors ``m_i``, ``A`` is negative
    definite iff ``(-1)^i m_i > 0`` for all ``i``. The penalty is
    ``lambda_N * sum_i relu((-1)^(i+1) m_i)^2``: zero when every minor has
    the right sign, differentiable elsewhere.
    """
    A = ad.as_tensor(A)
    n = A.shape[0]
    S = ad.scale(ad.add(A, ad.transpose(A)), 0.5)
    total = None
    for i in range(1, n + 1):
        m = ad.det(ad.slice2d(S, slice(0, i), slice(0, i)))
        term = ad.square(ad.relu(ad.scale(m, (-1.0) ** (i + 1))))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, lambda_N)


def is_negative_definite(A: np.ndarray) -> bool:
    S = 0.5 * (A + A.T)
    return bool(np.all(np.linalg.eigvalsh(S) < 0))


def _tau_for_spec(params: ModelParams):
    tau_hat = params.tau_hat()
    if params.tau_trainable:
        return tau_hat
    v = tau_hat.value
    return float(v[0, 0]) if v.size == 1 else v.ravel()


def loss_terms(params: ModelParams, batch: Batch, config: RunConfig) -> dict[str, Tensor]:
    """Objective components as tensors; record on a tape to differentiate."""
    B, J = batch.size, batch.u.shape[0]
    nu, ny = batch.u.shape[2], batch.y.shape[2]
    x0 = encode_window(params, Tensor(batch.window))
    spec = OdeStepSpec(config.Ts, _tau_for_spec(params), config.substeps)
    states = simulate(state_field(params), x0, batch.u[:-1], spec)
    X = ad.concat(states, axis=0)  # (J*B, n_x), row j*B + b
    U = Tensor(batch.u.reshape(J * B, nu))
    Y = Tensor(batch.y.reshape(J * B, ny))
    resid = ad.sub(_g(params, X, U), Y)
    terms = {"sim": ad.scale(ad.sum(ad.square(resid)), 1.0 / B)}
    if config.lambda_D:
        dv = d_forward(params, X, U)
        terms["LD"] = ad.scale(ad.sum(ad.square(dv)), config.lambda_D / B)
    if config.weight_decay:
        sq = [ad.sum(ad.square(params[k])) for k in params.weight_names()]
        acc = sq[0]
        for s in sq[1:]:
            acc = ad.add(acc, s)
        terms["LW"] = ad.scale(acc, config.weight_decay)
    if config.lambda_N:
        terms["LN"] = barrier_LN(params["A"], config.lambda_N)
    total = None
    for t in terms.values():
        total = t if total is None else ad.add(total, t)
    terms["total"] = total
    return terms


def loss(params: ModelParams, batch: Batch, config: RunConfig):
    """Returns ``(total, grads, parts)`` with gradients keyed by parameter name.

    Raises :class:`IntegrationDiverged` if the rollout blows up.
    """
    with ad.Tape() as tape:
        terms = loss_terms(params, batch, config)
    grads = ad.backward(tape, terms["total"], params.trainable)
    parts = {k: v.item() for k, v in terms.items()}
    return parts["total"], {t.name: g for t, g in grads.items()}, parts


# --- optimizer -----------------------------------------------------------------


class Adam:
    """Adam with a piecewise-constant learning rate.

    Weight decay is not applied here; it enters through the loss.
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}
        self.skipped = 0

    def reset(self, names) -> None:
        """Forget the moment estimates (and bias-correction clock) of ``names``."""
        for name in names:
            self.m.pop(name, None)
            self.v.pop(name, None)
            self.t.pop(name, None)

    def step(self, params: ModelParams, grads: dict[str, np.ndarray], step: int) -> bool:
        """Update ``params`` in place. Returns False when the step is skipped."""
        if not all(np.isfinite(g).all() for g in grads.values()):
            self.skipped += 1
            return False
        c = self.config
        lr = c.lr_at(step)
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            t_i = self.t[name] = self.t.get(name, 0) + 1
            bc1 = 1.0 - c.beta1**t_i
            bc2 = 1.0 - c.beta2**t_i
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            t = params.tensors[name]
            t.value = t.value - lr * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
        return True


def adam_step(params, grads, step, config, state: Adam | None = None) -> ModelParams:
    state = state or Adam(config)
    state.step(params, grads, step)
    return params


# --- evaluation ----------------------------------------------------------------


def rmse(y, yhat, skip: int = 0) -> float:
    """Root of the mean squared output-error norm over samples ``k >= skip``."""
    y = getattr(y, "values", y)
    yhat = getattr(yhat, "values", yhat)
    y = np.asarray(y, float).reshape(len(y), -1)
    yhat = np.asarray(yhat, float).reshape(len(yhat), -1)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {yhat.shape}")
    if skip >= len(y):
        raise ValueError("empty evaluation range")
    err = y[skip:] - yhat[skip:]
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def free_run(params: ModelParams, pair: Pair, config: RunConfig) -> np.ndarray:
    """Simulated outputs for ``k = lag .. K-1`` from one encoded initial state."""
    lag = config.lag
    K = len(pair)
    if K <= lag:
        raise ValueError(f"record of length {K} too short for lag {lag}")
    u, y = pair.u.values, pair.y.values
    window = lag_window(u[None, :lag], y[None, :lag], params.dims)
    x0 = encode_window(params, Tensor(window))
    spec = OdeStepSpec(config.Ts, _tau_for_spec(params), config.substeps)
    states = simulate(state_field(params), x0, u[lag:-1], spec)
    X = ad.concat(states, axis=0)
    return _g(params, X, Tensor(u[lag:])).value


def free_run_rmse(params: ModelParams, pair: Pair, config: RunConfig) -> float:
    try:
        yhat = free_run(params, pair, config)
    except IntegrationDiverged:
        return math.inf
    return rmse(pair.y.values[config.lag :], yhat)


# --- training loop -------------------------------------------------------------


@dataclass
class FitResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)
    best_step: int = -1
    best_val: float = math.inf
    steps: int = 0
    skipped: int = 0

    def column(self, key: str) -> np.ndarray:
        return np.array([row[key] for row in self.history], dtype=float)


HISTORY_FIELDS = ("step", "lr", "loss", "sim", "LD", "LW", "LN", "val_rmse", "skipped")


def fit(
    train: Pair, val: Pair, config: RunConfig, params: ModelParams | None = None
) -> FitResult:
    """Optimize with early stopping on free-run validation RMSE.

    Data are expected to be z-scored already. The returned parameters are
    the best-validation checkpoint.
    """
    if len(val) <= config.lag:
        raise ValueError("validation record too short")
    if config.tau_mode == "bla":
        config = resolve_bla_tau(train, config)
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    if params is None:
        params = init_model(config, train.u.n, train.y.n, seed=np.random.default_rng(seeds[0]))
    if config.max_steps == 0:
        return FitResult(params.copy())
    batch_rng = np.random.default_rng(seeds[1])
    opt = Adam(config)
    best = params.copy()
    best_val = free_run_rmse(params, val, config)
    best_step = 0
    history = []
    done = 0
    barrier_was_active = False
    n_tau = params["tau"].shape[1]
    for step in range(config.max_steps):
        batch = sample_batch(batch_rng, train, config)
        row = {"step": step, "lr": config.lr_at(step)}
        try:
            value, grads, parts = loss(params, batch, config)
        except (IntegrationDiverged, ad.NonFiniteError) as exc:
            log.debug("step %d skipped: %s", step, exc)
            opt.skipped += 1
            value, parts = math.nan, {}
        else:
            if opt.step(params, grads, step):
                done += 1
            active = parts.get("LN", 0.0) > 0.0
            if barrier_was_active and not active and config.barrier_moment_reset:
                # the penalty gradient is orders of magnitude above the data
                # gradient; left in v it stalls A for ~ln(lambda_N)/(1-beta2) steps
                opt.reset(["A"])
            barrier_was_active = active
        row["loss"] = value
        for key in ("sim", "LD", "LW", "LN"):
            row[key] = parts.get(key, math.nan)
        row["skipped"] = opt.skipped
        val_rmse = math.nan
        if (step + 1) % config.val_interval == 0 or step + 1 == config.max_steps:
            val_rmse = free_run_rmse(params, val, config)
            if val_rmse < best_val:
                best_val, best_step, best = val_rmse, step + 1, params.copy()
        row["val_rmse"] = val_rmse
        tau_hat = params.tau_hat().value.ravel()
        for i in range(n_tau):
            row[f"ts_over_tau_{i}"] = config.Ts / tau_hat[i]
        history.append(row)
        if step + 1 - best_step >= config.early_stop_patience:
            break
    if done == 0:
        raise TrainingFailed(
            f"all {len(history)} optimization steps diverged or produced non-finite gradients"
        )
    return FitResult(best, history, best_step, best_val, len(history), opt.skipped)


def resolve_bla_tau(train: Pair, config: RunConfig) -> RunConfig:
    """Replace ``tau_mode='bla'`` by a fixed normalization from the BLA heuristic."""
    from .bla import tau_bla

    tau = tau_bla(train, config.bla_order, config.bla_lag)
    log.info("BLA normalization: tau = %.6g s, Ts/tau = %.6g", tau, config.Ts / tau)
    return config.replace(tau_mode="fixed", tau_init_ratio=config.Ts / tau)
