"""State, output, encoder and constraint networks.

Every network is a residual MLP: an optional bias-free linear path plus
``W1 s(W2 s(W3 z + b3) + b2)`` with ``s`` the leaky ReLU and ``z`` the
network input. Weights are stored as (out x in) matrices and applied to
row-batched inputs.

Parameter names::

    f.*, A, B      state network (linear path A x + B u)
    g.*, C, D      output network (linear path C x + D u)
    e.*, e.L       encoder (linear path on the flattened lag window)
    d.*, d.b1      constraint network (no linear path, outer bias)
    tau            raw normalization, clamped at use
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class Dims:
    n_x: int = 4
    n_u: int = 1
    n_y: int = 1
    n_a: int = 5
    n_b: int = 5
    hidden: int = 64
    depth: int = 2

    def __post_init__(self):
        for k, v in asdict(self).items():
            if int(v) != v or v < 1:
                raise ValueError(f"{k} must be a positive integer, got {v}")

    @property
    def window(self) -> int:
        return self.n_a * self.n_y + self.n_b * self.n_u

    @property
    def lag(self) -> int:
        return max(self.n_a, self.n_b)


def _mlp_shapes(prefix: str, n_in: int, n_out: int, hidden: int, depth: int, outer_bias: bool):
    # layer index runs from depth+1 (input side) down to 1 (output side)
    shapes = {}
    widths = [n_in] + [hidden] * depth + [n_out]
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        idx = depth + 1 - i
        shapes[f"{prefix}.W{idx}"] = (b, a)
        if idx > 1 or outer_bias:
            shapes[f"{prefix}.b{idx}"] = (1, b)
    return shapes


def param_shapes(dims: Dims) -> dict[str, tuple[int, int]]:
    nx, nu, ny, h, dp = dims.n_x, dims.n_u, dims.n_y, dims.hidden, dims.depth
    shapes = {"A": (nx, nx), "B": (nx, nu)}
    shapes.update(_mlp_shapes("f", nx + nu, nx, h, dp, outer_bias=False))
    shapes.update({"C": (ny, nx), "D": (ny, nu)})
    shapes.update(_mlp_shapes("g", nx + nu, ny, h, dp, outer_bias=False))
    shapes["e.L"] = (nx, dims.window)
    shapes.update(_mlp_shapes("e", dims.window, nx, h, dp, outer_bias=False))
    shapes.update(_mlp_shapes("d", nx + nu, 1, h, dp, outer_bias=True))
    return shapes


def is_bias(name: str) -> bool:
    return name.split(".")[-1].startswith("b")


@dataclass
class ModelParams:
    """All trainable tensors keyed by name, plus the network dimensions."""

    dims: Dims
    tensors: dict[str, Tensor]
    tau_trainable: bool = False
    tau_eps: float = 1e-6
    slope: float = ad.LEAKY_SLOPE
    output_uses_input: bool = True

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def trainable(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]

    def copy(self) -> "ModelParams":
        tensors = {
            k: Tensor(t.value.copy(), requires_grad=t.requires_grad, name=k)
            for k, t in self.tensors.items()
        }
        return ModelParams(
            self.dims, tensors, self.tau_trainable, self.tau_eps, self.slope,
            self.output_uses_input,
        )

    def with_values(self, values: dict[str, np.ndarray]) -> "ModelParams":
        new = self.copy()
        for k, v in values.items():
            new.tensors[k].value = np.array(v, dtype=float).reshape(new.tensors[k].shape)
        return new

    def tau_hat(self) -> Tensor:
        """Clamped normalization ``max(eps, tau)`` as a (1, 1) or (1, n_x) tensor."""
        return ad.clamp_min(self.tensors["tau"], self.tau_eps)

    def weight_names(self) -> list[str]:
        return [k for k in self.tensors if k != "tau"]

    def all_finite(self) -> bool:
        return all(np.isfinite(t.value).all() for t in self.tensors.values())


def init_params(
    dims: Dims,
    seed: int | np.random.Generator,
    Ts: float,
    tau_ratio: float = 0.1,
    tau_kind: str = "scalar",
    tau_trainable: bool = False,
    tau_eps: float | None = None,
    init_scale: float = 0.01,
    slope: float = ad.LEAKY_SLOPE,
    output_uses_input: bool = True,
) -> ModelParams:
    """Weights ~ U[-init_scale, init_scale], biases zero, ``tau = Ts / tau_ratio``."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(dims).items():
        val = np.zeros(shape) if is_bias(name) else rng.uniform(-init_scale, init_scale, shape)
        tensors[name] = Tensor(val, requires_grad=True, name=name)
    if tau_kind not in ("scalar", "vector"):
        raise ValueError(f"tau_kind must be 'scalar' or 'vector', got {tau_kind!r}")
    if not tau_ratio > 0:
        raise ValueError("tau_ratio must be > 0")
    n_tau = dims.n_x if tau_kind == "vector" else 1
    tensors["tau"] = Tensor(
        np.full((1, n_tau), Ts / tau_ratio), requires_grad=tau_trainable, name="tau"
    )
    eps = 1e-6 * Ts if tau_eps is None else tau_eps
    return ModelParams(dims, tensors, tau_trainable, eps, slope, output_uses_input)


def _rows(x) -> tuple[Tensor, bool]:
    if isinstance(x, Tensor):
        return x, False
    arr = np.asarray(x, dtype=float)
    return Tensor(arr), arr.ndim == 1


def _check_dim(what: str, t: Tensor, n: int) -> None:
    if t.shape[1] != n:
        raise ad.ShapeError(what, t.shape, (t.shape[0], n))


def _hidden(params: ModelParams, prefix: str):
    t = params.tensors
    return [(t[f"{prefix}.W{i}"], t[f"{prefix}.b{i}"]) for i in range(params.dims.depth + 1, 1, -1)]


def _net(params: ModelParams, prefix: str, parts, lin=None, outer_bias=False) -> Tensor:
    t = params.tensors
    return ad.residual_mlp(
        parts, _hidden(params, prefix), t[f"{prefix}.W1"],
        t[f"{prefix}.b1"] if outer_bias else None, lin, params.slope,
    )


def state_field(params: ModelParams) -> Callable[[Tensor, Tensor], Tensor]:
    """Closure ``(x, u) -> f_NN(x, u)`` with the linear path pre-assembled."""
    AB = ad.concat([params["A"], params["B"]], axis=1)
    nx, nu = params.dims.n_x, params.dims.n_u

    def f(x: Tensor, u: Tensor) -> Tensor:
        _check_dim("f_forward x", x, nx)
        _check_dim("f_forward u", u, nu)
        return _net(params, "f", (x, u), lin=AB)

    return f


def f_forward(params: ModelParams, x, u):
    x, flat = _rows(x)
    u, _ = _rows(u)
    out = state_field(params)(x, u)
    return out.value[0] if flat else out


def g_forward(params: ModelParams, x, u):
    """Output network ``C x + D u`` plus residual term."""
    x, flat = _rows(x)
    u, _ = _rows(u)
    out = _g(params, x, u)
    return out.value[0] if flat else out


def _g(params: ModelParams, x: Tensor, u: Tensor) -> Tensor:
    _check_dim("g_forward x", x, params.dims.n_x)
    _check_dim("g_forward u", u, params.dims.n_u)
    if params.output_uses_input:
        return _net(params, "g", (x, u), lin=ad.concat([params["C"], params["D"]], axis=1))
    # u is masked out of both paths; D and the u-columns of g.W3 get zero gradient
    zero_u = Tensor(np.zeros(u.shape))
    lin = ad.concat([params["C"], Tensor(np.zeros(params["D"].shape))], axis=1)
    return _net(params, "g", (x, zero_u), lin=lin)


def d_forward(params: ModelParams, x, u):
    """Constraint network value; not part of the simulated model."""
    x, flat = _rows(x)
    u, _ = _rows(u)
    _check_dim("d_forward x", x, params.dims.n_x)
    _check_dim("d_forward u", u, params.dims.n_u)
    out = _net(params, "d", (x, u), outer_bias=True)
    return out.value[0] if flat else out


def lag_window(u_hist: np.ndarray, y_hist: np.ndarray, dims: Dims) -> np.ndarray:
    """Flatten chronological histories into encoder rows.

    ``u_hist`` is (..., >= n_b, n_u) and ``y_hist`` (..., >= n_a, n_y), oldest
    first with the last row at time k-1. The result orders lags newest first:
    ``[u_{k-1}, ..., u_{k-n_b}, y_{k-1}, ..., y_{k-n_a}]``.
    """
    u_hist = np.asarray(u_hist, dtype=float)
    y_hist = np.asarray(y_hist, dtype=float)
    if u_hist.shape[-2] < dims.n_b or y_hist.shape[-2] < dims.n_a:
        raise ValueError(
            f"encoder needs {dims.n_b} input and {dims.n_a} output lags, "
            f"got {u_hist.shape[-2]} and {y_hist.shape[-2]}"
        )
    uw = u_hist[..., : -dims.n_b - 1 : -1, :]
    yw = y_hist[..., : -dims.n_a - 1 : -1, :]
    lead = uw.shape[:-2]
    return np.concatenate(
        [uw.reshape(*lead, -1), yw.reshape(*lead, -1)], axis=-1
    ).reshape(-1, dims.window)


def encode_window(params: ModelParams, window: Tensor) -> Tensor:
    _check_dim("encode window", window, params.dims.window)
    return _net(params, "e", (window,), lin=params["e.L"])


def encode(params: ModelParams, u_hist, y_hist):
    """Initial state estimate ``x_{k|k}`` from the lag window before ``k``."""
    u_hist = np.asarray(u_hist, dtype=float)
    single = u_hist.ndim == 2
    w = Tensor(lag_window(u_hist, y_hist, params.dims))
    out = encode_window(params, w)
    return out.value[0] if single else out


# --- checkpoints ---------------------------------------------------------------

CHECKPOINT_FORMAT = "sdnid-checkpoint"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def to_document(
    params: ModelParams, config: dict | None = None, seed: int | None = None, extra: dict | None = None
) -> dict:
    config = config or {}
    return {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "dims": asdict(params.dims),
        "tau": {
            "raw": params["tau"].value.ravel().tolist(),
            "eps": params.tau_eps,
            "trainable": params.tau_trainable,
        },
        "slope": params.slope,
        "output_uses_input": params.output_uses_input,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "tensors": {
            k: {"shape": list(t.shape), "values": t.value.ravel().tolist()}
            for k, t in params.tensors.items()
            if k != "tau"
        },
        "extra": extra or {},
    }


def from_document(doc: dict) -> ModelParams:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a checkpoint document (format={doc.get('format')!r})")
    dims = Dims(**doc["dims"])
    tensors = {}
    expected = param_shapes(dims)
    for k, entry in doc["tensors"].items():
        shape = tuple(entry["shape"])
        if expected.get(k) != shape:
            raise ValueError(f"tensor {k!r}: shape {shape} does not match dims ({expected.get(k)})")
        tensors[k] = Tensor(np.array(entry["values"], float).reshape(shape), True, name=k)
    missing = set(expected) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint lacks tensors {sorted(missing)}")
    tau = doc["tau"]
    tensors["tau"] = Tensor(np.array(tau["raw"], float), requires_grad=tau["trainable"], name="tau")
    return ModelParams(
        dims, tensors, tau["trainable"], tau["eps"], doc.get("slope", ad.LEAKY_SLOPE),
        doc.get("output_uses_input", True),
    )


def save_checkpoint(path, params: ModelParams, config=None, seed=None, extra=None) -> None:
    Path(path).write_text(json.dumps(to_document(params, config, seed, extra), indent=1))


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    doc = json.loads(Path(path).read_text())
    return from_document(doc), doc
