"""Feed-forward acceleration policy (18 -> 64 -> 64 -> 1) written directly in numpy.

Each hidden block is dense -> layer norm (learned gain/shift) -> ReLU; the output
is ``3 * tanh(z)``. All parameters live in one flat float32 vector, sliced into
named views, so aggregation, Adam and checkpointing work on a single array.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"ILPOLICY"
FORMAT_VERSION = 1
OUTPUT_SCALE = 3.0
LN_EPS = 1e-5
_HEADER = struct.Struct("<8sHH")


class CheckpointFormatError(ValueError):
    pass


def param_layout(widths: tuple[int, ...]) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes in the fixed serialisation order."""
    layout: list[tuple[str, tuple[int, ...]]] = []
    n_layers = len(widths) - 1
    for k in range(n_layers):
        fan_in, fan_out = widths[k], widths[k + 1]
        layout.append((f"W{k + 1}", (fan_in, fan_out)))
        layout.append((f"b{k + 1}", (fan_out,)))
        if k < n_layers - 1:
            layout.append((f"g{k + 1}", (fan_out,)))
            layout.append((f"s{k + 1}", (fan_out,)))
    return layout


@dataclass
class PolicyParams:
    widths: tuple[int, ...]
    vector: np.ndarray
    version: int = 0
    _views: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        expected = sum(int(np.prod(s)) for _, s in param_layout(self.widths))
        if self.vector.ndim != 1 or self.vector.size != expected:
            raise ValueError(f"parameter vector has {self.vector.size} entries, expected {expected}")
        self._views = {}
        offset = 0
        for name, shape in param_layout(self.widths):
            size = int(np.prod(shape))
            self._views[name] = self.vector[offset:offset + size].reshape(shape)
            offset += size

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def dtype(self):
        return self.vector.dtype

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.widths, self.vector.copy(), self.version)

    def astype(self, dtype) -> "PolicyParams":
        return PolicyParams(self.widths, self.vector.astype(dtype), self.version)

    def with_vector(self, vector: np.ndarray, version: int | None = None) -> "PolicyParams":
        return PolicyParams(self.widths, np.ascontiguousarray(vector, dtype=self.vector.dtype),
                            self.version if version is None else version)


def init_params(seed: int, widths: tuple[int, ...] = (18, 64, 64, 1)) -> PolicyParams:
    """Uniform fan-in initialisation: weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in param_layout(tuple(widths)):
        if name[0] in "Wb":
            fan_in = widths[int(name[1:]) - 1]
            bound = 1.0 / np.sqrt(fan_in)
            parts.append(rng.uniform(-bound, bound, size=shape).ravel())
        elif name[0] == "g":
            parts.append(np.ones(shape).ravel())
        else:
            parts.append(np.zeros(shape).ravel())
    return PolicyParams(tuple(widths), np.concatenate(parts).astype(np.float32))


def zeros_like(params: PolicyParams) -> PolicyParams:
    return PolicyParams(params.widths, np.zeros_like(params.vector))


def _check_input(params: PolicyParams, states: np.ndarray) -> np.ndarray:
    x = np.asarray(states, dtype=params.dtype)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != params.widths[0]:
        raise ValueError(f"state vectors must have length {params.widths[0]}, got shape {np.shape(states)}")
    return x, squeeze


def _forward_cache(params: PolicyParams, x: np.ndarray):
    cache = []
    h = x
    for k in range(1, params.n_layers):
        pre = h @ params[f"W{k}"] + params[f"b{k}"]
        mu = pre.mean(axis=1, keepdims=True)
        var = pre.var(axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + LN_EPS)
        xhat = (pre - mu) * inv_std
        normed = xhat * params[f"g{k}"] + params[f"s{k}"]
        out = np.maximum(normed, 0)
        cache.append((h, xhat, inv_std, normed))
        h = out
    last = params.n_layers
    z = (h @ params[f"W{last}"] + params[f"b{last}"])[:, 0]
    return cache, h, np.tanh(z)


def forward(params: PolicyParams, states: np.ndarray) -> np.ndarray:
    """Acceleration for each state vector, in ``(-3, 3)`` m/s^2."""
    x, squeeze = _check_input(params, states)
    _, _, t = _forward_cache(params, x)
    y = OUTPUT_SCALE * t
    return y[0] if squeeze else y


def loss_and_grad(params: PolicyParams, states: np.ndarray, targets: np.ndarray) -> tuple[float, PolicyParams]:
    """Mean squared action error over the batch and its gradient."""
    x, _ = _check_input(params, states)
    targets = np.asarray(targets, dtype=params.dtype).reshape(-1)
    B = x.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    if targets.shape[0] != B:
        raise ValueError("states and targets differ in length")
    cache, h_last, t = _forward_cache(params, x)
    resid = OUTPUT_SCALE * t - targets
    loss = float(np.mean(resid.astype(np.float64) ** 2))

    grad = zeros_like(params)
    dz = (2.0 / B) * resid * OUTPUT_SCALE * (1.0 - t * t)
    last = params.n_layers
    grad[f"W{last}"][...] = h_last.T @ dz[:, None]
    grad[f"b{last}"][...] = dz.sum()
    dh = dz[:, None] @ params[f"W{last}"].T
    for k in range(last - 1, 0, -1):
        h_in, xhat, inv_std, normed = cache[k - 1]
        dnormed = dh * (normed > 0)
        grad[f"g{k}"][...] = (dnormed * xhat).sum(axis=0)
        grad[f"s{k}"][...] = dnormed.sum(axis=0)
        dxhat = dnormed * params[f"g{k}"]
        dpre = inv_std * (dxhat - dxhat.mean(axis=1, keepdims=True)
                          - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        grad[f"W{k}"][...] = h_in.T @ dpre
        grad[f"b{k}"][...] = dpre.sum(axis=0)
        dh = dpre @ params[f"W{k}"].T
    return loss, grad


def backward(params: PolicyParams, states: np.ndarray, targets: np.ndarray) -> PolicyParams:
    return loss_and_grad(params, states, targets)[1]


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    base_lr: float = 1e-3
    total_steps: int = 6000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: PolicyParams, base_lr: float = 1e-3, total_steps: int = 6000) -> "OptimizerState":
        return cls(np.zeros_like(params.vector), np.zeros_like(params.vector),
                   base_lr=base_lr, total_steps=total_steps)

    def lr(self, step: int | None = None) -> float:
        """Linearly decayed learning rate for the update with 0-based index ``step``."""
        k = self.step if step is None else step
        return self.base_lr * max(0.0, 1.0 - k / self.total_steps)

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.m.copy(), self.v.copy(), self.step, self.base_lr, self.total_steps,
                              self.beta1, self.beta2, self.eps)


def adam_step(params: PolicyParams, opt: OptimizerState, grad: PolicyParams) -> tuple[PolicyParams, OptimizerState]:
    """One bias-corrected Adam update at the scheduled learning rate (inputs untouched)."""
    if grad.vector.shape != params.vector.shape or opt.m.shape != params.vector.shape:
        raise ValueError("gradient / optimizer state shape does not match parameters")
    g = grad.vector.astype(params.dtype)
    lr = opt.lr()
    new = opt.copy()
    new.step = opt.step + 1
    new.m = opt.beta1 * opt.m + (1 - opt.beta1) * g
    new.v = opt.beta2 * opt.v + (1 - opt.beta2) * g * g
    m_hat = new.m / (1 - opt.beta1 ** new.step)
    v_hat = new.v / (1 - opt.beta2 ** new.step)
    vec = params.vector - (lr * m_hat / (np.sqrt(v_hat) + opt.eps)).astype(params.dtype)
    return params.with_vector(vec, version=params.version + 1), new


def serialize(params: PolicyParams) -> bytes:
    """Checkpoint bytes.

    Layout: ``b"ILPOLICY"``, uint16 format version, uint16 layer-width count,
    the widths as uint32, the uint64 version counter, then every parameter as a
    little-endian float32 in :func:`param_layout` order.
    """
    widths = params.widths
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, len(widths))
    head += struct.pack(f"<{len(widths)}I", *widths)
    head += struct.pack("<Q", params.version)
    return head + params.vector.astype("<f4").tobytes()


def deserialize(data: bytes) -> PolicyParams:
    if len(data) < _HEADER.size:
        raise CheckpointFormatError("checkpoint truncated in header")
    magic, version, n_w = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointFormatError("bad magic")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}")
    offset = _HEADER.size
    if len(data) < offset + 4 * n_w + 8:
        raise CheckpointFormatError("checkpoint truncated in header")
    widths = struct.unpack_from(f"<{n_w}I", data, offset)
    offset += 4 * n_w
    (counter,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    n_params = sum(int(np.prod(s)) for _, s in param_layout(tuple(widths)))
    if len(data) - offset != 4 * n_params:
        raise CheckpointFormatError(f"expected {4 * n_params} parameter bytes, found {len(data) - offset}")
    vector = np.frombuffer(data, dtype="<f4", count=n_params, offset=offset).astype(np.float32)
    return PolicyParams(tuple(widths), vector, int(counter))


def checkpoint_name(round_index: int, trainer: int) -> str:
    return f"model_round{round_index}_trainer{trainer}.bin"
