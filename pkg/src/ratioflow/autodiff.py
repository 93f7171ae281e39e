"""Differentiable MLP substrate.

Everything here is specialised to a plain stack of affine layers with SELU
between them (identity on the last layer).  Reverse mode is used for training
gradients and forward mode (JVPs) for exact divergences.  All arithmetic is
float64.

Batched arrays put the batch on the leading axes and the feature axis last.
Tangent stacks carry one extra axis just before the feature axis, so a batch
of ``n`` inputs with ``k`` tangents each has shape ``(n, k, width)``.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigurationError
from .kernels import SELU_ALPHA, SELU_LAMBDA, selu as _selu_array, selu_jvp, selu_with_grad

ACTIVATIONS = ("selu", "identity")


class ParameterStore:
    """Ordered collection of named float64 arrays."""

    def __init__(self, entries=None):
        self._entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
        if entries is not None:
            items = entries.items() if hasattr(entries, "items") else entries
            for name, value in items:
                self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self._entries:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        self._entries[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._entries:
            raise KeyError(name)
        self._entries[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self._entries.values()))

    def copy(self) -> "ParameterStore":
        return ParameterStore((k, v.copy()) for k, v in self._entries.items())

    def zeros_like(self) -> "ParameterStore":
        return ParameterStore((k, np.zeros_like(v)) for k, v in self._entries.items())

    def update(self, other: "ParameterStore") -> None:
        for name, value in other.items():
            self.add(name, value)

    def manifest(self):
        """Name, shape and float64 offset of every entry, in storage order."""
        out, offset = [], 0
        for name, value in self._entries.items():
            out.append({"name": name, "shape": list(value.shape), "offset": offset})
            offset += value.size
        return out

    def to_bytes(self) -> bytes:
        if not self._entries:
            return b""
        flat = np.concatenate([v.ravel() for v in self._entries.values()])
        return flat.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, manifest, payload: bytes) -> "ParameterStore":
        flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        store = cls()
        for entry in manifest:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape, dtype=np.int64))
            start = int(entry["offset"])
            if start + n > flat.size:
                raise ConfigurationError(f"payload too short for {entry['name']!r}")
            store.add(entry["name"], flat[start:start + n].reshape(shape))
        return store

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterStore) or self.names() != other.names():
            return False
        return all(np.array_equal(self[k], other[k]) for k in self)

    def __repr__(self) -> str:
        return f"ParameterStore({len(self)} arrays, {self.size} scalars)"


@dataclass(frozen=True)
class MlpConfig:
    """Layer widths ``[in, hidden..., out]`` and the hidden-layer activation.

    The last layer is affine unless ``activate_output`` is set (used for
    encoders whose output feeds another network).  ``prefix`` namespaces the
    parameter names so several networks can share one store.
    """

    layer_widths: tuple
    activation: str = "selu"
    prefix: str = ""
    activate_output: bool = False

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ConfigurationError("an MLP needs at least input and output widths")
        if any(w <= 0 for w in widths):
            raise ConfigurationError(f"layer widths must be positive, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def activated(self, i: int) -> bool:
        """Whether layer ``i`` is followed by the nonlinearity."""
        if self.activation == "identity":
            return False
        return i < self.n_layers - 1 or self.activate_output

    def weight(self, i: int) -> str:
        return f"{self.prefix}W{i}"

    def bias(self, i: int) -> str:
        return f"{self.prefix}b{i}"

    def to_dict(self):
        return {"layer_widths": list(self.layer_widths), "activation": self.activation,
                "prefix": self.prefix, "activate_output": self.activate_output}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["layer_widths"]), d.get("activation", "selu"), d.get("prefix", ""),
                   bool(d.get("activate_output", False)))


@dataclass
class NetworkInput:
    """State, time and condition embedding, concatenated in that order."""

    state: np.ndarray
    time: float
    condition_embedding: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def vector(self) -> np.ndarray:
        state = np.atleast_1d(np.asarray(self.state, dtype=np.float64))
        cond = np.atleast_1d(np.asarray(self.condition_embedding, dtype=np.float64))
        vec = np.concatenate([state, [float(self.time)], cond])
        if not np.all(np.isfinite(vec)):
            raise ConfigurationError("network input contains non-finite values")
        return vec

    @property
    def state_dim(self) -> int:
        return int(np.atleast_1d(self.state).shape[-1])


def init_mlp(cfg: MlpConfig, rng: np.random.Generator, store: Optional[ParameterStore] = None):
    """LeCun-normal weights (std ``1/sqrt(fan_in)``) and zero biases."""
    store = ParameterStore() if store is None else store
    for i, (n_in, n_out) in enumerate(zip(cfg.layer_widths[:-1], cfg.layer_widths[1:])):
        store.add(cfg.weight(i), rng.standard_normal((n_in, n_out)) / np.sqrt(n_in))
        store.add(cfg.bias(i), np.zeros(n_out))
    return store


def selu(x):
    """Scaled exponential linear unit; scalar in, scalar out (arrays allowed)."""
    if np.isscalar(x):
        if x > 0:
            return SELU_LAMBDA * float(x)
        return SELU_LAMBDA * SELU_ALPHA * float(np.expm1(x))
    return _selu_array(x)


def sinusoidal_time_embed(t, dim: int, base: float = 10000.0, scale: float = 1.0):
    """Transformer-style embedding of time, interleaved as sin, cos, sin, cos...

    Component ``2i`` is ``sin(scale * t * base**(-2i/dim))`` and component
    ``2i+1`` the matching cosine.  ``t`` may be a scalar or a 1-D array, giving
    shapes ``(dim,)`` or ``(len(t), dim)``.
    """
    if dim <= 0 or dim % 2:
        raise ConfigurationError(f"time embedding width must be positive and even, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    freqs = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = scale * t_arr[..., None] * freqs
    out = np.empty(t_arr.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def _as_input(cfg: MlpConfig, x):
    if isinstance(x, NetworkInput):
        x = x.vector()
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cfg.in_width:
        raise ConfigurationError(
            f"input width {x.shape[-1]} does not match network input width {cfg.in_width}")
    return x


def _check_params(params: ParameterStore, cfg: MlpConfig, start: int = 0):
    for i in range(start, cfg.n_layers):
        w = params[cfg.weight(i)]
        if w.shape != (cfg.layer_widths[i], cfg.layer_widths[i + 1]):
            raise ConfigurationError(f"{cfg.weight(i)} has shape {w.shape}")


def forward_layers(params: ParameterStore, cfg: MlpConfig, a, start: int = 0):
    """Run layers ``start..`` on activations ``a`` (the input of layer ``start``)."""
    for i in range(start, cfg.n_layers):
        z = a @ params[cfg.weight(i)] + params[cfg.bias(i)]
        if cfg.activated(i):
            a = _selu_array(z)
        else:
            a = z
    return a


def matmul_last(a, w):
    """``a @ w`` over the last axis as one 2-D GEMM (numpy would batch 3-D inputs)."""
    if a.ndim <= 2:
        return a @ w
    return (a.reshape(-1, a.shape[-1]) @ w).reshape(a.shape[:-1] + (w.shape[1],))


def jvp_layers(params: ParameterStore, cfg: MlpConfig, a, da, start: int = 0):
    """Forward-mode pass: ``a`` is ``(..., w)``, ``da`` is ``(..., k, w)``."""
    for i in range(start, cfg.n_layers):
        w = params[cfg.weight(i)]
        z = a @ w + params[cfg.bias(i)]
        dz = matmul_last(np.ascontiguousarray(da), w)
        if cfg.activated(i):
            a, da = selu_jvp(z, dz)
        else:
            a, da = z, dz
    return a, da


def mlp_forward(params: ParameterStore, cfg: MlpConfig, x):
    """Evaluate the network on one input or a batch (leading axes)."""
    x = _as_input(cfg, x)
    _check_params(params, cfg)
    return forward_layers(params, cfg, x)


def forward_with_cache(params: ParameterStore, cfg: MlpConfig, x):
    """Forward pass that keeps what the backward pass needs."""
    x = _as_input(cfg, x)
    inputs, grads = [], []
    a = x
    for i in range(cfg.n_layers):
        inputs.append(a)
        z = a @ params[cfg.weight(i)] + params[cfg.bias(i)]
        if cfg.activated(i):
            a, g = selu_with_grad(z)
            grads.append(g)
        else:
            a = z
            grads.append(None)
    return a, (inputs, grads)


def backward(params: ParameterStore, cfg: MlpConfig, cache, grad_out, grads_into=None):
    """Reverse pass.  Returns ``(parameter gradients, gradient w.r.t. input)``.

    ``grads_into`` lets several networks accumulate into one store.
    """
    inputs, act_grads = cache
    grads = ParameterStore() if grads_into is None else grads_into
    g = np.asarray(grad_out, dtype=np.float64)
    if act_grads[-1] is not None:
        g = g * act_grads[-1]
    for i in reversed(range(cfg.n_layers)):
        a = inputs[i]
        w = params[cfg.weight(i)]
        a2 = a.reshape(-1, a.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        _accumulate(grads, cfg.weight(i), a2.T @ g2)
        _accumulate(grads, cfg.bias(i), g2.sum(axis=0))
        g = g @ w.T
        if i > 0 and act_grads[i - 1] is not None:
            g = g * act_grads[i - 1]
    return grads, g


def _accumulate(store: ParameterStore, name: str, value):
    if name in store:
        store[name] = store[name] + value
    else:
        store.add(name, value)


def directional_derivative(params: ParameterStore, cfg: MlpConfig, x, tangent):
    """Output and Jacobian-vector product along ``tangent`` (forward mode).

    ``tangent`` perturbs the leading ``tangent.shape[-1]`` input features,
    i.e. the state block of a :class:`NetworkInput`; remaining features are
    held fixed.
    """
    x = _as_input(cfg, x)
    tangent = np.asarray(tangent, dtype=np.float64)
    d = tangent.shape[-1]
    if d > cfg.in_width:
        raise ConfigurationError("tangent is wider than the network input")
    dx = np.zeros(np.broadcast_shapes(x.shape[:-1], tangent.shape[:-1]) + (cfg.in_width,))
    dx[..., :d] = tangent
    value, jvp = jvp_layers(params, cfg, x, dx[..., None, :])
    return value, jvp[..., 0, :]


def divergence_exact(params: ParameterStore, cfg: MlpConfig, x, state_dim: Optional[int] = None):
    """Trace of the output Jacobian w.r.t. the state block, via ``d`` JVPs."""
    x = _as_input(cfg, x)
    d = cfg.out_width if state_dim is None else int(state_dim)
    if cfg.out_width != d or d > cfg.in_width:
        raise ConfigurationError(
            f"divergence needs output width == state width, got {cfg.out_width} vs {d}")
    eye = np.zeros((d, cfg.in_width))
    eye[:, :d] = np.eye(d)
    dx = np.broadcast_to(eye, x.shape[:-1] + eye.shape)
    _, jac = jvp_layers(params, cfg, x, dx)
    return np.trace(jac, axis1=-2, axis2=-1)


def divergence_hutchinson(params: ParameterStore, cfg: MlpConfig, x, n_probes: int = 1,
                          rng: Optional[np.random.Generator] = None, probes=None,
                          state_dim: Optional[int] = None):
    """Unbiased Rademacher estimate of the divergence: mean of ``v^T J v``.

    Pass ``probes`` of shape ``(n_probes, d)`` to fix the probe vectors.
    """
    x = _as_input(cfg, x)
    d = cfg.out_width if state_dim is None else int(state_dim)
    if probes is None:
        if n_probes < 1:
            raise ConfigurationError("n_probes must be at least 1")
        rng = np.random.default_rng() if rng is None else rng
        probes = rng.choice(np.array([-1.0, 1.0]), size=x.shape[:-1] + (n_probes, d))
    probes = np.asarray(probes, dtype=np.float64)
    dx = np.zeros(probes.shape[:-1] + (cfg.in_width,))
    dx[..., :d] = probes
    _, jv = jvp_layers(params, cfg, x, dx)
    return np.mean(np.sum(probes * jv, axis=-1), axis=-1)


def loss_and_grad(params: ParameterStore, cfg: MlpConfig, inputs, targets):
    """Mean squared error over every output element, and its gradient."""
    inputs = _as_input(cfg, inputs)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.shape[0] == 0:
        raise ConfigurationError("empty batch")
    out, cache = forward_with_cache(params, cfg, inputs)
    resid = out - targets
    loss = float(np.mean(resid ** 2))
    grads, _ = backward(params, cfg, cache, 2.0 * resid / resid.size)
    return loss, grads


@dataclass
class AdamState:
    first_moment: ParameterStore
    second_moment: ParameterStore
    step_count: int = 0

    @classmethod
    def zeros_like(cls, params: ParameterStore) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(params: ParameterStore, grads: ParameterStore, state: AdamState,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, applied in place.  Returns ``(params, state)``."""
    state.step_count += 1
    c1 = 1.0 - beta1 ** state.step_count
    c2 = 1.0 - beta2 ** state.step_count
    m_store, v_store = state.first_moment, state.second_moment
    for name in params:
        g = grads[name] if name in grads else None
        if g is None:
            g = np.zeros_like(params[name])
        if g.shape != params[name].shape:
            raise ConfigurationError(f"gradient for {name} has shape {g.shape}")
        m = m_store[name]
        v = v_store[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state
