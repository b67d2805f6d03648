"""Differentiable building blocks with a named parameter registry.

All learnable state lives in a :class:`ParameterStore` keyed by dotted names,
which is what checkpointing and the optimizer iterate over.  Blocks follow
the conventions used throughout the model: weights are initialized uniformly
at ``+-sqrt(1/fan_in)``, biases at zero, and activations are the exact-erf
Gaussian-error gated unit.

The linear attention here is the softmax-free factorization: query rows are
softmax-normalized over the feature dimension, key columns over the token
dimension, and the context is accumulated as ``K^T V`` so cost stays linear
in token count.  Because float summation is order-sensitive, key/value token
sets can be put into a canonical (lexicographic) order first, which makes
permutation equivariance hold bit-exactly rather than approximately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, gelu, softmax
from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class FourierEmbedConfig:
    """Sin/cos frequency embedding of the diffusion timestep."""

    n_freq: int = 32          # sin/cos pairs; output dimension is 2 * n_freq
    max_period: float = 10000.0

    def __post_init__(self):
        if self.n_freq < 1:
            raise ConfigError("n_freq must be >= 1")
        if self.max_period <= 1.0:
            raise ConfigError("max_period must exceed 1")

    @property
    def dim(self) -> int:
        return 2 * self.n_freq


def fourier_embed(tau, cfg: FourierEmbedConfig) -> np.ndarray:
    """Embed non-negative timesteps as [sin(tau*w_i), cos(tau*w_i)] pairs.

    Frequencies decay geometrically from w_0 = 1 down to 1/max_period.
    """
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 0.0):
        raise ConfigError("tau must be non-negative")
    if cfg.n_freq == 1:
        omega = np.ones(1)
    else:
        i = np.arange(cfg.n_freq)
        omega = cfg.max_period ** (-i / (cfg.n_freq - 1))
    angles = np.multiply.outer(tau, omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


class ParameterStore:
    """Flat registry of uniquely named parameter tensors."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def create(self, name: str, shape: tuple[int, ...], rng: np.random.Generator,
               init: str = "fan_in") -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        if init == "fan_in":
            bound = np.sqrt(1.0 / shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ConfigError(f"unknown init {init!r}")
        tensor = Tensor(np.ascontiguousarray(data, dtype=self.dtype), requires_grad=True)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def gradient(self, name: str) -> np.ndarray:
        p = self._params[name]
        return p.grad if p.grad is not None else np.zeros_like(p.data)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) with leading batch dimensions flattened into one matmul."""
    if x.shape[-1] != w.shape[0]:
        raise ContractError(f"affine shapes {x.shape} @ {w.shape}")
    lead = x.shape[:-1]
    y = x.reshape((-1, x.shape[-1])) @ w
    y = y.reshape(lead + (w.shape[1],))
    return y if b is None else y + b


class Mlp:
    """Fully connected stack; GELU after every hidden layer, linear output."""

    def __init__(self, store: ParameterStore, name: str, widths: list[int],
                 rng: np.random.Generator):
        if len(widths) < 2:
            raise ConfigError("an MLP needs at least input and output widths")
        self.weights = []
        self.biases = []
        for i, (a, b) in enumerate(zip(widths, widths[1:])):
            self.weights.append(store.create(f"{name}.w{i}", (a, b), rng))
            self.biases.append(store.create(f"{name}.b{i}", (b,), rng, init="zeros"))

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = affine(x, w, b)
            if i < last:
                x = gelu(x)
        return x


class LayerNorm:
    """Per-token standardization with learned scale and shift."""

    def __init__(self, store: ParameterStore, name: str, d: int, eps: float = 1e-5):
        self.scale = store.create(f"{name}.scale", (d,), None, init="ones")
        self.shift = store.create(f"{name}.shift", (d,), None, init="zeros")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv_std = (var + self.eps) ** -0.5
        return centered * inv_std * self.scale + self.shift


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = x.reshape(tuple(lead) + (n, n_heads, d // n_heads))
    return x.swapaxes(-3, -2)  # [..., heads, tokens, d_head]


def _merge_heads(x: Tensor) -> Tensor:
    x = x.swapaxes(-3, -2)
    *lead, n, h, dh = x.shape
    return x.reshape(tuple(lead) + (n, h * dh))


def _canonical_order(k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Lexicographic token order over K's columns, V's as tiebreakers."""
    keys = np.concatenate([k, v], axis=1).T[::-1]
    return np.lexsort(keys)


def linear_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                     w_out: Tensor, b_out: Tensor | None = None,
                     canonical: bool = True) -> Tensor:
    """Factorized multi-head attention, linear in the token counts.

    ``q`` is [..., N_q, d], ``k``/``v`` are [..., N_k, d]; the merged heads
    are passed through the ``w_out`` projection.  With ``canonical`` the
    key/value set is sorted into a value-derived order first so that the
    result is bit-identical under any joint permutation of (k, v) rows.
    """
    d = q.shape[-1]
    if d % n_heads != 0:
        raise ContractError(f"width {d} not divisible by {n_heads} heads")
    if k.shape != v.shape or k.shape[-1] != d:
        raise ContractError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")

    if canonical and k.shape[-2] > 1:
        if k.ndim == 2:
            order = _canonical_order(k.data, v.data)
            k, v = k[order], v[order]
        else:
            lead = k.shape[:-2]
            flat_k = k.data.reshape((-1,) + k.shape[-2:])
            flat_v = v.data.reshape((-1,) + v.shape[-2:])
            orders = np.stack([_canonical_order(a, b)
                               for a, b in zip(flat_k, flat_v)])
            index = (np.arange(orders.shape[0])[:, None], orders)
            k = k.reshape((-1,) + k.shape[-2:])[index].reshape(lead + k.shape[-2:])
            v = v.reshape((-1,) + v.shape[-2:])[index].reshape(lead + v.shape[-2:])

    qh = softmax(_split_heads(q, n_heads), axis=-1)       # rows sum to 1
    kh = softmax(_split_heads(k, n_heads), axis=-2)       # token-dim normalization
    vh = _split_heads(v, n_heads)
    context = kh.swapaxes(-1, -2) @ vh                    # [..., h, d_h, d_h]
    out = _merge_heads(qh @ context)
    return affine(out, w_out, b_out)


def linear_attention_explicit(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                              w_out: Tensor, b_out: Tensor | None = None) -> Tensor:
    """Quadratic-cost evaluation of the same attention formula.

    Materializes the [N_q, N_k] score matrix; used as the oracle the
    factorized path is checked against.
    """
    qh = softmax(_split_heads(q, n_heads), axis=-1)
    kh = softmax(_split_heads(k, n_heads), axis=-2)
    vh = _split_heads(v, n_heads)
    scores = qh @ kh.swapaxes(-1, -2)                     # [..., h, N_q, N_k]
    out = _merge_heads(scores @ vh)
    return affine(out, w_out, b_out)


class AttentionLayer:
    """Learned q/k/v projections plus the linear-attention core."""

    def __init__(self, store: ParameterStore, name: str, d: int, n_heads: int,
                 rng: np.random.Generator):
        if d % n_heads != 0:
            raise ConfigError(f"d={d} must be divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.wq = store.create(f"{name}.wq", (d, d), rng)
        self.bq = store.create(f"{name}.bq", (d,), rng, init="zeros")
        self.wk = store.create(f"{name}.wk", (d, d), rng)
        self.bk = store.create(f"{name}.bk", (d,), rng, init="zeros")
        self.wv = store.create(f"{name}.wv", (d, d), rng)
        self.bv = store.create(f"{name}.bv", (d,), rng, init="zeros")
        self.wo = store.create(f"{name}.wo", (d, d), rng)
        self.bo = store.create(f"{name}.bo", (d,), rng, init="zeros")

    def __call__(self, q_tokens: Tensor, kv_tokens: Tensor,
                 canonical: bool = False) -> Tensor:
        q = affine(q_tokens, self.wq, self.bq)
        k = affine(kv_tokens, self.wk, self.bk)
        v = affine(kv_tokens, self.wv, self.bv)
        return linear_attention(q, k, v, self.n_heads, self.wo, self.bo,
                                canonical=canonical)


class MixtureOfExperts:
    """Dense soft mixture: every expert runs, gate weights blend the outputs.

    The gate is conditioned on the raw 4-channel query token (coordinates
    plus state channels), not on the latent, realizing a soft spatiotemporal
    domain decomposition.
    """

    def __init__(self, store: ParameterStore, name: str, d: int, n_experts: int,
                 expert_hidden: int, gating_hidden: int, rng: np.random.Generator):
        if n_experts < 1:
            raise ConfigError("n_experts must be >= 1")
        self.experts = [Mlp(store, f"{name}.expert{e}", [d, expert_hidden, d], rng)
                        for e in range(n_experts)]
        self.gate = Mlp(store, f"{name}.gate",
                        [4, gating_hidden, gating_hidden, n_experts], rng)

    def gate_weights(self, raw_query: Tensor) -> Tensor:
        return softmax(self.gate(raw_query), axis=-1)

    def __call__(self, h: Tensor, raw_query: Tensor) -> Tensor:
        weights = self.gate_weights(raw_query)
        out = None
        for e, expert in enumerate(self.experts):
            term = expert(h) * weights[..., e:e + 1]
            out = term if out is None else out + term
        return out
