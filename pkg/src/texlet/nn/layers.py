"""Dense and transformer building blocks over ModelParams."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .params import ModelParams


def add_dense(p: ModelParams, name: str, n_in: int, n_out: int, scale: float = 1.0) -> None:
    p.add_weight(f"{name}.w", (n_in, n_out), scale=scale)
    p.add_const(f"{name}.b", (n_out,))


def dense(p: ModelParams, name: str, x: T.Tensor) -> T.Tensor:
    return T.add(T.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def add_layer_norm(p: ModelParams, name: str, width: int) -> None:
    p.add_const(f"{name}.g", (width,), 1.0)
    p.add_const(f"{name}.b", (width,), 0.0)


def layer_norm(p: ModelParams, name: str, x: T.Tensor) -> T.Tensor:
    return T.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def add_block(p: ModelParams, name: str, width: int, heads: int, mlp_ratio: int = 4) -> None:
    if width % heads:
        raise ValueError(f"width {width} is not divisible by {heads} heads")
    add_layer_norm(p, f"{name}.ln1", width)
    for proj in ("q", "k", "v"):
        add_dense(p, f"{name}.{proj}", width, width)
    add_dense(p, f"{name}.o", width, width)
    add_layer_norm(p, f"{name}.ln2", width)
    add_dense(p, f"{name}.fc1", width, width * mlp_ratio)
    add_dense(p, f"{name}.fc2", width * mlp_ratio, width)


def _split_heads(x: T.Tensor, heads: int) -> T.Tensor:
    *lead, n, w = x.shape
    x = T.reshape(x, (*lead, n, heads, w // heads))
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return T.transpose(x, axes)


def _merge_heads(x: T.Tensor) -> T.Tensor:
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    x = T.transpose(x, axes)
    *lead, n, h, dh = x.shape
    return T.reshape(x, (*lead, n, h * dh))


def attention(p: ModelParams, name: str, x: T.Tensor, heads: int) -> T.Tensor:
    q = _split_heads(dense(p, f"{name}.q", x), heads)
    k = _split_heads(dense(p, f"{name}.k", x), heads)
    v = _split_heads(dense(p, f"{name}.v", x), heads)
    return dense(p, f"{name}.o", _merge_heads(T.scaled_dot_attention(q, k, v)))


def block(p: ModelParams, name: str, x: T.Tensor, heads: int) -> T.Tensor:
    """Pre-norm transformer block: self-attention then GELU MLP, both residual."""
    x = T.add(x, attention(p, name, layer_norm(p, f"{name}.ln1", x), heads))
    h = T.gelu(dense(p, f"{name}.fc1", layer_norm(p, f"{name}.ln2", x)))
    return T.add(x, dense(p, f"{name}.fc2", h))


def sinusoidal(values: np.ndarray, octaves: int, base: float = np.pi) -> np.ndarray:
    """(..., k) scalars -> (..., k * 2 * octaves) sin/cos features at frequencies base * 2^j."""
    v = np.asarray(values, dtype=np.float64)
    freqs = base * 2.0 ** np.arange(octaves)
    ang = v[..., :, None] * freqs
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return feats.reshape(*v.shape[:-1], v.shape[-1] * 2 * octaves)


def timestep_embedding(t, width: int, max_period: float = 1000.0) -> np.ndarray:
    """Transformer-style log-spaced sinusoidal embedding of t in [0, 1]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half) * max_period
    ang = t[:, None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
