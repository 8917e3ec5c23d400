"""Pre-norm transformer blocks shared by the UEM and the language model.

Parameters live in flat ``dict[str, Tensor]`` maps with dotted names.
The MLP is gated GELU: ``(gelu(x W_gate) * (x W_up)) W_down``.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = dict[str, Tensor]

LN_EPS = 1e-6


def normal(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True, dtype=dtype)


def zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)


def init_linear(params: Params, name: str, rng, fan_in: int, fan_out: int, dtype, bias: bool = True) -> None:
    params[f"{name}.w"] = normal(rng, (fan_in, fan_out), 1.0 / math.sqrt(fan_in), dtype)
    if bias:
        params[f"{name}.b"] = zeros((fan_out,), dtype)


def linear_count(fan_in: int, fan_out: int, bias: bool = True) -> int:
    return fan_in * fan_out + (fan_out if bias else 0)


def init_norm(params: Params, name: str, width: int, dtype) -> None:
    params[f"{name}.g"] = ones((width,), dtype)
    params[f"{name}.b"] = zeros((width,), dtype)


def init_attention(params: Params, name: str, rng, width: int, inner: int, dtype) -> None:
    # No key bias: it shifts every score in a row equally, so softmax cancels it
    # and its gradient is identically zero.
    init_linear(params, f"{name}.q", rng, width, inner, dtype)
    init_linear(params, f"{name}.k", rng, width, inner, dtype, bias=False)
    init_linear(params, f"{name}.v", rng, width, inner, dtype)
    init_linear(params, f"{name}.o", rng, inner, width, dtype)


def attention_count(width: int, inner: int) -> int:
    return 2 * linear_count(width, inner) + linear_count(width, inner, bias=False) + linear_count(inner, width)


def init_mlp(params: Params, name: str, rng, width: int, hidden: int, dtype) -> None:
    init_linear(params, f"{name}.gate", rng, width, hidden, dtype)
    init_linear(params, f"{name}.up", rng, width, hidden, dtype)
    init_linear(params, f"{name}.down", rng, hidden, width, dtype)


def mlp_count(width: int, hidden: int) -> int:
    return 2 * linear_count(width, hidden) + linear_count(hidden, width)


def norm(x: Tensor, params: Params, name: str) -> Tensor:
    return ad.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"], LN_EPS)


def lin(x: Tensor, params: Params, name: str) -> Tensor:
    return ad.linear(x, params[f"{name}.w"], params.get(f"{name}.b"))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def attention(x_q: Tensor, x_kv: Tensor, params: Params, name: str, heads: int, mask: np.ndarray | None) -> Tensor:
    """Multi-head attention on ``[B, T, W]`` inputs; ``mask`` is ``[B, Tq, Tk]`` boolean."""
    q = _split_heads(lin(x_q, params, f"{name}.q"), heads)
    k = _split_heads(lin(x_kv, params, f"{name}.k"), heads)
    v = _split_heads(lin(x_kv, params, f"{name}.v"), heads)
    m = None if mask is None else mask[:, None, :, :]
    return lin(_merge_heads(ad.scaled_dot_attention(q, k, v, m)), params, f"{name}.o")


def mlp(x: Tensor, params: Params, name: str) -> Tensor:
    h = ad.mul(ad.gelu(lin(x, params, f"{name}.gate")), lin(x, params, f"{name}.up"))
    return lin(h, params, f"{name}.down")


def init_encoder_block(params: Params, name: str, rng, width: int, inner: int, hidden: int, dtype) -> None:
    init_norm(params, f"{name}.ln1", width, dtype)
    init_attention(params, f"{name}.attn", rng, width, inner, dtype)
    init_norm(params, f"{name}.ln2", width, dtype)
    init_mlp(params, f"{name}.mlp", rng, width, hidden, dtype)


def encoder_block_count(width: int, inner: int, hidden: int) -> int:
    return 4 * width + attention_count(width, inner) + mlp_count(width, hidden)


def encoder_block(x: Tensor, params: Params, name: str, heads: int, mask) -> Tensor:
    h = norm(x, params, f"{name}.ln1")
    x = ad.add(x, attention(h, h, params, f"{name}.attn", heads, mask))
    return ad.add(x, mlp(norm(x, params, f"{name}.ln2"), params, f"{name}.mlp"))


def init_decoder_block(params: Params, name: str, rng, width: int, inner: int, hidden: int, dtype) -> None:
    init_norm(params, f"{name}.ln1", width, dtype)
    init_attention(params, f"{name}.self", rng, width, inner, dtype)
    init_norm(params, f"{name}.ln2", width, dtype)
    init_attention(params, f"{name}.cross", rng, width, inner, dtype)
    init_norm(params, f"{name}.ln3", width, dtype)
    init_mlp(params, f"{name}.mlp", rng, width, hidden, dtype)


def decoder_block(x: Tensor, memory: Tensor, params: Params, name: str, heads: int, self_mask, cross_mask) -> Tensor:
    h = norm(x, params, f"{name}.ln1")
    x = ad.add(x, attention(h, h, params, f"{name}.self", heads, self_mask))
    h = norm(x, params, f"{name}.ln2")
    x = ad.add(x, attention(h, memory, params, f"{name}.cross", heads, cross_mask))
    return ad.add(x, mlp(norm(x, params, f"{name}.ln3"), params, f"{name}.mlp"))


def param_count(params: Params) -> int:
    return sum(t.size for t in params.values())
