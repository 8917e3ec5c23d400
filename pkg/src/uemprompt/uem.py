"""User Embedding Module: item embeddings -> per-item soft prompts in LM space.

Default wiring keeps the residual stream at the item-embedding width ``3s``:

    U [p, 3s] (+ position embeddings) -> ``layers`` pre-norm blocks
    (attention inner width ``d_model``, gated-GELU MLP of width ``d_mlp``)
    -> final layer norm -> linear 3s -> e

With ``input_proj=True`` the stream is first projected 3s -> d_model and the
blocks run at ``d_model`` instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

PREFIX = "uem"


class CapacityError(ValueError):
    """History longer than the module's positional capacity."""


@dataclass(frozen=True)
class UemConfig:
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    d_mlp: int = 128
    e: int = 64
    s: int = 64
    max_p: int = 128
    use_positions: bool = True
    input_proj: bool = False

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1 or self.d_mlp < 1 or self.e < 1 or self.s < 1:
            raise ValueError("UEM sizes must be positive")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.max_p < 1:
            raise ValueError("max_p must be >= 1")

    @property
    def width(self) -> int:
        """Residual-stream width of the transformer blocks."""
        return self.d_model if self.input_proj else 3 * self.s


def block_param_count(cfg: UemConfig) -> int:
    return nn.encoder_block_count(cfg.width, cfg.d_model, cfg.d_mlp)


def uem_param_count(cfg: UemConfig) -> int:
    """Closed-form scalar count; equals the sizes allocated by ``uem_init``.

    input projection (optional) + positions + layers * block + final norm + output projection
    """
    w = cfg.width
    total = nn.linear_count(3 * cfg.s, cfg.d_model) if cfg.input_proj else 0
    total += cfg.max_p * w if cfg.use_positions else 0
    total += cfg.layers * block_param_count(cfg)
    total += 2 * w
    total += nn.linear_count(w, cfg.e)
    return total


def uem_init(cfg: UemConfig, rng: np.random.Generator, dtype=np.float64) -> nn.Params:
    params: nn.Params = {}
    w = cfg.width
    if cfg.input_proj:
        nn.init_linear(params, f"{PREFIX}.in", rng, 3 * cfg.s, cfg.d_model, dtype)
    if cfg.use_positions:
        params[f"{PREFIX}.pos"] = nn.normal(rng, (cfg.max_p, w), 0.02, dtype)
    for i in range(cfg.layers):
        nn.init_encoder_block(params, f"{PREFIX}.l{i}", rng, w, cfg.d_model, cfg.d_mlp, dtype)
    nn.init_norm(params, f"{PREFIX}.ln_f", w, dtype)
    nn.init_linear(params, f"{PREFIX}.out", rng, w, cfg.e, dtype)
    return params


def uem_forward(U, params: nn.Params, cfg: UemConfig, lengths=None) -> Tensor:
    """Soft prompts for a history matrix ``[p, 3s]`` or a padded batch ``[B, p, 3s]``.

    ``lengths`` gives the true history length of each batch row; padded items
    are excluded from attention and their output rows are meaningless.
    """
    x = U if isinstance(U, Tensor) else Tensor(getattr(U, "data", U), dtype=params[f"{PREFIX}.out.w"].dtype)
    single = x.ndim == 2
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    b, p, cols = x.shape
    if cols != 3 * cfg.s:
        raise ad.ShapeError(f"uem_forward: history width {cols} != 3*s = {3 * cfg.s}")
    if p > cfg.max_p:
        raise CapacityError(f"history length {p} exceeds max_p={cfg.max_p}")
    if p == 0:
        out = Tensor(np.zeros((b, 0, cfg.e)), dtype=x.dtype)
        return ad.reshape(out, (0, cfg.e)) if single else out
    if cfg.input_proj:
        x = nn.lin(x, params, f"{PREFIX}.in")
    if cfg.use_positions:
        x = ad.add(x, params[f"{PREFIX}.pos"][:p])
    mask = None
    if lengths is not None:
        lengths = np.asarray(lengths)
        keys = np.arange(p)[None, :] < np.maximum(lengths, 1)[:, None]
        mask = np.broadcast_to(keys[:, None, :], (b, p, p))
    for i in range(cfg.layers):
        x = nn.encoder_block(x, params, f"{PREFIX}.l{i}", cfg.heads, mask)
    out = nn.lin(nn.norm(x, params, f"{PREFIX}.ln_f"), params, f"{PREFIX}.out")
    return ad.reshape(out, (p, cfg.e)) if single else out
