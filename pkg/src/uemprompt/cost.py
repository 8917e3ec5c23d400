"""Attention-cost accounting for text-history versus embedding-history prompts.

Only the two attention matmuls are counted (``Q Kᵀ`` and ``A V``), each
``n² d`` multiply-accumulates at 2 FLOPs apiece, per layer:

    attention_flops(n, L, d) = 4 · L · n² · d

Projections and MLPs are linear in ``n`` and left out on purpose.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable

from .data import UserHistory, render_history_item
from .lm import LmConfig, Vocab, split_tokens
from .uem import UemConfig


def attention_flops(n: int, layers: int, width: int) -> int:
    for name, v in (("n", n), ("layers", layers), ("width", width)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v}")
    return 4 * int(layers) * int(n) * int(n) * int(width)


def item_token_count(item) -> int:
    return sum(len(split_tokens(t)) for t in render_history_item(item))


def text_history_token_count(history: UserHistory, vocab: Vocab | None = None, query: str = "") -> int:
    """Tokens of all rendered history segments plus the query.

    Every token counts once whether or not it is in ``vocab`` (OOV maps to UNK).
    """
    return sum(item_token_count(it) for it in history.items) + len(split_tokens(query))


@dataclass(frozen=True)
class CostProfile:
    mode: str
    seq_len: int
    layers: int
    heads: int
    width: int
    attn_flops: int
    breakdown: dict


@dataclass(frozen=True)
class CostComparison:
    text: CostProfile
    embedding_lm: CostProfile
    embedding_uem: CostProfile | None
    text_total: int
    embedding_total: int
    encoder_ratio: float
    total_ratio: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _profile(mode: str, n: int, layers: int, heads: int, width: int, breakdown: dict) -> CostProfile:
    flops = attention_flops(n, layers, width) if n > 0 else 0
    return CostProfile(mode, n, layers, heads, width, flops, breakdown)


def compare_counts(n_text: int, k: int, p: int, n_query: int, lm_cfg: LmConfig, uem_cfg: UemConfig) -> CostComparison:
    text = _profile("text", n_text, lm_cfg.enc_layers, lm_cfg.heads, lm_cfg.e, {"n_text": n_text})
    emb = _profile("embedding", k + p + n_query, lm_cfg.enc_layers, lm_cfg.heads, lm_cfg.e, {"k": k, "p": p, "n": n_query})
    uem = _profile("uem", p, uem_cfg.layers, uem_cfg.heads, uem_cfg.d_model, {"p": p}) if p > 0 else None
    emb_total = emb.attn_flops + (uem.attn_flops if uem else 0)
    return CostComparison(
        text,
        emb,
        uem,
        text.attn_flops,
        emb_total,
        text.attn_flops / emb.attn_flops if emb.attn_flops else float("inf"),
        text.attn_flops / emb_total if emb_total else float("inf"),
    )


def cost_compare(history: UserHistory, k: int, n_query: int, lm_cfg: LmConfig, uem_cfg: UemConfig, vocab: Vocab | None = None) -> CostComparison:
    """Text mode feeds rendered history + query to the encoder; embedding mode
    feeds ``k + p + n_query`` rows to the encoder plus ``p`` rows to the UEM."""
    n_text = text_history_token_count(history, vocab) + n_query
    return compare_counts(n_text, k, len(history.items), n_query, lm_cfg, uem_cfg)


def flops_curve(ns: Iterable[int], layers: int, width: int) -> list[tuple[int, int]]:
    return [(n, attention_flops(n, layers, width)) for n in ns]
