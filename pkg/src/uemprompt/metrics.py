"""Verbalizer, weighted multi-label precision/recall/F1 and the counting baseline."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import DISLIKE_CLAUSE, LIKE_PREFIX, NEUTRAL_TARGET, GenreVocabulary, PreferenceLabel, UserHistory
from .lm import split_tokens

_LIKE = tuple(split_tokens(LIKE_PREFIX)[2:])  # "likes to watch movies with genres"
_DISLIKE = tuple(split_tokens(DISLIKE_CLAUSE))
_NEUTRAL = tuple(split_tokens(NEUTRAL_TARGET)[2:])

LABEL_SPACES = ("both", "liked")


@dataclass(frozen=True)
class VerbalizedPrediction:
    liked: frozenset
    disliked: frozenset
    parse_ok: bool
    raw_text: str = ""
    overlaps: int = 0


def _find(tokens: list[str], pattern: tuple[str, ...]) -> int:
    n = len(pattern)
    for i in range(len(tokens) - n + 1):
        if tuple(tokens[i : i + n]) == pattern:
            return i
    return -1


def _match_genres(tokens: list[str], patterns: list[tuple[tuple[str, ...], str]]) -> list[str]:
    found: list[str] = []
    i = 0
    while i < len(tokens):
        for pat, name in patterns:
            if tuple(tokens[i : i + len(pat)]) == pat:
                if name not in found:
                    found.append(name)
                i += len(pat)
                break
        else:
            i += 1
    return found


def verbalize(text: str, vocab: GenreVocabulary) -> VerbalizedPrediction:
    """Parse liked/disliked genre clauses out of generated text; never raises."""
    tokens = split_tokens(text)
    patterns = sorted(((tuple(split_tokens(g)), g) for g in vocab), key=lambda pg: (-len(pg[0]), pg[1]))
    like_at = _find(tokens, _LIKE)
    dis_at = _find(tokens, _DISLIKE)
    liked: list[str] = []
    disliked: list[str] = []
    if like_at >= 0:
        start = like_at + len(_LIKE)
        stop = dis_at if dis_at >= start else len(tokens)
        liked = _match_genres(tokens[start:stop], patterns)
    if dis_at >= 0:
        start = dis_at + len(_DISLIKE)
        stop = like_at if like_at >= start else len(tokens)
        disliked = _match_genres(tokens[start:stop], patterns)
    parse_ok = like_at >= 0 or dis_at >= 0 or _find(tokens, _NEUTRAL) >= 0
    overlap = set(liked) & set(disliked)
    return VerbalizedPrediction(
        frozenset(liked),
        frozenset(g for g in disliked if g not in overlap),
        parse_ok,
        text,
        len(overlap),
    )


def label_names(vocab: GenreVocabulary, label_space: str = "both") -> list[str]:
    if label_space not in LABEL_SPACES:
        raise ValueError(f"label_space must be one of {LABEL_SPACES}")
    names = [f"liked_{g}" for g in vocab]
    if label_space == "both":
        names += [f"disliked_{g}" for g in vocab]
    return names


def indicator_matrix(pairs: Sequence[tuple[Sequence[str], Sequence[str]]], vocab: GenreVocabulary, label_space: str = "both") -> np.ndarray:
    g = len(vocab)
    width = 2 * g if label_space == "both" else g
    out = np.zeros((len(pairs), width), dtype=bool)
    for i, (liked, disliked) in enumerate(pairs):
        for name in liked:
            out[i, vocab.index(name)] = True
        if label_space == "both":
            for name in disliked:
                out[i, g + vocab.index(name)] = True
    return out


@dataclass
class LabelScore:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvalReport:
    per_label: dict[str, LabelScore]
    precision: float
    recall: float
    f1: float
    n_examples: int
    parse_failure_rate: float
    overlap_anomalies: int = 0
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        rec = asdict(self)
        return json.dumps(rec, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "EvalReport":
        rec = json.loads(line)
        rec["per_label"] = {k: LabelScore(**v) for k, v in rec["per_label"].items()}
        return cls(**rec)


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def weighted_prf(
    preds: Sequence[VerbalizedPrediction],
    golds: Sequence[PreferenceLabel],
    vocab: GenreVocabulary,
    label_space: str = "both",
) -> EvalReport:
    """Per-label P/R/F1 and their support-weighted averages.

    Zero denominators score 0.  Labels with no gold positives get zero weight.
    """
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions vs {len(golds)} gold labels")
    names = label_names(vocab, label_space)
    y_pred = indicator_matrix([(p.liked, p.disliked) for p in preds], vocab, label_space)
    y_true = indicator_matrix([(g.liked, g.disliked) for g in golds], vocab, label_space)
    tp = (y_pred & y_true).sum(axis=0)
    fp = (y_pred & ~y_true).sum(axis=0)
    fn = (~y_pred & y_true).sum(axis=0)
    per_label = {}
    for j, name in enumerate(names):
        p = _safe_div(float(tp[j]), float(tp[j] + fp[j]))
        r = _safe_div(float(tp[j]), float(tp[j] + fn[j]))
        f = _safe_div(2 * p * r, p + r)
        per_label[name] = LabelScore(p, r, f, int(tp[j] + fn[j]))
    total = sum(s.support for s in per_label.values())
    wp = _safe_div(sum(s.precision * s.support for s in per_label.values()), total)
    wr = _safe_div(sum(s.recall * s.support for s in per_label.values()), total)
    wf = _safe_div(sum(s.f1 * s.support for s in per_label.values()), total)
    fails = sum(not p.parse_ok for p in preds)
    return EvalReport(
        per_label,
        wp,
        wr,
        wf,
        len(preds),
        _safe_div(fails, len(preds)),
        sum(p.overlaps for p in preds),
        {"label_space": label_space},
    )


def counting_baseline(history: UserHistory) -> VerbalizedPrediction:
    """Three most frequent genres in the history (ties by name); ratings ignored."""
    if not history.items:
        raise ValueError("counting baseline needs a nonempty history")
    counts = Counter(g for it in history.items for g in it.movie.genres)
    top = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:3]
    return VerbalizedPrediction(frozenset(g for g, _ in top), frozenset(), True, "")


def render_table(rows: Sequence[tuple[str, EvalReport]]) -> str:
    """Text table with precision/recall/f1 rows per named report."""
    lines = [f"{'':<24}{'':<11}{'score':>8}", "-" * 43]
    for name, rep in rows:
        for metric in ("precision", "recall", "f1"):
            label = name if metric == "precision" else ""
            lines.append(f"{label:<24}{metric:<11}{getattr(rep, metric):>8.3f}")
        lines.append("-" * 43)
    return "\n".join(lines)
