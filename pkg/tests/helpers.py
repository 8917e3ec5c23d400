"""Shared builders for small models and corpora used across tests."""

from __future__ import annotations

import numpy as np

from uemprompt.autodiff import make_rng
from uemprompt.data import SynthConfig, synth_generate
from uemprompt.embedder import EmbedderConfig
from uemprompt.lm import LmConfig, Vocab, lm_init
from uemprompt.model import build_examples, vocab_corpus
from uemprompt.uem import UemConfig, uem_init


def micro_setup(p=3, k=2, n_users=3, seed=0, layers=1, enc=1, dec=1, dtype=np.float64, genres=3):
    """A tiny UEM + LM with a handful of synthetic users, double precision by default."""
    corpus = synth_generate(SynthConfig(n_users=n_users, n_movies=6, genres=genres, min_items=p, max_items=p + 2, seed=seed, desc_words=2))
    emb = EmbedderConfig(s=8, seed=seed)
    ucfg = UemConfig(layers=layers, heads=2, d_model=8, d_mlp=8, e=8, s=8, max_p=max(p, 1))
    lcfg = LmConfig(e=8, enc_layers=enc, dec_layers=dec, heads=2, d_mlp=8, k=k, max_p=max(p, 1), max_input=12, max_output=24)
    vocab = Vocab.build(vocab_corpus(corpus.users, "embedding", p, corpus.genres))
    examples = build_examples(corpus.users, "embedding", p, vocab, emb, lcfg)
    for ex in examples:
        ex.history = ex.history.astype(dtype)
    rng = make_rng(seed)
    params = uem_init(ucfg, rng, dtype)
    params.update(lm_init(lcfg, len(vocab), rng, dtype))
    return examples, params, ucfg, lcfg, vocab, corpus


# Hand-computed label cases: (name, {genre tuple: [ratings]}, liked, disliked).
# Each key is the genre set of one movie; every rating is one viewing of it.
LABEL_CASES = [
    ("two ratings are too few", {("Action",): [5, 5]}, [], []),
    ("three ratings is enough", {("Action",): [4, 4, 4]}, ["Action"], []),
    ("mean exactly 3.5 is not liked", {("Drama",): [3, 4, 3.5]}, [], []),
    ("mean exactly 3.0 is not disliked", {("Drama",): [3, 3, 3]}, [], []),
    ("just above 3.5", {("War",): [3.5, 3.5, 4]}, ["War"], []),
    ("just below 3.0", {("War",): [3, 3, 2.5]}, [], ["War"]),
    (
        "worked example",
        {("Action",): [5, 5, 4], ("Comedy",): [4, 4, 4], ("Horror",): [1, 2, 2], ("Drama",): [3, 3, 3]},
        ["Action", "Comedy"],
        ["Horror"],
    ),
    (
        "top three liked by mean",
        {("Action",): [5, 5, 5], ("Comedy",): [4.5, 4.5, 4.5], ("Crime",): [4, 4, 4], ("Drama",): [4, 4, 3.5]},
        ["Action", "Comedy", "Crime"],
        [],
    ),
    ("liked mean tie broken by count", {("Action",): [4, 4, 4], ("War",): [4, 4, 4, 4]}, ["War", "Action"], []),
    ("liked full tie broken by name", {("Comedy",): [4, 4, 4], ("Action",): [4, 4, 4]}, ["Action", "Comedy"], []),
    (
        "top three disliked by mean",
        {("Horror",): [1, 1, 1], ("Crime",): [2, 2, 2], ("Drama",): [2.5, 2.5, 2.5], ("Western",): [2, 2.5, 2.5]},
        [],
        ["Horror", "Crime", "Western"],
    ),
    ("disliked mean tie broken by count", {("Horror",): [2, 2, 2], ("Crime",): [2, 2, 2, 2]}, [], ["Crime", "Horror"]),
    ("disliked full tie broken by name", {("Western",): [1, 1, 1], ("Crime",): [1, 1, 1]}, [], ["Crime", "Western"]),
    ("multi-genre movie counts for each genre", {("Action", "Comedy"): [5, 4.5, 5]}, ["Action", "Comedy"], []),
    (
        "multi-genre ratings pool across movies",
        {("Action", "Horror"): [2, 2], ("Horror",): [1], ("Action",): [5, 5, 5]},
        ["Action"],
        ["Horror"],
    ),
    ("single item is neutral", {("Action",): [5]}, [], []),
    ("mixed counts below threshold", {("Action",): [5, 5], ("Horror",): [1, 1], ("Drama",): [3, 3, 3.5]}, [], []),
]


def history_from_case(groups, user_id="u"):
    from uemprompt.data import HistoryItem, MovieRecord, UserHistory

    items, t = [], 0
    for j, (genres, ratings) in enumerate(groups.items()):
        movie = MovieRecord(f"m{j}", f"Movie {j}", tuple(genres), "")
        for r in ratings:
            items.append(HistoryItem(movie, float(r), t))
            t += 1
    return UserHistory.from_items(user_id, items)


def brute_force_prf(preds, golds, genres, label_space="both"):
    """Nested loops over labels and examples; returns (per_label, P, R, F1)."""
    labels = [("liked", g) for g in genres]
    if label_space == "both":
        labels += [("disliked", g) for g in genres]
    per_label = {}
    for side, g in labels:
        tp = fp = fn = 0
        for p, t in zip(preds, golds):
            in_p = g in (p.liked if side == "liked" else p.disliked)
            in_t = g in (t.liked if side == "liked" else t.disliked)
            if in_p and in_t:
                tp += 1
            elif in_p:
                fp += 1
            elif in_t:
                fn += 1
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per_label[f"{side}_{g}"] = (prec, rec, f1, tp + fn)
    total = sum(v[3] for v in per_label.values())
    agg = [sum(v[i] * v[3] for v in per_label.values()) / total if total else 0.0 for i in range(3)]
    return per_label, agg[0], agg[1], agg[2]


def random_prf_case(rng, genres, n):
    """Random gold labels (disjoint, at most 3 each) and random predictions."""
    from uemprompt.data import PreferenceLabel, render_target
    from uemprompt.metrics import VerbalizedPrediction

    golds, preds = [], []
    for _ in range(n):
        picks = list(rng.permutation(len(genres)))
        nl, nd = int(rng.integers(0, 4)), int(rng.integers(0, 4))
        liked = [genres[i] for i in picks[:nl]]
        disliked = [genres[i] for i in picks[nl : nl + nd]]
        golds.append(PreferenceLabel(tuple(liked), tuple(disliked), render_target(liked, disliked)))
        pl = frozenset(g for g in genres if rng.random() < 0.15)
        pd = frozenset(g for g in genres if rng.random() < 0.1 and g not in pl)
        preds.append(VerbalizedPrediction(pl, pd, True, ""))
    return preds, golds


TINY = {
    "embedder.s": 8,
    "uem.s": 8,
    "uem.layers": 1,
    "uem.heads": 2,
    "uem.d_model": 8,
    "uem.d_mlp": 8,
    "uem.e": 8,
    "uem.max_p": 8,
    "lm.e": 8,
    "lm.enc_layers": 1,
    "lm.dec_layers": 1,
    "lm.heads": 2,
    "lm.d_mlp": 8,
    "lm.k": 2,
    "lm.max_p": 8,
    "synth.n_users": 16,
    "synth.n_movies": 20,
    "synth.genres": 4,
    "synth.min_items": 6,
    "synth.max_items": 10,
    "synth.desc_words": 2,
    "data.p": 4,
    "data.min_views": 0,
    "data.train_frac": 0.75,
    "data.dev_frac": 0.25,
    "data.test_frac": 0.0,
    "train.batch_size": 4,
    "train.steps": 20,
    "train.log_every": 5,
    "train.lr": 0.003,
}


def tiny_config(**overrides):
    from uemprompt.config import from_dict

    return from_dict({}, {**TINY, **overrides})


def tiny_flags(**overrides):
    """The tiny config as CLI flags."""
    out = []
    for key, value in {**TINY, **overrides}.items():
        sec, name = key.split(".")
        out += [f"--{sec}-{name.replace('_', '-')}", str(value)]
    return out
