"""Experiment orchestration: data, training, evaluation, ablation sweeps and cost reports."""

from __future__ import annotations

import contextlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import config as config_mod
from .autodiff import make_rng
from .config import ConfigError, RunConfig
from .cost import attention_flops, compare_counts, flops_curve, text_history_token_count
from .data import Dataset, GenreVocabulary, build_preference_labels, filter_min_views, make_dataset, read_shards, synth_generate, truncate_history
from .lm import Vocab, lm_init, split_tokens
from .metrics import EvalReport, counting_baseline, render_table, weighted_prf
from .model import QUERY_TEXT, AdamState, Example, batch_indices, build_examples, evaluate_examples, train_step, vocab_corpus
from .uem import uem_init

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
TIMING_FILE = "timing.jsonl"
CHECKPOINT_FILE = "model.ckpt"
VOCAB_FILE = "vocab.txt"
CONFIG_FILE = "config.ini"


class RunLockedError(RuntimeError):
    """Another process owns the output directory."""


@contextlib.contextmanager
def run_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(f"{out_dir} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    tmp.replace(path)


def _dtype(cfg: RunConfig):
    return np.float32 if cfg.train.dtype == "float32" else np.float64


# --------------------------------------------------------------------- data


def load_dataset(cfg: RunConfig) -> Dataset:
    """Synthesize (seeded) or read shards, then apply the min-views filter."""
    if cfg.data.source == "synthetic":
        corpus = synth_generate(cfg.synth)
        users = filter_min_views(corpus.users, cfg.data.min_views)
        return make_dataset(corpus.movies, users, corpus.genres, cfg.data.salt, cfg.fractions, "synthetic", corpus.latent)
    ds = read_shards(cfg.data.shards)
    keep = {u.user_id for u in filter_min_views(ds.users, cfg.data.min_views)}
    ds.users = [u for u in ds.users if u.user_id in keep]
    return ds


def init_params(cfg: RunConfig, vocab_size: int) -> dict:
    """UEM tensors first (embedding mode only), then LM tensors, from one seeded stream."""
    rng = make_rng(cfg.train.seed)
    params = uem_init(cfg.uem, rng, _dtype(cfg)) if cfg.train.mode == "embedding" else {}
    params.update(lm_init(cfg.lm, vocab_size, rng, _dtype(cfg)))
    return params


def make_examples(cfg: RunConfig, users, vocab: Vocab) -> list[Example]:
    try:
        exs = build_examples(users, cfg.train.mode, cfg.data.p, vocab, cfg.embedder, cfg.lm)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    dt = _dtype(cfg)
    for ex in exs:
        if ex.history is not None:
            ex.history = ex.history.astype(dt)
    return exs


# -------------------------------------------------------------------- train


@dataclass
class TrainResult:
    out_dir: Path
    losses: list[float]
    report: EvalReport | None
    prompt_checks: int
    step: int
    metrics: list[dict] = field(default_factory=list)


def _report_record(step: int, split: str, rep: EvalReport) -> dict:
    return {"step": step, "split": split, "precision": rep.precision, "recall": rep.recall, "f1": rep.f1}


def _read_metrics(path: Path, upto: int) -> list[dict]:
    if not path.exists():
        return []
    recs = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]
    return [r for r in recs if r["step"] <= upto]


def _dump_jsonl(records: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def train(cfg: RunConfig, out_dir, dataset: Dataset | None = None, resume=None, stop_at: int | None = None) -> TrainResult:
    """Co-train UEM and LM for ``cfg.train.steps`` steps and write the run directory.

    ``resume`` continues from a checkpoint (bit-identical to an uninterrupted
    run); ``stop_at`` ends early at that step, e.g. to produce a resume point.
    """
    config_mod.validate(cfg)
    out = Path(out_dir)
    with run_lock(out):
        ds = dataset if dataset is not None else load_dataset(cfg)
        train_users = ds.split("train")
        dev_users = ds.split("dev")
        if not train_users:
            raise ConfigError("training split is empty")

        if resume is not None:
            ck = ckpt_io.load(resume)
            saved = config_mod.from_dict(ck.config)
            if saved.replace(**{"train.steps": cfg.train.steps}) != cfg:
                raise ckpt_io.CheckpointError("resume checkpoint was trained with a different config")
            vocab = Vocab(ck.vocab[3:])
            params = ck.params
            ckpt_io.validate_shapes(ck, init_params(cfg, len(vocab)))
            opt, start = ck.opt, ck.step
            metrics = _read_metrics(out / METRICS_FILE, start)
            timing = _read_metrics(out / TIMING_FILE, start)
        else:
            vocab = Vocab.build(vocab_corpus(train_users, cfg.train.mode, cfg.data.p, ds.genres))
            params = init_params(cfg, len(vocab))
            opt, start, metrics, timing = AdamState.zeros_like(params), 0, [], []

        write_atomic(out / CONFIG_FILE, config_mod.dumps(cfg))
        vocab.save(out / VOCAB_FILE)
        examples = make_examples(cfg, train_users, vocab)
        dev_examples = make_examples(cfg, dev_users, vocab)
        end = cfg.train.steps if stop_at is None else min(stop_at, cfg.train.steps)

        def snapshot(step: int) -> None:
            ckpt_io.save(
                ckpt_io.Checkpoint(cfg.to_dict(), vocab.itos, list(ds.genres.names), params, opt, step, cfg.train.seed),
                out / CHECKPOINT_FILE,
            )

        def evaluate_dev(step: int) -> EvalReport | None:
            if not dev_examples:
                return None
            rep = evaluate_examples(dev_examples, params, cfg.uem, cfg.lm, vocab, ds.genres, cfg.data.label_space)
            metrics.append(_report_record(step, "dev", rep))
            return rep

        losses: list[float] = []
        t0 = time.perf_counter()
        checks = 0
        for step in range(start, end):
            idx = batch_indices(step, cfg.train.batch_size, len(examples), cfg.train.seed)
            loss = train_step([examples[i] for i in idx], params, opt, cfg.train.lr, cfg.uem, cfg.lm, step)
            checks += 1
            losses.append(loss)
            done = step + 1
            if cfg.train.log_every and done % cfg.train.log_every == 0:
                metrics.append({"step": done, "split": "train", "loss": loss})
                timing.append({"step": done, "wall_time": round(time.perf_counter() - t0, 3)})
                log.info("step %d loss %.4f", done, loss)
            if cfg.train.eval_every and done % cfg.train.eval_every == 0 and done < end:
                evaluate_dev(done)
            if cfg.train.checkpoint_every and done % cfg.train.checkpoint_every == 0 and done < end:
                snapshot(done)
                write_atomic(out / METRICS_FILE, _dump_jsonl(metrics))

        report = evaluate_dev(end) if end == cfg.train.steps else None
        snapshot(end)
        write_atomic(out / METRICS_FILE, _dump_jsonl(metrics))
        write_atomic(out / TIMING_FILE, _dump_jsonl(timing))
        return TrainResult(out, losses, report, checks, end, metrics)


# ----------------------------------------------------------------- evaluate


def load_run(ckpt_path):
    """Checkpoint, its config and vocabulary, with shapes validated against the config."""
    ck = ckpt_io.load(ckpt_path)
    cfg = config_mod.from_dict(ck.config)
    vocab = Vocab(ck.vocab[3:])
    ckpt_io.validate_shapes(ck, init_params(cfg, len(vocab)))
    return ck, cfg, vocab


def evaluate_model(ckpt_path, split: str = "dev", mode: str | None = None, dataset: Dataset | None = None) -> EvalReport:
    ck, cfg, vocab = load_run(ckpt_path)
    if mode is not None and mode != cfg.train.mode:
        raise ckpt_io.CheckpointError(f"checkpoint was trained in {cfg.train.mode!r} mode, not {mode!r}")
    ds = dataset if dataset is not None else load_dataset(cfg)
    genres = GenreVocabulary(tuple(ck.genres))
    examples = make_examples(cfg, ds.split(split), vocab)
    rep = evaluate_examples(examples, ck.params, cfg.uem, cfg.lm, vocab, genres, cfg.data.label_space)
    rep.meta.update({"mode": cfg.train.mode, "p": cfg.data.p, "k": cfg.lm.k, "seed": cfg.train.seed, "split": split, "step": ck.step})
    return rep


def evaluate_baseline(cfg: RunConfig, split: str = "dev", dataset: Dataset | None = None) -> EvalReport:
    """Counting baseline over each user's full history."""
    ds = dataset if dataset is not None else load_dataset(cfg)
    users = ds.split(split)
    rep = weighted_prf([counting_baseline(u) for u in users], [build_preference_labels(u) for u in users], ds.genres, cfg.data.label_space)
    rep.meta.update({"mode": "baseline", "p": None, "k": None, "seed": cfg.train.seed, "split": split})
    return rep


# ------------------------------------------------------------------ ablate


@dataclass
class AblationRow:
    key: str
    value: object
    report: EvalReport | None
    error: str | None = None


def ablate(cfg: RunConfig, key: str, values: Sequence, out_dir, split: str = "dev") -> list[AblationRow]:
    """Train + evaluate once per sweep value on one shared dataset; failures are recorded, not fatal."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(cfg)
    rows = []
    for i, value in enumerate(values):
        try:
            point = cfg.replace(**{key: value})
            res = train(point, out / f"point_{i:02d}", dataset=ds)
            rep = evaluate_model(res.out_dir / CHECKPOINT_FILE, split, dataset=ds)
            rows.append(AblationRow(key, value, rep))
        except Exception as exc:  # noqa: BLE001 - a failing sweep point must not stop the sweep
            log.error("sweep point %s=%s failed: %s", key, value, exc)
            rows.append(AblationRow(key, value, None, f"{type(exc).__name__}: {exc}"))
    lines = []
    for r in rows:
        rec = {"key": r.key, "value": r.value, "error": r.error}
        if r.report is not None:
            rec.update({"precision": r.report.precision, "recall": r.report.recall, "f1": r.report.f1})
        lines.append(rec)
    write_atomic(out / "ablation.jsonl", _dump_jsonl(lines))
    write_atomic(out / "ablation.txt", ablation_table(rows) + "\n")
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> str:
    ok = [(f"{r.key}={r.value}", r.report) for r in rows if r.report is not None]
    failed = [f"{r.key}={r.value}: FAILED ({r.error})" for r in rows if r.report is None]
    return "\n".join([render_table(ok)] + failed) if ok else "\n".join(failed)


# -------------------------------------------------------------------- cost


REFERENCE_SCENARIO = {"n_text": 16_000, "k": 20, "p": 50, "n_query": 30}


def cost_report(cfg: RunConfig, dataset: Dataset | None = None, split: str = "dev") -> dict:
    """Token counts and attention FLOPs for text vs embedding prompting on a split."""
    ds = dataset if dataset is not None else load_dataset(cfg)
    n_query = len(split_tokens(QUERY_TEXT))
    users = [truncate_history(u, cfg.data.p) for u in ds.split(split)]
    text_tokens = [text_history_token_count(u) + n_query for u in users]
    cmp = [compare_counts(n, cfg.lm.k, len(u.items), n_query, cfg.lm, cfg.uem) for n, u in zip(text_tokens, users)]
    ref = compare_counts(REFERENCE_SCENARIO["n_text"], REFERENCE_SCENARIO["k"], REFERENCE_SCENARIO["p"], REFERENCE_SCENARIO["n_query"], cfg.lm, cfg.uem)
    return {
        "split": split,
        "users": len(users),
        "p": cfg.data.p,
        "k": cfg.lm.k,
        "n_query": n_query,
        "mean_text_tokens": float(np.mean(text_tokens)) if users else 0.0,
        "text_flops_total": sum(c.text_total for c in cmp),
        "embedding_flops_total": sum(c.embedding_total for c in cmp),
        "embedding_lm_flops_total": sum(c.embedding_lm.attn_flops for c in cmp),
        "embedding_uem_flops_total": sum(c.embedding_uem.attn_flops if c.embedding_uem else 0 for c in cmp),
        "reference_scenario": {**REFERENCE_SCENARIO, "text_flops": ref.text_total, "embedding_lm_flops": ref.embedding_lm.attn_flops, "embedding_total_flops": ref.embedding_total, "encoder_ratio": ref.encoder_ratio},
        "formula": "attention_flops(n, L, d) = 4 * L * n^2 * d",
    }


def cost_curve(cfg: RunConfig, max_n: int = 16384) -> list[tuple[int, int]]:
    ns = [2**i for i in range(max_n.bit_length()) if 2**i <= max_n]
    return flops_curve(ns, cfg.lm.enc_layers, cfg.lm.e)


__all__ = [
    "load_dataset",
    "train",
    "evaluate_model",
    "evaluate_baseline",
    "ablate",
    "cost_report",
    "cost_curve",
    "attention_flops",
]
