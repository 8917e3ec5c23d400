"""Encoder-decoder language model with task soft prompts and user soft prompts.

The encoder consumes one embedding matrix per example,
``[task prompts (k) ; user prompts (p) ; query tokens (n)]``, with learned
absolute positions added per row.  The decoder is causal with
cross-attention and ties its output projection to the token table.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

PAD, EOS, UNK = 0, 1, 2
SPECIALS = ("<pad>", "</s>", "<unk>")
PREFIX = "lm"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def split_tokens(text: str) -> list[str]:
    """Lowercase, split on whitespace and punctuation; punctuation marks are tokens."""
    return _TOKEN_RE.findall(text.lower())


def normalize_text(text: str) -> str:
    return " ".join(split_tokens(text))


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        self.itos: list[str] = list(SPECIALS) + list(tokens)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary entries are not unique")

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        """Tokens ordered by frequency, then lexicographically."""
        counts = Counter(tok for t in texts for tok in split_tokens(t))
        for s in SPECIALS:
            counts.pop(s, None)
        return cls([tok for tok, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))])

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(SPECIALS):]), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls([t for t in text.split("\n") if t] if text else [])


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return [vocab.stoi.get(t, UNK) for t in split_tokens(text)]


def detokenize(ids: Iterable[int], vocab: Vocab) -> str:
    out = []
    for i in ids:
        if i == EOS:
            break
        if i == PAD:
            continue
        out.append(vocab.itos[i])
    return " ".join(out)


@dataclass(frozen=True)
class LmConfig:
    e: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    d_mlp: int = 128
    k: int = 20
    max_p: int = 128
    max_input: int = 32
    max_output: int = 48

    def __post_init__(self):
        if min(self.e, self.enc_layers, self.dec_layers, self.heads, self.d_mlp, self.max_output) < 1:
            raise ValueError("LM sizes must be positive")
        if self.e % self.heads:
            raise ValueError(f"e={self.e} is not divisible by heads={self.heads}")
        if self.k < 0 or self.max_p < 0 or self.max_input < 0:
            raise ValueError("k, max_p and max_input must be >= 0")

    @property
    def max_encoder(self) -> int:
        return self.k + self.max_p + self.max_input


def lm_init(cfg: LmConfig, vocab_size: int, rng: np.random.Generator, dtype=np.float64) -> nn.Params:
    params: nn.Params = {}
    std = 1.0 / np.sqrt(cfg.e)
    params[f"{PREFIX}.tok"] = nn.normal(rng, (vocab_size, cfg.e), std, dtype)
    if cfg.k:
        params[f"{PREFIX}.prompt"] = nn.normal(rng, (cfg.k, cfg.e), std, dtype)
    params[f"{PREFIX}.enc_pos"] = nn.normal(rng, (cfg.max_encoder, cfg.e), 0.02, dtype)
    params[f"{PREFIX}.dec_pos"] = nn.normal(rng, (cfg.max_output, cfg.e), 0.02, dtype)
    for i in range(cfg.enc_layers):
        nn.init_encoder_block(params, f"{PREFIX}.enc.l{i}", rng, cfg.e, cfg.e, cfg.d_mlp, dtype)
    nn.init_norm(params, f"{PREFIX}.enc.ln_f", cfg.e, dtype)
    for i in range(cfg.dec_layers):
        nn.init_decoder_block(params, f"{PREFIX}.dec.l{i}", rng, cfg.e, cfg.e, cfg.d_mlp, dtype)
    nn.init_norm(params, f"{PREFIX}.dec.ln_f", cfg.e, dtype)
    return params


def task_prompts(params: nn.Params, cfg: LmConfig) -> Tensor:
    if cfg.k:
        return params[f"{PREFIX}.prompt"]
    return Tensor(np.zeros((0, cfg.e)), dtype=params[f"{PREFIX}.tok"].dtype)


def embed_query(ids: Sequence[int], params: nn.Params, cfg: LmConfig) -> Tensor:
    if len(ids) > cfg.max_input:
        raise ValueError(f"query has {len(ids)} tokens; max_input is {cfg.max_input}")
    return ad.take_rows(params[f"{PREFIX}.tok"], np.asarray(ids, dtype=np.int64).reshape(-1))


@dataclass
class PromptAssembly:
    matrix: Tensor
    spans: dict[str, tuple[int, int]]

    @property
    def length(self) -> int:
        return self.matrix.shape[0]


def assemble_prompt(task: Tensor, soft: Tensor, query: Tensor, enc_pos: Tensor | None = None) -> PromptAssembly:
    """Stack task prompts, user prompts and query embeddings row-wise."""
    widths = {task.shape[-1], soft.shape[-1], query.shape[-1]}
    if len(widths) != 1 or task.ndim != 2 or soft.ndim != 2 or query.ndim != 2:
        raise ad.ShapeError(f"assemble_prompt: shapes {task.shape}, {soft.shape}, {query.shape}")
    k, p, n = task.shape[0], soft.shape[0], query.shape[0]
    parts = [t for t in (task, soft, query) if t.shape[0]]
    matrix = ad.concat(parts, axis=0) if parts else query
    if enc_pos is not None:
        if k + p + n > enc_pos.shape[0]:
            raise ValueError(f"encoder length {k + p + n} exceeds positional capacity {enc_pos.shape[0]}")
        matrix = ad.add(matrix, enc_pos[: k + p + n])
    return PromptAssembly(matrix, {"task": (0, k), "user": (k, k + p), "query": (k + p, k + p + n)})


@dataclass
class PromptBatch:
    matrix: Tensor
    lengths: np.ndarray
    assemblies: list[PromptAssembly]


def batch_prompts(assemblies: Sequence[PromptAssembly]) -> PromptBatch:
    lengths = np.array([a.length for a in assemblies], dtype=np.int64)
    for a, n in zip(assemblies, lengths):
        if a.spans["query"][1] != n:
            raise AssertionError(f"encoder length {n} != k+p+n = {a.spans['query'][1]}")
    total = int(lengths.max())
    return PromptBatch(ad.stack([ad.pad_rows(a.matrix, total) for a in assemblies]), lengths, list(assemblies))


def _as_batch(prompts) -> tuple[PromptBatch, bool]:
    if isinstance(prompts, PromptBatch):
        return prompts, False
    if isinstance(prompts, PromptAssembly):
        return batch_prompts([prompts]), True
    return batch_prompts(list(prompts)), False


def encode(batch: PromptBatch, params: nn.Params, cfg: LmConfig) -> Tensor:
    b, t, _ = batch.matrix.shape
    if np.any(batch.lengths < 1):
        raise ValueError("encoder input is empty")
    keys = np.arange(t)[None, :] < batch.lengths[:, None]
    mask = np.broadcast_to(keys[:, None, :], (b, t, t))
    x = batch.matrix
    for i in range(cfg.enc_layers):
        x = nn.encoder_block(x, params, f"{PREFIX}.enc.l{i}", cfg.heads, mask)
    return nn.norm(x, params, f"{PREFIX}.enc.ln_f")


def decode_logits(memory: Tensor, enc_lengths: np.ndarray, dec_in: np.ndarray, params: nn.Params, cfg: LmConfig) -> Tensor:
    b, m = dec_in.shape
    if m > cfg.max_output:
        raise ValueError(f"decoder length {m} exceeds max_output={cfg.max_output}")
    tok = params[f"{PREFIX}.tok"]
    x = ad.add(ad.take_rows(tok, dec_in), params[f"{PREFIX}.dec_pos"][:m])
    causal = np.broadcast_to(np.tril(np.ones((m, m), dtype=bool))[None], (b, m, m))
    t = memory.shape[1]
    cross = np.broadcast_to((np.arange(t)[None, :] < enc_lengths[:, None])[:, None, :], (b, m, t))
    for i in range(cfg.dec_layers):
        x = nn.decoder_block(x, memory, params, f"{PREFIX}.dec.l{i}", cfg.heads, causal, cross)
    x = nn.norm(x, params, f"{PREFIX}.dec.ln_f")
    return ad.linear(x, ad.transpose(tok))


def _pad_targets(targets: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    m = max(len(t) for t in targets)
    tgt = np.full((len(targets), m), PAD, dtype=np.int64)
    for i, t in enumerate(targets):
        tgt[i, : len(t)] = t
    dec_in = np.full_like(tgt, PAD)
    dec_in[:, 1:] = tgt[:, :-1]
    return tgt, dec_in


def lm_forward(prompts, target_ids, params: nn.Params, cfg: LmConfig) -> tuple[Tensor, Tensor]:
    """Teacher-forced logits and mean cross-entropy.

    The loss averages token losses within each example, then over examples.
    """
    batch, single = _as_batch(prompts)
    targets = [target_ids] if single else list(target_ids)
    if len(targets) != len(batch.lengths):
        raise ValueError("number of targets does not match the prompt batch")
    for t in targets:
        if not t:
            raise ValueError("empty target sequence")
        if t[-1] != EOS:
            raise ValueError("target must end with EOS")
    tgt, dec_in = _pad_targets(targets)
    memory = encode(batch, params, cfg)
    logits = decode_logits(memory, batch.lengths, dec_in, params, cfg)
    weights = np.zeros(tgt.shape)
    for i, t in enumerate(targets):
        weights[i, : len(t)] = 1.0 / (len(t) * len(targets))
    loss = ad.cross_entropy(logits, tgt, weights)
    if single:
        logits = logits[0]
    return logits, loss


def greedy_decode(prompts, params: nn.Params, cfg: LmConfig, max_output: int | None = None):
    """Argmax decoding until EOS or ``max_output`` tokens; ties go to the lowest id."""
    max_output = cfg.max_output if max_output is None else max_output
    batch, single = _as_batch(prompts)
    b = len(batch.lengths)
    with ad.no_grad():
        memory = encode(batch, params, cfg)
        seqs = np.full((b, 1), PAD, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        out: list[list[int]] = [[] for _ in range(b)]
        for _ in range(max_output):
            logits = decode_logits(memory, batch.lengths, seqs, params, cfg).data[:, -1, :]
            nxt = np.argmax(logits, axis=-1)
            for i in range(b):
                if not done[i]:
                    if nxt[i] == EOS:
                        done[i] = True
                    else:
                        out[i].append(int(nxt[i]))
            if done.all() or seqs.shape[1] >= cfg.max_output:
                break
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return out[0] if single else out
