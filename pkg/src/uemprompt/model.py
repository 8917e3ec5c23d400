"""Co-trained UEM + prompted LM: example building, batched forward, Adam and one train step."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .data import GenreVocabulary, PreferenceLabel, UserHistory, build_preference_labels, render_history_text, truncate_history
from .embedder import EmbedderConfig, embed_history
from .lm import EOS, LmConfig, Vocab, assemble_prompt, batch_prompts, detokenize, embed_query, greedy_decode, lm_forward, task_prompts, tokenize
from .metrics import EvalReport, verbalize, weighted_prf
from .uem import UemConfig, uem_forward

QUERY_TEXT = "Which movie genres does this user like and dislike ?"
MODES = ("embedding", "text")


class NumericFailure(ArithmeticError):
    """Training produced a non-finite loss or gradient."""


class PromptShapeError(AssertionError):
    """Encoder input length differs from k + p + n."""


@dataclass
class Example:
    user_id: str
    history: np.ndarray | None
    query_ids: list[int]
    target_ids: list[int]
    label: PreferenceLabel


def vocab_corpus(users: Sequence[UserHistory], mode: str, p: int, genres: GenreVocabulary) -> list[str]:
    texts = [QUERY_TEXT, *genres]
    for u in users:
        texts.append(build_preference_labels(u).target_text)
        if mode == "text":
            texts.append(render_history_text(truncate_history(u, p)))
    return texts


def build_examples(users: Sequence[UserHistory], mode: str, p: int, vocab: Vocab, emb_cfg: EmbedderConfig, lm_cfg: LmConfig) -> list[Example]:
    """Labels come from each full history; the model input sees the last ``p`` items."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    query = tokenize(QUERY_TEXT, vocab)
    out = []
    for u in users:
        label = build_preference_labels(u)
        short = truncate_history(u, p)
        target = tokenize(label.target_text, vocab) + [EOS]
        if mode == "embedding":
            out.append(Example(u.user_id, embed_history(short, emb_cfg).data, query, target, label))
        else:
            ids = tokenize(render_history_text(short), vocab) + query
            if len(ids) > lm_cfg.max_input:
                raise ValueError(f"user {u.user_id}: text prompt has {len(ids)} tokens, max_input={lm_cfg.max_input}")
            out.append(Example(u.user_id, None, ids, target, label))
    return out


def build_prompts(examples: Sequence[Example], params: nn.Params, uem_cfg: UemConfig, lm_cfg: LmConfig):
    """Assemble ``[P_e; UEM(U); X_e]`` for each example and stack them into a batch."""
    tok_dtype = params["lm.tok"].dtype
    task = task_prompts(params, lm_cfg)
    enc_pos = params["lm.enc_pos"]
    lengths = [0 if ex.history is None else ex.history.shape[0] for ex in examples]
    soft_rows = None
    if any(lengths):
        p_max = max(lengths)
        width = 3 * uem_cfg.s
        U = np.zeros((len(examples), p_max, width), dtype=tok_dtype)
        for i, ex in enumerate(examples):
            if lengths[i]:
                U[i, : lengths[i]] = ex.history
        soft_rows = uem_forward(ad.Tensor(U, dtype=tok_dtype), params, uem_cfg, lengths=lengths)
    empty = ad.Tensor(np.zeros((0, lm_cfg.e)), dtype=tok_dtype)
    assemblies = []
    for i, ex in enumerate(examples):
        soft = soft_rows[i, : lengths[i]] if lengths[i] else empty
        a = assemble_prompt(task, soft, embed_query(ex.query_ids, params, lm_cfg), enc_pos)
        expected = lm_cfg.k + lengths[i] + len(ex.query_ids)
        if a.length != expected:
            raise PromptShapeError(f"user {ex.user_id}: encoder length {a.length} != k+p+n = {expected}")
        assemblies.append(a)
    return batch_prompts(assemblies)


def batch_loss(examples: Sequence[Example], params: nn.Params, uem_cfg: UemConfig, lm_cfg: LmConfig) -> ad.Tensor:
    batch = build_prompts(examples, params, uem_cfg, lm_cfg)
    _, loss = lm_forward(batch, [ex.target_ids for ex in examples], params, lm_cfg)
    return loss


def predict_texts(examples: Sequence[Example], params: nn.Params, uem_cfg: UemConfig, lm_cfg: LmConfig, vocab: Vocab, batch_size: int = 64) -> list[str]:
    texts = []
    with ad.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i : i + batch_size]
            batch = build_prompts(chunk, params, uem_cfg, lm_cfg)
            texts.extend(detokenize(ids, vocab) for ids in greedy_decode(batch, params, lm_cfg))
    return texts


def evaluate_examples(
    examples: Sequence[Example],
    params: nn.Params,
    uem_cfg: UemConfig,
    lm_cfg: LmConfig,
    vocab: Vocab,
    genres: GenreVocabulary,
    label_space: str = "both",
) -> EvalReport:
    texts = predict_texts(examples, params, uem_cfg, lm_cfg, vocab)
    preds = [verbalize(t, genres) for t in texts]
    return weighted_prf(preds, [ex.label for ex in examples], genres, label_space)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: nn.Params) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
        )

    def update(self, params: nn.Params, lr: float) -> None:
        self.step += 1
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        for name in sorted(params):
            t = params[name]
            if t.grad is None:
                continue
            g = t.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if lr:
                t.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_step(examples: Sequence[Example], params: nn.Params, opt: AdamState, lr: float, uem_cfg: UemConfig, lm_cfg: LmConfig, step: int | None = None) -> float:
    """One Adam update on the mean batch loss; LM and UEM tensors update together."""
    for t in params.values():
        t.grad = None
    loss = batch_loss(examples, params, uem_cfg, lm_cfg)
    value = float(loss.data)
    if not np.isfinite(value):
        ids = [ex.user_id for ex in examples]
        raise NumericFailure(f"non-finite loss {value} at step {step} on batch {ids}")
    ad.backward(loss)
    for name, t in params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise NumericFailure(f"non-finite gradient in {name} at step {step}")
    opt.update(params, lr)
    return value


def batch_indices(step: int, batch_size: int, n: int, seed: int) -> np.ndarray:
    """Indices for ``step`` in a stream of per-epoch permutations; stateless, so resumable."""
    if n <= 0:
        raise ValueError("no training examples")
    start = step * batch_size
    out = []
    pos = start
    while len(out) < batch_size:
        epoch, offset = divmod(pos, n)
        perm = np.random.Generator(np.random.PCG64([seed, epoch])).permutation(n)
        take = min(batch_size - len(out), n - offset)
        out.extend(perm[offset : offset + take].tolist())
        pos += take
    return np.asarray(out, dtype=np.int64)
