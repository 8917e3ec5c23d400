"""Personalized soft prompts: compress a user's textual history into
embeddings, prepend them with task soft prompts to an encoder-decoder LM,
and co-train both parts."""

from .autodiff import Tensor, backward, grad_check, make_rng, no_grad
from .config import RunConfig
from .embedder import EmbedderConfig, embed_history, embed_history_item, embed_text
from .lm import LmConfig, Vocab, assemble_prompt, greedy_decode, lm_forward
from .uem import UemConfig, uem_forward, uem_init, uem_param_count

__version__ = "0.1.0"
