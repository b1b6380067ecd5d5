"""Deterministic toy text encoder.

Stands in for a large frozen language encoder behind the same interface:
any callable producing an (L, E) float tensor can be registered. Words are
hashed with FNV-1a (fixed, no per-process randomization) into a seeded
embedding table, so embeddings are identical across runs and platforms.
"""

from __future__ import annotations

import re

import numpy as np
import torch
from torch import Tensor

EMBED_DIM = 64
VOCAB_BUCKETS = 4096
MAX_TEXT_TOKENS = 32
TABLE_SEED = 0x5EED

_WORD_RE = re.compile(r"[a-z0-9]+")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(word: str) -> int:
    h = _FNV_OFFSET
    for byte in word.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def _embedding_table() -> Tensor:
    rng = np.random.Generator(np.random.PCG64(TABLE_SEED))
    table = rng.standard_normal((VOCAB_BUCKETS, EMBED_DIM), dtype=np.float32)
    return torch.from_numpy(table)


_TABLE = _embedding_table()


def encode_text(text: str) -> Tensor:
    """(L, E) embedding rows, L <= MAX_TEXT_TOKENS. Empty text gives the
    canonical single zero row (the unconditional embedding)."""
    words = _WORD_RE.findall(text.lower())[:MAX_TEXT_TOKENS]
    if not words:
        return null_embedding()
    idx = [fnv1a64(w) % VOCAB_BUCKETS for w in words]
    return _TABLE[idx].to(torch.get_default_dtype())


def null_embedding() -> Tensor:
    return torch.zeros(1, EMBED_DIM, dtype=torch.get_default_dtype())
