"""Text and region encoders, vocabularies and pretrained embedding loading."""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateInputError, ShapeError
from .layers import Linear, Module, SequenceBatch, uniform_init
from .tensor import Parameter, Tensor

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


class ParseError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass
class Vocabulary:
    tokens: list[str]
    min_count: int = 1
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ConfigError("vocabulary must start with the pad and unk tokens")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def lookup(self, token: str) -> int:
        return self.index.get(token, UNK)

    def token(self, i: int) -> str:
        return self.tokens[i]

    def encode(self, text: str | Sequence[str], max_len: int | None = None) -> list[int]:
        words = tokenize(text) if isinstance(text, str) else list(text)
        ids = [self.lookup(w) for w in words]
        return ids[:max_len] if max_len is not None else ids


def build_vocab(corpus: Iterable[str | Sequence[str]], min_count: int) -> Vocabulary:
    """Index every token seen at least ``min_count`` times.

    Ordering is by descending count, then alphabetically, so repeated builds
    of the same corpus agree exactly.
    """
    counts: Counter[str] = Counter()
    for item in corpus:
        counts.update(tokenize(item) if isinstance(item, str) else item)
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in (PAD_TOKEN, UNK_TOKEN)),
                  key=lambda t: (-counts[t], t))
    return Vocabulary([PAD_TOKEN, UNK_TOKEN, *kept], min_count)


@dataclass
class AnswerVocabulary:
    answers: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {a: i for i, a in enumerate(self.answers)}

    def __len__(self) -> int:
        return len(self.answers)

    def lookup(self, answer: str) -> int | None:
        return self.index.get(answer)


def modal_answer(answers: Sequence[str]) -> str:
    """Most frequent annotated answer; ties go to the lexicographically smallest."""
    counts = Counter(answers)
    best = max(counts.values())
    return min(a for a, c in counts.items() if c == best)


def build_answer_vocab(samples_answers: Iterable[Sequence[str]], min_count: int = 8) -> AnswerVocabulary:
    """Answers that are the modal answer of more than ``min_count`` samples."""
    counts = Counter(modal_answer(a) for a in samples_answers)
    kept = sorted((a for a, c in counts.items() if c > min_count), key=lambda a: (-counts[a], a))
    return AnswerVocabulary(kept)


def pad_batch(sequences: Sequence[Sequence[int]], max_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Pad token id lists to a common length; returns (ids, mask)."""
    if max_len is None:
        max_len = max((len(s) for s in sequences), default=0)
    ids = np.full((len(sequences), max_len), PAD, dtype=np.int64)
    for i, seq in enumerate(sequences):
        seq = list(seq)[:max_len]
        ids[i, :len(seq)] = seq
    mask = np.zeros_like(ids, dtype=bool)
    for i, seq in enumerate(sequences):
        mask[i, :min(len(seq), max_len)] = True
    return ids, mask


# --------------------------------------------------------------------------
# GRU


def _sig(x):
    return T._sigmoid(x)


def gru_sequence(gx: Tensor, w_hh: Tensor, b_hh: Tensor, mask: np.ndarray,
                 reverse: bool = False) -> Tensor:
    """Run a GRU over precomputed input projections ``gx`` (B, L, 3d).

    Gate blocks are ordered reset, update, candidate. Positions where ``mask``
    is false leave the hidden state untouched, so a reversed pass starts at the
    last valid token of each sequence. Returns hidden states (B, L, d).
    """
    b, L, three_d = gx.shape
    d = three_d // 3
    if w_hh.shape != (d, three_d):
        raise ShapeError(f"recurrent weight {w_hh.shape} does not fit hidden size {d}")
    dtype = gx.dtype
    steps = range(L - 1, -1, -1) if reverse else range(L)
    m_all = mask.astype(dtype)[..., None]
    H = np.zeros((b, L, d), dtype=dtype)
    cache = []
    h = np.zeros((b, d), dtype=dtype)
    for t in steps:
        gh = h @ w_hh.data + b_hh.data
        x_t = gx.data[:, t]
        r = _sig(x_t[:, :d] + gh[:, :d])
        z = _sig(x_t[:, d:2 * d] + gh[:, d:2 * d])
        n = np.tanh(x_t[:, 2 * d:] + r * gh[:, 2 * d:])
        m = m_all[:, t]
        h_new = m * ((1.0 - z) * n + z * h) + (1.0 - m) * h
        cache.append((t, h, r, z, n, gh, m))
        h = h_new
        H[:, t] = h

    def backward(g):
        dgx = np.zeros_like(gx.data)
        dgh_all = np.empty((len(cache), b, three_d), dtype=dtype)
        h_all = np.empty((len(cache), b, d), dtype=dtype)
        carry = np.zeros((b, d), dtype=dtype)
        for i, (t, h_prev, r, z, n, gh, m) in enumerate(reversed(cache)):
            gt = g[:, t] + carry
            g_new = gt * m
            dz = g_new * (h_prev - n) * z * (1.0 - z)
            dn = g_new * (1.0 - z) * (1.0 - n * n)
            dr = dn * gh[:, 2 * d:] * r * (1.0 - r)
            dgh = dgh_all[i]
            dgh[:, :d] = dr
            dgh[:, d:2 * d] = dz
            dgh[:, 2 * d:] = dn * r
            dgx[:, t, :2 * d] = dgh[:, :2 * d]
            dgx[:, t, 2 * d:] = dn
            h_all[i] = h_prev
            carry = gt * (1.0 - m) + g_new * z + dgh @ w_hh.data.T
        # weight gradients as one product over all steps
        dgh_flat = dgh_all.reshape(-1, three_d)
        dw = h_all.reshape(-1, d).T @ dgh_flat
        db = T.fast_sum(dgh_flat, axis=0)
        return dgx, dw, db

    return T._make(H, (gx, w_hh, b_hh), backward, "gru_sequence")


class GRU(Module):
    """Single-direction GRU; input weights (in, 3d), recurrent weights (d, 3d)."""

    def __init__(self, n_in: int, d: int, rng: np.random.Generator):
        self.d = d
        self.w_ih = Parameter(uniform_init(rng, (n_in, 3 * d), d))
        self.b_ih = Parameter(uniform_init(rng, (3 * d,), d))
        self.w_hh = Parameter(uniform_init(rng, (d, 3 * d), d))
        self.b_hh = Parameter(uniform_init(rng, (3 * d,), d))

    def __call__(self, x: Tensor, mask: np.ndarray, reverse: bool = False) -> Tensor:
        gx = T.linear(x, self.w_ih, self.b_ih)
        return gru_sequence(gx, self.w_hh, self.b_hh, mask, reverse)


class BiGRU(Module):
    def __init__(self, n_in: int, d: int, rng: np.random.Generator):
        self.forward = GRU(n_in, d, rng)
        self.backward = GRU(n_in, d, rng)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        """Per position, the mean of forward and backward hidden states (padding zeroed)."""
        h = self.forward(x, mask) + self.backward(x, mask, reverse=True)
        return T.mul(h, (0.5 * mask[..., None]).astype(h.dtype))


class Embedding(Module):
    def __init__(self, table: np.ndarray, trainable: bool = True):
        self.table = Parameter(table, requires_grad=trainable)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def __call__(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        flat = T.take(self.table, ids.reshape(-1), axis=0)
        return flat.reshape(*ids.shape, self.dim)


def random_embedding_table(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-0.1, 0.1, size=(n, dim)).astype(T.get_default_dtype())


def encode_text(gru: BiGRU, emb: Embedding, tokens: np.ndarray, mask: np.ndarray | None = None) -> SequenceBatch:
    tokens = np.asarray(tokens)
    if mask is None:
        mask = tokens != PAD
    mask = np.asarray(mask, dtype=bool)
    if tokens.shape[1] == 0 or not mask.any(axis=1).all():
        raise DegenerateInputError("cannot encode an empty token sequence")
    return SequenceBatch(gru(emb(tokens), mask), mask)


def encode_regions(proj: Linear, regions, mask: np.ndarray | None = None) -> SequenceBatch:
    regions = T.as_tensor(regions)
    if regions.ndim != 3:
        raise ShapeError(f"region features must be (B, R, width), got {regions.shape}")
    if regions.shape[-1] != proj.weight.shape[0]:
        raise ShapeError(f"region width {regions.shape[-1]} does not match projection "
                         f"{proj.weight.shape}")
    if mask is None:
        mask = np.ones(regions.shape[:2], dtype=bool)
    return SequenceBatch(proj(regions), mask)


def load_pretrained_embeddings(path, vocab: Vocabulary, dim: int, finetune: bool,
                               rng: np.random.Generator) -> Embedding:
    """Read a word-vector text file (token followed by ``dim`` decimals per line).

    Tokens missing from the file keep a uniform(-0.1, 0.1) initialisation.
    """
    table = random_embedding_table(len(vocab), dim, rng)
    with open(Path(path), encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.rstrip("\n").split(" ")
            if not line.strip():
                continue
            if len(parts) < 2:
                raise ParseError(f"{path}:{lineno}: expected a token followed by {dim} values")
            if len(parts) - 1 != dim:
                raise ConfigError(f"{path}:{lineno}: vector has {len(parts) - 1} values, expected {dim}")
            try:
                values = np.array([float(v) for v in parts[1:]])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric vector component") from None
            if parts[0] in vocab:
                table[vocab.lookup(parts[0])] = values
    return Embedding(table, trainable=finetune)
