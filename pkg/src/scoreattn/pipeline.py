"""The visual-semantic model: encoders, attention stage, aggregation and heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .aggregation import Aggregator, AggregatorKind, combine_k_retrieval, combine_k_vqa
from .attention import AttentionBlock
from .encoders import BiGRU, Embedding, encode_regions, encode_text, random_embedding_table
from .errors import ConfigError, ContractError, ShapeError
from .layers import LayerNorm, Linear, Module, SequenceBatch
from .tensor import Tensor

TASKS = ("vqa", "retrieval")


@dataclass
class ModelConfig:
    d: int = 512
    heads: int = 8
    k: int = 1
    dropout_keep: float = 0.9
    aggregator: str = "score_attention"
    task: str = "vqa"
    depth: int = 1
    max_question_len: int = 14
    max_caption_len: int = 64
    max_regions: int = 36
    feature_width: int = 2048
    word_dim: int = 300
    share_cross_attention: bool = False
    # features of the other modality that score attention conditions on
    score_condition: str = "post"
    # "matched": slot i with slot i; "all": average over all k*k slot pairs
    k_pairing: str = "matched"

    def validate(self) -> ModelConfig:
        if self.d <= 0 or self.heads <= 0 or self.d % self.heads:
            raise ConfigError(f"d={self.d} must be a positive multiple of heads={self.heads}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ConfigError(f"dropout_keep must be in (0, 1], got {self.dropout_keep}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.score_condition not in ("pre", "post"):
            raise ConfigError(f"score_condition must be 'pre' or 'post', got {self.score_condition!r}")
        if self.k_pairing not in ("matched", "all"):
            raise ConfigError(f"k_pairing must be 'matched' or 'all', got {self.k_pairing!r}")
        for name in ("max_question_len", "max_caption_len", "max_regions", "feature_width", "word_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        self.aggregator = AggregatorKind.parse(self.aggregator).value
        return self

    @property
    def max_text_len(self) -> int:
        return self.max_question_len if self.task == "vqa" else self.max_caption_len

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data).validate()


class PositionwiseFeedForward(Module):
    """layer_norm(y + dropout(W2 relu(W1 y))) applied to each vector independently."""

    def __init__(self, d: int, hidden: int, dropout_keep: float, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)
        self.norm = LayerNorm(d)
        self.dropout_keep = dropout_keep
        self.dropout_rng: np.random.Generator | None = None

    def __call__(self, y: Tensor) -> Tensor:
        h = self.fc2(T.relu(self.fc1(y)))
        h = T.dropout(h, self.dropout_keep, self.dropout_rng, self.training)
        return self.norm(y + h)


class VqaHead(Module):
    def __init__(self, d: int, n_answers: int, dropout_keep: float, rng: np.random.Generator):
        self.ff_img = PositionwiseFeedForward(d, d, dropout_keep, rng)
        self.ff_txt = PositionwiseFeedForward(d, d, dropout_keep, rng)
        self.classifier = Linear(2 * d, n_answers, rng)

    def __call__(self, y_img: Tensor, y_txt: Tensor) -> Tensor:
        return vqa_logits(self, y_img, y_txt)


def vqa_logits(head: VqaHead, y_img: Tensor, y_txt: Tensor) -> Tensor:
    """Answer logits (B, n_answers) from the (B, k, d) compressed vectors."""
    img = head.ff_img(combine_k_vqa(y_img))
    txt = head.ff_txt(combine_k_vqa(y_txt))
    return head.classifier(T.concat([img, txt], axis=-1))


def vqa_loss(logits: Tensor, targets) -> Tensor:
    """Multi-label binary cross-entropy averaged over batch and classes."""
    return T.tmean(T.bce_with_logits(logits, targets))


def similarity(y_img: Tensor, y_txt: Tensor, all_pairs: bool = False) -> Tensor:
    return combine_k_retrieval(y_img, y_txt, all_pairs)


def triplet_loss_hard(sim: Tensor, margin: float) -> Tensor:
    """Hinge triplet loss on the hardest in-batch negatives.

    ``sim[i, j]`` scores image i against caption j; the diagonal holds the
    positive pairs. Averaged over anchors.
    """
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {sim.shape}")
    b = sim.shape[0]
    if b < 2:
        raise ContractError("triplet loss needs at least two pairs for negatives")
    idx = np.arange(b)
    positive = sim[idx, idx]
    negatives = ~np.eye(b, dtype=bool)
    hardest_caption = T.tmax(sim, axis=1, mask=negatives)
    hardest_image = T.tmax(sim, axis=0, mask=negatives)
    cost_caption = T.relu(margin - positive + hardest_caption)
    cost_image = T.relu(margin - positive + hardest_image)
    return T.tmean(cost_caption + cost_image)


def triplet_loss_sum(sim: Tensor, margin: float) -> Tensor:
    """Hinge triplet loss summed over every in-batch negative, averaged over anchors.

    Not the training objective proper: an optional warm-up that avoids the
    collapsed start where every pair scores alike and the hardest negative is
    arbitrary.
    """
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {sim.shape}")
    b = sim.shape[0]
    if b < 2:
        raise ContractError("triplet loss needs at least two pairs for negatives")
    idx = np.arange(b)
    positive = sim[idx, idx]
    off = (~np.eye(b, dtype=bool)).astype(sim.dtype)
    cost_caption = T.relu(margin - positive.reshape(b, 1) + sim) * off
    cost_image = T.relu(margin - positive.reshape(1, b) + sim) * off
    return T.tsum(cost_caption + cost_image) / float(b)


class VisualSemanticModel(Module):
    def __init__(self, config: ModelConfig, vocab_size: int, n_answers: int,
                 rng: np.random.Generator, embedding: Embedding | None = None):
        config.validate()
        self.config = config
        d = config.d
        self.region_proj = Linear(config.feature_width, d, rng)
        if embedding is None:
            embedding = Embedding(random_embedding_table(vocab_size, config.word_dim, rng))
        if embedding.dim != config.word_dim:
            raise ConfigError(f"embedding width {embedding.dim} != word_dim {config.word_dim}")
        self.embedding = embedding
        self.text_encoder = BiGRU(config.word_dim, d, rng)
        block = lambda: AttentionBlock(d, config.heads, config.dropout_keep, rng)  # noqa: E731
        self.cross_img = [block() for _ in range(config.depth)]
        self.cross_txt = self.cross_img if config.share_cross_attention else [block() for _ in range(config.depth)]
        self.self_img = [block() for _ in range(config.depth)]
        self.self_txt = [block() for _ in range(config.depth)]
        agg = config.aggregator
        self.agg_img = Aggregator(agg, d, config.heads, config.k, config.max_regions, rng)
        self.agg_txt = Aggregator(agg, d, config.heads, config.k, config.max_text_len, rng)
        self.head = VqaHead(d, n_answers, config.dropout_keep, rng) if config.task == "vqa" else None

    def named_parameters(self, prefix: str = ""):
        seen: set[int] = set()
        for name, p in super().named_parameters(prefix):
            if id(p) not in seen:  # shared cross-attention appears once
                seen.add(id(p))
                yield name, p

    def set_dropout_rng(self, rng: np.random.Generator | None) -> None:
        for m in self.modules():
            if hasattr(m, "dropout_rng"):
                m.dropout_rng = rng

    def encode(self, regions, tokens: np.ndarray, token_mask: np.ndarray | None = None,
               region_mask: np.ndarray | None = None) -> tuple[SequenceBatch, SequenceBatch]:
        img = encode_regions(self.region_proj, regions, region_mask)
        txt = encode_text(self.text_encoder, self.embedding, tokens, token_mask)
        return self.agg_img.prepare(img), self.agg_txt.prepare(txt)

    def fuse(self, img: SequenceBatch, txt: SequenceBatch,
             img_index=None, txt_index=None) -> tuple[Tensor, Tensor]:
        """Attention stage then per-modality aggregation; returns two (P, k, d).

        Without indices, ``img`` and ``txt`` are aligned pairs. With indices,
        pair p joins image ``img_index[p]`` with caption ``txt_index[p]``.
        """
        x, z = img, txt
        for layer in range(self.config.depth):
            x_cross = self.cross_img[layer](x, z, img_index, txt_index)
            z_cross = self.cross_txt[layer](z, x, txt_index, img_index)
            if layer == 0:
                x0 = img if img_index is None else img.take(img_index)
                z0 = txt if txt_index is None else txt.take(txt_index)
                img_index = txt_index = None
            x = self.self_img[layer](x_cross)
            z = self.self_txt[layer](z_cross)
        post = self.config.score_condition == "post"
        y_img = self.agg_img(x, z if post else z0)
        y_txt = self.agg_txt(z, x if post else x0)
        return y_img, y_txt

    def __call__(self, regions, tokens, token_mask=None, region_mask=None):
        return self.fuse(*self.encode(regions, tokens, token_mask, region_mask))

    def logits(self, regions, tokens, token_mask=None) -> Tensor:
        if self.head is None:
            raise ContractError("this model has no VQA head")
        return self.head(*self(regions, tokens, token_mask))

    def pair_similarity(self, img: SequenceBatch, txt: SequenceBatch,
                        img_index=None, txt_index=None) -> Tensor:
        y_img, y_txt = self.fuse(img, txt, img_index, txt_index)
        return similarity(y_img, y_txt, self.config.k_pairing == "all")

    def similarity_matrix(self, img: SequenceBatch, txt: SequenceBatch) -> Tensor:
        """All image-caption pairs: (B_img, B_txt), row = image."""
        n_img, n_txt = img.batch, txt.batch
        img_idx = np.repeat(np.arange(n_img), n_txt)
        txt_idx = np.tile(np.arange(n_txt), n_img)
        return self.pair_similarity(img, txt, img_idx, txt_idx).reshape(n_img, n_txt)


def forward(config: ModelConfig, model: VisualSemanticModel, image: SequenceBatch,
            text: SequenceBatch) -> tuple[Tensor, Tensor]:
    if model.config is not config and model.config != config:
        raise ConfigError("model was built from a different config")
    return model.fuse(model.agg_img.prepare(image), model.agg_txt.prepare(text))
