"""Training loop, evaluation and the seeded random streams behind them."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, RetrievalSplit, VqaSplit
from .encoders import AnswerVocabulary, Vocabulary, build_answer_vocab, build_vocab, pad_batch
from .errors import ConfigError, ContractError, NumericalError
from .layers import SequenceBatch
from .metrics import EvalReport, fold_average, retrieval_metrics, vqa_accuracy
from .optim import Adam, clip_global_norm, lr_at
from .pipeline import ModelConfig, VisualSemanticModel, triplet_loss_hard, triplet_loss_sum, vqa_loss

log = logging.getLogger(__name__)

# offsets of the per-component random streams derived from the run seed
INIT_STREAM, SHUFFLE_STREAM, DROPOUT_STREAM = 0, 1, 2
DEFAULT_LR = {"vqa": 0.0005, "retrieval": 0.00007}


def stream(seed: int, offset: int) -> np.random.Generator:
    return np.random.default_rng((seed, offset))


@dataclass
class TrainConfig:
    lr: float | None = None  # None picks the task default
    decay_factor: float = 10.0
    decay_every: int = 10
    batch: int = 16
    margin: float = 0.2
    clip_norm: float = 2.0
    epochs: int = 30
    # retrieval only: epochs that optimise the summed-negatives hinge first
    warmup_epochs: int = 0
    seed: int = 0
    eval_folds: int = 5

    def learning_rate(self, task: str) -> float:
        return DEFAULT_LR[task] if self.lr is None else self.lr

    def validate(self, task: str) -> TrainConfig:
        if self.lr is not None and not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch < 1 or (task == "retrieval" and self.batch < 2):
            raise ConfigError(f"batch {self.batch} too small for {task} (triplet loss needs negatives)")
        if self.warmup_epochs < 0:
            raise ConfigError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.epochs < 0 or self.decay_every < 1 or self.decay_factor <= 0:
            raise ConfigError("epochs, decay_every and decay_factor must be positive")
        if self.clip_norm <= 0 or self.margin < 0 or self.eval_folds < 1:
            raise ConfigError("clip_norm, margin and eval_folds out of range")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class EncodedSplit:
    """A split as dense arrays: regions (N, R, width), tokens and mask (N, L)."""

    regions: np.ndarray
    tokens: np.ndarray
    token_mask: np.ndarray
    targets: np.ndarray | None = None  # VQA soft targets (N, n_answers)
    match_keys: list | None = None  # retrieval ground-truth keys per sample

    def __len__(self) -> int:
        return len(self.tokens)


def soft_targets(answers: list[str], vocab: AnswerVocabulary) -> np.ndarray:
    """Per-answer agreement score min(count / 3, 1)."""
    out = np.zeros(len(vocab))
    for answer, count in Counter(answers).items():
        i = vocab.lookup(answer)
        if i is not None:
            out[i] = min(count / 3.0, 1.0)
    return out


def encode_split(split, vocab: Vocabulary, max_len: int, answers: AnswerVocabulary | None,
                 dtype) -> EncodedSplit:
    ids = [vocab.encode(t, max_len) for t in split.texts()]
    if any(not s for s in ids):
        raise ContractError("a text encodes to zero tokens")
    tokens, mask = pad_batch(ids, max_len)
    regions = np.stack([split.features[i] for i in split.image_ids]).astype(dtype)
    out = EncodedSplit(regions, tokens, mask)
    if isinstance(split, VqaSplit):
        out.targets = np.stack([soft_targets(a, answers) for a in split.answers]).astype(dtype)
    else:
        out.match_keys = [split.match_key(i) for i in split.image_ids]
    return out


def build_vocabularies(dataset: Dataset, min_count: int = 1, answer_min_count: int = 8):
    vocab = build_vocab(dataset.train.texts(), min_count)
    answers = None
    if dataset.task == "vqa":
        answers = build_answer_vocab(dataset.train.answers, answer_min_count)
        if not len(answers):
            raise ContractError("no answer occurs often enough to enter the answer vocabulary")
    return vocab, answers


def build_model(config: ModelConfig, vocab: Vocabulary, answers: AnswerVocabulary | None,
                seed: int) -> VisualSemanticModel:
    n_answers = len(answers) if answers is not None else 0
    return VisualSemanticModel(config, len(vocab), n_answers, stream(seed, INIT_STREAM))


@dataclass
class TrainResult:
    model: VisualSemanticModel
    vocab: Vocabulary
    answers: AnswerVocabulary | None
    losses: list[float] = field(default_factory=list)  # optimised objective per step
    task_losses: list[float] = field(default_factory=list)  # hard triplet / BCE per step
    epoch_losses: list[float] = field(default_factory=list)  # mean task loss per epoch
    report: EvalReport | None = None

    @property
    def initial_loss(self) -> float:
        """Task loss of the untrained model on the first batch."""
        return self.task_losses[0]

    @property
    def final_loss(self) -> float:
        """Mean task loss over the last epoch."""
        return self.epoch_losses[-1]


def make_batches(order: np.ndarray, batch: int, keys: list | None = None) -> list[np.ndarray]:
    """Split a shuffled order into batches.

    With match ``keys`` (retrieval), no batch holds two samples sharing a key:
    such a pair would be scored as a negative although it matches. Samples
    are taken in order, and one that would repeat a key waits for the next
    batch. Leftovers at the end may form smaller batches.
    """
    if keys is None:
        return [order[i:i + batch] for i in range(0, len(order), batch)]
    pending = list(order)
    batches = []
    while pending:
        chosen, seen, rest = [], set(), []
        for pos, i in enumerate(pending):
            if len(chosen) == batch:
                rest.extend(pending[pos:])
                break
            if keys[i] in seen:
                rest.append(i)
            else:
                seen.add(keys[i])
                chosen.append(i)
        batches.append(np.array(chosen))
        pending = rest
    return batches


def _batch_loss(model: VisualSemanticModel, data: EncodedSplit, idx: np.ndarray,
                margin: float, warmup: bool = False) -> tuple[T.Tensor, float]:
    """The objective to differentiate and the task loss value."""
    img, txt = model.encode(data.regions[idx], data.tokens[idx], data.token_mask[idx])
    if model.config.task == "vqa":
        logits = model.head(*model.fuse(img, txt))
        loss = vqa_loss(logits, data.targets[idx])
        return loss, loss.item()
    sim = model.similarity_matrix(img, txt)
    if not warmup:
        loss = triplet_loss_hard(sim, margin)
        return loss, loss.item()
    with T.no_grad():
        hard = triplet_loss_hard(sim.detach(), margin).item()
    return triplet_loss_sum(sim, margin), hard


def train(model_config: ModelConfig, train_config: TrainConfig, dataset: Dataset,
          loss_csv: str | Path | None = None, evaluate: bool = True,
          precision: int = 32) -> TrainResult:
    """Fit a fresh model on ``dataset.train``; optionally evaluate on ``dataset.test``.

    Per step: zero grads, forward, loss, backward, clip (retrieval only),
    Adam. The optimised loss of every step is written to ``loss_csv`` as
    ``epoch,step,loss,lr`` with full float precision. Retrieval runs may
    optimise the summed-negatives hinge for ``warmup_epochs`` before
    switching to the hardest-negative loss.
    """
    task = model_config.task
    if dataset.task != task:
        raise ConfigError(f"model task {task!r} but dataset task {dataset.task!r}")
    train_config.validate(task)
    dtype = T.precision_dtype(precision)
    with T.default_dtype(dtype):
        vocab, answers = build_vocabularies(dataset)
        model = build_model(model_config, vocab, answers, train_config.seed)
        data = encode_split(dataset.train, vocab, model_config.max_text_len, answers, dtype)
        model.set_dropout_rng(stream(train_config.seed, DROPOUT_STREAM))
        shuffle = stream(train_config.seed, SHUFFLE_STREAM)
        params = model.trainable_parameters()
        optimizer = Adam(params)
        lr0 = train_config.learning_rate(task)
        result = TrainResult(model, vocab, answers)

        writer = None
        handle = None
        if loss_csv is not None:
            handle = open(loss_csv, "w", newline="")
            writer = csv.writer(handle)
            writer.writerow(["epoch", "step", "loss", "lr"])
        try:
            step = 0
            model.train()
            for epoch in range(train_config.epochs):
                lr = lr_at(lr0, epoch, train_config.decay_factor, train_config.decay_every)
                order = shuffle.permutation(len(data))
                warmup = task == "retrieval" and epoch < train_config.warmup_epochs
                epoch_losses = []
                for idx in make_batches(order, train_config.batch, data.match_keys):
                    if task == "retrieval" and len(idx) < 2:
                        continue  # a lone leftover pair has no negatives
                    for p in params:
                        p.grad = None
                    loss, task_value = _batch_loss(model, data, idx, train_config.margin, warmup)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise NumericalError(f"non-finite loss {value} at epoch {epoch} step {step}")
                    loss.backward()
                    grads = [p.grad for p in params]
                    if task == "retrieval":
                        clip_global_norm(grads, train_config.clip_norm)
                    optimizer.step(lr)
                    step += 1
                    result.losses.append(value)
                    result.task_losses.append(task_value)
                    epoch_losses.append(task_value)
                    if writer is not None:
                        writer.writerow([epoch, step, repr(value), repr(lr)])
                result.epoch_losses.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
                log.info("epoch %d  loss %.6f  lr %.3g", epoch, result.epoch_losses[-1], lr)
        finally:
            if handle is not None:
                handle.close()
        model.zero_grad()
        if evaluate:
            result.report = evaluate_model(model, dataset.test, vocab, answers, train_config.eval_folds,
                                           precision)
    return result


def _encode_eval(model, data: EncodedSplit, idx) -> tuple[SequenceBatch, SequenceBatch]:
    return model.encode(data.regions[idx], data.tokens[idx], data.token_mask[idx])


def retrieval_similarity(model: VisualSemanticModel, data: EncodedSplit, idx: np.ndarray,
                         chunk: int = 2048) -> np.ndarray:
    """(n, n) image-by-caption similarities for the samples ``idx``."""
    n = len(idx)
    img, txt = _encode_eval(model, data, idx)
    sim = np.empty((n, n))
    rows = max(1, chunk // n)
    for start in range(0, n, rows):
        stop = min(n, start + rows)
        img_idx = np.repeat(np.arange(start, stop), n)
        txt_idx = np.tile(np.arange(n), stop - start)
        sim[start:stop] = model.pair_similarity(img, txt, img_idx, txt_idx).data.reshape(stop - start, n)
    return sim


def vqa_predictions(model: VisualSemanticModel, data: EncodedSplit, answers: AnswerVocabulary,
                    chunk: int = 256) -> list[str]:
    preds = []
    for start in range(0, len(data), chunk):
        idx = np.arange(start, min(len(data), start + chunk))
        img, txt = _encode_eval(model, data, idx)
        logits = model.head(*model.fuse(img, txt)).data
        preds.extend(answers.answers[i] for i in np.argmax(logits, axis=1))
    return preds


def evaluate_model(model: VisualSemanticModel, split, vocab: Vocabulary,
                   answers: AnswerVocabulary | None, folds: int = 5, precision: int = 32) -> EvalReport:
    """Retrieval: R@K averaged over ``folds`` equal consecutive folds.
    VQA: accuracy overall and per question category on the whole split."""
    dtype = T.precision_dtype(precision)
    model.eval()
    try:
        with T.no_grad(), T.default_dtype(dtype):
            data = encode_split(split, vocab, model.config.max_text_len, answers, dtype)
            if isinstance(split, VqaSplit):
                preds = vqa_predictions(model, data, answers)
                return EvalReport("vqa", vqa_accuracy(preds, split.answers, split.categories))
            if len(data) < folds:
                raise ContractError(f"{len(data)} test pairs cannot form {folds} folds")
            reports = []
            for fold in np.array_split(np.arange(len(data)), folds):
                sim = retrieval_similarity(model, data, fold)
                keys = [data.match_keys[i] for i in fold]
                reports.append(EvalReport("retrieval", retrieval_metrics(sim, keys, keys)))
            return fold_average(reports)
    finally:
        model.train()
