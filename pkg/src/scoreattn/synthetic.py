"""Needle-in-haystack synthetic data for desk-scale retrieval and VQA runs.

Every image is ``R`` region vectors. Exactly one of them, the needle, carries
a class signature plus a salience marker. The other regions are background:
gaussian noise, optionally plus ``clutter``-scaled random mixtures of the
class signatures, and optionally (with probability ``distractors``) a decoy:
the full-strength signature of a random class without the marker. The noise is added to every region, the needle included.
Every text is ``L`` tokens: one informative word and ``L - 1`` filler words
drawn from a fixed pool. Uniform pooling dilutes the needle by ``1/R`` and
sums ``R`` noise vectors into it, while a learned weighting can isolate it.

* retrieval: the caption's informative word names the image's class, and an
  image matches every caption of the same class.
* vqa: the question's informative word names the question type (yes/no,
  number or other). The answer is the image's class, drawn from the classes
  of that type, so neither modality alone determines it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset, RetrievalSplit, VqaSplit
from .errors import ConfigError

VQA_ANSWERS = {
    "yes/no": ("yes", "no"),
    "number": ("1", "2", "3"),
    "other": ("red", "green", "blue"),
}
VQA_TYPE_WORDS = {"yes/no": "is", "number": "how", "other": "what"}
DATA_STREAM = 3


@dataclass
class SyntheticSpec:
    n_train: int = 2000
    n_test: int = 500
    R: int = 8
    L: int = 8
    feature_width: int = 64
    vocab_size: int = 100
    n_classes: int = 20
    signal: float = 4.0
    marker: float = 4.0
    clutter: float = 0.0  # clutter amplitude relative to ``signal``
    distractors: float = 0.0  # share of background regions holding a decoy signature
    noise: float = 0.7
    annotators: int = 10
    seed: int = 0

    @property
    def n_samples(self) -> int:
        return self.n_train + self.n_test

    def validate(self, task: str) -> SyntheticSpec:
        n_classes = self.classes(task)
        if self.R < 1 or self.L < 1 or self.n_train < 1 or self.n_test < 1:
            raise ConfigError("synthetic sizes must be positive")
        if self.feature_width < n_classes + 1:
            raise ConfigError(f"feature_width {self.feature_width} cannot hold {n_classes} "
                              "orthogonal signatures plus the marker")
        if self.n_fillers(task) < 1:
            raise ConfigError(f"vocab_size {self.vocab_size} leaves no filler words")
        if self.annotators < 1:
            raise ConfigError("need at least one annotator answer")
        if not 0.0 <= self.distractors <= 1.0:
            raise ConfigError(f"distractors must lie in [0, 1], got {self.distractors}")
        return self

    def classes(self, task: str) -> int:
        if task == "vqa":
            return sum(len(v) for v in VQA_ANSWERS.values())
        if task == "retrieval":
            return self.n_classes
        raise ConfigError(f"unknown task {task!r}")

    def n_fillers(self, task: str) -> int:
        informative = self.n_classes if task == "retrieval" else len(VQA_TYPE_WORDS)
        return self.vocab_size - informative

    def to_dict(self) -> dict:
        return asdict(self)


def _basis(rng: np.random.Generator, width: int, n: int) -> np.ndarray:
    """``n`` orthonormal rows in R^width."""
    q, _ = np.linalg.qr(rng.normal(size=(width, n)))
    return q.T.copy()


def _images(rng, spec: SyntheticSpec, classes: np.ndarray, signatures, marker_dir):
    n = len(classes)
    n_classes = len(signatures)
    mix = rng.normal(size=(n, spec.R, n_classes))
    mix /= np.linalg.norm(mix, axis=-1, keepdims=True)
    feats = (spec.clutter * spec.signal) * (mix @ signatures)
    if spec.distractors > 0:
        # decoys: full-strength signatures of random classes, without the marker
        decoy = rng.random(size=(n, spec.R)) < spec.distractors
        decoy_class = rng.integers(0, n_classes, size=(n, spec.R))
        feats += decoy[..., None] * (spec.signal * signatures[decoy_class])
    needle = rng.integers(0, spec.R, size=n)
    rows = np.arange(n)
    feats[rows, needle] = spec.signal * signatures[classes] + spec.marker * marker_dir
    feats += rng.normal(0.0, spec.noise, size=feats.shape)
    return feats.astype(np.float32), needle


def _texts(rng, spec: SyntheticSpec, words: list[str], fillers: list[str]) -> list[str]:
    out = []
    for w in words:
        toks = list(rng.choice(fillers, size=spec.L - 1)) if spec.L > 1 else []
        toks.insert(int(rng.integers(0, spec.L)), w)
        out.append(" ".join(toks))
    return out


def _annotations(rng, spec: SyntheticSpec, answer: str, pool: tuple[str, ...]) -> list[str]:
    # a strict majority names the true answer; the rest are spread over the type
    n_true = spec.annotators // 2 + 1
    rest = [str(a) for a in rng.choice(pool, size=spec.annotators - n_true)]
    answers = [answer] * n_true + rest
    return [str(a) for a in rng.permutation(answers)]


def generate_synthetic(task: str, spec: SyntheticSpec | None = None) -> Dataset:
    """Build train and test splits; the same spec always gives identical data."""
    spec = (spec or SyntheticSpec()).validate(task)
    rng = np.random.default_rng((spec.seed, DATA_STREAM))
    n_classes = spec.classes(task)
    basis = _basis(rng, spec.feature_width, n_classes + 1)
    signatures, marker_dir = basis[:n_classes], basis[n_classes]
    fillers = [f"w{i}" for i in range(spec.n_fillers(task))]

    splits = []
    offset = 0
    for n in (spec.n_train, spec.n_test):
        if task == "retrieval":
            classes = rng.integers(0, n_classes, size=n)
            feats, _ = _images(rng, spec, classes, signatures, marker_dir)
            ids = [f"img{offset + i}" for i in range(n)]
            captions = _texts(rng, spec, [f"c{c}" for c in classes], fillers)
            labels = {i: f"c{c}" for i, c in zip(ids, classes)}
            splits.append(RetrievalSplit(dict(zip(ids, feats)), ids, captions, labels))
        else:
            types = list(VQA_ANSWERS)
            type_idx = rng.integers(0, len(types), size=n)
            answers, categories, classes = [], [], []
            flat = [a for t in types for a in VQA_ANSWERS[t]]
            for t in type_idx:
                pool = VQA_ANSWERS[types[t]]
                answer = pool[int(rng.integers(0, len(pool)))]
                answers.append(answer)
                categories.append(types[t])
                classes.append(flat.index(answer))
            feats, _ = _images(rng, spec, np.array(classes), signatures, marker_dir)
            ids = [f"img{offset + i}" for i in range(n)]
            questions = _texts(rng, spec, [VQA_TYPE_WORDS[c] for c in categories], fillers)
            annotated = [_annotations(rng, spec, a, VQA_ANSWERS[c]) for a, c in zip(answers, categories)]
            splits.append(VqaSplit(dict(zip(ids, feats)), ids, questions, annotated, categories))
        offset += n
    return Dataset(task, splits[0], splits[1])


def signature_oracle(task: str, split, spec: SyntheticSpec) -> list[int]:
    """Brute-force class recovery: the region with the strongest marker, then
    the signature with the largest dot product. Recomputes the basis from the
    seed, so it only works on freshly generated data."""
    rng = np.random.default_rng((spec.seed, DATA_STREAM))
    n_classes = spec.classes(task)
    basis = _basis(rng, spec.feature_width, n_classes + 1)
    signatures, marker_dir = basis[:n_classes], basis[n_classes]
    out = []
    for image_id in split.image_ids:
        regions = split.features[image_id].astype(np.float64)
        needle = regions[int(np.argmax(regions @ marker_dir))]
        out.append(int(np.argmax(signatures @ needle)))
    return out
