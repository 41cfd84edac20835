"""Dataset containers and the on-disk formats for region features and text.

Region-feature file: a sequence of records, each
``u32 id_length, id (utf-8), u32 R, u32 width, R*width little-endian f32``.

Text files are JSON lines: ``{"image_id", "caption"}`` for retrieval and
``{"image_id", "question", "answers": [10 strings]}`` for VQA (an optional
``"answer_type"`` overrides the inferred question category).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoders import tokenize
from .metrics import VQA_CATEGORIES, answer_category
from .encoders import modal_answer


class DataFormatError(ValueError):
    pass


def write_region_features(path, features: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        for image_id, regions in features.items():
            regions = np.asarray(regions, dtype="<f4")
            if regions.ndim != 2:
                raise DataFormatError(f"regions of {image_id!r} must be (R, width)")
            raw_id = image_id.encode("utf-8")
            f.write(struct.pack("<I", len(raw_id)))
            f.write(raw_id)
            f.write(struct.pack("<II", *regions.shape))
            f.write(regions.tobytes())


def read_region_features(path) -> dict[str, np.ndarray]:
    features: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise DataFormatError(f"{path}: truncated record header")
            (n,) = struct.unpack("<I", head)
            raw_id = f.read(n)
            dims = f.read(8)
            if len(raw_id) != n or len(dims) != 8:
                raise DataFormatError(f"{path}: truncated record")
            r, width = struct.unpack("<II", dims)
            raw = f.read(4 * r * width)
            if len(raw) != 4 * r * width:
                raise DataFormatError(f"{path}: truncated region data for {raw_id!r}")
            features[raw_id.decode("utf-8")] = np.frombuffer(raw, dtype="<f4").reshape(r, width).astype(np.float32)
    return features


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc.msg}") from None
    return rows


@dataclass
class RetrievalSplit:
    """Image features plus (image_id, caption) pairs.

    ``labels`` optionally maps image ids to a match key; captions then match
    every image sharing their own image's key rather than only that image.
    """

    features: dict[str, np.ndarray]
    image_ids: list[str]
    captions: list[str]
    labels: dict[str, str] | None = None

    def __len__(self) -> int:
        return len(self.captions)

    def match_key(self, image_id: str) -> str:
        return self.labels[image_id] if self.labels is not None else image_id

    def texts(self) -> list[str]:
        return list(self.captions)

    def to_rows(self) -> list[dict]:
        return [{"image_id": i, "caption": c} for i, c in zip(self.image_ids, self.captions)]


@dataclass
class VqaSplit:
    features: dict[str, np.ndarray]
    image_ids: list[str]
    questions: list[str]
    answers: list[list[str]]
    categories: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.categories:
            self.categories = [answer_category(modal_answer(a)) for a in self.answers]
        for c in self.categories:
            if c not in VQA_CATEGORIES:
                raise DataFormatError(f"unknown answer type {c!r}")

    def __len__(self) -> int:
        return len(self.questions)

    def texts(self) -> list[str]:
        return list(self.questions)

    def to_rows(self) -> list[dict]:
        return [{"image_id": i, "question": q, "answers": a, "answer_type": c}
                for i, q, a, c in zip(self.image_ids, self.questions, self.answers, self.categories)]


@dataclass
class Dataset:
    task: str
    train: RetrievalSplit | VqaSplit
    test: RetrievalSplit | VqaSplit

    def vocabulary_corpus(self) -> list[list[str]]:
        return [tokenize(t) for t in self.train.texts()]


def load_split(task: str, regions_path, text_path, labels: dict[str, str] | None = None):
    features = read_region_features(regions_path)
    rows = read_jsonl(text_path)
    missing = {r["image_id"] for r in rows} - set(features)
    if missing:
        raise DataFormatError(f"{text_path}: {len(missing)} image ids have no region features")
    if task == "retrieval":
        try:
            return RetrievalSplit(features, [r["image_id"] for r in rows],
                                  [r["caption"] for r in rows], labels)
        except KeyError as exc:
            raise DataFormatError(f"{text_path}: missing field {exc}") from None
    try:
        return VqaSplit(features, [r["image_id"] for r in rows], [r["question"] for r in rows],
                        [list(r["answers"]) for r in rows],
                        [r.get("answer_type") or answer_category(modal_answer(r["answers"])) for r in rows])
    except KeyError as exc:
        raise DataFormatError(f"{text_path}: missing field {exc}") from None


def save_split(split, directory, name: str) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    regions_path = directory / f"{name}_regions.bin"
    text_path = directory / f"{name}.jsonl"
    write_region_features(regions_path, split.features)
    write_jsonl(text_path, split.to_rows())
    if isinstance(split, RetrievalSplit) and split.labels is not None:
        with open(directory / f"{name}_labels.json", "w", encoding="utf-8") as f:
            json.dump(split.labels, f)
    return regions_path, text_path


def stack_regions(split, indices: Sequence[int], dtype) -> np.ndarray:
    return np.stack([split.features[split.image_ids[i]] for i in indices]).astype(dtype, copy=False)
