"""Checkpoint files: a JSON header followed by every parameter tensor.

Layout::

    b"SACK"  u8 format version
    u32 header length, header (utf-8 JSON)
    one tensor record per parameter, in registration order

The header carries the model config, vocabularies, precision and a list of
parameter names and shapes, which is checked on load.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

from . import tensor as T
from .encoders import AnswerVocabulary, Vocabulary
from .errors import ConfigError
from .pipeline import ModelConfig, VisualSemanticModel
from .training import build_model

MAGIC = b"SACK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: VisualSemanticModel, vocab: Vocabulary,
                    answers: AnswerVocabulary | None, precision: int = 32,
                    extra: dict | None = None) -> None:
    named = list(model.named_parameters())
    header = {
        "model": model.config.to_dict(),
        "vocab": vocab.tokens,
        "answers": answers.answers if answers is not None else None,
        "precision": precision,
        "parameters": [[name, list(p.shape)] for name, p in named],
        "extra": extra or {},
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<B", FORMAT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, p in named:
            T.write_array(f, p.data)


def load_checkpoint(path) -> tuple[VisualSemanticModel, Vocabulary, AnswerVocabulary | None, dict]:
    """Rebuild the model and vocabularies; returns (model, vocab, answers, header)."""
    path = Path(path)
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc.strerror}") from None
    with f:
        head = f.read(5)
        if len(head) != 5 or head[:4] != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        if head[4] != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {head[4]}")
        raw = f.read(4)
        if len(raw) != 4:
            raise CheckpointError(f"{path}: truncated header")
        (n,) = struct.unpack("<I", raw)
        blob = f.read(n)
        if len(blob) != n:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(blob.decode("utf-8"))
            config = ModelConfig.from_dict(header["model"])
            vocab = Vocabulary(header["vocab"])
            answers = AnswerVocabulary(header["answers"]) if header["answers"] is not None else None
            precision = int(header["precision"])
        except (KeyError, TypeError, UnicodeDecodeError, json.JSONDecodeError, ConfigError) as exc:
            raise CheckpointError(f"{path}: bad header ({exc})") from None
        with T.default_dtype(T.precision_dtype(precision)):
            model = build_model(config, vocab, answers, seed=0)
        named = list(model.named_parameters())
        expected = [[name, list(p.shape)] for name, p in named]
        if header.get("parameters") != expected:
            raise CheckpointError(f"{path}: parameter layout does not match its config")
        for _, p in named:
            try:
                arr = T.read_array(f, p.dtype)
            except ValueError as exc:
                raise CheckpointError(f"{path}: {exc}") from None
            if arr.shape != p.shape:
                raise CheckpointError(f"{path}: tensor shape {arr.shape} != {p.shape}")
            p.data = arr
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after the last tensor")
    return model, vocab, answers, header
