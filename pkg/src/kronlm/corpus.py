"""Byte-level corpus ingestion: raw UTF-8 text files tokenized over the
256-symbol byte vocabulary, with a deterministic head/tail train/validation
split."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeError

BYTE_VOCAB = 256


@dataclass
class Corpus:
    tokens: np.ndarray  # full stream, int64 ids in [0, 256)
    train: np.ndarray
    val: np.ndarray
    vocab_size: int = BYTE_VOCAB


def load_corpus(paths, val_ratio: float = 0.1) -> Corpus:
    """Concatenate files as raw bytes; the stream tail becomes validation.

    Identical files and ratio always produce the identical split.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    if not 0.0 < val_ratio < 1.0:
        raise ValueError(f"val_ratio must be in (0, 1), got {val_ratio}")
    blobs = [Path(p).read_bytes() for p in paths]
    data = b"".join(blobs)
    if len(data) < 4:
        raise ShapeError(f"corpus too small: {len(data)} bytes")
    tokens = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    split = len(tokens) - max(1, int(len(tokens) * val_ratio))
    return Corpus(tokens=tokens, train=tokens[:split], val=tokens[split:])
