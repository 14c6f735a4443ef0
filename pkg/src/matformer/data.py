"""Byte-level corpora with a deterministic train/validation split."""

from __future__ import annotations

import logging
import sysconfig
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from matformer.config import BYTE_VOCAB
from matformer.errors import LengthError

logger = logging.getLogger(__name__)

BOS = 256
EOS = 257
PAD = 258


def encode(text: str | bytes) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def decode_bytes(tokens) -> bytes:
    """Drop special tokens and return the raw bytes."""
    return bytes(int(t) for t in tokens if 0 <= int(t) < 256)


@dataclass
class Corpus:
    """A token stream split into one contiguous validation block and training data around it.

    Attributes:
        tokens: Byte tokens, ``int64``.
        val_start: First validation position.
        val_stop: One past the last validation position.
        vocab_size: Always 256 bytes plus BOS/EOS/PAD.
    """

    tokens: np.ndarray
    val_start: int
    val_stop: int
    vocab_size: int = BYTE_VOCAB

    @classmethod
    def from_tokens(cls, tokens, val_fraction: float = 0.05, seed: int = 0) -> Corpus:
        """Split ``tokens``; the validation block's offset is drawn from ``seed``."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if not 0.0 < val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
        n = tokens.size
        n_val = max(2, int(round(n * val_fraction)))
        if n - n_val < 2:
            raise LengthError(f"corpus of {n} tokens is too small to split")
        rng = np.random.default_rng([int(seed), 0x5EED])
        start = int(rng.integers(0, n - n_val + 1))
        return cls(tokens=tokens, val_start=start, val_stop=start + n_val)

    @classmethod
    def from_file(cls, path, val_fraction: float = 0.05, seed: int = 0) -> Corpus:
        return cls.from_tokens(encode(Path(path).read_bytes()), val_fraction, seed)

    @property
    def validation(self) -> np.ndarray:
        return self.tokens[self.val_start : self.val_stop]

    @property
    def train_segments(self) -> list[np.ndarray]:
        segs = [self.tokens[: self.val_start], self.tokens[self.val_stop :]]
        return [s for s in segs if s.size]

    @property
    def n_train(self) -> int:
        return self.tokens.size - (self.val_stop - self.val_start)

    def sample_batch(self, rng: np.random.Generator, batch_size: int, seq_len: int) -> np.ndarray:
        """``[batch_size, seq_len + 1]`` windows drawn uniformly from the training segments.

        Windows never straddle the validation block.
        """
        segs = [s for s in self.train_segments if s.size >= seq_len + 1]
        if not segs:
            raise LengthError(f"no training segment holds a window of {seq_len + 1} tokens")
        counts = np.array([s.size - seq_len for s in segs], dtype=np.int64)
        flat = rng.integers(0, counts.sum(), size=batch_size)
        out = np.empty((batch_size, seq_len + 1), dtype=np.int64)
        bounds = np.cumsum(counts)
        for row, pos in enumerate(flat):
            k = int(np.searchsorted(bounds, pos, side="right"))
            start = int(pos - (bounds[k - 1] if k else 0))
            out[row] = segs[k][start : start + seq_len + 1]
        return out

    def validation_windows(self, seq_len: int, max_tokens: int | None = None) -> np.ndarray:
        """Non-overlapping ``[n, seq_len + 1]`` windows covering the validation block.

        Consecutive windows share one boundary token, so every validation
        token after the first is predicted exactly once.
        """
        val = self.validation
        if max_tokens is not None:
            val = val[: max_tokens + 1]
        n = (val.size - 1) // seq_len
        if n == 0:
            raise LengthError(f"validation split of {val.size} tokens is shorter than one window")
        idx = np.arange(n)[:, None] * seq_len + np.arange(seq_len + 1)[None, :]
        return val[idx]


def reference_text(n_bytes: int = 2_000_000) -> bytes:
    """Deterministic text built from the interpreter's own standard-library sources.

    The files are read in sorted path order and concatenated until ``n_bytes``
    is reached, which gives a reproducible ~2MB corpus with no downloads.
    """
    root = Path(sysconfig.get_paths()["stdlib"])
    chunks: list[bytes] = []
    total = 0
    for path in sorted(root.glob("*.py")) + sorted(root.glob("*/*.py")):
        try:
            data = path.read_bytes()
        except OSError:
            continue
        chunks.append(data)
        total += len(data)
        if total >= n_bytes:
            break
    text = b"".join(chunks)[:n_bytes]
    if len(text) < n_bytes:
        logger.warning("reference corpus only reached %d of %d bytes", len(text), n_bytes)
    return text


def reference_corpus(n_bytes: int = 2_000_000, val_fraction: float = 0.05, seed: int = 0) -> Corpus:
    return Corpus.from_tokens(encode(reference_text(n_bytes)), val_fraction, seed)
