"""Posterior grids: per-frame CTC posteriors over a grapheme vocabulary.

A grid is a ``T x |V|`` float32 matrix. Frames are numbered ``1..T`` in every
public API (violations, alignments); the on-disk payload is plain 0-based row
order.

GPG1 file layout::

    b"GPG1" | uint32 LE header length | UTF-8 JSON header | float32 LE payload
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

MAGIC = b"GPG1"
ROW_SUM_TOL = 1e-4
DEFAULT_FRAME_DURATION_S = 0.02

_HEADER_KEYS = ("symbols", "blank_index", "separator_index", "frame_duration_s", "num_frames")


class GridFormatError(ValueError):
    """The bytes on disk are not a well-formed GPG1 file."""


class GridValidationError(ValueError):
    """A grid violates the probability invariants."""

    def __init__(self, violations: Sequence["Violation"]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class Violation(NamedTuple):
    kind: str  # "shape" | "range" | "row_sum"
    frame: Optional[int]  # 1-indexed, None for grid-level problems
    message: str

    def __str__(self) -> str:
        where = f"frame {self.frame}: " if self.frame is not None else ""
        return f"{self.kind}: {where}{self.message}"


@dataclass(frozen=True)
class Vocabulary:
    symbols: tuple[str, ...]
    blank_index: int = 0
    separator_index: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(self.symbols))
        n = len(self.symbols)
        if len(set(self.symbols)) != n:
            raise ValueError(f"duplicate symbols in vocabulary: {self.symbols}")
        if not 0 <= self.blank_index < n:
            raise ValueError(f"blank_index {self.blank_index} out of range for {n} symbols")
        if self.separator_index is not None:
            if not 0 <= self.separator_index < n:
                raise ValueError(f"separator_index {self.separator_index} out of range")
            if self.separator_index == self.blank_index:
                raise ValueError("separator and blank must be distinct symbols")

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def blank(self) -> str:
        return self.symbols[self.blank_index]

    @property
    def graphemes(self) -> tuple[str, ...]:
        """Every symbol except the blank, in column order."""
        return tuple(s for i, s in enumerate(self.symbols) if i != self.blank_index)

    @property
    def grapheme_columns(self) -> np.ndarray:
        return np.array([i for i in range(len(self.symbols)) if i != self.blank_index], dtype=np.intp)


class PosteriorGrid:
    """Immutable ``T x |V|`` matrix of frame posteriors.

    Construction only checks shapes; probability invariants are reported by
    :func:`validate` so that corrupt inputs can be inspected.
    """

    __slots__ = ("vocab", "probs", "frame_duration_s")

    def __init__(self, vocab: Vocabulary, probs, frame_duration_s: float = DEFAULT_FRAME_DURATION_S):
        arr = np.array(probs, dtype=np.float32, copy=True)
        if arr.ndim == 1 and arr.size == 0:
            arr = arr.reshape(0, len(vocab))
        if arr.ndim != 2 or arr.shape[1] != len(vocab):
            raise ValueError(f"probs must have shape (T, {len(vocab)}), got {arr.shape}")
        if not frame_duration_s > 0:
            raise ValueError("frame_duration_s must be positive")
        arr.setflags(write=False)
        object.__setattr__(self, "vocab", vocab)
        object.__setattr__(self, "probs", arr)
        object.__setattr__(self, "frame_duration_s", float(frame_duration_s))

    def __setattr__(self, name, value):
        raise AttributeError("PosteriorGrid is immutable")

    @property
    def num_frames(self) -> int:
        return self.probs.shape[0]

    @property
    def duration_s(self) -> float:
        return self.num_frames * self.frame_duration_s

    def __len__(self) -> int:
        return self.num_frames

    def __eq__(self, other) -> bool:
        if not isinstance(other, PosteriorGrid):
            return NotImplemented
        return (
            self.vocab == other.vocab
            and self.frame_duration_s == other.frame_duration_s
            and self.probs.shape == other.probs.shape
            and self.probs.view(np.uint32).tobytes() == other.probs.view(np.uint32).tobytes()
        )

    def __hash__(self):
        return hash((self.vocab, self.frame_duration_s, self.probs.tobytes()))

    def __repr__(self) -> str:
        return f"PosteriorGrid(T={self.num_frames}, symbols={list(self.vocab.symbols)}, dt={self.frame_duration_s})"

    def argmax(self) -> np.ndarray:
        """Per-frame most probable column; ties go to the lowest index."""
        return np.argmax(self.probs, axis=1)

    def slice_frames(self, start: int, stop: int) -> "PosteriorGrid":
        """Rows ``[start, stop)`` in 0-based row order."""
        return PosteriorGrid(self.vocab, self.probs[start:stop], self.frame_duration_s)


def validate(grid: PosteriorGrid) -> list[Violation]:
    """Return every invariant violation; an empty list means the grid is valid."""
    out: list[Violation] = []
    if len(grid.vocab) < 2:
        out.append(Violation("shape", None, "vocabulary needs a blank and at least one grapheme"))
    p = grid.probs
    if p.shape[0] == 0:
        return out
    finite = np.isfinite(p)
    bad_range = ~finite | (p < 0) | (p > 1)
    for t in np.flatnonzero(bad_range.any(axis=1)):
        cols = np.flatnonzero(bad_range[t])
        vals = ", ".join(f"{grid.vocab.symbols[c]}={p[t, c]!r}" for c in cols)
        out.append(Violation("range", int(t) + 1, f"entries outside [0,1]: {vals}"))
    sums = p.astype(np.float64).sum(axis=1)
    bad_sum = finite.all(axis=1) & (np.abs(sums - 1.0) > ROW_SUM_TOL)
    for t in np.flatnonzero(bad_sum):
        out.append(Violation("row_sum", int(t) + 1, f"row sums to {sums[t]:.6g}"))
    return out


def check(grid: PosteriorGrid) -> PosteriorGrid:
    violations = validate(grid)
    if violations:
        raise GridValidationError(violations)
    return grid


def _header(grid: PosteriorGrid) -> bytes:
    header = {
        "symbols": list(grid.vocab.symbols),
        "blank_index": grid.vocab.blank_index,
        "separator_index": grid.vocab.separator_index,
        "frame_duration_s": grid.frame_duration_s,
        "num_frames": grid.num_frames,
    }
    return json.dumps(header, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def grid_to_bytes(grid: PosteriorGrid) -> bytes:
    check(grid)
    header = _header(grid)
    payload = np.ascontiguousarray(grid.probs, dtype="<f4").tobytes()
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def grid_from_bytes(data: bytes) -> PosteriorGrid:
    if len(data) < 8 or data[:4] != MAGIC:
        raise GridFormatError("bad magic: not a GPG1 file")
    (hlen,) = struct.unpack("<I", data[4:8])
    if 8 + hlen > len(data):
        raise GridFormatError("truncated header")
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise GridFormatError(f"unreadable header: {exc}") from None
    if not isinstance(header, dict) or set(header) != set(_HEADER_KEYS):
        raise GridFormatError(f"header must have exactly the keys {_HEADER_KEYS}")
    try:
        vocab = Vocabulary(tuple(header["symbols"]), int(header["blank_index"]), header["separator_index"])
    except (TypeError, ValueError) as exc:
        raise GridFormatError(f"bad vocabulary: {exc}") from None
    num_frames = header["num_frames"]
    if not isinstance(num_frames, int) or num_frames < 0:
        raise GridFormatError("num_frames must be a non-negative integer")
    payload = data[8 + hlen :]
    expected = num_frames * len(vocab) * 4
    if len(payload) != expected:
        raise GridFormatError(f"payload has {len(payload)} bytes, expected {expected}")
    probs = np.frombuffer(payload, dtype="<f4").reshape(num_frames, len(vocab))
    try:
        grid = PosteriorGrid(vocab, probs, header["frame_duration_s"])
    except (TypeError, ValueError) as exc:
        raise GridFormatError(str(exc)) from None
    return check(grid)


def save_grid(grid: PosteriorGrid, path) -> None:
    """Write ``grid`` as GPG1. Invalid grids raise before anything touches disk."""
    data = grid_to_bytes(grid)
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def load_grid(path) -> PosteriorGrid:
    return grid_from_bytes(Path(path).read_bytes())


def merge_separator_into_blank(grid: PosteriorGrid) -> PosteriorGrid:
    """Fold the word-separator column into the blank column.

    The blank column becomes ``blank + separator`` (summed in float64 and
    rounded once to float32); every other column is copied unchanged.
    """
    vocab = grid.vocab
    sep = vocab.separator_index
    if sep is None:
        raise ValueError("vocabulary has no separator to merge")
    blank = vocab.blank_index
    merged = grid.probs[:, blank].astype(np.float64) + grid.probs[:, sep].astype(np.float64)
    probs = np.array(grid.probs, dtype=np.float32)
    probs[:, blank] = merged.astype(np.float32)
    probs = np.delete(probs, sep, axis=1)
    symbols = tuple(s for i, s in enumerate(vocab.symbols) if i != sep)
    new_vocab = Vocabulary(symbols, blank - 1 if sep < blank else blank, None)
    return PosteriorGrid(new_vocab, probs, grid.frame_duration_s)
