"""CTC 1-best decoding, grapheme confusion networks and sliding-window stitching."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .grid import PosteriorGrid, DEFAULT_FRAME_DURATION_S

TOP_K = 3


class ConfusionNetworkError(ValueError):
    pass


class SegmentAlignment(NamedTuple):
    """Frames ``[b, e)`` of one segment, 1-indexed, ``e`` exclusive."""

    b: int
    e: int


@dataclass(frozen=True)
class CNSegment:
    # (grapheme, probability), descending probability, ties by vocabulary order
    dist: tuple[tuple[str, float], ...]

    @property
    def top(self) -> str:
        return self.dist[0][0]

    def prob(self, grapheme: str) -> float:
        for g, p in self.dist:
            if g == grapheme:
                return p
        return 0.0


@dataclass(frozen=True)
class GraphemeConfusionNetwork:
    vocab: tuple[str, ...]
    segments: tuple[CNSegment, ...] = ()
    alignments: tuple[SegmentAlignment, ...] = ()
    frame_duration_s: float = DEFAULT_FRAME_DURATION_S
    doc_id: str = ""

    def __post_init__(self):
        if len(self.segments) != len(self.alignments):
            raise ValueError("segments and alignments differ in length")
        prev_e = None
        for a in self.alignments:
            if not a.b < a.e or (prev_e is not None and a.b < prev_e):
                raise ValueError(f"alignments not strictly ordered at {a}")
            prev_e = a.e

    def __len__(self) -> int:
        return len(self.segments)

    def one_best(self) -> tuple[str, ...]:
        return tuple(s.top for s in self.segments)

    def segment_times(self) -> np.ndarray:
        """``(N, 2)`` array of segment extents in seconds, ``[(b-1)dt, (e-1)dt)``."""
        a = np.asarray(self.alignments, dtype=np.float64).reshape(-1, 2)
        return (a - 1.0) * self.frame_duration_s


@dataclass(frozen=True)
class SegmentFeatures:
    duration_s: float
    # exactly TOP_K (grapheme id or None, probability) pairs
    top: tuple[tuple[Optional[int], float], ...] = field(default=())


def _require_decodable(grid: PosteriorGrid) -> None:
    if grid.vocab.separator_index is not None:
        raise ValueError("merge the separator into the blank before decoding")


def ctc_one_best(grid: PosteriorGrid) -> tuple[tuple[str, ...], tuple[SegmentAlignment, ...]]:
    """Greedy CTC hypothesis together with its frame alignment.

    Each segment is a run of one non-blank argmax followed by any blank frames
    up to the next segment. Leading blank frames belong to no segment.
    """
    _require_decodable(grid)
    blank = grid.vocab.blank_index
    path = grid.argmax()
    starts: list[int] = []
    labels: list[int] = []
    in_blank = True
    for t, s in enumerate(path):
        if s == blank:
            in_blank = True
        elif in_blank or s != labels[-1]:
            starts.append(t + 1)
            labels.append(int(s))
            in_blank = False
    ends = starts[1:] + [grid.num_frames + 1] if starts else []
    symbols = grid.vocab.symbols
    hyp = tuple(symbols[s] for s in labels)
    align = tuple(SegmentAlignment(b, e) for b, e in zip(starts, ends))
    return hyp, align


def build_confusion_network(grid: PosteriorGrid, doc_id: str = "") -> GraphemeConfusionNetwork:
    """Average non-blank posteriors over each 1-best segment's frames.

    The blank mass of a segment is dropped and the remaining grapheme mass is
    renormalised, so every segment is a distribution over non-blank symbols.
    """
    _, align = ctc_one_best(grid)
    vocab = grid.vocab.graphemes
    cols = grid.vocab.grapheme_columns
    probs = grid.probs.astype(np.float64)[:, cols]
    segments = []
    for i, (b, e) in enumerate(align):
        mass = probs[b - 1 : e - 1].sum(axis=0)
        total = mass.sum()
        if not total > 0:
            raise ConfusionNetworkError(f"segment {i + 1} has no non-blank probability mass")
        c = mass / total
        order = np.argsort(-c, kind="stable")
        segments.append(CNSegment(tuple((vocab[j], float(c[j])) for j in order)))
    return GraphemeConfusionNetwork(vocab, tuple(segments), align, grid.frame_duration_s, doc_id)


def window_spans(total_frames: int, window_frames: int = 900, overlap_frames: int = 150) -> list[tuple[int, int]]:
    """0-based ``(start, length)`` windows covering ``total_frames``.

    Windows advance by ``window - overlap``; the last one is truncated at the
    end of the input.
    """
    if not window_frames > overlap_frames >= 0:
        raise ValueError("need window_frames > overlap_frames >= 0")
    if overlap_frames % 2:
        raise ValueError("overlap_frames must be even so it can be split in half")
    if total_frames < 0:
        raise ValueError("total_frames must be non-negative")
    step = window_frames - overlap_frames
    spans = []
    start = 0
    while start < total_frames:
        spans.append((start, min(window_frames, total_frames - start)))
        if start + window_frames >= total_frames:
            break
        start += step
    return spans


def split_grid(grid: PosteriorGrid, spans: Sequence[tuple[int, int]]) -> list[PosteriorGrid]:
    return [grid.slice_frames(s, s + n) for s, n in spans]


def stitch(window_grids: Sequence[PosteriorGrid], spans: Sequence[tuple[int, int]]) -> PosteriorGrid:
    """Reassemble overlapping window posteriors into one grid.

    Each overlap is split in half: the first half of its frames comes from the
    left window and the second half from the right window.
    """
    if len(window_grids) != len(spans):
        raise ValueError(f"{len(window_grids)} grids for {len(spans)} spans")
    if not window_grids:
        raise ValueError("nothing to stitch")
    first = window_grids[0]
    for k, (g, (start, length)) in enumerate(zip(window_grids, spans)):
        if g.vocab != first.vocab:
            raise ValueError(f"window {k} vocabulary differs from window 0")
        if g.frame_duration_s != first.frame_duration_s:
            raise ValueError(f"window {k} frame duration differs from window 0")
        if g.num_frames != length:
            raise ValueError(f"window {k} has {g.num_frames} frames, span says {length}")
    if spans[0][0] != 0:
        raise ValueError("first span must start at frame 0")
    # cut[k] is the 0-based global frame where window k+1 takes over
    cuts = []
    for k in range(len(spans) - 1):
        (s0, n0), (s1, n1) = spans[k], spans[k + 1]
        overlap = s0 + n0 - s1
        if overlap < 0 or s1 <= s0 or s1 + n1 < s0 + n0:
            raise ValueError(f"spans {k} and {k + 1} do not overlap contiguously")
        if overlap % 2:
            raise ValueError(f"odd overlap of {overlap} frames between spans {k} and {k + 1}")
        cuts.append(s1 + overlap // 2)
    bounds = [0] + cuts + [spans[-1][0] + spans[-1][1]]
    pieces = []
    for k, (g, (start, _)) in enumerate(zip(window_grids, spans)):
        lo, hi = bounds[k], bounds[k + 1]
        pieces.append(g.probs[lo - start : hi - start])
    probs = np.concatenate(pieces, axis=0)
    return PosteriorGrid(first.vocab, probs, first.frame_duration_s)


def featurize(cnet: GraphemeConfusionNetwork, vocab: Optional[Sequence[str]] = None) -> list[SegmentFeatures]:
    """Segment duration plus the three most probable graphemes and their probabilities.

    Grapheme ids index ``vocab`` (default: the network's own vocabulary).
    Missing slots are padded with ``(None, 0.0)``.
    """
    vocab = tuple(cnet.vocab if vocab is None else vocab)
    index = {g: i for i, g in enumerate(vocab)}
    rank = {g: i for i, g in enumerate(cnet.vocab)}
    out = []
    for seg, (b, e) in zip(cnet.segments, cnet.alignments):
        ranked = sorted(seg.dist, key=lambda gp: (-gp[1], rank.get(gp[0], len(rank))))[:TOP_K]
        top = []
        for g, p in ranked:
            if g not in index:
                raise KeyError(f"grapheme {g!r} not in vocabulary")
            top.append((index[g], float(p)))
        top += [(None, 0.0)] * (TOP_K - len(top))
        out.append(SegmentFeatures((e - b) * cnet.frame_duration_s, tuple(top)))
    return out


def cnet_to_json(cnet: GraphemeConfusionNetwork) -> str:
    doc = {
        "doc_id": cnet.doc_id,
        "frame_duration_s": cnet.frame_duration_s,
        "vocab": list(cnet.vocab),
        "segments": [
            {"b": a.b, "e": a.e, "dist": [[g, p] for g, p in s.dist]}
            for s, a in zip(cnet.segments, cnet.alignments)
        ],
    }
    return json.dumps(doc, ensure_ascii=False, separators=(",", ":"))


def cnet_from_json(line: str) -> GraphemeConfusionNetwork:
    doc = json.loads(line)
    segs, aligns = [], []
    seen: dict[str, None] = {}
    for s in doc["segments"]:
        dist = tuple((str(g), float(p)) for g, p in s["dist"])
        for g, _ in dist:
            seen.setdefault(g, None)
        segs.append(CNSegment(dist))
        aligns.append(SegmentAlignment(int(s["b"]), int(s["e"])))
    vocab = tuple(doc["vocab"]) if "vocab" in doc else tuple(sorted(seen))
    return GraphemeConfusionNetwork(
        vocab, tuple(segs), tuple(aligns), float(doc["frame_duration_s"]), str(doc.get("doc_id", ""))
    )


def write_gcn_corpus(path, cnets: Iterable[GraphemeConfusionNetwork]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in cnets:
            fh.write(cnet_to_json(c) + "\n")


def read_gcn_corpus(path) -> list[GraphemeConfusionNetwork]:
    with open(path, encoding="utf-8") as fh:
        return [cnet_from_json(line) for line in fh if line.strip()]
