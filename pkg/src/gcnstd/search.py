"""Query-independent document index and thresholded peak search."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cn import GraphemeConfusionNetwork, SegmentAlignment, featurize
from .nn import STDModel, project_document, project_query, read_tensor_blob, score_segments, write_tensor_blob

INDEX_SCHEMA_VERSION = 1
HIT_COLUMNS = ("doc_id", "term", "t_begin", "t_end", "score")


@dataclass(frozen=True)
class DocumentIndexEntry:
    doc_id: str
    R: np.ndarray  # (N, width) float32
    alignments: tuple[SegmentAlignment, ...]
    frame_duration_s: float

    def __post_init__(self):
        if len(self.R) != len(self.alignments):
            raise ValueError(f"{self.doc_id}: {len(self.R)} embeddings for {len(self.alignments)} segments")


@dataclass(frozen=True)
class Index:
    entries: tuple[DocumentIndexEntry, ...] = ()
    width: int = 0

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class Hit:
    doc_id: str
    term: str
    t_begin: float
    t_end: float
    score: float

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.t_begin + self.t_end)


def build_index(model: STDModel, corpus: Sequence[GraphemeConfusionNetwork], jobs: int = 1) -> Index:
    def one(cnet: GraphemeConfusionNetwork) -> DocumentIndexEntry:
        try:
            feats = featurize(cnet, model.graphemes)
        except KeyError as exc:
            raise ValueError(f"document {cnet.doc_id!r}: {exc.args[0]}") from None
        return DocumentIndexEntry(cnet.doc_id, project_document(model, feats), tuple(cnet.alignments), cnet.frame_duration_s)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            entries = list(pool.map(one, corpus))
    else:
        entries = [one(c) for c in corpus]
    return Index(tuple(entries), model.config.width)


def detect_peaks(r: np.ndarray, threshold: float, min_len: int) -> list[tuple[int, int]]:
    """Maximal runs ``[start, stop)`` (0-based) with ``r >= threshold`` and length ``>= min_len``."""
    above = np.concatenate([[False], np.asarray(r) >= threshold, [False]])
    edges = np.flatnonzero(above[1:] != above[:-1])
    starts, stops = edges[::2], edges[1::2]
    return [(int(a), int(b)) for a, b in zip(starts, stops) if b - a >= min_len]


def min_len_segments(predicted: float) -> int:
    return max(1, int(round(predicted)))


def peak_hits(entry: DocumentIndexEntry, term: str, r: np.ndarray, threshold: float, min_len: int) -> list[Hit]:
    """Turn per-segment scores of one document into time-stamped hits."""
    dt = entry.frame_duration_s
    out = []
    for a, b in detect_peaks(r, threshold, min_len):
        score = float(np.mean(r[a:b], dtype=np.float64))
        t0 = (entry.alignments[a].b - 1) * dt
        t1 = (entry.alignments[b - 1].e - 1) * dt
        out.append(Hit(entry.doc_id, term, t0, t1, score))
    return out


def search(index: Index, model: STDModel, term: str, detect_threshold: float = 0.5) -> list[Hit]:
    """Scored hits of ``term`` in every indexed document, best first."""
    qp = project_query(model, term)
    need = min_len_segments(qp.min_len)
    alpha, beta = model.alpha.item(), model.beta.item()
    hits = []
    for entry in index.entries:
        if not len(entry.alignments):
            continue
        r = score_segments(entry.R, qp.Q, alpha, beta)
        hits.extend(peak_hits(entry, term, r, detect_threshold, need))
    hits.sort(key=lambda h: -h.score)
    return hits


def search_terms(index: Index, model: STDModel, terms: Iterable[str], detect_threshold: float = 0.5) -> list[Hit]:
    hits = []
    for term in terms:
        hits.extend(search(index, model, term, detect_threshold))
    hits.sort(key=lambda h: -h.score)
    return hits


def write_hits(path, hits: Iterable[Hit]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(HIT_COLUMNS)
        for h in hits:
            w.writerow([h.doc_id, h.term, repr(h.t_begin), repr(h.t_end), repr(h.score)])


def read_hits(path) -> list[Hit]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if rows and tuple(rows[0]) == HIT_COLUMNS:
        rows = rows[1:]
    hits = [Hit(r[0], r[1], float(r[2]), float(r[3]), float(r[4])) for r in rows]
    hits.sort(key=lambda h: -h.score)
    return hits


def save_index(index: Index, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": INDEX_SCHEMA_VERSION,
        "width": index.width,
        "documents": [
            {
                "doc_id": e.doc_id,
                "frame_duration_s": e.frame_duration_s,
                "alignments": [[a.b, a.e] for a in e.alignments],
            }
            for e in index.entries
        ],
    }
    write_tensor_blob(directory / "embeddings.bin", [e.R for e in index.entries])
    (directory / "manifest.json").write_text(json.dumps(manifest) + "\n", encoding="utf-8")


def load_index(directory) -> Index:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("schema_version") != INDEX_SCHEMA_VERSION:
        raise ValueError(f"unsupported index schema {manifest.get('schema_version')!r}")
    width = int(manifest["width"])
    docs = manifest["documents"]
    arrays = read_tensor_blob(directory / "embeddings.bin", [(len(d["alignments"]), width) for d in docs])
    entries = tuple(
        DocumentIndexEntry(d["doc_id"], R, tuple(SegmentAlignment(b, e) for b, e in d["alignments"]), float(d["frame_duration_s"]))
        for d, R in zip(docs, arrays)
    )
    return Index(entries, width)
