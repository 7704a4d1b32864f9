"""Query bootstrapping from confident word transcripts and model training."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .cn import TOP_K, GraphemeConfusionNetwork, featurize
from .nn import ModelConfig, STDModel, build_model

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-7
MIN_QUERY_GRAPHEMES = 3


class TrainingConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WordToken:
    doc_id: str
    word: str
    t_begin: float
    t_end: float
    confidence: float

    def __post_init__(self):
        if not self.t_begin < self.t_end:
            raise ValueError(f"token {self.word!r} in {self.doc_id}: t_begin must precede t_end")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"token {self.word!r}: confidence {self.confidence} outside [0,1]")


@dataclass
class HyperParams:
    masking_n: int = 1
    steps: int = 200_000
    batch_size: int = 32
    peak_lr: float = 1e-3
    chunk_len: int = 200
    negative_chunk_prob: float = 0.5
    minlen_loss_weight: float = 0.1
    pinball_tau: float = 0.1
    confidence_threshold: float = 0.95
    pair_query_prob: float = 0.0  # positive slot uses two adjacent confident words as one query
    hard_negative_prob: float = 0.0  # negative slot keeps the positive window but mutates one query grapheme
    subword_query_prob: float = 0.0  # slot queries a substring of a cleanly decoded confident word
    seed: int = 0

    def __post_init__(self):
        if self.masking_n < 0:
            raise ValueError("masking_n must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.chunk_len < 1 or self.steps < 0:
            raise ValueError("chunk_len must be >= 1 and steps >= 0")
        for name in ("negative_chunk_prob", "pair_query_prob", "hard_negative_prob", "subword_query_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0,1]")

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# transcripts

TRANSCRIPT_COLUMNS = ("doc_id", "word", "t_begin", "t_end", "confidence")


def write_transcripts(path, tokens: Iterable[WordToken]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(TRANSCRIPT_COLUMNS)
        for t in tokens:
            w.writerow([t.doc_id, t.word, repr(t.t_begin), repr(t.t_end), repr(t.confidence)])


def read_transcripts(path) -> list[WordToken]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if rows and tuple(rows[0]) == TRANSCRIPT_COLUMNS:
        rows = rows[1:]
    out = []
    for n, row in enumerate(rows, start=1):
        if len(row) != 5:
            raise ValueError(f"{path}:{n}: expected 5 columns, got {len(row)}")
        out.append(WordToken(row[0], row[1], float(row[2]), float(row[3]), float(row[4])))
    return out


# targets, masks and losses

def extract_training_queries(tokens: Iterable[WordToken], threshold: float = 0.95) -> list[WordToken]:
    """Confident words (confidence strictly above ``threshold``), lowercased, at least 3 graphemes."""
    out = []
    for t in tokens:
        if t.confidence > threshold:
            word = t.word.lower()
            if len(word) >= MIN_QUERY_GRAPHEMES:
                out.append(WordToken(t.doc_id, word, t.t_begin, t.t_end, t.confidence))
    return out


def build_target(cnet: GraphemeConfusionNetwork, span: tuple[float, float]) -> np.ndarray:
    """1 for every segment with at least half of its time extent inside ``span``."""
    if len(cnet) == 0:
        return np.zeros(0, dtype=np.int8)
    times = cnet.segment_times()
    lo = np.maximum(times[:, 0], span[0])
    hi = np.minimum(times[:, 1], span[1])
    inside = np.clip(hi - lo, 0.0, None)
    return (inside >= 0.5 * (times[:, 1] - times[:, 0]) - 1e-9).astype(np.int8)


def apply_transition_masking(y, n: int) -> np.ndarray:
    """Zero the weights of the ``n`` segments on each side of every 0/1 transition."""
    if n < 0:
        raise ValueError("n must be >= 0")
    y = np.asarray(y)
    w = np.ones(len(y), dtype=np.int8)
    if n == 0:
        return w
    for i in np.flatnonzero(y[1:] != y[:-1]):
        # transition between 0-based positions i and i+1
        w[max(0, i - n + 1) : i + n + 1] = 0
    return w


def masked_bce_loss(r, y, w) -> Optional[torch.Tensor]:
    """Mean binary cross-entropy over positions with ``w == 1``.

    Returns ``None`` when every position is masked so the caller can skip the sample.
    """
    r, y, w = (torch.as_tensor(a) for a in (r, y, w))
    keep = w.reshape(-1) > 0
    if not bool(keep.any()):
        return None
    rk = r.reshape(-1)[keep]
    yk = y.reshape(-1)[keep].to(rk.dtype)
    ll = yk * torch.log(rk.clamp_min(LOG_CLAMP)) + (1 - yk) * torch.log((1 - rk).clamp_min(LOG_CLAMP))
    return -ll.mean()


def minlen_loss(predicted, occurrence_len, tau: float = 0.1):
    """Pinball loss; over-predicting the length costs ``(1 - tau) / tau`` times more."""
    diff = torch.as_tensor(occurrence_len) - torch.as_tensor(predicted)
    return torch.maximum(tau * diff, (tau - 1) * diff)


def minlen_target(occurrence_len: int, masking_n: int) -> int:
    """Segments of an occurrence that stay unmasked, i.e. the run the scorer is trained to mark."""
    return max(1, occurrence_len - 2 * masking_n)


def lr_factor(step: int) -> float:
    """Inverse square-root decay without warm-up: 1 up to step 1000, then sqrt(1000/step)."""
    return math.sqrt(1000.0 / max(step, 1000))


# batching

@dataclass
class _Doc:
    cnet: GraphemeConfusionNetwork
    ids: np.ndarray  # (N, 3) int64
    probs: np.ndarray  # (N, 3) float32
    dur: np.ndarray  # (N,) float32
    words: frozenset
    best: np.ndarray  # (N,) 1-best grapheme id per segment


@dataclass
class _Query:
    doc: int
    word: str
    gids: list[int]
    first: int  # 0-based first/last segment of this occurrence
    last: int
    occurrence_len: int
    y: np.ndarray  # doc-level target marking every occurrence of the word


def corpus_vocabulary(cnets: Sequence[GraphemeConfusionNetwork]) -> tuple[str, ...]:
    seen: dict[str, None] = {}
    for c in cnets:
        for g in c.vocab:
            seen.setdefault(g, None)
    return tuple(seen)


def _doc_arrays(cnet: GraphemeConfusionNetwork, vocab: Sequence[str]):
    feats = featurize(cnet, vocab)
    n, v = len(feats), len(vocab)
    ids = np.full((n, TOP_K), v, dtype=np.int64)
    probs = np.zeros((n, TOP_K), dtype=np.float32)
    dur = np.zeros(n, dtype=np.float32)
    for i, f in enumerate(feats):
        dur[i] = f.duration_s
        for k, (gid, p) in enumerate(f.top):
            if gid is not None:
                ids[i, k] = gid
            probs[i, k] = p
    return ids, probs, dur


class ChunkSampler:
    """Draws training batches of fixed-length segment windows paired with query terms."""

    def __init__(self, corpus: Sequence[tuple[GraphemeConfusionNetwork, Sequence[WordToken]]], hyper: HyperParams, vocab: Sequence[str]):
        self.hyper = hyper
        self.vocab = tuple(vocab)
        index = {g: i for i, g in enumerate(self.vocab)}
        self.docs: list[_Doc] = []
        self.queries: list[_Query] = []
        self.pairs: list[_Query] = []
        skipped = 0
        for cnet, tokens in corpus:
            ids, probs, dur = _doc_arrays(cnet, self.vocab)
            words = frozenset(t.word.lower() for t in tokens)
            d = len(self.docs)
            self.docs.append(_Doc(cnet, ids, probs, dur, words, ids[:, 0].copy()))
            by_word: dict[str, np.ndarray] = {}
            for t in tokens:
                key = t.word.lower()
                tgt = build_target(cnet, (t.t_begin, t.t_end))
                by_word[key] = tgt if key not in by_word else np.maximum(by_word[key], tgt)
            for t in extract_training_queries(tokens, hyper.confidence_threshold):
                if any(g not in index for g in t.word):
                    skipped += 1
                    continue
                occ = np.flatnonzero(build_target(cnet, (t.t_begin, t.t_end)))
                if occ.size == 0:
                    skipped += 1
                    continue
                self.queries.append(
                    _Query(d, t.word, [index[g] for g in t.word], int(occ[0]), int(occ[-1]), int(occ.size), by_word[t.word])
                )
            if hyper.pair_query_prob > 0:
                self.pairs.extend(self._adjacent_pairs(d, tokens, index))
        if not self.queries:
            raise TrainingConfigError("no training queries could be extracted from the corpus")
        if skipped:
            log.warning("skipped %d query tokens (unknown graphemes or no covered segment)", skipped)
        self._lacking: dict[str, np.ndarray] = {}
        self._known = frozenset(q.word for q in self.queries)
        # occurrences whose 1-best spells the word, one segment per grapheme
        self.clean = [q for q in self.queries if np.array_equal(self.docs[q.doc].best[q.first : q.last + 1], q.gids)]
        if hyper.subword_query_prob > 0 and not self.clean:
            log.warning("no cleanly decoded query occurrence; sub-word queries disabled")

    def _subword_slot(self, rng: np.random.Generator):
        """A substring query labelled wherever the document 1-best spells it."""
        h = self.hyper
        q = self.clean[rng.integers(len(self.clean))]
        k = int(rng.integers(MIN_QUERY_GRAPHEMES, len(q.gids) + 1))
        i = int(rng.integers(len(q.gids) - k + 1))
        gids = q.gids[i : i + k]
        if rng.random() < h.negative_chunk_prob:
            doc = self.docs[rng.integers(len(self.docs))]
            n = len(doc.cnet)
            start = int(rng.integers(max(n - h.chunk_len, 0) + 1))
            first = None
        else:
            doc = self.docs[q.doc]
            n = len(doc.cnet)
            first, last = q.first + i, q.first + i + k - 1
            lo = max(0, last - h.chunk_len + 1)
            start = int(rng.integers(lo, max(lo, min(first, n - h.chunk_len)) + 1))
        y = np.zeros(n, dtype=np.float32)
        if n >= k:
            windows = np.lib.stride_tricks.sliding_window_view(doc.best, k)
            for a in np.flatnonzero((windows == gids).all(axis=1)):
                y[a : a + k] = 1.0
        return gids, doc, start, y, first is not None and y.any(), k

    def _adjacent_pairs(self, d: int, tokens: Sequence[WordToken], index: dict) -> list[_Query]:
        cnet = self.docs[d].cnet
        toks = sorted(tokens, key=lambda t: t.t_begin)
        thr = self.hyper.confidence_threshold
        spans: dict[str, np.ndarray] = {}
        found = []
        for a, b in zip(toks, toks[1:]):
            word = (a.word + b.word).lower()
            tgt = build_target(cnet, (a.t_begin, b.t_end))
            spans[word] = tgt if word not in spans else np.maximum(spans[word], tgt)
            confident = min(a.confidence, b.confidence) > thr and min(len(a.word), len(b.word)) >= MIN_QUERY_GRAPHEMES
            occ = np.flatnonzero(tgt)
            if confident and occ.size and all(g in index for g in word):
                found.append((word, int(occ[0]), int(occ[-1]), int(occ.size)))
        return [_Query(d, w, [index[g] for g in w], f, l, n, spans[w]) for w, f, l, n in found]

    def _mutate(self, gids: list[int], rng: np.random.Generator) -> list[int]:
        v = len(self.vocab)
        for _ in range(20):
            out = list(gids)
            k = int(rng.integers(len(out)))
            out[k] = (out[k] + 1 + int(rng.integers(v - 1))) % v
            if "".join(self.vocab[g] for g in out) not in self._known:
                return out
        return out

    def _docs_lacking(self, word: str) -> np.ndarray:
        if word not in self._lacking:
            self._lacking[word] = np.array([i for i, d in enumerate(self.docs) if word not in d.words and len(d.cnet)], dtype=np.int64)
        return self._lacking[word]

    def _fill(self, b, doc, start, target, ids, probs, dur, y, w, lengths) -> None:
        stop = min(start + self.hyper.chunk_len, len(doc.cnet))
        m = stop - start
        lengths[b] = m
        ids[b, :m] = doc.ids[start:stop]
        probs[b, :m] = doc.probs[start:stop]
        dur[b, :m] = doc.dur[start:stop]
        if target is not None:
            y[b, :m] = target[start:stop]
        w[b, :m] = apply_transition_masking(y[b, :m], self.hyper.masking_n)

    def sample(self, rng: np.random.Generator) -> dict:
        h = self.hyper
        L, B = h.chunk_len, h.batch_size
        v = len(self.vocab)
        ids = np.full((B, L, TOP_K), v, dtype=np.int64)
        probs = np.zeros((B, L, TOP_K), dtype=np.float32)
        dur = np.zeros((B, L), dtype=np.float32)
        y = np.zeros((B, L), dtype=np.float32)
        w = np.zeros((B, L), dtype=np.float32)
        lengths = np.zeros(B, dtype=np.int64)
        occ_len = np.zeros(B, dtype=np.float32)
        qs = []
        for b in range(B):
            if self.clean and h.subword_query_prob > 0 and rng.random() < h.subword_query_prob:
                gids, doc, start, target, positive, k = self._subword_slot(rng)
                qs.append(gids)
                if positive:
                    occ_len[b] = minlen_target(k, h.masking_n)
                self._fill(b, doc, start, target, ids, probs, dur, y, w, lengths)
                continue
            q = self.queries[rng.integers(len(self.queries))]
            negative = rng.random() < h.negative_chunk_prob
            if not negative and self.pairs and rng.random() < h.pair_query_prob:
                q = self.pairs[rng.integers(len(self.pairs))]
            hard = negative and h.hard_negative_prob > 0 and rng.random() < h.hard_negative_prob
            qs.append(self._mutate(q.gids, rng) if hard else q.gids)
            negatives = self._docs_lacking(q.word)
            if hard:
                doc = self.docs[q.doc]
                n = len(doc.cnet)
                start = int(rng.integers(max(0, q.last - L + 1), max(0, min(q.first, n - L)) + 1))
                target = None
            elif negative and negatives.size:
                doc = self.docs[negatives[rng.integers(negatives.size)]]
                n = len(doc.cnet)
                start = int(rng.integers(max(n - L, 0) + 1))
                target = None
            else:
                doc = self.docs[q.doc]
                n = len(doc.cnet)
                lo = max(0, q.last - L + 1)
                hi = max(lo, min(q.first, n - L))
                start = int(rng.integers(lo, hi + 1))
                target = q.y
                occ_len[b] = minlen_target(q.occurrence_len, h.masking_n)
            self._fill(b, doc, start, target, ids, probs, dur, y, w, lengths)
        qlen = np.array([len(g) for g in qs], dtype=np.int64)
        qids = np.zeros((B, qlen.max()), dtype=np.int64)
        for b, g in enumerate(qs):
            qids[b, : len(g)] = g
        return {
            "ids": torch.from_numpy(ids),
            "probs": torch.from_numpy(probs),
            "dur": torch.from_numpy(dur),
            "lengths": torch.from_numpy(lengths),
            "y": torch.from_numpy(y),
            "w": torch.from_numpy(w),
            "qids": torch.from_numpy(qids),
            "qlen": torch.from_numpy(qlen),
            "occ_len": torch.from_numpy(occ_len),
        }


def batch_loss(model: STDModel, batch: dict, hyper: HyperParams):
    """Masked BCE over all unmasked segments plus the weighted min-length pinball loss.

    Returns ``(total, bce, minlen)``; ``total`` is ``None`` if the batch has no
    unmasked segment.
    """
    dtype = model.alpha.dtype
    R = model.document_embeddings(batch["ids"], batch["probs"].to(dtype), batch["dur"].to(dtype), batch["lengths"])
    Q, min_len = model.query_embeddings(batch["qids"], batch["qlen"])
    r = torch.sigmoid(model.logits(R, Q))
    bce = masked_bce_loss(r, batch["y"].to(dtype), batch["w"])
    pos = batch["occ_len"] > 0
    if bool(pos.any()):
        ml = minlen_loss(min_len[pos], batch["occ_len"][pos].to(dtype), hyper.pinball_tau).mean()
    else:
        ml = min_len.sum() * 0.0
    if bce is None:
        return None, None, ml
    return bce + hyper.minlen_loss_weight * ml, bce, ml


def train(
    corpus: Sequence[tuple[GraphemeConfusionNetwork, Sequence[WordToken]]],
    hyper: HyperParams,
    model_config: Optional[ModelConfig] = None,
    log_every: int = 0,
) -> STDModel:
    """Fit a fresh model on ``corpus`` (pairs of confusion network and its word transcript).

    Adam with ``lr = peak_lr * sqrt(1000 / max(step, 1000))``. Everything
    random flows from ``hyper.seed``.
    """
    if not corpus:
        raise TrainingConfigError("empty training corpus")
    vocab = corpus_vocabulary([c for c, _ in corpus])
    config = ModelConfig(**{**asdict(model_config or ModelConfig()), "graphemes": vocab})
    sampler = ChunkSampler(corpus, hyper, vocab)
    model = build_model(config, hyper.seed)
    model.train()
    rng = np.random.default_rng(hyper.seed)
    opt = torch.optim.Adam(model.parameters(), lr=hyper.peak_lr)
    pos_frac = []
    for step in range(1, hyper.steps + 1):
        for group in opt.param_groups:
            group["lr"] = hyper.peak_lr * lr_factor(step)
        batch = sampler.sample(rng)
        total, bce, ml = batch_loss(model, batch, hyper)
        if total is None:
            continue
        opt.zero_grad()
        total.backward()
        opt.step()
        if log_every:
            kept = batch["w"] > 0
            pos_frac.append(float(batch["y"][kept].mean()) if bool(kept.any()) else 0.0)
            if step % log_every == 0:
                log.info(
                    "step %d lr %.2e bce %.4f minlen %.4f positive-fraction %.3f",
                    step, opt.param_groups[0]["lr"], bce.item(), ml.item(), float(np.mean(pos_frac)),
                )
                pos_frac.clear()
    model.eval()
    return model


def save_hyperparams(path, hyper: HyperParams) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(hyper.to_dict(), fh, indent=2)
