"""Term-weighted value scoring (TWV, ATWV, MTWV)."""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .search import Hit

log = logging.getLogger(__name__)

BETA_FA = 999.9
MATCH_TOLERANCE_S = 0.5


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ReferenceOccurrence:
    doc_id: str
    term: str
    t_begin: float
    t_end: float

    def __post_init__(self):
        if not self.t_begin < self.t_end:
            raise ValueError(f"reference {self.term!r} in {self.doc_id}: t_begin must precede t_end")


@dataclass
class Assignment:
    """Hits in descending score order, each with its matched reference or ``None``."""

    hits: list[Hit]
    matches: list[Optional[ReferenceOccurrence]]
    refs: list[ReferenceOccurrence]

    @property
    def n_true(self) -> dict[str, int]:
        counts: dict[str, int] = defaultdict(int)
        for r in self.refs:
            counts[r.term] += 1
        return dict(counts)

    def restrict(self, terms: Iterable[str]) -> "Assignment":
        keep = set(terms)
        pairs = [(h, m) for h, m in zip(self.hits, self.matches) if h.term in keep]
        return Assignment([h for h, _ in pairs], [m for _, m in pairs], [r for r in self.refs if r.term in keep])


@dataclass
class TermStats:
    n_true: int
    n_correct: int
    n_fa: int
    p_miss: float
    p_fa: float


@dataclass
class TWVResult:
    threshold: float
    twv: float
    per_term: dict[str, TermStats] = field(default_factory=dict)


def match_hits(hits: Sequence[Hit], refs: Sequence[ReferenceOccurrence], tolerance: float = MATCH_TOLERANCE_S) -> Assignment:
    """Greedy one-to-one alignment, highest score first.

    A hit may claim an unclaimed reference of the same term and document when
    its midpoint lies within ``tolerance`` seconds of the reference span. Among
    several candidates the one whose centre is nearest wins.
    """
    order = sorted(range(len(hits)), key=lambda i: -hits[i].score)
    ordered = [hits[i] for i in order]
    pool: dict[tuple[str, str], list[ReferenceOccurrence]] = defaultdict(list)
    for r in refs:
        pool[(r.doc_id, r.term)].append(r)
    taken: set[int] = set()
    matches: list[Optional[ReferenceOccurrence]] = []
    for h in ordered:
        mid = h.midpoint
        best, best_dist = None, math.inf
        for r in pool.get((h.doc_id, h.term), ()):
            if id(r) in taken or not r.t_begin - tolerance <= mid <= r.t_end + tolerance:
                continue
            dist = abs(mid - 0.5 * (r.t_begin + r.t_end))
            if dist < best_dist:
                best, best_dist = r, dist
        if best is not None:
            taken.add(id(best))
        matches.append(best)
    return Assignment(ordered, matches, list(refs))


def _twv_from_counts(n_true, correct, fa, speech_s, beta_fa):
    per_term = {}
    total = 0.0
    for term, nt in n_true.items():
        p_miss = 1.0 - correct.get(term, 0) / nt
        p_fa = fa.get(term, 0) / (speech_s - nt)
        per_term[term] = TermStats(nt, correct.get(term, 0), fa.get(term, 0), p_miss, p_fa)
        total += p_miss + beta_fa * p_fa
    return 1.0 - total / len(n_true), per_term


def _scored_terms(assignment: Assignment, speech_s: float) -> dict[str, int]:
    if not speech_s > 0:
        raise ValueError("speech duration must be positive")
    n_true = assignment.n_true
    if not n_true:
        raise UndefinedMetricError("no term has a reference occurrence")
    for term, nt in n_true.items():
        if speech_s - nt <= 0:
            raise ValueError(f"speech duration {speech_s}s leaves no non-target trials for {term!r}")
    unscored = {h.term for h in assignment.hits} - set(n_true)
    if unscored:
        log.warning("ignoring hits for %d terms without references: %s", len(unscored), sorted(unscored)[:5])
    return n_true


def twv(assignment: Assignment, threshold: float, speech_s: float, beta_fa: float = BETA_FA) -> TWVResult:
    """TWV at ``threshold``; a hit counts iff its score is ``>= threshold``."""
    n_true = _scored_terms(assignment, speech_s)
    correct: dict[str, int] = defaultdict(int)
    fa: dict[str, int] = defaultdict(int)
    for h, m in zip(assignment.hits, assignment.matches):
        if h.term not in n_true or not h.score >= threshold:
            continue
        if m is None:
            fa[h.term] += 1
        else:
            correct[h.term] += 1
    value, per_term = _twv_from_counts(n_true, correct, fa, speech_s, beta_fa)
    return TWVResult(threshold, value, per_term)


def mtwv_sweep(assignment: Assignment, speech_s: float, beta_fa: float = BETA_FA):
    """Maximum TWV over all thresholds.

    TWV is piecewise constant in the threshold with breakpoints at hit scores,
    so it is evaluated at every distinct score plus ``inf`` (nothing
    accepted). Returns ``(best_threshold, mtwv, curve)`` with ``curve`` a list
    of ``(threshold, twv)`` in descending threshold order; ties go to the
    larger threshold.
    """
    n_true = _scored_terms(assignment, speech_s)
    pairs = [(h, m) for h, m in zip(assignment.hits, assignment.matches) if h.term in n_true]
    pairs.sort(key=lambda hm: -hm[0].score)
    correct: dict[str, int] = defaultdict(int)
    fa: dict[str, int] = defaultdict(int)
    curve = [(math.inf, _twv_from_counts(n_true, correct, fa, speech_s, beta_fa)[0])]
    i = 0
    while i < len(pairs):
        theta = pairs[i][0].score
        while i < len(pairs) and pairs[i][0].score == theta:
            h, m = pairs[i]
            if m is None:
                fa[h.term] += 1
            else:
                correct[h.term] += 1
            i += 1
        curve.append((theta, _twv_from_counts(n_true, correct, fa, speech_s, beta_fa)[0]))
    best_theta, best = curve[0]
    for theta, value in curve[1:]:
        if value > best:
            best_theta, best = theta, value
    return best_theta, best, curve


def atwv(assignment: Assignment, threshold: float, speech_s: float, beta_fa: float = BETA_FA) -> float:
    """TWV at a threshold chosen elsewhere (typically the dev-set MTWV threshold)."""
    return twv(assignment, threshold, speech_s, beta_fa).twv


@dataclass
class EvalReport:
    mode: str
    threshold: float
    twv: float
    atwv: Optional[float]
    mtwv: float
    theta_star: float
    speech_s: float
    per_term: dict[str, TermStats]
    curve: list[tuple[float, float]]

    def to_dict(self) -> dict:
        def num(x):
            return None if x is None else (x if math.isfinite(x) else "inf")

        return {
            "mode": self.mode,
            "threshold": num(self.threshold),
            "twv": self.twv,
            "atwv": self.atwv,
            "mtwv": self.mtwv,
            "theta_star": num(self.theta_star),
            "T_speech_s": self.speech_s,
            "per_term": {
                t: {"N_true": s.n_true, "N_correct": s.n_correct, "N_FA": s.n_fa, "P_miss": s.p_miss, "P_FA": s.p_fa}
                for t, s in sorted(self.per_term.items())
            },
            "curve": [[num(t), v] for t, v in self.curve],
        }


def evaluate(
    hits: Sequence[Hit],
    refs: Sequence[ReferenceOccurrence],
    speech_s: float,
    mode: str = "mtwv",
    threshold: Optional[float] = None,
    terms: Optional[Iterable[str]] = None,
    beta_fa: float = BETA_FA,
    tolerance: float = MATCH_TOLERANCE_S,
) -> EvalReport:
    """Match, sweep and report. ``mode='atwv'`` needs an external ``threshold``."""
    if terms is not None:
        keep = set(terms)
        hits = [h for h in hits if h.term in keep]
        refs = [r for r in refs if r.term in keep]
    assignment = match_hits(hits, refs, tolerance)
    theta_star, best, curve = mtwv_sweep(assignment, speech_s, beta_fa)
    if mode == "mtwv":
        at, actual = theta_star, None
    elif mode == "atwv":
        if threshold is None:
            raise ValueError("atwv mode needs a decision threshold")
        at = threshold
        actual = atwv(assignment, threshold, speech_s, beta_fa)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    result = twv(assignment, at, speech_s, beta_fa)
    return EvalReport(mode, at, result.twv, actual, best, theta_star, speech_s, result.per_term, curve)


REFERENCE_COLUMNS = ("doc_id", "term", "t_begin", "t_end")


def write_references(path, refs: Iterable[ReferenceOccurrence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(REFERENCE_COLUMNS)
        for r in refs:
            w.writerow([r.doc_id, r.term, repr(r.t_begin), repr(r.t_end)])


def read_references(path) -> list[ReferenceOccurrence]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if rows and tuple(rows[0]) == REFERENCE_COLUMNS:
        rows = rows[1:]
    return [ReferenceOccurrence(r[0], r[1], float(r[2]), float(r[3])) for r in rows]
