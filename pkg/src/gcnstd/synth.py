"""Synthetic spoken documents with known ground truth.

Each document is a sequence of lexicon words laid out on a frame timeline the
way a CTC grapheme recogniser would emit them: every grapheme owns a few
frames followed by optional blank frames, and words are separated by
word-separator frames. Rendering turns the layout into a noisy posterior
grid; substitution noise is drawn per grapheme occurrence from a fixed random
confusion matrix.

The word spans handed to transcripts and references are the rendered spans
with each boundary moved by up to ``jitter`` frames, which plays the role of
CTC misalignment against the acoustic truth.
"""

from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from .eval import ReferenceOccurrence, write_references
from .grid import PosteriorGrid, Vocabulary, save_grid
from .train import WordToken, write_transcripts

BLANK = "_"
SEPARATOR = "|"
SPLITS = ("train", "dev", "test")


@dataclass
class SynthConfig:
    vocab_size: int = 12
    lexicon_size: int = 50
    word_len: tuple[int, int] = (3, 10)
    n_train_docs: int = 200
    n_dev_docs: int = 20
    n_test_docs: int = 20
    words_per_doc: int = 40
    frames_per_grapheme: tuple[int, int] = (2, 6)
    trailing_blank_frames: tuple[int, int] = (0, 3)
    separator_frames: tuple[int, int] = (1, 3)
    leading_frames: tuple[int, int] = (0, 10)
    noise: float = 0.15
    confusion_concentration: float = 2.0
    jitter: int = 2
    heldout_fraction: float = 0.1
    n_query_terms: int = 20
    low_confidence_fraction: float = 0.2
    frame_duration_s: float = 0.02
    seed: int = 0

    def __post_init__(self):
        for name in ("word_len", "frames_per_grapheme", "trailing_blank_frames", "separator_frames", "leading_frames"):
            lo, hi = getattr(self, name)
            setattr(self, name, (int(lo), int(hi)))
            if lo > hi or lo < 0:
                raise ValueError(f"{name}: bad range {(lo, hi)}")
        if not 1 <= self.vocab_size <= 26:
            raise ValueError("vocab_size must lie in 1..26")
        if self.frames_per_grapheme[0] < 1 or self.word_len[0] < 1:
            raise ValueError("graphemes need at least one frame and words at least one grapheme")
        for name in ("lexicon_size", "words_per_doc", "n_query_terms"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if min(self.n_train_docs, self.n_dev_docs, self.n_test_docs) < 0:
            raise ValueError("document counts must be non-negative")
        if not 0.0 <= self.noise < 1.0:
            raise ValueError("noise must lie in [0, 1)")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise ValueError("heldout_fraction must lie in [0, 1)")
        if self.jitter < 0 or self.confusion_concentration <= 0:
            raise ValueError("jitter must be >= 0 and confusion_concentration > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @property
    def graphemes(self) -> tuple[str, ...]:
        return tuple(string.ascii_lowercase[: self.vocab_size])

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary((BLANK, SEPARATOR) + self.graphemes, blank_index=0, separator_index=1)


@dataclass(frozen=True)
class GraphemeSlot:
    grapheme: str
    start: int  # 0-based first frame
    n_frames: int
    n_trailing: int


@dataclass(frozen=True)
class SynthDocument:
    doc_id: str
    split: str
    index: int
    words: tuple[str, ...]
    slots: tuple[tuple[GraphemeSlot, ...], ...]  # per word
    word_frames: tuple[tuple[int, int], ...]  # rendered [start, stop), 0-based
    true_frames: tuple[tuple[int, int], ...]  # after boundary jitter
    num_frames: int
    frame_duration_s: float

    @property
    def duration_s(self) -> float:
        return self.num_frames * self.frame_duration_s

    def spans_s(self) -> list[tuple[float, float]]:
        dt = self.frame_duration_s
        return [(a * dt, b * dt) for a, b in self.true_frames]


@dataclass
class SynthCorpus:
    config: SynthConfig
    lexicon: tuple[str, ...]
    heldout: tuple[str, ...]
    query_terms: tuple[str, ...]
    documents: dict[str, list[SynthDocument]]
    transcripts: dict[str, list[WordToken]]
    references: dict[str, list[ReferenceOccurrence]]

    @property
    def in_lexicon_terms(self) -> tuple[str, ...]:
        held = set(self.heldout)
        return tuple(t for t in self.query_terms if t not in held)

    @property
    def heldout_terms(self) -> tuple[str, ...]:
        held = set(self.heldout)
        return tuple(t for t in self.query_terms if t in held)

    def speech_duration_s(self, split: str) -> float:
        return float(sum(d.duration_s for d in self.documents[split]))


def _lexicon(cfg: SynthConfig, rng: np.random.Generator) -> list[str]:
    """Random words, none a substring of another."""
    graphemes = cfg.graphemes
    words: list[str] = []
    attempts = 0
    while len(words) < cfg.lexicon_size:
        attempts += 1
        if attempts > 1000 * cfg.lexicon_size:
            raise ValueError("cannot draw a substring-free lexicon of the requested size")
        n = int(rng.integers(cfg.word_len[0], cfg.word_len[1] + 1))
        w = "".join(graphemes[i] for i in rng.integers(len(graphemes), size=n))
        if any(w in v or v in w for v in words):
            continue
        words.append(w)
    return words


@lru_cache(maxsize=8)
def _confusion(vocab_size: int, seed: int) -> np.ndarray:
    """Row-stochastic grapheme confusion matrix with an empty diagonal."""
    rng = np.random.default_rng([seed, 7])
    if vocab_size == 1:
        return np.ones((1, 1))
    m = rng.dirichlet(np.full(vocab_size - 1, 0.3), size=vocab_size)
    out = np.zeros((vocab_size, vocab_size))
    for i in range(vocab_size):
        out[i, np.arange(vocab_size) != i] = m[i]
    return out


def _layout(cfg: SynthConfig, words: list[str], rng: np.random.Generator):
    t = int(rng.integers(cfg.leading_frames[0], cfg.leading_frames[1] + 1))
    slots, word_starts = [], []
    for w in words:
        word_starts.append(t)
        ws = []
        for k, g in enumerate(w):
            n = int(rng.integers(cfg.frames_per_grapheme[0], cfg.frames_per_grapheme[1] + 1))
            trail = int(rng.integers(cfg.trailing_blank_frames[0], cfg.trailing_blank_frames[1] + 1))
            if k + 1 < len(w) and w[k + 1] == g:
                trail = max(trail, 1)  # CTC needs a blank between repeated graphemes
            ws.append(GraphemeSlot(g, t, n, trail))
            t += n + trail
        slots.append(tuple(ws))
        t += int(rng.integers(max(cfg.separator_frames[0], 1), max(cfg.separator_frames[1], 1) + 1))
    word_frames = tuple(zip(word_starts, word_starts[1:] + [t]))
    return tuple(slots), word_frames, t


def _jitter(cfg: SynthConfig, word_frames, num_frames: int, rng: np.random.Generator):
    j = cfg.jitter
    out = []
    for a, b in word_frames:
        if j:
            a2 = min(max(0, a + int(rng.integers(-j, j + 1))), num_frames - 1)
            b2 = min(max(a2 + 1, b + int(rng.integers(-j, j + 1))), num_frames)
            out.append((a2, b2))
        else:
            out.append((a, b))
    return tuple(out)


def gen_corpus(config: SynthConfig) -> SynthCorpus:
    """Lexicon, documents for every split, transcripts, references and query terms.

    Held-out words are spoken in the documents but never transcribed, so they
    cannot become training queries.
    """
    rng = np.random.default_rng([config.seed, 0])
    lexicon = _lexicon(config, rng)
    n_held = int(round(config.heldout_fraction * config.lexicon_size))
    if n_held >= config.lexicon_size:
        raise ValueError("heldout_fraction leaves no in-lexicon words")
    held_idx = sorted(rng.choice(config.lexicon_size, size=n_held, replace=False).tolist()) if n_held else []
    heldout = tuple(lexicon[i] for i in held_idx)
    held = set(heldout)
    iv = [w for w in lexicon if w not in held]
    n_iv_terms = min(len(iv), max(config.n_query_terms - n_held, 0))
    iv_terms = [iv[i] for i in sorted(rng.choice(len(iv), size=n_iv_terms, replace=False).tolist())]
    query_terms = tuple(iv_terms) + heldout

    documents, transcripts, references = {}, {}, {}
    counts = dict(zip(SPLITS, (config.n_train_docs, config.n_dev_docs, config.n_test_docs)))
    for s_idx, split in enumerate(SPLITS):
        docs, toks, refs = [], [], []
        for i in range(counts[split]):
            drng = np.random.default_rng([config.seed, 1, s_idx, i])
            words = [lexicon[k] for k in drng.integers(len(lexicon), size=config.words_per_doc)]
            slots, word_frames, n = _layout(config, words, drng)
            true_frames = _jitter(config, word_frames, n, drng)
            doc = SynthDocument(f"{split}_{i:04d}", split, i, tuple(words), slots, word_frames, true_frames, n, config.frame_duration_s)
            docs.append(doc)
            for w, (t0, t1) in zip(words, doc.spans_s()):
                refs.append(ReferenceOccurrence(doc.doc_id, w, t0, t1))
                if w in held:
                    continue
                if drng.random() < config.low_confidence_fraction:
                    conf = float(drng.uniform(0.5, 0.95))
                else:
                    conf = 1.0 - 0.04 * float(drng.random())
                toks.append(WordToken(doc.doc_id, w, t0, t1, conf))
        documents[split], transcripts[split], references[split] = docs, toks, refs
    return SynthCorpus(config, tuple(lexicon), heldout, query_terms, documents, transcripts, references)


def grapheme_distribution(config: SynthConfig, grapheme: str, rng: np.random.Generator) -> np.ndarray:
    """Posterior over graphemes for one spoken grapheme occurrence."""
    v = config.vocab_size
    g = config.graphemes.index(grapheme)
    onehot = np.zeros(v)
    onehot[g] = 1.0
    if config.noise == 0.0:
        return onehot
    mean = (1.0 - config.noise) * onehot + config.noise * _confusion(v, config.seed)[g]
    d = rng.dirichlet(config.confusion_concentration * mean + 0.01)
    return d / d.sum()


def render_grid(document: SynthDocument, config: SynthConfig) -> PosteriorGrid:
    """Noisy CTC-style posteriors for ``document`` (blank, separator, graphemes)."""
    rng = np.random.default_rng([config.seed, 2, SPLITS.index(document.split), document.index])
    v = config.vocab_size
    probs = np.zeros((document.num_frames, v + 2))
    # silence by default: blank-dominant with a little grapheme mass
    quiet = rng.uniform(0.0, 0.1, size=document.num_frames)
    probs[:, 0] = 1.0 - quiet
    probs[:, 2:] = (quiet / v)[:, None]
    for word_slots, (w0, w1) in zip(document.slots, document.word_frames):
        for slot in word_slots:
            d = grapheme_distribution(config, slot.grapheme, rng)
            a, b = slot.start, slot.start + slot.n_frames
            leak = rng.uniform(0.0, 0.2, size=slot.n_frames)
            probs[a:b, 0] = leak
            probs[a:b, 1] = 0.0
            probs[a:b, 2:] = (1.0 - leak)[:, None] * d
            c = b + slot.n_trailing
            resid = rng.uniform(0.0, 0.3, size=slot.n_trailing)
            probs[b:c, 0] = 1.0 - resid
            probs[b:c, 1] = 0.0
            probs[b:c, 2:] = resid[:, None] * d
        gap_start = word_slots[-1].start + word_slots[-1].n_frames + word_slots[-1].n_trailing
        n_gap = w1 - gap_start
        if n_gap > 0:
            sep = rng.uniform(0.5, 0.9, size=n_gap)
            rest = 1.0 - sep
            probs[gap_start:w1, 1] = sep
            probs[gap_start:w1, 0] = 0.8 * rest
            probs[gap_start:w1, 2:] = (0.2 * rest / v)[:, None]
    probs /= probs.sum(axis=1, keepdims=True)
    return PosteriorGrid(config.vocabulary, probs.astype(np.float32), config.frame_duration_s)


def write_corpus(corpus: SynthCorpus, outdir) -> None:
    """Materialise the corpus as GPG1 grids plus TSV/text side files, one directory per split."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        sdir = outdir / split
        (sdir / "grids").mkdir(parents=True, exist_ok=True)
        for doc in corpus.documents[split]:
            save_grid(render_grid(doc, corpus.config), sdir / "grids" / f"{doc.doc_id}.gpg")
        write_transcripts(sdir / "transcripts.tsv", corpus.transcripts[split])
        write_references(sdir / "references.tsv", corpus.references[split])
        meta = {"speech_duration_s": corpus.speech_duration_s(split), "doc_ids": [d.doc_id for d in corpus.documents[split]]}
        (sdir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    (outdir / "lexicon.txt").write_text("".join(w + "\n" for w in corpus.lexicon), encoding="utf-8")
    (outdir / "terms.txt").write_text("".join(w + "\n" for w in corpus.query_terms), encoding="utf-8")
    (outdir / "terms_heldout.txt").write_text("".join(w + "\n" for w in corpus.heldout_terms), encoding="utf-8")
    (outdir / "terms_iv.txt").write_text("".join(w + "\n" for w in corpus.in_lexicon_terms), encoding="utf-8")
    (outdir / "synth_config.json").write_text(json.dumps(corpus.config.to_dict(), indent=2) + "\n", encoding="utf-8")
