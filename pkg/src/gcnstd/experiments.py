"""End-to-end synthetic benchmark: synth -> decode -> train -> index -> search -> eval."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .cn import GraphemeConfusionNetwork, build_confusion_network
from .eval import EvalReport, evaluate
from .grid import merge_separator_into_blank
from .nn import ModelConfig, STDModel, project_query
from .search import Hit, Index, build_index, min_len_segments, peak_hits, search_terms
from .synth import SynthConfig, SynthCorpus, gen_corpus, render_grid
from .train import HyperParams, train

log = logging.getLogger(__name__)


def desk_model_config() -> ModelConfig:
    """Architecture shrunk to train in minutes on one CPU core."""
    return ModelConfig(hidden_size=32, num_layers=2, cn_embed_dim=8, query_embed_dim=32, minlen_hidden=20)


def desk_hyperparams(**overrides) -> HyperParams:
    base = dict(masking_n=1, steps=6000, batch_size=32, peak_lr=3e-3, chunk_len=64, subword_query_prob=0.5, seed=0)
    base.update(overrides)
    return HyperParams(**base)


@dataclass
class BenchmarkConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=desk_model_config)
    hyper: HyperParams = field(default_factory=desk_hyperparams)
    detect_threshold: float = 0.15  # tuned on dev; lets partial held-out responses form runs


@dataclass
class BenchmarkResult:
    dev: EvalReport
    test: EvalReport  # ATWV at the dev threshold
    dev_heldout: EvalReport
    dev_in_lexicon: EvalReport
    baseline_dev: EvalReport
    dev_hits: list[Hit]
    test_hits: list[Hit]
    seconds: dict[str, float]
    model: Optional[STDModel] = None

    def summary(self) -> dict:
        return {
            "dev_mtwv": self.dev.mtwv,
            "dev_theta": self.dev.theta_star,
            "test_atwv": self.test.atwv,
            "test_mtwv": self.test.mtwv,
            "dev_heldout_mtwv": self.dev_heldout.mtwv,
            "dev_in_lexicon_mtwv": self.dev_in_lexicon.mtwv,
            "baseline_dev_mtwv": self.baseline_dev.mtwv,
        }


def decode_split(corpus: SynthCorpus, split: str) -> list[GraphemeConfusionNetwork]:
    cfg = corpus.config
    return [
        build_confusion_network(merge_separator_into_blank(render_grid(d, cfg)), d.doc_id)
        for d in corpus.documents[split]
    ]


def random_scoring_hits(index: Index, model: STDModel, terms: Sequence[str], seed: int, detect_threshold: float = 0.5) -> list[Hit]:
    """Hits from i.i.d. uniform segment scores, run through the same peak detector."""
    rng = np.random.default_rng([seed, 99])
    hits = []
    for term in terms:
        need = min_len_segments(project_query(model, term).min_len)
        for e in index.entries:
            hits.extend(peak_hits(e, term, rng.random(len(e.alignments)), detect_threshold, need))
    hits.sort(key=lambda h: -h.score)
    return hits


def run_benchmark(config: BenchmarkConfig, corpus: Optional[SynthCorpus] = None, log_every: int = 0) -> BenchmarkResult:
    seconds = {}
    t0 = time.perf_counter()
    corpus = corpus or gen_corpus(config.synth)
    cnets = {s: decode_split(corpus, s) for s in ("train", "dev", "test")}
    seconds["decode"] = time.perf_counter() - t0

    by_doc: dict[str, list] = {}
    for tok in corpus.transcripts["train"]:
        by_doc.setdefault(tok.doc_id, []).append(tok)
    train_set = [(c, by_doc.get(c.doc_id, [])) for c in cnets["train"]]
    t0 = time.perf_counter()
    model = train(train_set, config.hyper, config.model, log_every=log_every)
    seconds["train"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    terms = corpus.query_terms
    dev_index = build_index(model, cnets["dev"])
    test_index = build_index(model, cnets["test"])
    dev_hits = search_terms(dev_index, model, terms, config.detect_threshold)
    test_hits = search_terms(test_index, model, terms, config.detect_threshold)
    seconds["search"] = time.perf_counter() - t0

    dev_s, test_s = corpus.speech_duration_s("dev"), corpus.speech_duration_s("test")
    dev_refs, test_refs = corpus.references["dev"], corpus.references["test"]
    dev = evaluate(dev_hits, dev_refs, dev_s, "mtwv", terms=terms)
    test = evaluate(test_hits, test_refs, test_s, "atwv", threshold=dev.theta_star, terms=terms)
    heldout = evaluate(dev_hits, dev_refs, dev_s, "mtwv", terms=corpus.heldout_terms)
    in_lex = evaluate(dev_hits, dev_refs, dev_s, "mtwv", terms=corpus.in_lexicon_terms)
    baseline_hits = random_scoring_hits(dev_index, model, terms, config.hyper.seed, config.detect_threshold)
    baseline = evaluate(baseline_hits, dev_refs, dev_s, "mtwv", terms=terms)
    return BenchmarkResult(dev, test, heldout, in_lex, baseline, dev_hits, test_hits, seconds, model)


def masking_ablation(config: BenchmarkConfig, widths: Sequence[int] = (0, 1, 2, 3), corpus: Optional[SynthCorpus] = None) -> dict[int, BenchmarkResult]:
    corpus = corpus or gen_corpus(config.synth)
    out = {}
    for n in widths:
        cfg = replace(config, hyper=replace(config.hyper, masking_n=n))
        out[n] = run_benchmark(cfg, corpus)
        log.info("masking +-%d: dev MTWV %.4f", n, out[n].dev.mtwv)
    return out
