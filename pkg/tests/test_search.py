import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from gcnstd.cn import SegmentAlignment, build_confusion_network, featurize
from gcnstd.nn import ModelConfig, build_model, project_document
from gcnstd.search import (
    DocumentIndexEntry,
    Hit,
    build_index,
    detect_peaks,
    load_index,
    min_len_segments,
    peak_hits,
    read_hits,
    search,
    search_terms,
    save_index,
    write_hits,
)

from conftest import random_grid

MODEL = ModelConfig(graphemes=tuple("abcd"), hidden_size=4, num_layers=1, cn_embed_dim=2, query_embed_dim=4, minlen_hidden=2)


def test_worked_example():
    r = np.array([0.1, 0.8, 0.9, 0.85, 0.2])
    align = tuple(SegmentAlignment(b, e) for b, e in ((1, 3), (3, 6), (6, 9), (9, 12), (12, 15)))
    entry = DocumentIndexEntry("d", np.zeros((5, 2), np.float32), align, 0.02)
    (hit,) = peak_hits(entry, "t", r, 0.5, 3)
    assert hit.score == pytest.approx(0.85, abs=1e-12)
    assert hit.t_begin == pytest.approx(0.04) and hit.t_end == pytest.approx(0.22)
    assert peak_hits(entry, "t", r, 0.5, 4) == []


def test_detect_peaks_runs():
    r = np.array([0.6, 0.6, 0.1, 0.5, 0.4, 0.9, 0.9, 0.9])
    assert detect_peaks(r, 0.5, 1) == [(0, 2), (3, 4), (5, 8)]
    assert detect_peaks(r, 0.5, 2) == [(0, 2), (5, 8)]
    assert detect_peaks(np.zeros(0), 0.5, 1) == []


def test_min_len_rounding():
    assert min_len_segments(0.0) == 1
    assert min_len_segments(2.4) == 2
    assert min_len_segments(2.6) == 3


@given(st.lists(st.floats(0, 1), max_size=40), st.floats(0.05, 0.95), st.floats(0.0, 0.5), st.integers(1, 4))
def test_threshold_monotonicity_and_disjointness(r, t, dt, min_len):
    r = np.array(r)
    lo = detect_peaks(r, t, min_len)
    hi = detect_peaks(r, min(1.0, t + dt), min_len)
    # every run at the higher threshold lies inside one run at the lower threshold
    for a, b in hi:
        assert any(a0 <= a and b <= b0 for a0, b0 in lo)
    assert sum(b - a for a, b in hi) <= sum(b - a for a, b in lo)
    for (a0, b0), (a1, b1) in zip(lo, lo[1:]):
        assert b0 < a1
    for a, b in lo:
        assert (r[a:b] >= t).all() and b - a >= min_len


def test_raising_threshold_can_split_a_run():
    # the hit count is not monotone in the threshold: a dip splits one run into two
    r = np.array([0.9, 0.6, 0.9])
    assert detect_peaks(r, 0.5, 1) == [(0, 3)]
    assert detect_peaks(r, 0.7, 1) == [(0, 1), (2, 3)]


def _corpus(n_docs, seed=0):
    rng = np.random.default_rng(seed)
    return [build_confusion_network(random_grid(rng, int(rng.integers(0, 60)), 5), doc_id=f"d{i}") for i in range(n_docs)]


def test_index_equals_projection_and_is_deterministic():
    model = build_model(MODEL, 0)
    corpus = _corpus(100)
    index = build_index(model, corpus)
    assert len(index) == 100 and index.width == MODEL.width
    for e, c in zip(index.entries, corpus):
        assert np.array_equal(e.R, project_document(model, featurize(c, MODEL.graphemes)))
    again = build_index(model, corpus, jobs=4)
    assert all(np.array_equal(a.R, b.R) for a, b in zip(index.entries, again.entries))
    assert len(build_index(model, [])) == 0


def test_index_vocab_mismatch():
    model = build_model(ModelConfig(graphemes=("a", "b"), hidden_size=2, num_layers=1), 0)
    with pytest.raises(ValueError):
        build_index(model, _corpus(3))


def test_search_hits_are_valid():
    model = build_model(MODEL, 1)
    with torch.no_grad():
        model.beta.fill_(1.0)  # make an untrained model fire somewhere
    index = build_index(model, _corpus(20, 1))
    before = [e.R.copy() for e in index.entries]
    hits = search_terms(index, model, ["abc", "dab"], detect_threshold=0.5)
    assert hits
    assert all(0 < h.score < 1 and h.t_begin < h.t_end for h in hits)
    assert [h.score for h in hits] == sorted((h.score for h in hits), reverse=True)
    assert all(np.array_equal(a, e.R) for a, e in zip(before, index.entries))
    covered = lambda th: sum(h.t_end - h.t_begin for h in search(index, model, "abc", th))
    assert covered(0.9) <= covered(0.5) + 1e-9
    with pytest.raises(KeyError):
        search(index, model, "xyz")


def test_hits_file_roundtrip(tmp_path):
    hits = [Hit("d1", "abc", 0.04, 0.22, 0.85), Hit("d0", "abd", 1.0 / 3, 0.9, 0.9123456789)]
    write_hits(tmp_path / "h.tsv", hits)
    lines = (tmp_path / "h.tsv").read_text().splitlines()
    assert lines[0] == "doc_id\tterm\tt_begin\tt_end\tscore"
    back = read_hits(tmp_path / "h.tsv")
    assert back == sorted(hits, key=lambda h: -h.score)


def test_index_save_load(tmp_path):
    model = build_model(MODEL, 2)
    index = build_index(model, _corpus(10, 2))
    save_index(index, tmp_path / "idx")
    back = load_index(tmp_path / "idx")
    assert back.width == index.width
    for a, b in zip(index.entries, back.entries):
        assert a.doc_id == b.doc_id and a.alignments == b.alignments and np.array_equal(a.R, b.R)
    assert load_index(tmp_path / "idx").entries[0].frame_duration_s == 0.02
