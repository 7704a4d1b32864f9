import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gcnstd.grid import (
    GridFormatError,
    GridValidationError,
    PosteriorGrid,
    Vocabulary,
    grid_from_bytes,
    grid_to_bytes,
    load_grid,
    merge_separator_into_blank,
    save_grid,
    validate,
)

from conftest import grid_from_path, random_grid


def test_vocabulary_invariants():
    with pytest.raises(ValueError):
        Vocabulary(("_", "a", "a"))
    with pytest.raises(ValueError):
        Vocabulary(("_", "a"), blank_index=2)
    with pytest.raises(ValueError):
        Vocabulary(("_", "a"), 0, separator_index=0)
    v = Vocabulary(("a", "_", "b"), blank_index=1)
    assert v.graphemes == ("a", "b")


def test_empty_grid_roundtrip(tmp_path):
    g = PosteriorGrid(Vocabulary(("_", "a")), np.zeros((0, 2)))
    assert validate(g) == []
    save_grid(g, tmp_path / "e.gpg")
    data = (tmp_path / "e.gpg").read_bytes()
    (hlen,) = struct.unpack("<I", data[4:8])
    assert len(data) == 8 + hlen  # 0-row payload
    assert load_grid(tmp_path / "e.gpg") == g


def test_book_grid(tmp_path):
    g = grid_from_path("bb_oo_okk")
    save_grid(g, tmp_path / "book.gpg")
    back = load_grid(tmp_path / "book.gpg")
    assert back == g
    assert "".join(back.vocab.symbols[i] for i in back.argmax()) == "bb_oo_okk"


@given(st.integers(0, 40), st.integers(2, 9), st.integers(0, 2**32 - 1), st.booleans())
def test_save_load_bit_identical(T, V, seed, sep):
    if sep and V < 3:
        V = 3
    g = random_grid(np.random.default_rng(seed), T, V, with_separator=sep)
    data = grid_to_bytes(g)
    back = grid_from_bytes(data)
    assert back == g
    assert back.probs.tobytes() == g.probs.tobytes()
    assert grid_to_bytes(back) == data


def test_file_layout_is_exact():
    g = PosteriorGrid(Vocabulary(("_", "|", "a"), 0, 1), [[0.25, 0.25, 0.5]], 0.02)
    data = grid_to_bytes(g)
    assert data[:4] == b"GPG1"
    (hlen,) = struct.unpack("<I", data[4:8])
    header = data[8 : 8 + hlen].decode()
    assert header == '{"symbols":["_","|","a"],"blank_index":0,"separator_index":1,"frame_duration_s":0.02,"num_frames":1}'
    assert np.frombuffer(data[8 + hlen :], "<f4").tolist() == [0.25, 0.25, 0.5]


def test_nan_grid_is_not_written(tmp_path):
    g = PosteriorGrid(Vocabulary(("_", "a")), [[np.nan, 1.0]])
    with pytest.raises(GridValidationError):
        save_grid(g, tmp_path / "nan.gpg")
    assert not list(tmp_path.iterdir())


def test_bad_magic_and_truncation(tmp_path):
    g = grid_from_path("ab")
    data = grid_to_bytes(g)
    with pytest.raises(GridFormatError):
        grid_from_bytes(b"XPG1" + data[4:])
    with pytest.raises(GridFormatError):
        grid_from_bytes(data[:-1])
    with pytest.raises(GridFormatError):
        grid_from_bytes(data[:6])


def test_load_rejects_bad_row_sum_with_frame():
    g = PosteriorGrid(Vocabulary(("_", "a")), [[0.5, 0.5], [0.5, 0.4]])
    raw = bytearray(grid_to_bytes(PosteriorGrid(g.vocab, [[0.5, 0.5], [0.5, 0.5]])))
    raw[-4:] = struct.pack("<f", 0.4)
    with pytest.raises(GridValidationError) as exc:
        grid_from_bytes(bytes(raw))
    assert exc.value.violations[0].frame == 2


def test_validate_reports():
    v = Vocabulary(("_", "a", "b"))
    assert validate(PosteriorGrid(v, [[0.2, 0.3, 0.5]])) == []
    short = validate(PosteriorGrid(v, [[0.2, 0.3, 0.5], [0.3, 0.3, 0.3]]))
    assert [(x.kind, x.frame) for x in short] == [("row_sum", 2)]
    big = validate(PosteriorGrid(v, [[1.5, -0.25, -0.25]]))
    assert [x.kind for x in big] == ["range"]
    assert validate(PosteriorGrid(Vocabulary(("_",)), np.ones((1, 1)))) != []


@given(st.integers(0, 30), st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_validate_accepts_exactly_valid(T, V, seed):
    rng = np.random.default_rng(seed)
    g = random_grid(rng, T, V)
    assert validate(g) == []
    if T:
        bad = np.array(g.probs)
        t = rng.integers(T)
        bad[t] *= 0.99
        assert [x.frame for x in validate(PosteriorGrid(g.vocab, bad))] == [t + 1]


def test_merge_separator_example():
    g = PosteriorGrid(Vocabulary(("_", "|", "a"), 0, 1), [[0.3, 0.2, 0.5]])
    m = merge_separator_into_blank(g)
    assert m.vocab.symbols == ("_", "a") and m.vocab.separator_index is None
    np.testing.assert_allclose(m.probs, [[0.5, 0.5]], atol=1e-7)


def test_merge_zero_separator_keeps_blank():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(3), size=6).astype(np.float32)
    p = np.insert(p, 1, 0.0, axis=1)
    g = PosteriorGrid(Vocabulary(("_", "|", "a", "b"), 0, 1), p)
    m = merge_separator_into_blank(g)
    assert m.probs[:, 0].tobytes() == g.probs[:, 0].tobytes()
    assert m.probs[:, 1:].tobytes() == g.probs[:, 2:].tobytes()


def test_merge_separator_before_blank_reindexes():
    g = PosteriorGrid(Vocabulary(("|", "a", "_"), 2, 0), [[0.1, 0.6, 0.3]])
    m = merge_separator_into_blank(g)
    assert m.vocab.symbols == ("a", "_") and m.vocab.blank_index == 1
    np.testing.assert_allclose(m.probs, [[0.6, 0.4]], atol=1e-7)


@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_merge_preserves_row_sums(T, seed):
    g = random_grid(np.random.default_rng(seed), T, 6, with_separator=True)
    m = merge_separator_into_blank(g)
    before = g.probs.astype(np.float64).sum(axis=1)
    after = m.probs.astype(np.float64).sum(axis=1)
    # the merged column is rounded to float32 once: at most half an ulp of a value <= 1
    np.testing.assert_allclose(after, before, rtol=0, atol=2.0**-24)
    assert validate(m) == []
    with pytest.raises(ValueError):
        merge_separator_into_blank(m)


def test_grid_is_immutable():
    g = grid_from_path("ab")
    with pytest.raises(ValueError):
        g.probs[0, 0] = 1.0
    with pytest.raises(AttributeError):
        g.frame_duration_s = 1.0
