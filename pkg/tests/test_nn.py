import numpy as np
import pytest
import torch

from gcnstd.cn import SegmentFeatures
from gcnstd.nn import (
    BiLSTMStack,
    ModelConfig,
    bilstm_stack_forward,
    build_model,
    gradient_check,
    load_model,
    lstm_cell,
    pooling_ranges,
    project_document,
    project_query,
    save_model,
    score_segments,
)
from gcnstd.train import apply_transition_masking, masked_bce_loss, minlen_loss

import oracles

SMALL = ModelConfig(graphemes=("a", "b", "c", "d"), hidden_size=3, num_layers=2, cn_embed_dim=2, query_embed_dim=3, minlen_hidden=2)


def _features(rng, n, v=4):
    out = []
    for _ in range(n):
        ids = rng.permutation(v)[:3]
        p = np.sort(rng.dirichlet(np.ones(3)))[::-1]
        out.append(SegmentFeatures(float(rng.integers(1, 8)) * 0.02, tuple((int(i), float(x)) for i, x in zip(ids, p))))
    return out


def test_lstm_cell_zero_weights_gives_zero_hidden():
    H, D = 150, 300
    z = torch.zeros
    h, c = lstm_cell(z(4 * H, D), z(4 * H, H), z(4 * H), z(4 * H), torch.randn(D), z(H), z(H))
    assert h.shape == (H,) and not h.any()


@pytest.mark.parametrize("seed", range(5))
def test_lstm_cell_matches_f64_transcription(seed):
    g = torch.Generator().manual_seed(seed)
    H, D = 150, 300
    args = [torch.randn(s, generator=g) * 0.1 for s in [(4 * H, D), (4 * H, H), (4 * H,), (4 * H,), (D,), (H,), (H,)]]
    h, c = lstm_cell(*args)
    h_ref, c_ref = oracles.lstm_cell_f64(*[a.numpy() for a in args])
    assert np.abs(h.numpy() - h_ref).max() < 1e-6
    assert np.abs(c.numpy() - c_ref).max() < 1e-6


def test_lstm_cell_shape_mismatch():
    with pytest.raises(ValueError):
        lstm_cell(torch.zeros(8, 3), torch.zeros(8, 2), torch.zeros(8), torch.zeros(8), torch.zeros(4), torch.zeros(2), torch.zeros(2))


def test_zero_weight_stack_is_identity():
    stack = BiLSTMStack(300, 6)
    with torch.no_grad():
        for p in stack.parameters():
            p.zero_()
    x = torch.randn(7, 300)
    assert torch.equal(bilstm_stack_forward(stack, x), x)


@pytest.mark.parametrize("N", [1, 5])
def test_stack_matches_f64_reimplementation(N):
    torch.manual_seed(N)
    stack = BiLSTMStack(300, 6)
    x = torch.randn(N, 300)
    with torch.no_grad():
        out = bilstm_stack_forward(stack, x).double().numpy()
    ref = oracles.bilstm_stack_f64(stack.layers, x.numpy())
    assert np.abs(out - ref).max() < 1e-5


def test_stack_empty_sequence():
    stack = BiLSTMStack(8, 2)
    assert bilstm_stack_forward(stack, torch.zeros(0, 8)).shape == (0, 8)


def test_padded_batch_equals_single():
    torch.manual_seed(0)
    stack = BiLSTMStack(6, 2)
    a, b = torch.randn(5, 6), torch.randn(3, 6)
    batch = torch.zeros(2, 5, 6)
    batch[0], batch[1, :3] = a, b
    with torch.no_grad():
        out = stack(batch, torch.tensor([5, 3]))
        torch.testing.assert_close(out[0], bilstm_stack_forward(stack, a))
        torch.testing.assert_close(out[1, :3], bilstm_stack_forward(stack, b))


def test_pooling_ranges():
    assert pooling_ranges(1) == [(1, 1), (1, 1), (1, 1)]
    assert pooling_ranges(4) == [(1, 2), (2, 3), (3, 4)]
    for m in range(1, 40):
        for lo, hi in pooling_ranges(m):
            assert 1 <= lo <= hi <= m
    with pytest.raises(ValueError):
        pooling_ranges(0)


def test_single_grapheme_query_pools_one_position():
    model = build_model(SMALL, seed=1)
    qp = project_query(model, "c")
    assert qp.Q.shape == (3, SMALL.width)
    assert np.array_equal(qp.Q[0], qp.Q[1]) and np.array_equal(qp.Q[1], qp.Q[2])
    assert qp.min_len >= 0


def test_query_is_order_sensitive():
    model = build_model(SMALL, seed=2)
    assert not np.allclose(project_query(model, "ab").Q, project_query(model, "ba").Q)
    with pytest.raises(KeyError):
        project_query(model, "az")
    with pytest.raises(ValueError):
        project_query(model, "")


def test_document_projection_order_and_determinism():
    rng = np.random.default_rng(0)
    model = build_model(SMALL, seed=3)
    feats = _features(rng, 6)
    R = project_document(model, feats)
    assert R.shape == (6, SMALL.width) and R.dtype == np.float32
    assert np.array_equal(R, project_document(build_model(SMALL, seed=3), feats))
    assert not np.allclose(project_document(model, feats[::-1])[::-1], R)
    assert project_document(model, []).shape == (0, SMALL.width)
    with pytest.raises(KeyError):
        project_document(model, [SegmentFeatures(0.02, ((9, 1.0), (None, 0.0), (None, 0.0)))])


def test_score_examples():
    Q = np.eye(3, 4, dtype=np.float32)
    R = np.array([[1.0, 2.0, -1.0, 0.0]], dtype=np.float32)  # dots (1, 2, -1)
    assert score_segments(R, Q, 2.0, -3.0)[0] == pytest.approx(oracles.sigmoid(1.0), abs=1e-6)
    assert score_segments(R, Q, 2.0, -3.0)[0] == pytest.approx(0.7311, abs=1e-4)
    assert score_segments(np.zeros((4, 4), np.float32), Q, 1.0, 0.0).tolist() == [0.5] * 4
    r = score_segments(np.random.default_rng(0).normal(size=(5, 4)).astype(np.float32), Q, 0.0, 0.7)
    np.testing.assert_allclose(r, oracles.sigmoid(0.7), rtol=1e-6)
    assert score_segments(np.zeros((0, 4), np.float32), Q, 1.0, 0.0).shape == (0,)


def test_score_monotone_in_similarity():
    Q = np.tile(np.eye(1, 4, dtype=np.float32), (3, 1))
    R = np.array([[x, 0, 0, 0] for x in np.linspace(-3, 3, 13)], dtype=np.float32)
    r = score_segments(R, Q, 1.5, 0.2)
    assert (np.diff(r) > 0).all()


def test_gradient_check_quadratic():
    x = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64, requires_grad=True)
    A = torch.tensor([[2.0, 0.5, 0.0], [0.5, 1.0, -0.3], [0.0, -0.3, 3.0]], dtype=torch.float64)
    assert gradient_check([x], lambda: x @ A @ x + x.sum()) < 1e-7


def _full_model_loss(model, rng):
    """5-segment document, 3-grapheme query, masked BCE plus the weighted min-length term."""
    feats = _features(rng, 5)
    ids, probs, dur = model.features_to_tensors(feats)
    y = torch.tensor([0, 1, 1, 1, 0], dtype=torch.float64)
    w = torch.from_numpy(apply_transition_masking(y.numpy(), 1).astype(np.float64))
    w[0] = 1.0  # keep some negatives in the loss
    qids = torch.tensor([[0, 2, 1]])

    def loss():
        R = model.document_embeddings(ids[None], probs[None].double(), dur[None].double())
        Q, ml = model.query_embeddings(qids, torch.tensor([3]))
        r = torch.sigmoid(model.logits(R, Q))
        return masked_bce_loss(r, y[None], w[None]) + 0.1 * minlen_loss(ml, torch.tensor([3.0], dtype=torch.float64)).mean()

    return loss


def test_gradient_check_full_model():
    model = build_model(SMALL, seed=4).double()
    loss = _full_model_loss(model, np.random.default_rng(4))
    assert gradient_check(list(model.parameters()), loss) < 1e-3


def test_gradient_check_detects_corruption():
    model = build_model(SMALL, seed=5).double()
    loss = _full_model_loss(model, np.random.default_rng(5))
    params = list(model.parameters())

    def corrupted():
        grads = torch.autograd.grad(loss(), params, allow_unused=True)
        return [None if g is None else g * 1.5 for g in grads]

    assert gradient_check(params, loss, analytic=corrupted) > 0.1


def test_gradient_check_non_finite():
    x = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
    with pytest.raises(FloatingPointError):
        gradient_check([x], lambda: x.sum() * float("nan"))


def test_checkpoint_roundtrip(tmp_path):
    model = build_model(SMALL, seed=6)
    save_model(model, tmp_path / "ckpt")
    back = load_model(tmp_path / "ckpt")
    assert back.config == model.config
    for (k, a), (k2, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert k == k2 and torch.equal(a, b)
    feats = _features(np.random.default_rng(6), 4)
    assert np.array_equal(project_document(model, feats), project_document(back, feats))
    blob = (tmp_path / "ckpt" / "params.bin").read_bytes()
    assert len(blob) == 4 * sum(p.numel() for p in model.state_dict().values())


def test_build_model_is_seeded_and_leaves_global_rng():
    state = torch.random.get_rng_state()
    a, b = build_model(SMALL, 7), build_model(SMALL, 7)
    assert torch.equal(torch.random.get_rng_state(), state)
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    assert a.alpha.item() == 1.0 and a.beta.item() == 0.0
