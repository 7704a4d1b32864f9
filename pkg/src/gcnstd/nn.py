"""Dual-pipeline deep biLSTM model scoring confusion-network segments against a query.

Document pipeline: segment features -> affine -> residual biLSTM stack -> R.
Query pipeline: grapheme embeddings G -> affine -> residual biLSTM stack ->
three max-pooled vectors Q (first half, middle, second half), plus a small
biLSTM over G regressing the minimum occurrence length in segments.

Scores are ``sigmoid(alpha * max_k R_i . Q_k + beta)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
import torch
from torch import Tensor
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .cn import TOP_K, SegmentFeatures

NUM_QUERY_VECTORS = 3
CHECKPOINT_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


@dataclass
class ModelConfig:
    graphemes: tuple[str, ...] = ()
    hidden_size: int = 150  # per direction; stack width is 2 * hidden_size
    num_layers: int = 6
    cn_embed_dim: int = 8
    query_embed_dim: int = 32
    minlen_hidden: int = 20

    def __post_init__(self):
        self.graphemes = tuple(self.graphemes)
        if len(set(self.graphemes)) != len(self.graphemes):
            raise ValueError("duplicate graphemes in model vocabulary")

    @property
    def width(self) -> int:
        return 2 * self.hidden_size

    @property
    def feature_dim(self) -> int:
        return 1 + TOP_K * (self.cn_embed_dim + 1)


def lstm_cell(w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor, x: Tensor, h: Tensor, c: Tensor):
    """One LSTM step with torch's gate layout (input, forget, candidate, output)."""
    if w_ih.shape[1] != x.shape[-1] or w_hh.shape[1] != h.shape[-1]:
        raise ValueError("lstm_cell: input or hidden width does not match weights")
    gates = x @ w_ih.T + b_ih + h @ w_hh.T + b_hh
    i, f, g, o = gates.chunk(4, dim=-1)
    i, f, o = torch.sigmoid(i), torch.sigmoid(f), torch.sigmoid(o)
    g = torch.tanh(g)
    c_new = f * c + i * g
    return o * torch.tanh(c_new), c_new


class BiLSTMStack(torch.nn.Module):
    """Bidirectional LSTM layers of constant width with a residual add per layer."""

    def __init__(self, width: int, num_layers: int):
        super().__init__()
        if width % 2:
            raise ValueError("stack width must be even")
        self.layers = torch.nn.ModuleList(
            torch.nn.LSTM(width, width // 2, batch_first=True, bidirectional=True) for _ in range(num_layers)
        )

    def forward(self, x: Tensor, lengths: Optional[Tensor] = None) -> Tensor:
        if x.shape[1] == 0:
            return x
        n = x.shape[1]
        packed = lengths is not None and bool((lengths < n).any())
        for lstm in self.layers:
            if packed:
                seq = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
                out, _ = lstm(seq)
                out, _ = pad_packed_sequence(out, batch_first=True, total_length=n)
            else:
                out, _ = lstm(x)
            x = x + out
        return x


def bilstm_stack_forward(stack: BiLSTMStack, inputs) -> Tensor:
    """Run an unbatched ``N x width`` sequence through ``stack``."""
    x = torch.as_tensor(inputs)
    return stack(x.unsqueeze(0))[0]


def pooling_ranges(m: int) -> list[tuple[int, int]]:
    """1-indexed inclusive position ranges pooled into Q_1, Q_2, Q_3 for a length-``m`` query."""
    if m < 1:
        raise ValueError("query must have at least one grapheme")
    first = (1, math.ceil(m / 2))
    lo, hi = math.ceil(m / 4) + 1, min(math.ceil(3 * m / 4), m)
    middle = (min(lo, hi), hi)
    second = (m // 2 + 1, m)
    return [first, middle, second]


class QueryProjection(NamedTuple):
    Q: np.ndarray  # (3, width)
    min_len: float


class STDModel(torch.nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        v, d = len(config.graphemes), config.width
        self.cn_grapheme_embedding = torch.nn.Embedding(v + 1, config.cn_embed_dim)  # row v = empty slot
        self.cn_input_projection = torch.nn.Linear(config.feature_dim, d)
        self.cn_stack = BiLSTMStack(d, config.num_layers)
        self.query_grapheme_embedding = torch.nn.Embedding(max(v, 1), config.query_embed_dim)
        self.query_input_projection = torch.nn.Linear(config.query_embed_dim, d)
        self.query_stack = BiLSTMStack(d, config.num_layers)
        self.alpha = torch.nn.Parameter(torch.tensor(1.0))
        self.beta = torch.nn.Parameter(torch.tensor(0.0))
        self.minlen_lstm = torch.nn.LSTM(config.query_embed_dim, config.minlen_hidden, batch_first=True, bidirectional=True)
        self.minlen_head = torch.nn.Linear(2 * config.minlen_hidden, 1)
        self._index = {g: i for i, g in enumerate(config.graphemes)}

    @property
    def graphemes(self) -> tuple[str, ...]:
        return self.config.graphemes

    def encode_term(self, term: str) -> list[int]:
        if not term:
            raise ValueError("empty query term")
        try:
            return [self._index[g] for g in term]
        except KeyError as exc:
            raise KeyError(f"grapheme {exc.args[0]!r} of term {term!r} not in model vocabulary") from None

    # batched tensor paths, used by training and by the single-item wrappers below

    def document_embeddings(self, ids: Tensor, probs: Tensor, durations: Tensor, lengths: Optional[Tensor] = None) -> Tensor:
        """``ids``/``probs``: (B, N, 3); ``durations``: (B, N) -> R: (B, N, width)."""
        emb = self.cn_grapheme_embedding(ids)
        slots = torch.cat([emb, probs.unsqueeze(-1).to(emb.dtype)], dim=-1).flatten(2)
        feats = torch.cat([durations.unsqueeze(-1).to(emb.dtype), slots], dim=-1)
        return self.cn_stack(self.cn_input_projection(feats), lengths)

    def query_embeddings(self, ids: Tensor, lengths: Tensor) -> tuple[Tensor, Tensor]:
        """``ids``: (B, M) padded grapheme ids -> (Q: (B, 3, width), raw min-length: (B,))."""
        g = self.query_grapheme_embedding(ids)
        out = self.query_stack(self.query_input_projection(g), lengths)
        b, m = ids.shape
        mask = torch.zeros(b, NUM_QUERY_VECTORS, m, dtype=torch.bool)
        for row, n in enumerate(lengths.tolist()):
            for k, (lo, hi) in enumerate(pooling_ranges(n)):
                mask[row, k, lo - 1 : hi] = True
        expanded = out.unsqueeze(1).expand(b, NUM_QUERY_VECTORS, m, out.shape[-1])
        q = expanded.masked_fill(~mask.unsqueeze(-1), float("-inf")).amax(dim=2)
        seq = pack_padded_sequence(g, lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, (h_n, _) = self.minlen_lstm(seq)
        min_len = self.minlen_head(torch.cat([h_n[0], h_n[1]], dim=-1)).squeeze(-1)
        return q, min_len

    def logits(self, R: Tensor, Q: Tensor) -> Tensor:
        return score_logits(R, Q, self.alpha, self.beta)

    def features_to_tensors(self, features: Sequence[SegmentFeatures]):
        v = len(self.graphemes)
        n = len(features)
        ids = np.full((n, TOP_K), v, dtype=np.int64)
        probs = np.zeros((n, TOP_K), dtype=np.float32)
        dur = np.zeros(n, dtype=np.float32)
        for i, f in enumerate(features):
            dur[i] = f.duration_s
            for k, (gid, p) in enumerate(f.top):
                if gid is not None:
                    if not 0 <= gid < v:
                        raise KeyError(f"segment {i + 1}: grapheme id {gid} outside model vocabulary")
                    ids[i, k] = gid
                probs[i, k] = p
        return torch.from_numpy(ids), torch.from_numpy(probs), torch.from_numpy(dur)


def score_logits(R: Tensor, Q: Tensor, alpha, beta) -> Tensor:
    """``alpha * max_k R_i . Q_k + beta`` for R: (..., N, D), Q: (..., K, D)."""
    sims = R @ Q.transpose(-1, -2)
    return alpha * sims.amax(dim=-1) + beta


def score_segments(R, Q, alpha, beta):
    """Calibrated occurrence probability per segment. Accepts tensors or arrays."""
    if isinstance(R, np.ndarray) or isinstance(Q, np.ndarray):
        out = score_segments(torch.as_tensor(np.asarray(R)), torch.as_tensor(np.asarray(Q)), alpha, beta)
        return out.numpy()
    if R.shape[-2] == 0:
        return R.new_zeros(R.shape[:-1])
    return torch.sigmoid(score_logits(R, Q, alpha, beta))


@torch.no_grad()
def project_document(model: STDModel, features: Sequence[SegmentFeatures]) -> np.ndarray:
    """R for one document, ``(N, width)`` float32. Independent of any query."""
    if not features:
        return np.zeros((0, model.config.width), dtype=np.float32)
    ids, probs, dur = model.features_to_tensors(features)
    dtype = next(model.parameters()).dtype
    R = model.document_embeddings(ids[None], probs[None].to(dtype), dur[None].to(dtype))[0]
    return R.float().numpy()


@torch.no_grad()
def project_query(model: STDModel, term: str) -> QueryProjection:
    ids = torch.tensor([model.encode_term(term)], dtype=torch.int64)
    q, min_len = model.query_embeddings(ids, torch.tensor([ids.shape[1]]))
    return QueryProjection(q[0].float().numpy(), max(0.0, float(min_len[0])))


def build_model(config: ModelConfig, seed: int = 0) -> STDModel:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        return STDModel(config)
    finally:
        torch.random.set_rng_state(gen_state)


def gradient_check(
    params: Sequence[Tensor],
    loss_fn: Callable[[], Tensor],
    eps: float = 1e-4,
    analytic: Optional[Callable[[], Sequence[Tensor]]] = None,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between analytic gradients and central differences.

    ``analytic`` defaults to autograd on ``loss_fn``. Run it on float64
    parameters; the relative error of each entry is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = list(params)
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"loss is not finite: {loss.item()}")
    grads = list(analytic()) if analytic is not None else list(torch.autograd.grad(loss, params, allow_unused=True))
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g.detach()
            flat, gflat = p.view(-1), g.reshape(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                up = loss_fn().item()
                flat[j] = orig - eps
                down = loss_fn().item()
                flat[j] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise FloatingPointError("loss became non-finite under perturbation")
                num = (up - down) / (2 * eps)
                a = gflat[j].item()
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst


# checkpoints: manifest.json + one little-endian float32 blob in manifest order

def write_tensor_blob(path, arrays: Sequence[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_tensor_blob(path, shapes: Sequence[Sequence[int]]) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    out, offset = [], 0
    for shape in shapes:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(data):
            raise ValueError(f"{path}: tensor blob is truncated")
        out.append(np.frombuffer(data[offset:end], dtype="<f4").reshape(shape).copy())
        offset = end
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes in tensor blob")
    return out


def save_model(model: STDModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    manifest = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "architecture": {k: v for k, v in asdict(model.config).items() if k != "graphemes"},
        "vocabulary": list(model.config.graphemes),
        "parameters": [{"name": k, "shape": list(t.shape)} for k, t in state.items()],
    }
    write_tensor_blob(directory / BLOB_NAME, [t.detach().cpu().float().numpy() for t in state.values()])
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def load_model(directory) -> STDModel:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_NAME).read_text(encoding="utf-8"))
    if manifest.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {manifest.get('schema_version')!r}")
    config = ModelConfig(graphemes=tuple(manifest["vocabulary"]), **manifest["architecture"])
    model = STDModel(config)
    specs = manifest["parameters"]
    arrays = read_tensor_blob(directory / BLOB_NAME, [s["shape"] for s in specs])
    state = {s["name"]: torch.from_numpy(a) for s, a in zip(specs, arrays)}
    model.load_state_dict(state, strict=True)
    model.eval()
    return model
