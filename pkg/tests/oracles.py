"""Independent reference implementations used as test oracles.

These are deliberately written differently from the package code: plain
Python loops, 64-bit floats, no shared helpers.
"""

import itertools
import math

import numpy as np


def argmax_path(probs):
    path = []
    for row in np.asarray(probs, dtype=np.float64).tolist():
        best = 0
        for j, v in enumerate(row):
            if v > row[best]:
                best = j
        path.append(best)
    return path


def one_best_brute(probs, blank):
    """Run-length encode the argmax path; blank runs attach to the preceding grapheme run."""
    segs = []
    t = 0
    for sym, run in itertools.groupby(argmax_path(probs)):
        n = len(list(run))
        if sym == blank:
            if segs:
                segs[-1][2] = t + n + 1
        else:
            segs.append([sym, t + 1, t + n + 1])
        t += n
    return [s[0] for s in segs], [(s[1], s[2]) for s in segs]


def satisfies_eq1(path, blank, hyp, align, T):
    """Check the frame-alignment conditions directly on an argmax path."""
    if len(hyp) != len(align):
        return False
    prev_e = 1
    for h, (b, e) in zip(hyp, align):
        if not (1 <= b < e <= T + 1 and prev_e <= b):
            return False
        frames = path[b - 1 : e - 1]
        d = b
        while d < e and frames[d - b] == h:
            d += 1
        if d == b or any(f != blank for f in frames[d - b :]):
            return False
        prev_e = e
    return True


def ctc_collapse(path, blank):
    out = []
    prev = None
    for s in path:
        if s != blank and s != prev:
            out.append(s)
        prev = s
    return out


def confusion_brute(probs, blank, align):
    """Blank-free average posteriors per segment, by explicit summation."""
    p = np.asarray(probs, dtype=np.float64).tolist()
    V = len(p[0]) if p else 0
    out = []
    for b, e in align:
        num = [0.0] * V
        den = 0.0
        for t in range(b - 1, e - 1):
            for s in range(V):
                if s != blank:
                    num[s] += p[t][s]
                    den += p[t][s]
        out.append({s: num[s] / den for s in range(V) if s != blank})
    return out


def lstm_cell_f64(W_ih, W_hh, b_ih, b_hh, x, h, c):
    """Textbook LSTM step in float64, gates in (i, f, g, o) order."""
    W_ih, W_hh, b_ih, b_hh, x, h, c = (np.asarray(a, dtype=np.float64) for a in (W_ih, W_hh, b_ih, b_hh, x, h, c))
    H = h.shape[-1]
    z = W_ih @ x + b_ih + W_hh @ h + b_hh
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    i, f, g, o = sig(z[:H]), sig(z[H : 2 * H]), np.tanh(z[2 * H : 3 * H]), sig(z[3 * H :])
    c2 = f * c + i * g
    return o * np.tanh(c2), c2


def bilstm_stack_f64(layers, x):
    """Residual biLSTM stack from per-layer torch ``nn.LSTM`` weights, run step by step."""
    x = np.asarray(x, dtype=np.float64)
    for lstm in layers:
        H = lstm.hidden_size
        w = {k: v.detach().double().numpy() for k, v in lstm.named_parameters()}
        N = len(x)
        fwd = np.zeros((N, H))
        h, c = np.zeros(H), np.zeros(H)
        for t in range(N):
            h, c = lstm_cell_f64(w["weight_ih_l0"], w["weight_hh_l0"], w["bias_ih_l0"], w["bias_hh_l0"], x[t], h, c)
            fwd[t] = h
        bwd = np.zeros((N, H))
        h, c = np.zeros(H), np.zeros(H)
        for t in reversed(range(N)):
            h, c = lstm_cell_f64(
                w["weight_ih_l0_reverse"], w["weight_hh_l0_reverse"], w["bias_ih_l0_reverse"], w["bias_hh_l0_reverse"], x[t], h, c
            )
            bwd[t] = h
        x = x + np.concatenate([fwd, bwd], axis=1)
    return x


def twv_brute(hits_matched, n_true, theta, speech_s, beta=999.9):
    """``hits_matched``: list of (term, score, is_correct)."""
    total = 0.0
    for term, nt in n_true.items():
        corr = sum(1 for t, s, ok in hits_matched if t == term and s >= theta and ok)
        fa = sum(1 for t, s, ok in hits_matched if t == term and s >= theta and not ok)
        total += (1 - corr / nt) + beta * fa / (speech_s - nt)
    return 1 - total / len(n_true)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))
