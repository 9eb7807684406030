"""Straight-line reference implementations used only by the tests.

Written with explicit Python loops over patches, markers and pairs so that
they share no code path with the vectorised library.
"""

import itertools
import math

import numpy as np


def gelu(x):
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def affine(W, b, x):
    out = [sum(W[i][j] * x[j] for j in range(len(x))) for i in range(len(W))]
    if b is not None:
        out = [o + b[i] for i, o in enumerate(out)]
    return out


def softmax(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return [x / s for x in e]


def slice_norm(x, gamma, beta, eps):
    d = len(x)
    mu = sum(x) / d
    sd = math.sqrt(sum((v - mu) ** 2 for v in x) / d) + eps
    return [(v - mu) / sd * gamma[i] + beta[i] for i, v in enumerate(x)]


def _p(params, name):
    t = getattr(params, name)
    return None if t is None else t.data.tolist()


def contract(H, params):
    W, b = _p(params, "bottleneck_w"), _p(params, "bottleneck_b")
    return [[[gelu(v) for v in affine(W, b, h_km)] for h_km in h_k] for h_k in H.tolist()]


def sdpa(h, params):
    """Per-patch attention over markers; returns (a, A) as nested lists."""
    Wq, Wk, Wv = _p(params, "q_w"), _p(params, "k_w"), _p(params, "v_w")
    bq, bk, bv = _p(params, "q_b"), _p(params, "k_b"), _p(params, "v_b")
    d = len(Wq)
    a_out, A_out = [], []
    for h_k in h:
        Q = [affine(Wq, bq, x) for x in h_k]
        Km = [affine(Wk, bk, x) for x in h_k]
        V = [affine(Wv, bv, x) for x in h_k]
        M = len(h_k)
        A = []
        for i in range(M):
            scores = [sum(Q[i][c] * Km[j][c] for c in range(d)) / math.sqrt(d) for j in range(M)]
            A.append(softmax(scores))
        a = [[sum(A[i][j] * V[j][c] for j in range(M)) for c in range(d)] for i in range(M)]
        a_out.append(a)
        A_out.append(A)
    return a_out, A_out


def fuse(H, params):
    """Full fusion block; returns (H_hat (K, d_emb), A (K, M, M)) as arrays."""
    eps = params.eps
    h_t = contract(H, params)
    a, A = sdpa(h_t, params)
    g1, b1 = _p(params, "gamma_sdpa"), _p(params, "beta_sdpa")
    g2, b2 = _p(params, "gamma_bottleneck"), _p(params, "beta_bottleneck")
    Wi, bi = _p(params, "inverse_w"), _p(params, "inverse_b")
    Hl = H.tolist()
    H_hat = []
    for k in range(len(Hl)):
        acc = None
        for m in range(len(Hl[k])):
            x = [a[k][m][c] + h_t[k][m][c] for c in range(len(h_t[k][m]))]
            x = slice_norm(x, g1, b1, eps)
            x = [gelu(v) for v in affine(Wi, bi, x)]
            x = [x[c] + Hl[k][m][c] for c in range(len(x))]
            x = slice_norm(x, g2, b2, eps)
            acc = x if acc is None else [p + q for p, q in zip(acc, x)]
        H_hat.append([v / len(Hl[k]) for v in acc])
    return np.array(H_hat), np.array(A)


def gated_attention(H_hat, theta):
    V, Vb, U, Ub = (_p(theta, n) for n in ("V", "V_b", "U", "U_b"))
    w = [row[0] for row in _p(theta, "w")]
    wb = _p(theta, "w_b")[0]
    scores = []
    for h in np.asarray(H_hat).tolist():
        t = [math.tanh(v) for v in affine(V, Vb, h)]
        s = [sigmoid(v) for v in affine(U, Ub, h)]
        scores.append(sum(w[i] * t[i] * s[i] for i in range(len(w))) + wb)
    return np.array(softmax(scores))


def pool_and_classify(H_hat, theta, phi):
    a = gated_attention(H_hat, theta)
    H = np.asarray(H_hat).tolist()
    h_bag = [sum(a[k] * H[k][c] for k in range(len(H))) for c in range(len(H[0]))]
    logits = affine(_p(phi, "W"), _p(phi, "b"), h_bag)
    return np.array(h_bag), a, np.array(logits)


def survival(hazards):
    out, s = [], 1.0
    for h in hazards:
        s *= 1.0 - h
        out.append(s)
    return out


def nll(hazards, censored, b, floor=1e-12):
    S = survival(hazards)
    s_prev = 1.0 if b == 0 else S[b - 1]
    if censored:
        return -math.log(max(S[b], floor))
    return -math.log(max(s_prev, floor)) - math.log(max(hazards[b], floor))


def c_index(risks, times, censored):
    num = den = 0.0
    n = len(risks)
    for i, j in itertools.permutations(range(n), 2):
        if times[i] < times[j] and not censored[i]:
            den += 1
            if risks[i] < risks[j]:
                num += 1
            elif risks[i] == risks[j]:
                num += 0.5
    return num / den if den else float("nan")


def morans_i(values, mask=None):
    values = np.asarray(values, dtype=float)
    mask = np.ones(values.shape, bool) if mask is None else np.asarray(mask, bool)
    cells = [(r, c) for r in range(values.shape[0]) for c in range(values.shape[1]) if mask[r, c]]
    xbar = sum(values[c] for c in cells) / len(cells)
    num = w = 0.0
    for p in cells:
        for q in cells:
            if abs(p[0] - q[0]) + abs(p[1] - q[1]) == 1:
                w += 1
                num += (values[p] - xbar) * (values[q] - xbar)
    den = sum((values[c] - xbar) ** 2 for c in cells)
    return len(cells) / w * num / den


def otsu(hist):
    """Exhaustive between-class variance maximisation in exact arithmetic."""
    from fractions import Fraction

    hist = [int(h) for h in hist]
    total = sum(hist)
    best, best_t = None, None
    for t in range(len(hist)):
        n0 = sum(hist[:t + 1])
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = Fraction(sum(i * hist[i] for i in range(t + 1)), n0)
        mu1 = Fraction(sum(i * hist[i] for i in range(t + 1, len(hist))), n1)
        var = Fraction(n0 * n1, total * total) * (mu0 - mu1) ** 2
        if best is None or var > best:
            best, best_t = var, t
    return best_t
