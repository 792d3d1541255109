"""Independent reference computations used by the tests.

Everything here is plain float64 numpy written in the most literal form
available (explicit loops, closed-form math) and never calls into the
package's tensor engine.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def gelu_tanh(x: float) -> float:
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def rmsnorm_vec(v: np.ndarray, scale=None, eps: float = 1e-6) -> np.ndarray:
    r = 1.0 / math.sqrt(sum(float(x) * float(x) for x in v) / len(v) + eps)
    out = np.array([x * r for x in v])
    return out if scale is None else out * scale


def rope_vec(v: np.ndarray, pos: int, base: float = 10000.0) -> np.ndarray:
    """Rotate pairs (i, i + d/2) by angle pos * base^(-2i/d)."""
    d = len(v)
    h = d // 2
    out = np.empty(d)
    for i in range(h):
        theta = pos * base ** (-2.0 * i / d)
        c, s = math.cos(theta), math.sin(theta)
        out[i] = v[i] * c - v[i + h] * s
        out[i + h] = v[i + h] * c + v[i] * s
    return out


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _arr(p):
    return np.asarray(p.data, dtype=np.float64)


def attention_oracle(hq, hk, hv, wq, wk, wv, wo, n_heads):
    """Single sequence (T, D) causal rotary attention with loops over
    heads, queries and keys."""
    T, D = hq.shape
    d = D // n_heads
    q = hq @ wq
    k = hk @ wk
    v = hv @ wv
    out = np.zeros((T, D))
    probs = np.zeros((n_heads, T, T))
    for h in range(n_heads):
        sl = slice(h * d, (h + 1) * d)
        qs = [rope_vec(q[t, sl], t) for t in range(T)]
        ks = [rope_vec(k[t, sl], t) for t in range(T)]
        for t in range(T):
            scores = [float(qs[t] @ ks[s]) / math.sqrt(d) for s in range(t + 1)]
            m = max(scores)
            e = [math.exp(x - m) for x in scores]
            z = sum(e)
            for s in range(t + 1):
                probs[h, t, s] = e[s] / z
                out[t, sl] += probs[h, t, s] * v[s, sl]
    return out @ wo, probs


def block_oracle(xq, xk, xv, xr, blk):
    """Decoupled block on one sequence."""
    def norm_rows(x, scale):
        return np.stack([rmsnorm_vec(r, scale) for r in x])

    an = _arr(blk.attn_norm)
    attn, probs = attention_oracle(
        norm_rows(xq, an), norm_rows(xk, an), norm_rows(xv, an),
        _arr(blk.wq), _arr(blk.wk), _arr(blk.wv), _arr(blk.wo), blk.n_heads,
    )
    attn_out = attn + xr
    h = norm_rows(attn_out, _arr(blk.ffn_norm))
    g = h @ _arr(blk.w_gate)
    ffn = ((g * sigmoid(g)) * (h @ _arr(blk.w_up))) @ _arr(blk.w_down)
    return ffn + attn_out, probs


def generate_dw_oracle(x, da):
    """Pseudocode weight generator for one sequence: (C, T, J)."""
    C, J = da.a.shape
    a = _arr(da.a)
    T = x.shape[0]
    if da.w1 is None:
        return np.broadcast_to(a[:, None, :], (C, T, J)).copy()
    w1, w2 = _arr(da.w1), _arr(da.w2)
    dw = np.zeros((C, T, J))
    for t in range(T):
        hidden = np.array([gelu_tanh(u) for u in rmsnorm_vec(x[t]) @ w1])
        flat = hidden @ w2 + a.reshape(-1)
        # 'T (C L) -> C T L'
        for c in range(C):
            for j in range(J):
                dw[c, t, j] = flat[c * J + j]
    return dw


def da_oracle(Xs, da):
    dw = generate_dw_oracle(Xs[-1], da)
    C = dw.shape[0]
    if da.post_norm is not None:
        pre = _arr(da.pre_norm)
        post = _arr(da.post_norm)
        normed = [np.stack([rmsnorm_vec(r, pre[j]) for r in X]) for j, X in enumerate(Xs)]
        outs = []
        for c in range(C):
            agg = sum(dw[c, :, j:j + 1] * normed[j] for j in range(len(Xs)))
            outs.append(np.stack([rmsnorm_vec(r, post) for r in agg]) + Xs[-1])
        return outs
    return [sum(dw[c, :, j:j + 1] * Xs[j] for j in range(len(Xs))) for c in range(C)]


def model_oracle(model, tokens):
    """Logits (T, V) for one token sequence, straight-line."""
    cfg = model.config
    x = _arr(model.embed)[np.asarray(tokens)]
    Xs = [x]
    xq = xk = xv = xr = x
    for i, blk in enumerate(model.blocks, start=1):
        x, _ = block_oracle(xq, xk, xv, xr, blk)
        Xs.append(x)
        da = model.das.get(i)
        if da is None:
            xq = xk = xv = xr = x
            continue
        outs = da_oracle([Xs[j] for j in da.indices], da)
        if len(outs) == 1:
            xq = xk = xv = xr = outs[0]
        else:
            xq, xk, xv, xr = (o if on else x for o, on in zip(outs, cfg.ways))
    h = np.stack([rmsnorm_vec(r, _arr(model.final_norm)) for r in xr])
    return h @ _arr(model.w_out)


def realloc_oracle(L: int, D_f: int) -> list[Fraction]:
    """Exact linear ramp endpoints 0.5*D_f .. 1.5*D_f."""
    if L == 1:
        return [Fraction(D_f)]
    return [Fraction(D_f, 2) + Fraction(D_f) * (i - 1) / (L - 1) for i in range(1, L + 1)]


def dilated_sets_enumerator(L: int, k: int, p: int) -> dict[int, tuple[int, ...] | None]:
    """Every k-th block output counted back from the current layer, plus
    the embedding; DA modules only after every p-th block."""
    out = {}
    for i in range(1, L + 1):
        if i % p != 0:
            out[i] = None
            continue
        picked = [0]
        j = i
        while j >= 1:
            picked.append(j)
            j -= k
        out[i] = tuple(sorted(set(picked)))
    return out


def cosine_oracle(a: np.ndarray, b: np.ndarray) -> tuple[float, int]:
    """Mean cosine over positions of (B, T, D) arrays, skipping zero vectors."""
    vals, skipped = [], 0
    B, T, _ = a.shape
    for bi in range(B):
        for t in range(T):
            u, w = a[bi, t], b[bi, t]
            nu = math.sqrt(sum(x * x for x in u))
            nw = math.sqrt(sum(x * x for x in w))
            if nu == 0 or nw == 0:
                skipped += 1
                continue
            vals.append(sum(x * y for x, y in zip(u, w)) / (nu * nw))
    return (sum(vals) / len(vals) if vals else float("nan")), skipped


def head_activation_oracle(att: np.ndarray, tokens: np.ndarray, sinks) -> float:
    B, H, T, S = att.shape
    active = 0
    for b in range(B):
        for h in range(H):
            for t in range(T):
                row = att[b, h, t]
                best, arg = -math.inf, 0
                for s in range(S):
                    if row[s] > best:
                        best, arg = row[s], s
                if arg not in (0, 1) and int(tokens[b, arg]) not in sinks:
                    active += 1
    return active / (B * H * T)


def rectified_oracle(traces):
    """Per (way, i, j) mean and population std of weight * mean ||X_j||."""
    L = len(traces[0].outputs)
    norm_sum = [0.0] * (L + 1)
    npos = 0
    for tr in traces:
        xs = [tr.embedding] + list(tr.outputs)
        B, T, _ = xs[0].shape
        for j, X in enumerate(xs):
            for b in range(B):
                for t in range(T):
                    norm_sum[j] += math.sqrt(sum(float(v) * float(v) for v in X[b, t]))
        npos += B * T
    norms = [s / npos for s in norm_sum]
    result = {}
    for i in range(L):
        if traces[0].weights[i] is None:
            continue
        idx = traces[0].indices[i]
        C = traces[0].weights[i].shape[0]
        for c in range(C):
            for jj, j in enumerate(idx):
                vals = []
                for tr in traces:
                    w = tr.weights[i]
                    for b in range(w.shape[1]):
                        for t in range(w.shape[2]):
                            vals.append(float(w[c, b, t, jj]) * norms[j])
                m = sum(vals) / len(vals)
                var = sum((v - m) ** 2 for v in vals) / len(vals)
                result[(c, i + 1, j)] = (m, math.sqrt(var))
    return result, norms


def adamw_scalar(p, grads, lr, b1=0.9, b2=0.95, eps=1e-8, wd=0.1):
    """Hand-rolled scalar AdamW with decoupled decay, no clipping."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        p = p - lr * (mh / (math.sqrt(vh) + eps) + wd * p)
    return p


def memory_table_oracle(L, D, T, N, B):
    """Peak activation bytes written out term by term."""
    layers = 2 * L * B * T * D
    last = B * T * D * (34 + 6 * N * T / D)
    tfm = layers + last
    dense = tfm + 2 * L * B * T * D
    mudd = tfm + 6 * B * T * D + 2 * L * B * T * D
    return tfm, dense, mudd
