"""Independent reference implementations used as test oracles.

Everything here is written as plain per-token / per-pair loops against the
defining formulas, sharing no aggregation code with the package kernels.
Slow on purpose; only run on small fixtures.
"""

from __future__ import annotations

import math

import numpy as np

from hybridattn.attention import DEN_GUARD, apply_feature_map

__all__ = [
    "matmul_loops",
    "softmax_row_mp",
    "softmax_attention_loops",
    "linear_attention_loops",
    "hybrid_attention_loops",
    "implied_weights",
    "feature_map_loops",
    "block_forward_composed",
    "attention_flops_tally",
]


def matmul_loops(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, kk = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(kk):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def softmax_row_mp(row, dps: int = 50):
    """Row softmax evaluated in arbitrary precision (mpmath)."""
    import mpmath

    with mpmath.workdps(dps):
        exps = [mpmath.exp(mpmath.mpf(float(x))) for x in row]
        total = mpmath.fsum(exps)
        return np.array([float(e / total) for e in exps])


def _sim_exp(q_i, k_j, d):
    return math.exp(float(np.dot(q_i, k_j)) / math.sqrt(d))


def softmax_attention_loops(q, k, v):
    """Per-query weighted average with sim = exp(q k / sqrt d), stabilized."""
    heads, n, d = q.shape
    m = v.shape[2]
    out = np.zeros((n, heads * m))
    for h in range(heads):
        for i in range(n):
            logits = [float(np.dot(q[h, i], k[h, j])) / math.sqrt(d) for j in range(n)]
            peak = max(logits)
            w = [math.exp(l - peak) for l in logits]
            den = sum(w)
            for c in range(m):
                out[i, h * m + c] = sum(w[j] * v[h, j, c] for j in range(n)) / den
    return out


def linear_attention_loops(q, k, v, phi_q, phi_k):
    """Quadratic-form evaluation of the feature-map kernel, pair by pair."""
    heads, n, _ = q.shape
    m = v.shape[2]
    out = np.zeros((n, heads * m))
    for h in range(heads):
        f = apply_feature_map(phi_q[h], q[h])
        g = apply_feature_map(phi_k[h], k[h])
        for i in range(n):
            sims = [float(np.dot(f[i], g[j])) for j in range(n)]
            den = sum(sims) + DEN_GUARD
            for c in range(m):
                out[i, h * m + c] = sum(sims[j] * v[h, j, c] for j in range(n)) / den
    return out


def hybrid_attention_loops(q, k, v, phi_q, phi_k, part, mode="literal"):
    """Term-by-term evaluation of the mixture kernel, both stabilizer modes."""
    heads, n, d = q.shape
    m = v.shape[2]
    s_idx = list(part.softmax_indices)
    l_idx = list(part.linear_indices)
    out = np.zeros((n, heads * m))
    for h in range(heads):
        f = apply_feature_map(phi_q[h], q[h])
        g = apply_feature_map(phi_k[h], k[h])
        for i in range(n):
            if s_idx:
                exps = {j: float(np.dot(q[h, i], k[h, j])) / math.sqrt(d) for j in s_idx}
                c_i = max(exps.values())
                ew = {j: math.exp(exps[j] - c_i) for j in s_idx}
            else:
                ew, c_i = {}, 0.0
            scale = math.exp(-c_i) if (mode == "consistent" and s_idx) else 1.0
            lw = {j: scale * float(np.dot(f[i], g[j])) for j in l_idx}
            den = sum(ew.values()) + sum(lw.values()) + DEN_GUARD
            for c in range(m):
                num = sum(ew[j] * v[h, j, c] for j in s_idx) + sum(
                    lw[j] * v[h, j, c] for j in l_idx
                )
                out[i, h * m + c] = num / den
    return out


def implied_weights(q, k, v, phi_q=None, phi_k=None, part=None, mode="literal",
                    kind="softmax"):
    """Per-query mixing weights over every key, reconstructed term by term.

    Returns (heads, n, n); the kernels' outputs equal these weights applied
    to v, and each row sums to 1 up to the denominator guard.
    """
    heads, n, d = q.shape
    w = np.zeros((heads, n, n))
    for h in range(heads):
        if kind != "softmax":
            f = apply_feature_map(phi_q[h], q[h])
            g = apply_feature_map(phi_k[h], k[h])
        for i in range(n):
            terms = np.zeros(n)
            if kind == "softmax":
                logits = [float(np.dot(q[h, i], k[h, j])) / math.sqrt(d) for j in range(n)]
                peak = max(logits)
                terms = np.array([math.exp(l - peak) for l in logits])
                den = terms.sum()
            elif kind == "linear":
                terms = np.array([float(np.dot(f[i], g[j])) for j in range(n)])
                den = terms.sum() + DEN_GUARD
            else:
                s_idx = list(part.softmax_indices)
                l_idx = list(part.linear_indices)
                if s_idx:
                    exps = {j: float(np.dot(q[h, i], k[h, j])) / math.sqrt(d) for j in s_idx}
                    c_i = max(exps.values())
                    for j in s_idx:
                        terms[j] = math.exp(exps[j] - c_i)
                else:
                    c_i = 0.0
                scale = math.exp(-c_i) if (mode == "consistent" and s_idx) else 1.0
                for j in l_idx:
                    terms[j] = scale * float(np.dot(f[i], g[j]))
                den = terms.sum() + DEN_GUARD
            w[h, i] = terms / den
    return w


def feature_map_loops(fm, u):
    """Per-token, per-neuron evaluation of the feature map."""
    u = np.asarray(u, dtype=np.float64)
    flat = u.reshape(-1, fm.in_dim)
    rows = []
    for token in flat:
        h = token
        for w, b in fm.layers[:-1]:
            z = np.array([float(np.dot(h, w[:, o])) + b[o] for o in range(w.shape[1])])
            h = np.array([zi * (1.0 / (1.0 + math.exp(-zi))) for zi in z])
        w, b = fm.layers[-1]
        z = np.array([float(np.dot(h, w[:, o])) + b[o] for o in range(w.shape[1])])
        a = np.array([math.log1p(math.exp(zi)) if zi < 30 else zi + math.log1p(math.exp(-zi)) for zi in z])
        parts = []
        for p in range(fm.poly_degree):
            seg = a[p * fm.slice_width : (p + 1) * fm.slice_width]
            parts.extend(float(x) ** (p + 1) for x in seg)
        rows.append(parts)
    out = np.array(rows)
    return out.reshape(u.shape[:-1] + (fm.out_dim,))


def block_forward_composed(params, x):
    """Block output composed from the loop oracles stage by stage."""
    from hybridattn.attention import partition_tokens, project_qkv

    x = np.asarray(x, dtype=np.float64)
    q, k, v = project_qkv(x, params.attention)
    if params.kind == "softmax":
        y = softmax_attention_loops(q, k, v)
    elif params.kind == "linear":
        y = linear_attention_loops(q, k, v, params.phi.q_maps, params.phi.k_maps)
    else:
        part = partition_tokens(x.shape[0], params.rate)
        y = hybrid_attention_loops(
            q, k, v, params.phi.q_maps, params.phi.k_maps, part, params.hybrid_mode
        )
    r = y + x
    h = r @ params.ffn.w1 + params.ffn.b1
    h = h * (0.5 * (1.0 + np.tanh(0.5 * h)))
    return h @ params.ffn.w2 + params.ffn.b2


def attention_flops_tally(dims, kind, rate=1):
    """Stage-by-stage op tally that mirrors the reference kernels' loops.

    Walks each kernel's computation (projection-free, matching the planner's
    scope) and multiplies loop bounds, counting 2 ops per multiply-add, 1 per
    bias add or power, and the documented constants for softmax rows, silu,
    and softplus. Independent decomposition from the planner's closed forms.
    """
    from hybridattn.dims import phi_layer_widths
    from hybridattn.planner import SILU_OPS, SOFTMAX_ROW_OPS, SOFTPLUS_OPS

    n, d, m, e = dims.n_tokens, dims.qk_dim, dims.v_dim, dims.feature_dim

    def phi_cost_one_token():
        total = 0
        widths = phi_layer_widths(dims)
        for li, (w_in, w_out) in enumerate(widths):
            for _ in range(w_out):  # each output neuron
                total += 2 * w_in  # dot product
                total += 1  # bias
                total += SOFTPLUS_OPS if li == len(widths) - 1 else SILU_OPS
        total += e  # one power op per feature
        return total

    def softmax_side(n_queries, n_keys):
        total = 0
        total += n_queries * n_keys * 2 * d  # scores
        total += n_queries * n_keys * SOFTMAX_ROW_OPS  # stabilized softmax
        total += n_queries * n_keys * 2 * m  # value mix
        return total

    def linear_side(n_keys, n_queries):
        total = 0
        total += n_keys * e * 2 * m  # outer products into S_kv
        total += n_keys * e  # s_k accumulation
        total += n_queries * (2 * e * m + 2 * e + 2 * m)  # per-query products
        return total

    if kind == "softmax" or (kind == "hybrid" and rate == 1):
        per_head = softmax_side(n, n)
    elif kind == "linear":
        per_head = 2 * n * phi_cost_one_token() + linear_side(n, n)
    else:
        s = math.ceil(n / rate)
        per_head = (
            softmax_side(n, s)
            + linear_side(n - s, n)
            + (n + (n - s)) * phi_cost_one_token()
        )
    return dims.heads * per_head
