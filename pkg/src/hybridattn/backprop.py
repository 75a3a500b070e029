"""Hand-derived vector-Jacobian products for every trainable piece.

There is no autodiff here: each backward pass is written out against the
forward definitions in :mod:`hybridattn.attention` and checked against
central finite differences in the test suite. VJPs recompute their forward
pass internally; at the token counts this package targets that is cheaper
than threading caches through every caller.

Gradients land in flat dicts keyed by dotted parameter paths (for example
``"phi_q.h0.l1.w"`` or ``"ffn.b2"``), the same paths used by the optimizer
and the checkpoint files.
"""

from __future__ import annotations

import numpy as np

from .attention import (
    DEN_GUARD,
    AttentionWeights,
    BlockParams,
    FeatureMap,
    PhiPair,
    TokenPartition,
    apply_feature_map,
    hybrid_attention,
    linear_attention,
    partition_tokens,
    silu,
    softmax_attention,
    softplus,
)
from .numerics import row_softmax_stabilized

__all__ = [
    "feature_map_vjp",
    "softmax_attention_vjp",
    "linear_attention_vjp",
    "hybrid_attention_vjp",
    "block_forward_vjp",
    "phi_param_entries",
    "replace_phi_params",
    "phi_grads_to_dict",
    "block_param_entries",
    "replace_block_params",
]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _silu_grad(z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def feature_map_vjp(fm: FeatureMap, u, d_out):
    """d(apply_feature_map)/d(u, layers) contracted with ``d_out``.

    Returns ``(d_u, layer_grads)`` with one ``(d_w, d_b)`` pair per layer.
    """
    u = np.asarray(u, dtype=np.float64)
    flat = u.reshape(-1, fm.in_dim)
    d2 = np.asarray(d_out, dtype=np.float64).reshape(-1, fm.out_dim)

    hs = [flat]
    zs = []
    for w, b in fm.layers[:-1]:
        z = hs[-1] @ w + b
        zs.append(z)
        hs.append(silu(z))
    w_last, b_last = fm.layers[-1]
    z_last = hs[-1] @ w_last + b_last
    a = softplus(z_last)

    # out_p = a_p ** (p+1), slice by slice
    width = fm.slice_width
    d_a = np.empty_like(a)
    for p in range(fm.poly_degree):
        seg = slice(p * width, (p + 1) * width)
        if p == 0:
            d_a[:, seg] = d2[:, seg]
        else:
            d_a[:, seg] = d2[:, seg] * (p + 1) * a[:, seg] ** p
    d_z = d_a * _sigmoid(z_last)  # d softplus = sigmoid

    grads = [None] * len(fm.layers)
    grads[-1] = (hs[-1].T @ d_z, d_z.sum(axis=0))
    d_h = d_z @ w_last.T
    for li in range(len(fm.layers) - 2, -1, -1):
        d_z = d_h * _silu_grad(zs[li])
        grads[li] = (hs[li].T @ d_z, d_z.sum(axis=0))
        d_h = d_z @ fm.layers[li][0].T
    return d_h.reshape(u.shape), grads


def _zero_fm_grads(fm: FeatureMap):
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in fm.layers]


def softmax_attention_vjp(q, k, v, d_out):
    """Gradients of softmax attention w.r.t. q, k, v."""
    heads, n, d = q.shape
    m = v.shape[2]
    scale = 1.0 / np.sqrt(d)
    dq, dk, dv = np.zeros_like(q), np.zeros_like(k), np.zeros_like(v)
    for h in range(heads):
        probs = row_softmax_stabilized((q[h] @ k[h].T) * scale)
        dy = d_out[:, h * m : (h + 1) * m]
        dv[h] = probs.T @ dy
        d_probs = dy @ v[h].T
        d_scores = probs * (d_probs - (probs * d_probs).sum(axis=1, keepdims=True))
        dq[h] = d_scores @ k[h] * scale
        dk[h] = d_scores.T @ q[h] * scale
    return dq, dk, dv


def linear_attention_vjp(q, k, v, phi_q, phi_k, d_out):
    """Gradients of linear attention w.r.t. q, k, v and both feature maps.

    Returns ``(dq, dk, dv, gq, gk)`` where gq/gk hold per-head layer grads.
    """
    heads, n, _ = q.shape
    m = v.shape[2]
    dq, dk, dv = np.zeros_like(q), np.zeros_like(k), np.zeros_like(v)
    gq, gk = [], []
    for h in range(heads):
        f = apply_feature_map(phi_q[h], q[h])
        g = apply_feature_map(phi_k[h], k[h])
        s_kv = g.T @ v[h]
        s_k = g.sum(axis=0)
        den = f @ s_k + DEN_GUARD
        y = (f @ s_kv) / den[:, None]

        dy = d_out[:, h * m : (h + 1) * m]
        d_num = dy / den[:, None]
        d_den = -(dy * y).sum(axis=1) / den
        d_f = d_num @ s_kv.T + d_den[:, None] * s_k[None, :]
        d_skv = f.T @ d_num
        d_sk = f.T @ d_den
        d_g = v[h] @ d_skv.T + d_sk[None, :]
        dv[h] = g @ d_skv
        dq_h, gq_h = feature_map_vjp(phi_q[h], q[h], d_f)
        dk_h, gk_h = feature_map_vjp(phi_k[h], k[h], d_g)
        dq[h], dk[h] = dq_h, dk_h
        gq.append(gq_h)
        gk.append(gk_h)
    return dq, dk, dv, gq, gk


def hybrid_attention_vjp(q, k, v, phi_q, phi_k, part: TokenPartition, mode, d_out):
    """Gradients of hybrid attention w.r.t. q, k, v and both feature maps.

    The per-query shift c_i = max_a score_ia is differentiated through its
    argmax row entry; ties have measure zero on the fixtures this runs on.
    """
    s_idx, l_idx = part.softmax_indices, part.linear_indices
    if s_idx.size == 0:
        return linear_attention_vjp(q, k, v, phi_q, phi_k, d_out)

    heads, n, d = q.shape
    m = v.shape[2]
    scale = 1.0 / np.sqrt(d)
    rows = np.arange(n)
    dq, dk, dv = np.zeros_like(q), np.zeros_like(k), np.zeros_like(v)
    gq, gk = [], []
    for h in range(heads):
        ks, vs = k[h][s_idx], v[h][s_idx]
        kl, vl = k[h][l_idx], v[h][l_idx]
        scores = (q[h] @ ks.T) * scale
        c = scores.max(axis=1)
        astar = scores.argmax(axis=1)
        e = np.exp(scores - c[:, None])
        f = apply_feature_map(phi_q[h], q[h])
        g = apply_feature_map(phi_k[h], kl)
        l_kv = g.T @ vl
        s_k = g.sum(axis=0)
        lin_num = f @ l_kv
        lin_den = f @ s_k
        if mode == "consistent":
            w = np.exp(-c)
            num = e @ vs + w[:, None] * lin_num
            den = e.sum(axis=1) + w * lin_den + DEN_GUARD
        else:
            num = e @ vs + lin_num
            den = e.sum(axis=1) + lin_den + DEN_GUARD
        y = num / den[:, None]

        dy = d_out[:, h * m : (h + 1) * m]
        d_num = dy / den[:, None]
        d_den = -(dy * y).sum(axis=1) / den
        d_e = d_num @ vs.T + d_den[:, None]
        if mode == "consistent":
            d_f = w[:, None] * (d_num @ l_kv.T + d_den[:, None] * s_k[None, :])
            d_w = (d_num * lin_num).sum(axis=1) + d_den * lin_den
            d_lkv = (w[:, None] * f).T @ d_num
            d_sk = f.T @ (w * d_den)
            d_c = -(d_e * e).sum(axis=1) - w * d_w
        else:
            d_f = d_num @ l_kv.T + d_den[:, None] * s_k[None, :]
            d_lkv = f.T @ d_num
            d_sk = f.T @ d_den
            d_c = -(d_e * e).sum(axis=1)
        d_scores = d_e * e
        d_scores[rows, astar] += d_c
        dq[h] = d_scores @ ks * scale
        dk[h][s_idx] += d_scores.T @ q[h] * scale
        dv[h][s_idx] += e.T @ d_num
        d_g = vl @ d_lkv.T + d_sk[None, :]
        dv[h][l_idx] += g @ d_lkv
        dkl, gk_h = feature_map_vjp(phi_k[h], kl, d_g)
        dk[h][l_idx] += dkl
        dq_fm, gq_h = feature_map_vjp(phi_q[h], q[h], d_f)
        dq[h] += dq_fm
        gq.append(gq_h)
        gk.append(gk_h)
    return dq, dk, dv, gq, gk


# ---------------------------------------------------------------------------
# Parameter paths
# ---------------------------------------------------------------------------


def phi_param_entries(phi: PhiPair, prefix: str = "") -> list:
    """(path, array) pairs for every feature-map parameter of a block."""
    entries = []
    for side, maps in (("phi_q", phi.q_maps), ("phi_k", phi.k_maps)):
        for h, fm in enumerate(maps):
            for li, (w, b) in enumerate(fm.layers):
                entries.append((f"{prefix}{side}.h{h}.l{li}.w", w))
                entries.append((f"{prefix}{side}.h{h}.l{li}.b", b))
    return entries


def replace_phi_params(phi: PhiPair, params: dict, prefix: str = "") -> PhiPair:
    """New PhiPair with parameters taken from ``params`` where present."""

    def rebuild(side, maps):
        out = []
        for h, fm in enumerate(maps):
            layers = []
            for li, (w, b) in enumerate(fm.layers):
                w = params.get(f"{prefix}{side}.h{h}.l{li}.w", w)
                b = params.get(f"{prefix}{side}.h{h}.l{li}.b", b)
                layers.append((w, b))
            out.append(FeatureMap(layers, fm.poly_degree, fm.slice_width))
        return tuple(out)

    return PhiPair(rebuild("phi_q", phi.q_maps), rebuild("phi_k", phi.k_maps))


def phi_grads_to_dict(phi: PhiPair, gq, gk, prefix: str = "") -> dict:
    """Per-head layer grads from the kernel VJPs, keyed like phi_param_entries."""
    grads = {}
    for side, per_head in (("phi_q", gq), ("phi_k", gk)):
        for h, layer_grads in enumerate(per_head):
            for li, (dw, db) in enumerate(layer_grads):
                grads[f"{prefix}{side}.h{h}.l{li}.w"] = dw
                grads[f"{prefix}{side}.h{h}.l{li}.b"] = db
    return grads


def block_param_entries(params: BlockParams, prefix: str = "") -> list:
    """(path, array) pairs for every parameter of a block."""
    entries = [
        (f"{prefix}w_q", params.attention.w_q),
        (f"{prefix}w_k", params.attention.w_k),
        (f"{prefix}w_v", params.attention.w_v),
        (f"{prefix}ffn.w1", params.ffn.w1),
        (f"{prefix}ffn.b1", params.ffn.b1),
        (f"{prefix}ffn.w2", params.ffn.w2),
        (f"{prefix}ffn.b2", params.ffn.b2),
    ]
    if params.phi is not None:
        entries.extend(phi_param_entries(params.phi, prefix))
    return entries


def replace_block_params(params: BlockParams, updates: dict, prefix: str = "") -> BlockParams:
    """New BlockParams with any parameters present in ``updates`` swapped in."""
    att = params.attention
    new_att = AttentionWeights(
        updates.get(f"{prefix}w_q", att.w_q),
        updates.get(f"{prefix}w_k", att.w_k),
        updates.get(f"{prefix}w_v", att.w_v),
        att.heads,
        att.qk_dim,
        att.v_dim,
        att.model_dim,
    )
    ffn = params.ffn
    new_ffn = type(ffn)(
        updates.get(f"{prefix}ffn.w1", ffn.w1),
        updates.get(f"{prefix}ffn.b1", ffn.b1),
        updates.get(f"{prefix}ffn.w2", ffn.w2),
        updates.get(f"{prefix}ffn.b2", ffn.b2),
    )
    phi = None if params.phi is None else replace_phi_params(params.phi, updates, prefix)
    return BlockParams(new_att, new_ffn, phi, params.kind, params.rate, params.hybrid_mode)


# ---------------------------------------------------------------------------
# Block
# ---------------------------------------------------------------------------


def block_forward_vjp(params: BlockParams, x, d_out, prefix: str = ""):
    """Gradients of block_forward w.r.t. its input and every block parameter.

    Returns ``(d_x, grads)`` with grads keyed by ``block_param_entries`` paths.
    """
    x = np.asarray(x, dtype=np.float64)
    w = params.attention
    q, k, v = _project(x, w)
    if params.kind == "softmax":
        y = softmax_attention(q, k, v)
    elif params.kind == "linear":
        y = linear_attention(q, k, v, params.phi.q_maps, params.phi.k_maps)
    else:
        part = partition_tokens(x.shape[0], params.rate)
        y = hybrid_attention(
            q, k, v, params.phi.q_maps, params.phi.k_maps, part, params.hybrid_mode
        )

    r = y + x
    z1 = r @ params.ffn.w1 + params.ffn.b1
    a1 = silu(z1)

    d_out = np.asarray(d_out, dtype=np.float64)
    grads = {
        f"{prefix}ffn.w2": a1.T @ d_out,
        f"{prefix}ffn.b2": d_out.sum(axis=0),
    }
    d_a1 = d_out @ params.ffn.w2.T
    d_z1 = d_a1 * _silu_grad(z1)
    grads[f"{prefix}ffn.w1"] = r.T @ d_z1
    grads[f"{prefix}ffn.b1"] = d_z1.sum(axis=0)
    d_r = d_z1 @ params.ffn.w1.T

    d_y = d_r
    d_x = d_r.copy()

    if params.kind == "softmax":
        dq, dk, dv = softmax_attention_vjp(q, k, v, d_y)
    elif params.kind == "linear":
        dq, dk, dv, gq, gk = linear_attention_vjp(
            q, k, v, params.phi.q_maps, params.phi.k_maps, d_y
        )
        grads.update(phi_grads_to_dict(params.phi, gq, gk, prefix))
    else:
        dq, dk, dv, gq, gk = hybrid_attention_vjp(
            q, k, v, params.phi.q_maps, params.phi.k_maps, part, params.hybrid_mode, d_y
        )
        grads.update(phi_grads_to_dict(params.phi, gq, gk, prefix))

    d_wq = np.zeros_like(w.w_q)
    d_wk = np.zeros_like(w.w_k)
    d_wv = np.zeros_like(w.w_v)
    for h in range(w.heads):
        qc = slice(h * w.qk_dim, (h + 1) * w.qk_dim)
        vc = slice(h * w.v_dim, (h + 1) * w.v_dim)
        d_wq[:, qc] = x.T @ dq[h]
        d_wk[:, qc] = x.T @ dk[h]
        d_wv[:, vc] = x.T @ dv[h]
        d_x += dq[h] @ w.w_q[:, qc].T
        d_x += dk[h] @ w.w_k[:, qc].T
        d_x += dv[h] @ w.w_v[:, vc].T
    grads[f"{prefix}w_q"] = d_wq
    grads[f"{prefix}w_k"] = d_wk
    grads[f"{prefix}w_v"] = d_wv
    return d_x, grads


def _project(x, w: AttentionWeights):
    n = x.shape[0]

    def split(proj, width):
        return (x @ proj).reshape(n, w.heads, width).transpose(1, 0, 2)

    return split(w.w_q, w.qk_dim), split(w.w_k, w.qk_dim), split(w.w_v, w.v_dim)
