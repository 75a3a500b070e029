"""Attention kernels and the transformer block built from them.

Three kernels share one shape convention: per-head queries/keys are
``(heads, tokens, qk_dim)``, per-head values are ``(heads, tokens, v_dim)``,
and outputs concatenate heads to ``(tokens, heads * v_dim)``.

* ``softmax_attention``   - reference quadratic kernel, stabilized row softmax.
* ``linear_attention``    - feature-map kernel with cached key aggregates,
                            one pass over tokens.
* ``hybrid_attention``    - per-query mixture: exact exponentials over a
                            strided subset of tokens, the feature-map kernel
                            over the rest.

The learnable feature map is a small per-head MLP whose non-negative outputs
are split into slices and raised to increasing integer powers, widening the
dynamic range the map can express.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import SeededRng, ShapeError, as_tensor, row_softmax_stabilized

__all__ = [
    "DEN_GUARD",
    "silu",
    "softplus",
    "AttentionWeights",
    "project_qkv",
    "TokenPartition",
    "partition_tokens",
    "FeatureMap",
    "init_feature_map",
    "apply_feature_map",
    "PhiPair",
    "init_phi_pair",
    "softmax_attention",
    "linear_attention",
    "hybrid_attention",
    "FfnWeights",
    "BlockParams",
    "block_forward",
]

# Additive guard on linear/hybrid denominators. The feature maps are strictly
# positive, so the guard only has to stop a literal 0/0 when their outputs
# underflow; it must sit far below every accuracy tolerance in the test suite.
DEN_GUARD = 1e-30

HYBRID_MODES = ("literal", "consistent")


def silu(z: np.ndarray) -> np.ndarray:
    """Sigmoid-weighted linear unit, z * sigmoid(z); smooth everywhere."""
    return z * (0.5 * (1.0 + np.tanh(0.5 * z)))


def softplus(z: np.ndarray) -> np.ndarray:
    """ln(1 + e^z), evaluated stably; strictly positive for finite z."""
    return np.logaddexp(0.0, z)


# ---------------------------------------------------------------------------
# Projections
# ---------------------------------------------------------------------------


@dataclass
class AttentionWeights:
    """Query/key/value projections, laid out head-major along columns."""

    w_q: np.ndarray  # (model_dim, heads * qk_dim)
    w_k: np.ndarray  # (model_dim, heads * qk_dim)
    w_v: np.ndarray  # (model_dim, heads * v_dim)
    heads: int
    qk_dim: int
    v_dim: int
    model_dim: int

    def __post_init__(self):
        self.w_q = as_tensor(self.w_q)
        self.w_k = as_tensor(self.w_k)
        self.w_v = as_tensor(self.w_v)
        qk = (self.model_dim, self.heads * self.qk_dim)
        vv = (self.model_dim, self.heads * self.v_dim)
        if self.w_q.shape != qk or self.w_k.shape != qk:
            raise ShapeError(f"w_q/w_k must be {qk}, got {self.w_q.shape}/{self.w_k.shape}")
        if self.w_v.shape != vv:
            raise ShapeError(f"w_v must be {vv}, got {self.w_v.shape}")


def project_qkv(x, w: AttentionWeights):
    """Project tokens to per-head (q, k, v).

    Head ``h`` owns columns ``[h*d, (h+1)*d)`` of each projection, so with a
    single head and an identity-block w_q the queries are the first qk_dim
    columns of x.
    """
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != w.model_dim:
        raise ShapeError(f"x must be (tokens, {w.model_dim}), got {x.shape}")
    n = x.shape[0]

    def split(proj, width):
        return (x @ proj).reshape(n, w.heads, width).transpose(1, 0, 2)

    return split(w.w_q, w.qk_dim), split(w.w_k, w.qk_dim), split(w.w_v, w.v_dim)


# ---------------------------------------------------------------------------
# Token partition
# ---------------------------------------------------------------------------


@dataclass
class TokenPartition:
    """Split of token indices at a given stride rate.

    ``softmax_indices`` are the 0-indexed multiples of the rate; the rest are
    ``linear_indices``. Rate 1 puts every token on the softmax side.
    """

    rate: int
    softmax_indices: np.ndarray
    linear_indices: np.ndarray
    n_tokens: int

    def __post_init__(self):
        self.softmax_indices = np.asarray(self.softmax_indices, dtype=np.int64)
        self.linear_indices = np.asarray(self.linear_indices, dtype=np.int64)
        merged = np.concatenate([self.softmax_indices, self.linear_indices])
        if (
            np.any(np.diff(self.softmax_indices) <= 0)
            or np.any(np.diff(self.linear_indices) <= 0)
            or not np.array_equal(np.sort(merged), np.arange(self.n_tokens))
        ):
            raise ValueError("indices must be sorted and partition 0..n_tokens-1")


def partition_tokens(n_tokens: int, rate: int) -> TokenPartition:
    """Partition ``{0..n_tokens-1}`` with every ``rate``-th token on the softmax side."""
    if rate <= 0:
        raise ValueError(f"rate must be >= 1, got {rate}")
    if n_tokens < 1:
        raise ValueError(f"n_tokens must be >= 1, got {n_tokens}")
    keep = np.arange(0, n_tokens, rate, dtype=np.int64)
    mask = np.ones(n_tokens, dtype=bool)
    mask[keep] = False
    return TokenPartition(rate, keep, np.nonzero(mask)[0], n_tokens)


# ---------------------------------------------------------------------------
# Feature map
# ---------------------------------------------------------------------------


@dataclass
class FeatureMap:
    """One head's learnable non-negative map from qk_dim to poly_degree * slice_width.

    An MLP (silu hidden activations, softplus output) produces a strictly
    positive vector that is split into ``poly_degree`` slices of width
    ``slice_width``; slice p (1-based) is raised elementwise to the power p
    and the slices are concatenated. Every output is therefore >= 0 and the
    kernel denominators built from two such maps stay positive.
    """

    layers: list = field(default_factory=list)  # [(weight, bias), ...]
    poly_degree: int = 2
    slice_width: int = 8

    def __post_init__(self):
        if self.poly_degree < 1 or self.slice_width < 1:
            raise ValueError("poly_degree and slice_width must be positive")
        if not self.layers:
            raise ValueError("feature map needs at least one layer")
        self.layers = [(as_tensor(w), as_tensor(b)) for w, b in self.layers]
        for w, b in self.layers:
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError("each layer needs (in, out) weight and (out,) bias")
        if self.layers[-1][0].shape[1] != self.out_dim:
            raise ShapeError(
                f"final layer width {self.layers[-1][0].shape[1]} != "
                f"poly_degree * slice_width = {self.out_dim}"
            )

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.poly_degree * self.slice_width


def init_feature_map(
    rng: SeededRng,
    in_dim: int,
    hidden_width: int = 0,
    depth: int = 2,
    poly_degree: int = 2,
    slice_width: int = 0,
) -> FeatureMap:
    """Fresh feature map: weights ~ N(0, 1/fan_in), biases zero."""
    hidden_width = hidden_width or in_dim
    slice_width = slice_width or in_dim
    ins = [in_dim] + [hidden_width] * (depth - 1)
    outs = [hidden_width] * (depth - 1) + [poly_degree * slice_width]
    layers = []
    for fan_in, fan_out in zip(ins, outs):
        w = rng.gaussian((fan_in, fan_out)) / np.sqrt(fan_in)
        layers.append((w, np.zeros(fan_out)))
    return FeatureMap(layers, poly_degree, slice_width)


def apply_feature_map(fm: FeatureMap, u) -> np.ndarray:
    """Evaluate the map on ``(..., in_dim)`` inputs; output is ``(..., out_dim)``."""
    u = as_tensor(u)
    if u.shape[-1] != fm.in_dim:
        raise ShapeError(f"last dim must be {fm.in_dim}, got {u.shape}")
    h = u.reshape(-1, fm.in_dim)
    for w, b in fm.layers[:-1]:
        h = silu(h @ w + b)
    w, b = fm.layers[-1]
    a = softplus(h @ w + b)
    width = fm.slice_width
    parts = [a[:, p * width : (p + 1) * width] ** (p + 1) for p in range(fm.poly_degree)]
    out = np.concatenate(parts, axis=1)
    return out.reshape(u.shape[:-1] + (fm.out_dim,))


@dataclass
class PhiPair:
    """Per-head feature maps for queries and keys of one block."""

    q_maps: tuple
    k_maps: tuple

    def __post_init__(self):
        self.q_maps = tuple(self.q_maps)
        self.k_maps = tuple(self.k_maps)
        if len(self.q_maps) != len(self.k_maps) or not self.q_maps:
            raise ValueError("need one (q, k) feature map per head")

    @property
    def heads(self) -> int:
        return len(self.q_maps)


def init_phi_pair(
    rng: SeededRng,
    heads: int,
    in_dim: int,
    hidden_width: int = 0,
    depth: int = 2,
    poly_degree: int = 2,
    slice_width: int = 0,
) -> PhiPair:
    """Independent query and key maps for every head, from one seeded stream."""
    mk = lambda: init_feature_map(rng, in_dim, hidden_width, depth, poly_degree, slice_width)
    return PhiPair(tuple(mk() for _ in range(heads)), tuple(mk() for _ in range(heads)))


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def _check_qkv(q, k, v):
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError("q, k, v must be (heads, tokens, dim)")
    if q.shape != k.shape or q.shape[:2] != v.shape[:2]:
        raise ShapeError(f"inconsistent shapes: q {q.shape}, k {k.shape}, v {v.shape}")
    return q, k, v


def softmax_attention(q, k, v) -> np.ndarray:
    """Exact attention: per head, row-softmax(q k^T / sqrt(qk_dim)) times v."""
    q, k, v = _check_qkv(q, k, v)
    heads, n, d = q.shape
    m = v.shape[2]
    scale = 1.0 / np.sqrt(d)
    out = np.empty((n, heads * m))
    for h in range(heads):
        probs = row_softmax_stabilized((q[h] @ k[h].T) * scale)
        out[:, h * m : (h + 1) * m] = probs @ v[h]
    return out


def linear_attention(q, k, v, phi_q: Sequence[FeatureMap], phi_k: Sequence[FeatureMap]) -> np.ndarray:
    """Feature-map attention in one pass over tokens.

    Per head: y_i = f_i S_kv / (f_i . s_k + guard) with f = phi_q(q),
    S_kv = sum_j phi_k(k_j)^T v_j and s_k = sum_j phi_k(k_j), both of which
    are computed once and shared by every query.
    """
    q, k, v = _check_qkv(q, k, v)
    heads, n, _ = q.shape
    m = v.shape[2]
    _check_phi(phi_q, phi_k, heads, q.shape[2])
    out = np.empty((n, heads * m))
    for h in range(heads):
        f = apply_feature_map(phi_q[h], q[h])
        g = apply_feature_map(phi_k[h], k[h])
        s_kv = g.T @ v[h]
        s_k = g.sum(axis=0)
        den = f @ s_k + DEN_GUARD
        out[:, h * m : (h + 1) * m] = (f @ s_kv) / den[:, None]
    return out


def hybrid_attention(
    q,
    k,
    v,
    phi_q: Sequence[FeatureMap],
    phi_k: Sequence[FeatureMap],
    part: TokenPartition,
    mode: str = "literal",
) -> np.ndarray:
    """Mixture kernel: exact exponentials over ``part.softmax_indices``,
    the feature-map kernel over ``part.linear_indices``.

    Per query the exponent is shifted by its row maximum c_i over the softmax
    side, which keeps the exponentials in range. ``mode`` selects what the
    shift does to the linear side:

    * ``"literal"``    - only the exponential terms are rescaled by e^{-c_i},
      so the shift changes the balance between the two sides.
    * ``"consistent"`` - the linear terms are rescaled by e^{-c_i} as well,
      which makes the result equal to the unshifted mixture.

    With an empty softmax side the kernel degenerates to linear attention;
    with rate 1 (empty linear side) both modes reduce to softmax attention.
    """
    if mode not in HYBRID_MODES:
        raise ValueError(f"mode must be one of {HYBRID_MODES}, got {mode!r}")
    q, k, v = _check_qkv(q, k, v)
    heads, n, d = q.shape
    m = v.shape[2]
    if part.n_tokens != n:
        raise ShapeError(f"partition covers {part.n_tokens} tokens, q has {n}")
    _check_phi(phi_q, phi_k, heads, d)
    s_idx, l_idx = part.softmax_indices, part.linear_indices
    if s_idx.size == 0:
        return linear_attention(q, k, v, phi_q, phi_k)

    scale = 1.0 / np.sqrt(d)
    out = np.empty((n, heads * m))
    for h in range(heads):
        scores = (q[h] @ k[h][s_idx].T) * scale
        c = scores.max(axis=1, keepdims=True)
        e = np.exp(scores - c)
        f = apply_feature_map(phi_q[h], q[h])
        g = apply_feature_map(phi_k[h], k[h][l_idx])
        lin_num = f @ (g.T @ v[h][l_idx])
        lin_den = f @ g.sum(axis=0)
        if mode == "consistent":
            w = np.exp(-c[:, 0])
            num = e @ v[h][s_idx] + w[:, None] * lin_num
            den = e.sum(axis=1) + w * lin_den + DEN_GUARD
        else:
            num = e @ v[h][s_idx] + lin_num
            den = e.sum(axis=1) + lin_den + DEN_GUARD
        out[:, h * m : (h + 1) * m] = num / den[:, None]
    return out


def _check_phi(phi_q, phi_k, heads: int, d: int):
    if len(phi_q) != heads or len(phi_k) != heads:
        raise ShapeError(f"need {heads} feature maps per side, got {len(phi_q)}/{len(phi_k)}")
    for fm in (*phi_q, *phi_k):
        if fm.in_dim != d:
            raise ShapeError(f"feature map expects width {fm.in_dim}, q/k have {d}")


# ---------------------------------------------------------------------------
# Transformer block
# ---------------------------------------------------------------------------


@dataclass
class FfnWeights:
    """Token-wise two-layer MLP applied after the attention residual."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.w1, self.b1 = as_tensor(self.w1), as_tensor(self.b1)
        self.w2, self.b2 = as_tensor(self.w2), as_tensor(self.b2)
        if self.w1.shape[1] != self.w2.shape[0] or self.b1.shape != (self.w1.shape[1],):
            raise ShapeError("ffn layer widths do not chain")
        if self.b2.shape != (self.w2.shape[1],):
            raise ShapeError("ffn output bias width mismatch")


BLOCK_KINDS = ("softmax", "linear", "hybrid")


@dataclass
class BlockParams:
    """One transformer block: attention (by kind), residual add, token-wise MLP.

    ``phi`` must be present exactly when the kind needs feature maps, and the
    residual requires heads * v_dim == model_dim.
    """

    attention: AttentionWeights
    ffn: FfnWeights
    phi: PhiPair | None = None
    kind: str = "softmax"
    rate: int = 1
    hybrid_mode: str = "literal"

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"kind must be one of {BLOCK_KINDS}, got {self.kind!r}")
        if (self.phi is None) != (self.kind == "softmax"):
            raise ValueError("phi must be present exactly for linear/hybrid blocks")
        if self.kind == "hybrid" and self.rate < 1:
            raise ValueError("hybrid rate must be >= 1")
        if self.hybrid_mode not in HYBRID_MODES:
            raise ValueError(f"hybrid_mode must be one of {HYBRID_MODES}")


def block_attention(params: BlockParams, x) -> np.ndarray:
    """The attention half of the block: project, run the kernel for the block's kind."""
    q, k, v = project_qkv(x, params.attention)
    if params.kind == "softmax":
        return softmax_attention(q, k, v)
    if params.kind == "linear":
        return linear_attention(q, k, v, params.phi.q_maps, params.phi.k_maps)
    part = partition_tokens(x.shape[0], params.rate)
    return hybrid_attention(
        q, k, v, params.phi.q_maps, params.phi.k_maps, part, params.hybrid_mode
    )


def block_forward(params: BlockParams, x) -> np.ndarray:
    """attention(x) + x, then the token-wise MLP; output shape equals input shape."""
    x = as_tensor(x)
    y = block_attention(params, x)
    if y.shape != x.shape:
        raise ShapeError(
            f"attention output {y.shape} cannot join the residual {x.shape}; "
            "heads * v_dim must equal model_dim"
        )
    r = y + x
    h = silu(r @ params.ffn.w1 + params.ffn.b1)
    return h @ params.ffn.w2 + params.ffn.b2
