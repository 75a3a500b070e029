"""A small denoising transformer used as the conversion testbed.

The model is a stack of attention blocks between two linear token embedders,
with an additive learned timestep embedding. Trained on synthetic data it
plays the frozen softmax teacher; converted per a rate plan it becomes the
hybrid student. Synthetic samples are translating Gaussian blobs rendered on
a square token grid and noised with a linear signal-retention schedule, so
every stage of the pipeline is deterministic given a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .attention import (
    AttentionWeights,
    BlockParams,
    FfnWeights,
    block_attention,
    block_forward,
)
from .backprop import block_forward_vjp, block_param_entries, replace_block_params
from .dims import ModelDims
from .numerics import SeededRng, as_tensor
from .optim import DivergenceError, TreeAdamW

__all__ = [
    "DEFAULT_TIMESTEPS",
    "alpha_bar",
    "SyntheticSample",
    "render_tokens",
    "noise_sample",
    "generate_synthetic",
    "ToyModel",
    "init_toy_model",
    "model_forward",
    "model_forward_capture",
    "iter_model_params",
    "replace_model_params",
    "model_loss",
    "model_loss_and_grad",
    "train_teacher",
    "AssemblyError",
    "assemble_student",
    "finetune_student",
    "FidelityMetrics",
    "evaluate_fidelity",
]

DEFAULT_TIMESTEPS = (1, 2, 3, 4)

# Loss ceiling beyond which a training loop is declared divergent.
DIVERGENCE_LIMIT = 1e6


def alpha_bar(t: int, t_max: int) -> float:
    """Signal retention at step t: linear from 1 at t=0 down to 1/(t_max+1)."""
    if not 0 <= t <= t_max:
        raise ValueError(f"t must lie in [0, {t_max}], got {t}")
    return 1.0 - t / (t_max + 1.0)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSample:
    """One noised training example: x_t = sqrt(ab) x0 + sqrt(1-ab) eps."""

    x0: np.ndarray
    t: int
    x_t: np.ndarray
    eps: np.ndarray


# Fixed per-feature basis used to embed pixel values into token features;
# a constant of the data pipeline, not a trainable parameter.
_BASIS_SEED = 0xBA5E


def _token_basis(width: int) -> np.ndarray:
    return SeededRng(_BASIS_SEED).gaussian((width,)) / math.sqrt(width)


def _pos_features(grid: int, width: int) -> np.ndarray:
    """Sinusoidal row/column features on the grid, amplitude 0.2."""
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    feats = np.empty((grid * grid, width))
    for j in range(width):
        freq = 2.0 * np.pi * (j // 2 + 1) / grid
        feats[:, j] = np.sin(freq * rows) if j % 2 == 0 else np.cos(freq * cols)
    return 0.2 * feats


def render_tokens(rng: SeededRng, dims: ModelDims) -> np.ndarray:
    """Clean token sequence: two offset Gaussian blobs on a sqrt(N) grid.

    The second, fainter blob sits at the first blob's position shifted by a
    random velocity, encoding a translation. Pixel intensities are embedded
    along a fixed basis vector and offset by fixed positional features, so
    the (n_tokens, model_dim) output is a pure function of the rng state.
    """
    n, width = dims.n_tokens, dims.model_dim
    grid = math.isqrt(n)
    if grid * grid != n:
        raise ValueError(f"n_tokens must be a perfect square, got {n}")
    u = rng.uniform((4,))
    cx, cy = grid * (0.2 + 0.6 * u[0]), grid * (0.2 + 0.6 * u[1])
    vx, vy = grid * 0.5 * (u[2] - 0.5), grid * 0.5 * (u[3] - 0.5)
    rows, cols = np.divmod(np.arange(n), grid)
    sigma2 = 2.0 * (grid / 6.0) ** 2
    blob = lambda x, y: np.exp(-((cols - x) ** 2 + (rows - y) ** 2) / sigma2)
    pixels = blob(cx, cy) + 0.5 * blob(cx + vx, cy + vy)
    return pixels[:, None] * _token_basis(width)[None, :] + _pos_features(grid, width)


def noise_sample(rng: SeededRng, x0: np.ndarray, t: int, t_max: int):
    """Noise x0 at step t; returns (x_t, eps) with eps recoverable exactly."""
    eps = rng.gaussian(x0.shape)
    ab = alpha_bar(t, t_max)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps, eps


def generate_synthetic(
    rng: SeededRng, count: int, dims: ModelDims, timesteps=DEFAULT_TIMESTEPS
) -> list:
    """``count`` independent samples with timesteps drawn uniformly from the set."""
    timesteps = tuple(timesteps)
    t_max = max(timesteps)
    samples = []
    for _ in range(count):
        t = timesteps[int(rng.integers(len(timesteps), 1)[0])]
        x0 = render_tokens(rng, dims)
        x_t, eps = noise_sample(rng, x0, t, t_max)
        samples.append(SyntheticSample(x0, t, x_t, eps))
    return samples


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class ToyModel:
    """Denoiser: embed tokens, run the block stack, project back to noise space."""

    dims: ModelDims
    timesteps: tuple
    blocks: list
    embed_in_w: np.ndarray
    embed_in_b: np.ndarray
    embed_out_w: np.ndarray
    embed_out_b: np.ndarray
    temb: np.ndarray  # (len(timesteps), model_dim)

    def __post_init__(self):
        self.timesteps = tuple(self.timesteps)
        if self.temb.shape != (len(self.timesteps), self.dims.model_dim):
            raise ValueError("timestep table must be (len(timesteps), model_dim)")

    @property
    def t_max(self) -> int:
        return max(self.timesteps)

    @property
    def rates(self) -> tuple:
        return tuple(b.rate if b.kind == "hybrid" else 1 for b in self.blocks)

    def timestep_index(self, t: int) -> int:
        try:
            return self.timesteps.index(t)
        except ValueError:
            raise ValueError(f"timestep {t} not in model set {self.timesteps}") from None


def init_toy_model(
    rng: SeededRng, dims: ModelDims, timesteps=DEFAULT_TIMESTEPS, qk_gain: float = 1.0
) -> ToyModel:
    """Random softmax-only model; weights ~ N(0, 1/fan_in), biases zero.

    ``qk_gain`` scales the query/key projections at init. Gains above 1 give
    the attention peaked, token-dependent weights instead of near-uniform
    mixing; at this scale that structure survives training, so teachers meant
    to exercise the hybrid kernels should be built with a gain around 3.
    """
    if dims.heads * dims.v_dim != dims.model_dim:
        raise ValueError(
            f"heads * v_dim = {dims.heads * dims.v_dim} must equal "
            f"model_dim = {dims.model_dim} for the block residual"
        )
    f = dims.model_dim

    def gw(fan_in, fan_out):
        return rng.gaussian((fan_in, fan_out)) / math.sqrt(fan_in)

    blocks = []
    for _ in range(dims.blocks):
        att = AttentionWeights(
            qk_gain * gw(f, dims.heads * dims.qk_dim),
            qk_gain * gw(f, dims.heads * dims.qk_dim),
            gw(f, dims.heads * dims.v_dim),
            dims.heads,
            dims.qk_dim,
            dims.v_dim,
            f,
        )
        ffn = FfnWeights(
            gw(f, dims.ffn_width), np.zeros(dims.ffn_width),
            gw(dims.ffn_width, f), np.zeros(f),
        )
        blocks.append(BlockParams(att, ffn, None, "softmax"))
    return ToyModel(
        dims=dims,
        timesteps=tuple(timesteps),
        blocks=blocks,
        embed_in_w=gw(f, f),
        embed_in_b=np.zeros(f),
        embed_out_w=gw(f, f),
        embed_out_b=np.zeros(f),
        temb=rng.gaussian((len(tuple(timesteps)), f)) / math.sqrt(f),
    )


def model_forward(model: ToyModel, x_t, t: int) -> np.ndarray:
    """Predicted noise for a noised input at timestep t."""
    h = as_tensor(x_t) @ model.embed_in_w + model.embed_in_b
    h = h + model.temb[model.timestep_index(t)]
    for blk in model.blocks:
        h = block_forward(blk, h)
    return h @ model.embed_out_w + model.embed_out_b


def model_forward_capture(model: ToyModel, x_t, t: int):
    """Forward pass that also records every block's attention input and output."""
    h = as_tensor(x_t) @ model.embed_in_w + model.embed_in_b
    h = h + model.temb[model.timestep_index(t)]
    block_inputs, attn_outputs = [], []
    for blk in model.blocks:
        block_inputs.append(h)
        attn_outputs.append(block_attention(blk, h))
        h = block_forward(blk, h)
    return h @ model.embed_out_w + model.embed_out_b, block_inputs, attn_outputs


def iter_model_params(model: ToyModel) -> list:
    """(path, array) pairs for every trainable parameter, blocks included."""
    entries = [
        ("embed_in.w", model.embed_in_w),
        ("embed_in.b", model.embed_in_b),
        ("temb", model.temb),
    ]
    for i, blk in enumerate(model.blocks):
        entries.extend(block_param_entries(blk, prefix=f"block{i}."))
    entries.append(("embed_out.w", model.embed_out_w))
    entries.append(("embed_out.b", model.embed_out_b))
    return entries


def replace_model_params(model: ToyModel, updates: dict) -> ToyModel:
    """New model with any parameters present in ``updates`` swapped in."""
    blocks = [
        replace_block_params(blk, updates, prefix=f"block{i}.")
        for i, blk in enumerate(model.blocks)
    ]
    return replace(
        model,
        blocks=blocks,
        embed_in_w=updates.get("embed_in.w", model.embed_in_w),
        embed_in_b=updates.get("embed_in.b", model.embed_in_b),
        embed_out_w=updates.get("embed_out.w", model.embed_out_w),
        embed_out_b=updates.get("embed_out.b", model.embed_out_b),
        temb=updates.get("temb", model.temb),
    )


def _target(sample: SyntheticSample, reference: "ToyModel | None"):
    if reference is None:
        return sample.eps
    return model_forward(reference, sample.x_t, sample.t)


def model_loss(model: ToyModel, samples, reference: "ToyModel | None" = None) -> float:
    """Mean squared prediction error, averaged over samples.

    Targets are the true noise, or a frozen reference model's outputs when
    ``reference`` is given (recovery-style training toward a teacher).
    """
    total = 0.0
    for s in samples:
        diff = model_forward(model, s.x_t, s.t) - _target(s, reference)
        total += float(np.mean(diff * diff))
    return total / len(samples)


def model_loss_and_grad(model: ToyModel, samples, reference: "ToyModel | None" = None):
    """Loss plus gradients for every parameter path, averaged over samples."""
    grads = {path: np.zeros_like(arr) for path, arr in iter_model_params(model)}
    total = 0.0
    inv = 1.0 / len(samples)
    for s in samples:
        x = as_tensor(s.x_t)
        idx = model.timestep_index(s.t)
        h = x @ model.embed_in_w + model.embed_in_b + model.temb[idx]
        block_inputs = []
        for blk in model.blocks:
            block_inputs.append(h)
            h = block_forward(blk, h)
        eps_hat = h @ model.embed_out_w + model.embed_out_b
        diff = eps_hat - _target(s, reference)
        total += float(np.mean(diff * diff)) * inv

        d_eps = (2.0 * inv / diff.size) * diff
        grads["embed_out.w"] += h.T @ d_eps
        grads["embed_out.b"] += d_eps.sum(axis=0)
        d_h = d_eps @ model.embed_out_w.T
        for i in range(len(model.blocks) - 1, -1, -1):
            d_h, blk_grads = block_forward_vjp(
                model.blocks[i], block_inputs[i], d_h, prefix=f"block{i}."
            )
            for path, g in blk_grads.items():
                grads[path] += g
        grads["temb"][idx] += d_h.sum(axis=0)
        grads["embed_in.w"] += x.T @ d_h
        grads["embed_in.b"] += d_h.sum(axis=0)
    return total, grads


def _train(model: ToyModel, data, iters: int, lr: float, batch: int, seed: int,
           reference: "ToyModel | None" = None) -> ToyModel:
    if iters == 0:
        return model
    if not data:
        raise ValueError("no training data")
    rng = SeededRng(seed)
    opt = TreeAdamW(lr)
    params = dict(iter_model_params(model))
    current = model
    batch = min(batch, len(data))
    for _ in range(iters):
        picks = rng.integers(len(data), batch)
        loss, grads = model_loss_and_grad(current, [data[i] for i in picks], reference)
        if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise DivergenceError(f"training diverged, loss={loss!r}")
        params = opt.step(params, grads)
        current = replace_model_params(current, params)
    return current


def train_teacher(model: ToyModel, data, iters: int, lr: float = 1e-3,
                  batch: int = 8, seed: int = 0) -> ToyModel:
    """Train a softmax-only model on the denoising objective; returns a new model."""
    if any(b.kind != "softmax" for b in model.blocks):
        raise ValueError("teacher training expects all blocks to be softmax")
    return _train(model, data, iters, lr, batch, seed)


def finetune_student(student: ToyModel, data, iters: int, lr: float = 1e-5,
                     batch: int = 4, seed: int = 0,
                     reference: "ToyModel | None" = None) -> ToyModel:
    """End-to-end finetune of every parameter, feature maps included.

    With ``reference`` set, targets are the frozen reference model's outputs
    on the same noised inputs instead of the true noise; that is the
    quality-recovery mode used after surgery, and it pulls the student back
    toward the teacher rather than along the data objective's flat
    directions. Without it the target is the true noise.
    """
    return _train(student, data, iters, lr, batch, seed, reference)


# ---------------------------------------------------------------------------
# Surgery and evaluation
# ---------------------------------------------------------------------------


class AssemblyError(RuntimeError):
    """A rate plan demands a checkpoint that is missing or incompatible."""


def _copy_block(blk: BlockParams) -> BlockParams:
    att = blk.attention
    new_att = AttentionWeights(
        att.w_q.copy(), att.w_k.copy(), att.w_v.copy(),
        att.heads, att.qk_dim, att.v_dim, att.model_dim,
    )
    new_ffn = FfnWeights(blk.ffn.w1.copy(), blk.ffn.b1.copy(),
                         blk.ffn.w2.copy(), blk.ffn.b2.copy())
    return BlockParams(new_att, new_ffn, blk.phi, blk.kind, blk.rate, blk.hybrid_mode)


def assemble_student(teacher: ToyModel, plan, checkpoints: dict,
                     hybrid_mode: str = "literal") -> ToyModel:
    """Surgical conversion: copy the teacher, re-kind blocks per the plan.

    ``plan`` is a rate per block (a RatePlan or any sequence of ints);
    ``checkpoints`` maps (block_index, rate) to the distilled PhiPair for
    every block the plan converts. Rate-1 blocks stay softmax.
    """
    rates = tuple(getattr(plan, "rates", plan))
    if len(rates) != len(teacher.blocks):
        raise AssemblyError(f"plan has {len(rates)} rates for {len(teacher.blocks)} blocks")
    blocks = []
    for i, (blk, rate) in enumerate(zip(teacher.blocks, rates)):
        copy = _copy_block(blk)
        if rate == 1:
            blocks.append(copy)
            continue
        phi = checkpoints.get((i, rate))
        if phi is None:
            raise AssemblyError(f"missing feature-map checkpoint for (block {i}, rate {rate})")
        if phi.heads != teacher.dims.heads or phi.q_maps[0].in_dim != teacher.dims.qk_dim:
            raise AssemblyError(
                f"checkpoint for (block {i}, rate {rate}) has heads={phi.heads}, "
                f"in_dim={phi.q_maps[0].in_dim}; model needs heads={teacher.dims.heads}, "
                f"in_dim={teacher.dims.qk_dim}"
            )
        blocks.append(BlockParams(copy.attention, copy.ffn, phi, "hybrid", rate, hybrid_mode))
    student = replace(
        teacher,
        blocks=blocks,
        embed_in_w=teacher.embed_in_w.copy(),
        embed_in_b=teacher.embed_in_b.copy(),
        embed_out_w=teacher.embed_out_w.copy(),
        embed_out_b=teacher.embed_out_b.copy(),
        temb=teacher.temb.copy(),
    )
    return student


@dataclass
class FidelityMetrics:
    """Student-vs-teacher agreement on held-out noised inputs.

    ``output_l1`` is the mean per-element L1 distance between the two
    denoiser outputs; ``block_attention_l1`` compares each student block's
    attention output against the teacher's on the teacher's own block
    inputs. ``per_seed`` holds (seed, output_l1, block_l1 tuple) rows.
    """

    output_l1: float
    block_attention_l1: tuple
    per_seed: list


def evaluate_fidelity(student: ToyModel, teacher: ToyModel, eval_seeds,
                      timesteps=None) -> FidelityMetrics:
    """Compare student and teacher on fresh noised samples from ``eval_seeds``."""
    if student.dims != teacher.dims:
        raise ValueError("student and teacher dims differ")
    timesteps = tuple(timesteps) if timesteps is not None else teacher.timesteps
    t_max = max(timesteps)
    n_blocks = len(teacher.blocks)
    per_seed = []
    for seed in eval_seeds:
        rng = SeededRng(int(seed))
        x0 = render_tokens(rng, teacher.dims)
        out_acc = 0.0
        block_acc = np.zeros(n_blocks)
        for t in timesteps:
            x_t, _ = noise_sample(rng, x0, t, t_max)
            out_t, inputs_t, attn_t = model_forward_capture(teacher, x_t, t)
            out_s = model_forward(student, x_t, t)
            out_acc += float(np.mean(np.abs(out_s - out_t)))
            for i in range(n_blocks):
                y_s = block_attention(student.blocks[i], inputs_t[i])
                block_acc[i] += float(np.mean(np.abs(y_s - attn_t[i])))
        out_acc /= len(timesteps)
        block_acc /= len(timesteps)
        per_seed.append((int(seed), out_acc, tuple(block_acc)))
    output_l1 = float(np.mean([row[1] for row in per_seed]))
    block_l1 = tuple(np.mean([row[2] for row in per_seed], axis=0))
    return FidelityMetrics(output_l1, block_l1, per_seed)
