"""Per-block feature-map distillation against a frozen teacher.

Each attention block is distilled in isolation: the teacher's block inputs
and attention outputs are cached once, then only the query/key feature maps
of the hybrid replacement are trained, either on the attention outputs
(value loss, mean L1) or on the kernel values themselves (attention loss,
log1p of the mean squared gap between the exponential kernel and the
feature-map kernel). Running the distillation across every block and every
candidate rate yields the error table the planner consumes.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attention import PhiPair, apply_feature_map, hybrid_attention, init_phi_pair, partition_tokens
from .backprop import hybrid_attention_vjp, phi_grads_to_dict, phi_param_entries, replace_phi_params, feature_map_vjp
from .numerics import SeededRng, ShapeError
from .optim import DivergenceError, TreeAdamW, adamw_step  # noqa: F401  (adamw_step re-exported)
from .toymodel import ToyModel, model_forward_capture, noise_sample, render_tokens

__all__ = [
    "DIVERGENCE_LIMIT",
    "AD_EXPONENT_CLAMP",
    "loss_value_distill",
    "loss_value_distill_grad",
    "loss_attention_distill",
    "loss_attention_distill_grad",
    "adamw_step",
    "DivergenceError",
    "TrajectoryEntry",
    "TrajectoryCache",
    "cache_teacher_trajectory",
    "AttnSample",
    "BlockDistillData",
    "block_distill_data",
    "DistillConfig",
    "DistillResult",
    "distill_block",
    "heldout_error",
    "ErrorTable",
    "DistillRun",
    "build_error_table",
]

DIVERGENCE_LIMIT = 1e6

# The attention loss exponentiates raw score products; clamping the exponent
# keeps exp() in range even for adversarial q, k. log1p tames the loss value
# but not the inner exponential, hence the clamp.
AD_EXPONENT_CLAMP = 30.0


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def loss_value_distill(y, y_hat) -> float:
    """Mean absolute difference over all elements (size-invariant L1)."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    return float(np.mean(np.abs(y - y_hat)))


def loss_value_distill_grad(y, y_hat):
    """(loss, d loss / d y_hat); the sign subgradient at exact zeros."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    diff = y_hat - y
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def _ad_terms(q, k, phi_q, phi_k):
    heads, _, d = q.shape
    scale = 1.0 / math.sqrt(d)
    for h in range(heads):
        s = np.clip((q[h] @ k[h].T) * scale, -AD_EXPONENT_CLAMP, AD_EXPONENT_CLAMP)
        target = np.exp(s)
        f = apply_feature_map(phi_q[h], q[h])
        g = apply_feature_map(phi_k[h], k[h])
        yield h, target, f, g


def loss_attention_distill(q, k, phi_q, phi_k) -> float:
    """log1p of the mean squared gap between exp(q k^T / sqrt(d)) and phi phi^T.

    The exponent is clamped to +-AD_EXPONENT_CLAMP and the squared error is
    averaged over every (query, key) pair and head before the log1p.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != k.shape or q.ndim != 3:
        raise ShapeError(f"q and k must share (heads, tokens, dim): {q.shape} vs {k.shape}")
    total, count = 0.0, 0
    for _, target, f, g in _ad_terms(q, k, phi_q, phi_k):
        gap = target - f @ g.T
        total += float((gap * gap).sum())
        count += gap.size
    return float(np.log1p(total / count))


def loss_attention_distill_grad(q, k, phi_q, phi_k):
    """(loss, phi_q grads, phi_k grads); grads are per-head layer lists."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != k.shape or q.ndim != 3:
        raise ShapeError(f"q and k must share (heads, tokens, dim): {q.shape} vs {k.shape}")
    per_head = list(_ad_terms(q, k, phi_q, phi_k))
    total = sum(float(((t - f @ g.T) ** 2).sum()) for _, t, f, g in per_head)
    count = sum(t.size for _, t, _, _ in per_head)
    err = total / count
    loss = float(np.log1p(err))
    outer = 1.0 / (1.0 + err)
    gq, gk = [], []
    for h, target, f, g in per_head:
        d_m = (-2.0 * outer / count) * (target - f @ g.T)
        _, gq_h = feature_map_vjp(phi_q[h], q[h], d_m @ g)
        _, gk_h = feature_map_vjp(phi_k[h], k[h], d_m.T @ f)
        gq.append(gq_h)
        gk.append(gk_h)
    return loss, gq, gk


# ---------------------------------------------------------------------------
# Teacher trajectories
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryEntry:
    """One (sample, timestep) record: per-block attention inputs and outputs."""

    seed: int
    t: int
    block_inputs: list
    attn_outputs: list


@dataclass
class TrajectoryCache:
    """All teacher activations needed to distill any block in isolation."""

    entries: list
    timesteps: tuple
    seeds: tuple


def cache_teacher_trajectory(teacher: ToyModel, seeds, timesteps) -> TrajectoryCache:
    """Run the teacher's denoising forward at every (seed, t); record per-block
    attention inputs and outputs. Deterministic in (teacher, seeds, timesteps)."""
    timesteps = tuple(timesteps)
    t_max = max(timesteps)
    entries = []
    for seed in seeds:
        rng = SeededRng(int(seed))
        x0 = render_tokens(rng, teacher.dims)
        for t in timesteps:
            x_t, _ = noise_sample(rng, x0, t, t_max)
            _, block_inputs, attn_outputs = model_forward_capture(teacher, x_t, t)
            entries.append(TrajectoryEntry(int(seed), t, block_inputs, attn_outputs))
    return TrajectoryCache(entries, timesteps, tuple(int(s) for s in seeds))


@dataclass
class AttnSample:
    """Frozen per-block activations: projected q, k, v and the teacher output."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    y: np.ndarray


@dataclass
class BlockDistillData:
    train: list
    heldout: list

    @property
    def n_tokens(self) -> int:
        return self.train[0].q.shape[1]


def _project_entries(cache: TrajectoryCache, teacher: ToyModel, block_index: int) -> list:
    from .attention import project_qkv

    w = teacher.blocks[block_index].attention
    samples = []
    for e in cache.entries:
        q, k, v = project_qkv(e.block_inputs[block_index], w)
        samples.append(AttnSample(q, k, v, e.attn_outputs[block_index]))
    return samples


def block_distill_data(train_cache: TrajectoryCache, heldout_cache: TrajectoryCache,
                       teacher: ToyModel, block_index: int) -> BlockDistillData:
    """Slice both caches down to one block's (q, k, v, y) samples."""
    return BlockDistillData(
        _project_entries(train_cache, teacher, block_index),
        _project_entries(heldout_cache, teacher, block_index),
    )


# ---------------------------------------------------------------------------
# Distillation
# ---------------------------------------------------------------------------


@dataclass
class DistillConfig:
    """Knobs of the per-block training loop.

    ``batch`` samples are drawn per outer round and reused for
    ``update_repeats`` optimizer steps; the loop stops when the held-out
    value loss improves by less than ``tol`` (relative) over a round, or
    after ``max_rounds`` rounds.

    ``hybrid_mode`` defaults to "consistent": rescaling both mixture sides by
    the stabilizer keeps the student's target the same mixture at every rate,
    which is what makes per-rate errors comparable. Under "literal" the
    stabilizer shifts the softmax/linear balance differently per rate and the
    converged errors stop ordering by rate.
    """

    batch: int = 4
    update_repeats: int = 4
    lr: float = 1e-3
    timesteps: tuple = (1, 2, 3, 4)
    loss: str = "value"  # "value" | "attention"
    max_rounds: int = 50
    tol: float = 1e-4
    seed: int = 0
    train_seeds: int = 8
    heldout_seeds: int = 4
    hybrid_mode: str = "consistent"

    def __post_init__(self):
        if self.batch < 1 or self.update_repeats < 1:
            raise ValueError("batch and update_repeats must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not self.timesteps:
            raise ValueError("timesteps must be nonempty")
        if self.loss not in ("value", "attention"):
            raise ValueError(f"loss must be 'value' or 'attention', got {self.loss!r}")
        self.timesteps = tuple(self.timesteps)


@dataclass
class DistillResult:
    phi: PhiPair
    error: float
    initial_error: float
    rounds: int
    updates: int
    history: list = field(default_factory=list)


def heldout_error(phi: PhiPair, samples, rate: int, mode: str = "literal") -> float:
    """Mean value loss of the hybrid replacement on held-out samples.

    The validation metric is always the value loss, whatever loss trained
    the maps, so error tables stay comparable across loss kinds.
    """
    part = partition_tokens(samples[0].q.shape[1], rate)
    total = 0.0
    for s in samples:
        y_hat = hybrid_attention(s.q, s.k, s.v, phi.q_maps, phi.k_maps, part, mode)
        total += loss_value_distill(s.y, y_hat)
    return total / len(samples)


def _batch_step(phi: PhiPair, batch, part, cfg: DistillConfig):
    """Averaged loss and feature-map gradients over one batch."""
    grads = {path: np.zeros_like(arr) for path, arr in phi_param_entries(phi)}
    total = 0.0
    inv = 1.0 / len(batch)
    for s in batch:
        if cfg.loss == "value":
            y_hat = hybrid_attention(s.q, s.k, s.v, phi.q_maps, phi.k_maps, part, cfg.hybrid_mode)
            loss, d_y = loss_value_distill_grad(s.y, y_hat)
            _, _, _, gq, gk = hybrid_attention_vjp(
                s.q, s.k, s.v, phi.q_maps, phi.k_maps, part, cfg.hybrid_mode, d_y
            )
        else:
            loss, gq, gk = loss_attention_distill_grad(s.q, s.k, phi.q_maps, phi.k_maps)
        total += loss * inv
        for path, g in phi_grads_to_dict(phi, gq, gk).items():
            grads[path] += g * inv
    return total, grads


def distill_block(data: BlockDistillData, phi: PhiPair, rate: int,
                  cfg: DistillConfig) -> DistillResult:
    """Train one block's feature maps against its frozen activations.

    Only the feature maps move; q, k, v and the teacher outputs are fixed
    inputs. At rate 1 the hybrid kernel already equals the teacher, so the
    maps are returned untouched with zero error. Raises DivergenceError if
    the training loss passes DIVERGENCE_LIMIT.
    """
    if rate == 1:
        return DistillResult(phi, 0.0, 0.0, 0, 0, [0.0])
    part = partition_tokens(data.n_tokens, rate)
    rng = SeededRng(cfg.seed)
    opt = TreeAdamW(cfg.lr)
    params = dict(phi_param_entries(phi))
    current = phi

    previous = heldout_error(current, data.heldout, rate, cfg.hybrid_mode)
    initial = previous
    history = [previous]
    updates = 0
    rounds = 0
    for _ in range(cfg.max_rounds):
        rounds += 1
        picks = rng.integers(len(data.train), cfg.batch)
        batch = [data.train[i] for i in picks]
        for _ in range(cfg.update_repeats):
            loss, grads = _batch_step(current, batch, part, cfg)
            if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
                raise DivergenceError(f"distillation diverged, loss={loss!r}")
            params = opt.step(params, grads)
            current = replace_phi_params(current, params)
            updates += 1
        err = heldout_error(current, data.heldout, rate, cfg.hybrid_mode)
        history.append(err)
        if previous > 0.0 and (previous - err) / previous < cfg.tol:
            previous = err
            break
        previous = err
    return DistillResult(current, previous, initial, rounds, updates, history)


# ---------------------------------------------------------------------------
# Error table
# ---------------------------------------------------------------------------


@dataclass
class ErrorTable:
    """Held-out value loss per (block, candidate rate)."""

    e: np.ndarray  # (blocks, len(rates))
    rates: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.e = np.asarray(self.e, dtype=np.float64)
        self.rates = tuple(int(r) for r in self.rates)
        if self.e.ndim != 2 or self.e.shape[1] != len(self.rates):
            raise ShapeError(f"table shape {self.e.shape} does not match rates {self.rates}")
        if np.any(np.isnan(self.e)) or np.any(self.e < 0):
            raise ValueError("error entries must be non-negative (inf marks divergence)")

    @property
    def n_blocks(self) -> int:
        return self.e.shape[0]


@dataclass
class DistillRun:
    """An error table plus the distilled feature maps that produced it."""

    table: ErrorTable
    checkpoints: dict  # (block_index, rate) -> PhiPair
    results: dict      # (block_index, rate) -> DistillResult


def _seed_list(base: SeededRng, tag: int, count: int) -> list:
    child = base.derive(tag)
    return [int(w) for w in child.raw_words(count)]


def _job(args):
    data, rate, cfg, phi_seed, dims = args
    rng = SeededRng(phi_seed)
    phi = init_phi_pair(
        rng, dims.heads, dims.qk_dim, dims.phi_width, dims.phi_depth,
        dims.poly_degree, dims.slice_w,
    )
    try:
        return distill_block(data, phi, rate, cfg), None
    except DivergenceError as exc:
        return None, str(exc)


def build_error_table(teacher: ToyModel, rates, cfg: DistillConfig,
                      jobs: int = 1) -> DistillRun:
    """Distill every (block, rate) pair independently and tabulate the errors.

    Rate-1 columns are exactly zero (the hybrid kernel reduces to the
    teacher). A diverging pair is recorded as +inf and the run continues.
    Deterministic in (teacher, rates, cfg), regardless of ``jobs``.
    """
    rates = tuple(int(r) for r in rates)
    base = SeededRng(cfg.seed)
    train_cache = cache_teacher_trajectory(
        teacher, _seed_list(base, 1, cfg.train_seeds), cfg.timesteps
    )
    heldout_cache = cache_teacher_trajectory(
        teacher, _seed_list(base, 2, cfg.heldout_seeds), cfg.timesteps
    )
    n_blocks = len(teacher.blocks)
    table = np.zeros((n_blocks, len(rates)))
    checkpoints: dict = {}
    results: dict = {}

    tasks = []
    for i in range(n_blocks):
        data = block_distill_data(train_cache, heldout_cache, teacher, i)
        for j, rate in enumerate(rates):
            if rate == 1:
                continue
            phi_seed = base.derive(10_000 + i * 100 + rate).seed
            tasks.append(((i, j, rate), (data, rate, cfg, phi_seed, teacher.dims)))

    if jobs > 1 and tasks:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_job, [args for _, args in tasks]))
    else:
        outcomes = [_job(args) for _, args in tasks]

    for ((i, j, rate), _), (result, failure) in zip(tasks, outcomes):
        if failure is not None:
            table[i, j] = np.inf
            continue
        table[i, j] = result.error
        checkpoints[(i, rate)] = result.phi
        results[(i, rate)] = result

    meta = {
        "seed": cfg.seed,
        "train_seeds": cfg.train_seeds,
        "heldout_seeds": cfg.heldout_seeds,
        "timesteps": list(cfg.timesteps),
        "loss": cfg.loss,
        "batch": cfg.batch,
        "update_repeats": cfg.update_repeats,
        "max_rounds": cfg.max_rounds,
        "lr": cfg.lr,
    }
    return DistillRun(ErrorTable(table, rates, meta), checkpoints, results)
