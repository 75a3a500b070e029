"""FLOPs cost model and budgeted block-rate selection.

``flops_attention`` prices one block's attention in exact operation counts
(multiply and add each count as one op; non-mul-add primitives carry the
documented constants below). ``solve_mckp`` picks one rate per block to
minimize total distillation error under a FLOPs budget, a multiple-choice
knapsack solved by dynamic programming over discretized cost units, with
``brute_force_mckp`` as the exhaustive oracle. ``homogeneous_select`` is the
simpler baseline that converts the k lowest-error blocks at one fixed rate.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .dims import ModelDims, phi_layer_widths
from .distill import ErrorTable

__all__ = [
    "SOFTMAX_ROW_OPS",
    "SILU_OPS",
    "SOFTPLUS_OPS",
    "phi_token_flops",
    "flops_attention",
    "CostTable",
    "build_cost_table",
    "Budget",
    "RatePlan",
    "InfeasibleBudgetError",
    "solve_mckp",
    "brute_force_mckp",
    "homogeneous_select",
    "ReductionReport",
    "reduction_report",
    "crossover_tokens",
]

# Per-element op weights for non-mul-add primitives. One softmax score costs
# 5 ops (exp, running max, subtract, sum, divide); silu costs 4 (tanh-based
# sigmoid folded to 3, times the input); softplus costs 3 (exp, add, log).
SOFTMAX_ROW_OPS = 5
SILU_OPS = 4
SOFTPLUS_OPS = 3


def phi_token_flops(dims: ModelDims) -> float:
    """Ops to push one token through one feature map.

    MLP layers count 2*in*out (multiply-add) + out (bias) + activation ops
    per output element; the final polynomial split adds one power op per
    output element (poly_degree * slice_width in total).
    """
    widths = phi_layer_widths(dims)
    total = 0.0
    for li, (fan_in, fan_out) in enumerate(widths):
        act = SOFTPLUS_OPS if li == len(widths) - 1 else SILU_OPS
        total += 2.0 * fan_in * fan_out + fan_out + act * fan_out
    return total + dims.feature_dim


def _softmax_part(n_queries: float, n_keys: float, dims: ModelDims) -> float:
    # scores + stabilized softmax + value mix, per head
    return (
        2.0 * n_queries * n_keys * dims.qk_dim
        + SOFTMAX_ROW_OPS * n_queries * n_keys
        + 2.0 * n_queries * n_keys * dims.v_dim
    )


def _linear_aggregates(n_keys: float, dims: ModelDims) -> float:
    # key-side running sums: outer products into S_kv plus the s_k row sum
    e = dims.feature_dim
    return 2.0 * n_keys * e * dims.v_dim + n_keys * e


def _linear_per_query(n_queries: float, dims: ModelDims) -> float:
    # numerator product, denominator dot, final divide
    e = dims.feature_dim
    return 2.0 * n_queries * e * dims.v_dim + 2.0 * n_queries * e + 2.0 * n_queries * dims.v_dim


def flops_attention(dims: ModelDims, kind: str, rate: int = 1) -> float:
    """Attention FLOPs for one block at ``dims``, summed over heads.

    ``kind`` is "softmax", "linear", or "hybrid"; hybrid at rate 1 is priced
    exactly as softmax (no feature-map terms).
    """
    n = float(dims.n_tokens)
    if kind == "softmax":
        per_head = _softmax_part(n, n, dims)
    elif kind == "linear":
        per_head = (
            2.0 * n * phi_token_flops(dims)
            + _linear_aggregates(n, dims)
            + _linear_per_query(n, dims)
        )
    elif kind == "hybrid":
        if rate < 1:
            raise ValueError(f"rate must be >= 1, got {rate}")
        if rate == 1:
            per_head = _softmax_part(n, n, dims)
        else:
            s = float(math.ceil(n / rate))
            per_head = (
                _softmax_part(n, s, dims)
                + _linear_aggregates(n - s, dims)
                + _linear_per_query(n, dims)
                + (n + (n - s)) * phi_token_flops(dims)  # phi on all q, T_L keys
            )
    else:
        raise ValueError(f"unknown kind {kind!r}")
    return dims.heads * per_head


def crossover_tokens(dims: ModelDims, rate: int, limit: int = 2**24) -> int:
    """Smallest token count at which hybrid(rate) is cheaper than softmax.

    Below the crossover the feature-map overhead dominates; above it the
    smaller quadratic term wins. Doubling search plus bisection on the
    closed forms.
    """
    if rate < 2:
        raise ValueError("crossover is defined for rates >= 2")

    def cheaper(n):
        d = ModelDims(**{**_dims_dict(dims), "n_tokens": int(n)})
        return flops_attention(d, "hybrid", rate) < flops_attention(d, "softmax")

    lo, hi = 1, 2
    while hi <= limit and not cheaper(hi):
        lo, hi = hi, hi * 2
    if hi > limit:
        raise ValueError(f"no crossover below {limit} tokens")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if cheaper(mid):
            hi = mid
        else:
            lo = mid
    return hi


def _dims_dict(dims: ModelDims) -> dict:
    from dataclasses import asdict

    return asdict(dims)


# ---------------------------------------------------------------------------
# Tables and plans
# ---------------------------------------------------------------------------


@dataclass
class CostTable:
    """Attention FLOPs per (block, candidate rate)."""

    c: np.ndarray
    rates: tuple
    dims: ModelDims | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64)
        self.rates = tuple(int(r) for r in self.rates)
        if self.c.ndim != 2 or self.c.shape[1] != len(self.rates):
            raise ValueError(f"table shape {self.c.shape} does not match rates {self.rates}")
        if np.any(self.c <= 0) or not np.isfinite(self.c).all():
            raise ValueError("costs must be positive and finite")

    @property
    def n_blocks(self) -> int:
        return self.c.shape[0]


def build_cost_table(dims: ModelDims, rates, n_blocks: int = 0) -> CostTable:
    """Hybrid-attention FLOPs per rate, one identical row per block.

    Rows are kept per block so heterogeneous dims could price differently;
    with one ``dims`` every row is the same.
    """
    rates = tuple(int(r) for r in rates)
    n_blocks = n_blocks or dims.blocks
    row = [flops_attention(dims, "hybrid", r) for r in rates]
    return CostTable(np.tile(row, (n_blocks, 1)), rates, dims)


@dataclass
class Budget:
    """FLOPs budget plus the cost unit used to discretize the DP."""

    flops: float
    granularity: float = 0.0  # 0 means flops / 1e6

    def __post_init__(self):
        if self.flops <= 0:
            raise ValueError("budget must be positive")
        if self.granularity < 0:
            raise ValueError("granularity must be positive")

    @property
    def unit(self) -> float:
        return self.granularity or self.flops / 1e6


@dataclass
class RatePlan:
    """One rate per block with its achieved objective and cost."""

    rates: tuple
    objective: float
    cost: float
    budget: float | None = None

    def __post_init__(self):
        self.rates = tuple(int(r) for r in self.rates)
        if self.budget is not None and self.cost > self.budget * (1 + 1e-12):
            raise ValueError(f"plan cost {self.cost} exceeds budget {self.budget}")


class InfeasibleBudgetError(ValueError):
    """No assignment fits the budget; carries the minimal achievable cost."""

    def __init__(self, min_cost: float, budget: float):
        super().__init__(
            f"budget {budget:.6g} FLOPs infeasible; cheapest assignment costs {min_cost:.6g}"
        )
        self.min_cost = min_cost
        self.budget = budget


def _tables(e, c):
    e_arr = e.e if isinstance(e, ErrorTable) else np.asarray(e, dtype=np.float64)
    c_arr = c.c if isinstance(c, CostTable) else np.asarray(c, dtype=np.float64)
    rates_e = e.rates if isinstance(e, ErrorTable) else None
    rates_c = c.rates if isinstance(c, CostTable) else None
    rates = rates_e or rates_c
    if rates_e and rates_c and rates_e != rates_c:
        raise ValueError(f"rate sets differ: {rates_e} vs {rates_c}")
    if e_arr.shape != c_arr.shape:
        raise ValueError(f"table shapes differ: {e_arr.shape} vs {c_arr.shape}")
    if rates is None:
        rates = tuple(range(e_arr.shape[1]))
    return e_arr, c_arr, tuple(rates)


def solve_mckp(e, c, budget: Budget) -> RatePlan:
    """Exactly one rate per block, total cost within budget, minimal total error.

    Dynamic program over cost units ceil(c / unit) up to floor(budget / unit);
    rounding costs up means a returned plan never overspends the true budget,
    at worst rejecting plans within one unit of it. Ties break toward lower
    true cost, then lower rate index. Assignments are reconstructed by
    backtracking through the per-block choices.
    """
    e_arr, c_arr, rates = _tables(e, c)
    n_blocks, n_rates = e_arr.shape
    unit = budget.unit
    weights = np.ceil(c_arr / unit).astype(np.int64)
    capacity = int(math.floor(budget.flops / unit))

    min_cost = float(c_arr.min(axis=1).sum())
    if weights.min(axis=1).sum() > capacity:
        raise InfeasibleBudgetError(min_cost, budget.flops)

    inf = np.inf
    # dp_err[w] = best error using processed blocks with total weight <= w
    dp_err = np.zeros(capacity + 1)
    dp_cost = np.zeros(capacity + 1)
    choices = np.full((n_blocks, capacity + 1), -1, dtype=np.int16)
    for i in range(n_blocks):
        new_err = np.full(capacity + 1, inf)
        new_cost = np.full(capacity + 1, inf)
        choice = choices[i]
        for r in range(n_rates):
            w = int(weights[i, r])
            if w > capacity:
                continue
            cand_err = dp_err[: capacity + 1 - w] + e_arr[i, r]
            cand_cost = dp_cost[: capacity + 1 - w] + c_arr[i, r]
            seg = slice(w, capacity + 1)
            better = (cand_err < new_err[seg]) | (
                (cand_err == new_err[seg]) & (cand_cost < new_cost[seg])
            )
            new_err[seg] = np.where(better, cand_err, new_err[seg])
            new_cost[seg] = np.where(better, cand_cost, new_cost[seg])
            choice[seg] = np.where(better, r, choice[seg])
        dp_err, dp_cost = new_err, new_cost

    if not np.isfinite(dp_err[capacity]):
        raise InfeasibleBudgetError(min_cost, budget.flops)

    assignment = []
    w = capacity
    for i in range(n_blocks - 1, -1, -1):
        r = int(choices[i, w])
        assignment.append(r)
        w -= int(weights[i, r])
    assignment.reverse()
    rate_choice = tuple(rates[r] for r in assignment)
    objective = float(sum(e_arr[i, r] for i, r in enumerate(assignment)))
    cost = float(sum(c_arr[i, r] for i, r in enumerate(assignment)))
    return RatePlan(rate_choice, objective, cost, budget.flops)


def brute_force_mckp(e, c, budget: Budget, max_blocks: int = 12) -> RatePlan:
    """Exhaustive minimum over all rate assignments; the DP's oracle.

    Same tie rule: lowest error, then lowest cost, then the assignment that
    comes first in rate-index lexicographic order.
    """
    e_arr, c_arr, rates = _tables(e, c)
    n_blocks, n_rates = e_arr.shape
    if n_blocks > max_blocks:
        raise ValueError(f"{n_blocks} blocks exceed the enumeration limit {max_blocks}")
    best = None
    for assignment in itertools.product(range(n_rates), repeat=n_blocks):
        cost = float(sum(c_arr[i, r] for i, r in enumerate(assignment)))
        if cost > budget.flops:
            continue
        err = float(sum(e_arr[i, r] for i, r in enumerate(assignment)))
        if best is None or (err, cost) < (best[0], best[1]):
            best = (err, cost, assignment)
    if best is None:
        raise InfeasibleBudgetError(float(c_arr.min(axis=1).sum()), budget.flops)
    err, cost, assignment = best
    return RatePlan(tuple(rates[r] for r in assignment), err, cost, budget.flops)


def homogeneous_select(e, rate: int, k: int, costs=None) -> RatePlan:
    """Convert the k lowest-error blocks at one fixed rate, rest stay softmax.

    Ties on error go to the lower block index. ``costs`` (a CostTable) is
    optional and only fills in the plan's cost.
    """
    e_arr = e.e if isinstance(e, ErrorTable) else np.asarray(e, dtype=np.float64)
    rates = e.rates if isinstance(e, ErrorTable) else tuple(range(e_arr.shape[1]))
    if rate not in rates:
        raise ValueError(f"rate {rate} not among candidates {rates}")
    if not 1 <= k <= e_arr.shape[0]:
        raise ValueError(f"k must be in [1, {e_arr.shape[0]}], got {k}")
    r_idx = rates.index(rate)
    col = e_arr[:, r_idx]
    chosen = np.argsort(col, kind="stable")[:k]
    assignment = [1] * e_arr.shape[0]
    for i in chosen:
        assignment[int(i)] = rate
    one_idx = rates.index(1) if 1 in rates else None
    objective = 0.0
    cost = 0.0
    c_arr = costs.c if isinstance(costs, CostTable) else costs
    for i, r in enumerate(assignment):
        j = r_idx if r == rate else one_idx
        if j is not None:
            objective += float(e_arr[i, j])
            if c_arr is not None:
                cost += float(c_arr[i, j])
    return RatePlan(tuple(assignment), objective, cost if c_arr is not None else math.nan)


# ---------------------------------------------------------------------------
# Reduction report
# ---------------------------------------------------------------------------


@dataclass
class ReductionReport:
    """Attention FLOPs of a plan against the all-softmax baseline."""

    config: str
    total_flops: float
    baseline_flops: float
    reduction_pct: float
    asymptotic_quadratic_pct: float

    CSV_HEADER = "config,total_flops,baseline_flops,reduction_pct,asymptotic_quadratic_pct"

    def csv_row(self) -> str:
        return (
            f"{self.config},{self.total_flops:.6g},{self.baseline_flops:.6g},"
            f"{self.reduction_pct:.4f},{self.asymptotic_quadratic_pct:.4f}"
        )


def plan_label(rates) -> str:
    """Compact plan signature like '15xR4+15xR1'."""
    counts = {}
    for r in rates:
        counts[r] = counts.get(r, 0) + 1
    return "+".join(f"{counts[r]}xR{r}" for r in sorted(counts, reverse=True))


def reduction_report(plan, dims: ModelDims) -> ReductionReport:
    """Total attention FLOPs under the plan versus all-softmax.

    Also reports the infinite-token limit of the quadratic-term reduction,
    mean over blocks of (1 - 1/rate).
    """
    rates = tuple(getattr(plan, "rates", plan))
    baseline = flops_attention(dims, "softmax") * len(rates)
    total = sum(flops_attention(dims, "hybrid", r) for r in rates)
    asym = 100.0 * float(np.mean([1.0 - 1.0 / r for r in rates]))
    return ReductionReport(
        config=plan_label(rates),
        total_flops=float(total),
        baseline_flops=float(baseline),
        reduction_pct=100.0 * (1.0 - total / baseline),
        asymptotic_quadratic_pct=asym,
    )
