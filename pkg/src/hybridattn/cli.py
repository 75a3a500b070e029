"""Batch front door: run pipeline stages from a config file.

Stages exchange files inside one artifacts directory, so they can run in
separate processes or on separate machines:

    distill   -> teacher.bin, error_table.json, phi_block*_rate*.bin
    plan      -> cost_table.json, plan.json, reduction.csv
    finetune  -> student.bin, metrics.csv (pre and post rows)
    eval      -> metrics.csv (eval rows)
    flops     -> cost report (stdout only)

stdout carries only machine-readable CSV; diagnostics go to stderr. Exit
codes: 0 ok, 2 bad config, 3 training divergence, 4 unusable output
directory, 5 infeasible budget, 6 missing/incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .dims import ModelDims
from .distill import DistillConfig, DivergenceError, build_error_table
from .numerics import SeededRng
from .planner import (
    Budget,
    InfeasibleBudgetError,
    RatePlan,
    build_cost_table,
    flops_attention,
    homogeneous_select,
    plan_label,
    reduction_report,
    solve_mckp,
)
from .serialization import (
    load_error_table,
    load_model,
    load_phi_checkpoint,
    load_plan,
    phi_checkpoint_name,
    save_cost_table,
    save_error_table,
    save_model,
    save_phi_checkpoint,
    save_plan,
)
from .toymodel import (
    AssemblyError,
    assemble_student,
    evaluate_fidelity,
    finetune_student,
    generate_synthetic,
    init_toy_model,
    train_teacher,
)

__all__ = ["main", "entry", "ConfigError", "load_config"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_OUTPUT = 4
EXIT_INFEASIBLE = 5
EXIT_CHECKPOINT = 6

METRICS_HEADER = "stage,seed,output_l1,block_attention_l1_mean"
FLOPS_RATE_HEADER = "rate,flops_per_block,softmax_ratio"

# Default pricing dims for `flops` runs without a config: a 30-block stack at
# long-sequence settings (n_tokens=32768, per-head dim 128).
FLOPS_DEFAULT_DIMS = ModelDims(
    n_tokens=32768, model_dim=1536, heads=12, qk_dim=128, v_dim=128, blocks=30
)
GRID_BLOCK_COUNTS = (15, 20, 25)
GRID_RATES = (2, 4, 8)


class ConfigError(ValueError):
    """The config file violates the schema."""


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------

_DIMS_KEYS = {
    "n_tokens", "model_dim", "heads", "qk_dim", "v_dim", "blocks",
    "ffn_hidden", "poly_degree", "slice_width", "phi_hidden", "phi_depth",
}

_SCHEMA = {
    "version": int,
    "seed": int,
    "out": str,
    "dims": dict,
    "rates": list,
    "teacher": dict,
    "distill": dict,
    "budget": dict,
    "plan": dict,
    "finetune": dict,
    "eval": dict,
}

_SECTION_KEYS = {
    "teacher": {"mode", "qk_gain", "train_iters", "train_samples", "lr", "batch"},
    "distill": {
        "batch", "update_repeats", "lr", "timesteps", "loss",
        "max_rounds", "tol", "train_seeds", "heldout_seeds", "hybrid_mode",
    },
    "budget": {"flops", "fraction", "granularity"},
    "plan": {"mode", "k", "rate"},
    "finetune": {"iters", "lr", "batch", "samples", "target"},
    "eval": {"n_seeds"},
}


def _check_keys(section: str, obj: dict, allowed: set):
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(unknown)}")


def load_config(path) -> dict:
    """Parse and validate a pipeline config; unknown keys are rejected."""
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys("config", obj, set(_SCHEMA))
    if obj.get("version") != 1:
        raise ConfigError(f"unsupported config version {obj.get('version')!r} (need 1)")
    for key, typ in _SCHEMA.items():
        if key in obj and not isinstance(obj[key], typ):
            raise ConfigError(f"{key} must be {typ.__name__}")
    for section, allowed in _SECTION_KEYS.items():
        if section in obj:
            _check_keys(section, obj[section], allowed)
    if "dims" in obj:
        _check_keys("dims", obj["dims"], _DIMS_KEYS)
    plan = obj.get("plan", {})
    mode = plan.get("mode", "mckp")
    if mode not in ("mckp", "homogeneous"):
        raise ConfigError(f"plan.mode must be 'mckp' or 'homogeneous', got {mode!r}")
    if mode == "homogeneous" and not ({"k", "rate"} <= set(plan)):
        raise ConfigError("homogeneous plan needs k and rate")
    teacher_mode = obj.get("teacher", {}).get("mode", "frozen-random")
    if teacher_mode not in ("frozen-random", "trained"):
        raise ConfigError(f"teacher.mode must be 'frozen-random' or 'trained', got {teacher_mode!r}")
    try:
        _dims(obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad dims: {exc}") from None
    return obj


def _dims(cfg: dict) -> ModelDims:
    return ModelDims(**cfg.get("dims", {}))


def _rates(cfg: dict, override=None) -> tuple:
    rates = override if override is not None else cfg.get("rates", [1, 2, 4, 8])
    rates = tuple(int(r) for r in rates)
    if not rates or any(r < 1 for r in rates):
        raise ConfigError(f"rates must be positive integers, got {rates}")
    return rates


def _distill_config(cfg: dict) -> DistillConfig:
    section = dict(cfg.get("distill", {}))
    if "timesteps" in section:
        section["timesteps"] = tuple(section["timesteps"])
    try:
        return DistillConfig(seed=int(cfg.get("seed", 0)), **section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad distill section: {exc}") from None


def _build_teacher(cfg: dict, dcfg: DistillConfig):
    dims = _dims(cfg)
    section = cfg.get("teacher", {})
    seed = int(cfg.get("seed", 0))
    rng = SeededRng(seed).derive(101)
    gain = float(section.get("qk_gain", 1.0 if section.get("mode", "frozen-random") == "frozen-random" else 3.0))
    model = init_toy_model(rng, dims, dcfg.timesteps, qk_gain=gain)
    if section.get("mode", "frozen-random") == "trained":
        data = generate_synthetic(
            SeededRng(seed).derive(102), int(section.get("train_samples", 64)), dims, dcfg.timesteps
        )
        model = train_teacher(
            model, data,
            int(section.get("train_iters", 300)),
            float(section.get("lr", 1e-3)),
            batch=int(section.get("batch", 8)),
            seed=SeededRng(seed).derive(103).seed,
        )
    return model


def _prepare_out(path_str: str) -> Path:
    out = Path(path_str)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise _OutputError(f"output directory unusable: {out}: {exc}") from exc
    return out


class _OutputError(OSError):
    pass


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _cmd_distill(cfg: dict, out: Path, rates, jobs: int) -> int:
    dcfg = _distill_config(cfg)
    teacher = _build_teacher(cfg, dcfg)
    save_model(out / "teacher.bin", teacher, {"stage": "distill", "seed": cfg.get("seed", 0)})
    run = build_error_table(teacher, rates, dcfg, jobs=jobs)
    save_error_table(out / "error_table.json", run.table)
    for (block, rate), phi in sorted(run.checkpoints.items()):
        save_phi_checkpoint(out / phi_checkpoint_name(block, rate), phi, block, rate)
    print("block,rate,error")
    for i in range(run.table.n_blocks):
        for j, r in enumerate(run.table.rates):
            print(f"{i},{r},{run.table.e[i, j]:.12g}")
    return EXIT_OK


def _budget_from(cfg: dict, dims: ModelDims, override: float | None) -> Budget:
    section = cfg.get("budget", {})
    gran = float(section.get("granularity") or 0.0)
    if override is not None:
        return Budget(float(override), gran)
    if section.get("flops") is not None:
        return Budget(float(section["flops"]), gran)
    if section.get("fraction") is not None:
        base = flops_attention(dims, "softmax") * dims.blocks
        return Budget(float(section["fraction"]) * base, gran)
    raise ConfigError("no budget: set budget.flops or budget.fraction, or pass --budget")


def _cmd_plan(cfg: dict, out: Path, rates, budget_override) -> int:
    dims = _dims(cfg)
    table = load_error_table(out / "error_table.json")
    if rates != table.rates:
        raise ConfigError(f"rates {rates} do not match error table rates {table.rates}")
    costs = build_cost_table(dims, table.rates, table.n_blocks)
    save_cost_table(out / "cost_table.json", costs)
    section = cfg.get("plan", {})
    if section.get("mode", "mckp") == "homogeneous":
        plan = homogeneous_select(table, int(section["rate"]), int(section["k"]), costs)
    else:
        plan = solve_mckp(table, costs, _budget_from(cfg, dims, budget_override))
    save_plan(out / "plan.json", plan)
    report = reduction_report(plan, dims)
    csv = report.CSV_HEADER + "\n" + report.csv_row() + "\n"
    (out / "reduction.csv").write_text(csv, encoding="utf-8")
    print(csv, end="")
    return EXIT_OK


def _load_student(cfg: dict, out: Path):
    teacher = load_model(out / "teacher.bin")
    plan = load_plan(out / "plan.json")
    checkpoints = {}
    for i, rate in enumerate(plan.rates):
        if rate == 1:
            continue
        path = out / phi_checkpoint_name(i, rate)
        if not path.exists():
            raise AssemblyError(f"missing feature-map checkpoint for (block {i}, rate {rate})")
        phi, _, _ = load_phi_checkpoint(path)
        checkpoints[(i, rate)] = phi
    mode = cfg.get("distill", {}).get("hybrid_mode", DistillConfig().hybrid_mode)
    return teacher, plan, assemble_student(teacher, plan, checkpoints, mode)


def _eval_rows(stage: str, student, teacher, seeds) -> list:
    metrics = evaluate_fidelity(student, teacher, seeds)
    rows = [
        f"{stage},{seed},{out_l1:.12g},{float(np.mean(blocks)):.12g}"
        for seed, out_l1, blocks in metrics.per_seed
    ]
    mean_block = float(np.mean(metrics.block_attention_l1))
    rows.append(f"{stage},mean,{metrics.output_l1:.12g},{mean_block:.12g}")
    return rows


def _eval_seeds(cfg: dict) -> list:
    count = int(cfg.get("eval", {}).get("n_seeds", 4))
    return [s.seed for s in (SeededRng(int(cfg.get("seed", 0))).derive(104 + i) for i in range(count))]


def _cmd_finetune(cfg: dict, out: Path) -> int:
    teacher, plan, student = _load_student(cfg, out)
    seeds = _eval_seeds(cfg)
    rows = _eval_rows("pre", student, teacher, seeds)
    section = cfg.get("finetune", {})
    data = generate_synthetic(
        SeededRng(int(cfg.get("seed", 0))).derive(105),
        int(section.get("samples", 32)),
        teacher.dims,
        teacher.timesteps,
    )
    target = section.get("target", "teacher")
    if target not in ("teacher", "noise"):
        raise ConfigError(f"finetune.target must be 'teacher' or 'noise', got {target!r}")
    student = finetune_student(
        student, data,
        int(section.get("iters", 200)),
        float(section.get("lr", 1e-5)),
        batch=int(section.get("batch", 4)),
        seed=SeededRng(int(cfg.get("seed", 0))).derive(106).seed,
        reference=teacher if target == "teacher" else None,
    )
    save_model(out / "student.bin", student, {"stage": "finetune", "plan": list(plan.rates)})
    rows += _eval_rows("post", student, teacher, seeds)
    csv = METRICS_HEADER + "\n" + "\n".join(rows) + "\n"
    (out / "metrics.csv").write_text(csv, encoding="utf-8")
    print(csv, end="")
    return EXIT_OK


def _cmd_eval(cfg: dict, out: Path) -> int:
    teacher, plan, student = _load_student(cfg, out)
    if (out / "student.bin").exists():
        student = load_model(out / "student.bin")
    rows = _eval_rows("eval", student, teacher, _eval_seeds(cfg))
    csv = METRICS_HEADER + "\n" + "\n".join(rows) + "\n"
    (out / "metrics.csv").write_text(csv, encoding="utf-8")
    print(csv, end="")
    return EXIT_OK


def _cmd_flops(cfg: dict | None, rates_override) -> int:
    dims = _dims(cfg) if cfg and "dims" in cfg else FLOPS_DEFAULT_DIMS
    rates = _rates(cfg or {}, rates_override) if (cfg or rates_override) else (1, 2, 4, 8)
    softmax = flops_attention(dims, "softmax")
    print(FLOPS_RATE_HEADER)
    for r in rates:
        cost = flops_attention(dims, "hybrid", r)
        print(f"{r},{cost:.6g},{cost / softmax:.6f}")
    print()
    print(ReductionGrid.HEADER)
    n_blocks = dims.blocks
    for k in GRID_BLOCK_COUNTS:
        for r in GRID_RATES:
            plan_rates = [r] * min(k, n_blocks) + [1] * max(n_blocks - k, 0)
            rep = reduction_report(plan_rates, dims)
            print(rep.csv_row())
    return EXIT_OK


class ReductionGrid:
    HEADER = "config,total_flops,baseline_flops,reduction_pct,asymptotic_quadratic_pct"


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="hybridattn",
        description="Convert softmax attention blocks to hybrid attention: "
        "distill, plan, finetune, eval, flops.",
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name, needs_config in (
        ("distill", True), ("plan", True), ("finetune", True), ("eval", True), ("flops", False),
    ):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=needs_config, help="pipeline config JSON")
        sp.add_argument("--out", help="artifacts directory (overrides config.out)")
        sp.add_argument("--seed", type=int, help="override config.seed")
        sp.add_argument("--rates", help="comma-separated candidate rates, e.g. 1,2,4,8")
        sp.add_argument("--budget", type=float, help="FLOPs budget (plan only)")
        sp.add_argument("--jobs", type=int, default=1, help="parallel distillation workers")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else None
        if cfg is not None and args.seed is not None:
            cfg["seed"] = args.seed
        rates_override = (
            tuple(int(r) for r in args.rates.split(",")) if args.rates else None
        )
        if args.command == "flops":
            return _cmd_flops(cfg, rates_override)
        rates = _rates(cfg, rates_override)
        out_str = args.out or (cfg.get("out") if cfg else None)
        if not out_str:
            raise ConfigError("no output directory: set config.out or pass --out")
        out = _prepare_out(out_str)
        if args.command == "distill":
            return _cmd_distill(cfg, out, rates, args.jobs)
        if args.command == "plan":
            return _cmd_plan(cfg, out, rates, args.budget)
        if args.command == "finetune":
            return _cmd_finetune(cfg, out)
        return _cmd_eval(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except _OutputError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_OUTPUT
    except InfeasibleBudgetError as exc:
        print(f"infeasible budget: {exc} (minimal achievable cost {exc.min_cost:.6g})", file=sys.stderr)
        return EXIT_INFEASIBLE
    except AssemblyError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except FileNotFoundError as exc:
        print(f"missing stage artifact: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
