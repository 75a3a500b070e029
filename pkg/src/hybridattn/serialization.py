"""File formats for checkpoints, tables, and plans.

Tensor container (used by every binary checkpoint):

    [8-byte little-endian header length][UTF-8 JSON header][payload]

The header carries a manifest of (name, shape, dtype) records plus free-form
metadata; the payload is the tensors' little-endian float64 bytes
concatenated in manifest order. Tables and plans are plain JSON. All writers
are deterministic: identical inputs give byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .attention import FeatureMap, PhiPair
from .dims import ModelDims
from .distill import ErrorTable
from .planner import CostTable, RatePlan
from .toymodel import ToyModel, init_toy_model, iter_model_params, replace_model_params
from .numerics import SeededRng

__all__ = [
    "save_tensors",
    "load_tensors",
    "save_phi_checkpoint",
    "load_phi_checkpoint",
    "phi_checkpoint_name",
    "save_model",
    "load_model",
    "save_error_table",
    "load_error_table",
    "save_cost_table",
    "load_cost_table",
    "save_plan",
    "load_plan",
]

_FORMAT_VERSION = 1


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named float64 arrays plus metadata to one container file."""
    names = sorted(tensors)
    manifest = []
    payload = bytearray()
    for name in names:
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float64))
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": "<f8"})
        payload += arr.astype("<f8").tobytes()
    header = _dump_json(
        {"format": "tensors", "version": _FORMAT_VERSION, "meta": meta or {}, "tensors": manifest}
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)


def load_tensors(path):
    """Read a container file; returns (dict name -> array, metadata dict)."""
    with open(path, "rb") as fh:
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format") != "tensors":
            raise ValueError(f"{path}: not a tensor container")
        tensors = {}
        for rec in header["tensors"]:
            count = int(np.prod(rec["shape"])) if rec["shape"] else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8")
            tensors[rec["name"]] = data.reshape(rec["shape"]).astype(np.float64)
    return tensors, header.get("meta", {})


# ---------------------------------------------------------------------------
# Feature-map checkpoints
# ---------------------------------------------------------------------------


def phi_checkpoint_name(block_index: int, rate: int) -> str:
    return f"phi_block{block_index:02d}_rate{rate}.bin"


def save_phi_checkpoint(path, phi: PhiPair, block_index: int, rate: int) -> None:
    """One distilled feature-map pair; manifest records block, rate, and widths."""
    tensors = {}
    for side, maps in (("q", phi.q_maps), ("k", phi.k_maps)):
        for h, fm in enumerate(maps):
            for li, (w, b) in enumerate(fm.layers):
                tensors[f"{side}.h{h}.l{li}.w"] = w
                tensors[f"{side}.h{h}.l{li}.b"] = b
    fm0 = phi.q_maps[0]
    meta = {
        "kind": "phi",
        "block": int(block_index),
        "rate": int(rate),
        "heads": phi.heads,
        "poly_degree": fm0.poly_degree,
        "slice_width": fm0.slice_width,
        "layer_shapes": [list(w.shape) for w, _ in fm0.layers],
    }
    save_tensors(path, tensors, meta)


def load_phi_checkpoint(path):
    """Returns (PhiPair, block_index, rate)."""
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "phi":
        raise ValueError(f"{path}: not a feature-map checkpoint")
    heads = int(meta["heads"])
    n_layers = len(meta["layer_shapes"])

    def side_maps(side):
        maps = []
        for h in range(heads):
            layers = [
                (tensors[f"{side}.h{h}.l{li}.w"], tensors[f"{side}.h{h}.l{li}.b"])
                for li in range(n_layers)
            ]
            maps.append(FeatureMap(layers, int(meta["poly_degree"]), int(meta["slice_width"])))
        return tuple(maps)

    return PhiPair(side_maps("q"), side_maps("k")), int(meta["block"]), int(meta["rate"])


# ---------------------------------------------------------------------------
# Model checkpoints
# ---------------------------------------------------------------------------


def save_model(path, model: ToyModel, provenance: dict | None = None) -> None:
    """Whole-model checkpoint: every parameter plus the block kind manifest."""
    from dataclasses import asdict

    tensors = dict(iter_model_params(model))
    meta = {
        "kind": "model",
        "dims": asdict(model.dims),
        "timesteps": list(model.timesteps),
        "block_kinds": [b.kind for b in model.blocks],
        "block_rates": [b.rate for b in model.blocks],
        "hybrid_modes": [b.hybrid_mode for b in model.blocks],
        "provenance": provenance or {},
    }
    save_tensors(path, tensors, meta)


def load_model(path) -> ToyModel:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "model":
        raise ValueError(f"{path}: not a model checkpoint")
    dims = ModelDims(**meta["dims"])
    timesteps = tuple(meta["timesteps"])
    # Build a skeleton with the right structure, then swap in every stored
    # parameter. Feature maps are reconstructed from the stored arrays.
    model = init_toy_model(SeededRng(0), dims, timesteps)
    blocks = []
    for i, (kind, rate, mode) in enumerate(
        zip(meta["block_kinds"], meta["block_rates"], meta["hybrid_modes"])
    ):
        blk = model.blocks[i]
        phi = None
        if kind != "softmax":
            phi = _phi_from_params(tensors, f"block{i}.", dims)
        blocks.append(type(blk)(blk.attention, blk.ffn, phi, kind, rate, mode))
    model = type(model)(
        dims, timesteps, blocks,
        model.embed_in_w, model.embed_in_b,
        model.embed_out_w, model.embed_out_b, model.temb,
    )
    return replace_model_params(model, tensors)


def _phi_from_params(tensors: dict, prefix: str, dims: ModelDims) -> PhiPair:
    def side_maps(side):
        maps = []
        for h in range(dims.heads):
            layers = []
            li = 0
            while f"{prefix}{side}.h{h}.l{li}.w" in tensors:
                layers.append(
                    (tensors[f"{prefix}{side}.h{h}.l{li}.w"], tensors[f"{prefix}{side}.h{h}.l{li}.b"])
                )
                li += 1
            maps.append(FeatureMap(layers, dims.poly_degree, dims.slice_w))
        return tuple(maps)

    return PhiPair(side_maps("phi_q"), side_maps("phi_k"))


# ---------------------------------------------------------------------------
# Tables and plans (JSON)
# ---------------------------------------------------------------------------


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _encode_matrix(arr) -> list:
    # inf marks a diverged entry; JSON has no inf, so ship it as a string
    return [[("inf" if np.isinf(x) else float(x)) for x in row] for row in np.asarray(arr)]


def _decode_matrix(rows) -> np.ndarray:
    return np.array(
        [[np.inf if x == "inf" else float(x) for x in row] for row in rows], dtype=np.float64
    )


def save_error_table(path, table: ErrorTable) -> None:
    _write_json(
        path,
        {
            "format": "error-table",
            "version": _FORMAT_VERSION,
            "rates": list(table.rates),
            "blocks": table.n_blocks,
            "e": _encode_matrix(table.e),
            "metadata": table.metadata,
        },
    )


def load_error_table(path) -> ErrorTable:
    obj = _read_json(path)
    if obj.get("format") != "error-table":
        raise ValueError(f"{path}: not an error table")
    return ErrorTable(_decode_matrix(obj["e"]), tuple(obj["rates"]), obj.get("metadata", {}))


def save_cost_table(path, table: CostTable) -> None:
    from dataclasses import asdict

    _write_json(
        path,
        {
            "format": "cost-table",
            "version": _FORMAT_VERSION,
            "rates": list(table.rates),
            "blocks": table.n_blocks,
            "c": _encode_matrix(table.c),
            "dims": asdict(table.dims) if table.dims else None,
        },
    )


def load_cost_table(path) -> CostTable:
    obj = _read_json(path)
    if obj.get("format") != "cost-table":
        raise ValueError(f"{path}: not a cost table")
    dims = ModelDims(**obj["dims"]) if obj.get("dims") else None
    return CostTable(_decode_matrix(obj["c"]), tuple(obj["rates"]), dims)


def save_plan(path, plan: RatePlan) -> None:
    _write_json(
        path,
        {
            "format": "rate-plan",
            "version": _FORMAT_VERSION,
            "rates": list(plan.rates),
            "objective": plan.objective,
            "cost": plan.cost,
            "budget": plan.budget,
        },
    )


def load_plan(path) -> RatePlan:
    obj = _read_json(path)
    if obj.get("format") != "rate-plan":
        raise ValueError(f"{path}: not a rate plan")
    return RatePlan(tuple(obj["rates"]), obj["objective"], obj["cost"], obj.get("budget"))
