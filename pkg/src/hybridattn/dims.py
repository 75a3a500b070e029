"""Shared dimension bundle for kernels, feature maps, and the FLOPs model."""

from __future__ import annotations

from dataclasses import dataclass, fields


@dataclass(frozen=True)
class ModelDims:
    """Sizes of one attention stack.

    ``heads * v_dim`` must equal ``model_dim`` whenever blocks are stacked
    with a residual connection (the attention output is added to its input
    and there is no separate output projection).
    """

    n_tokens: int = 64
    model_dim: int = 32
    heads: int = 2
    qk_dim: int = 8
    v_dim: int = 16
    blocks: int = 4
    ffn_hidden: int = 0        # 0 means 2 * model_dim
    poly_degree: int = 2
    slice_width: int = 0       # 0 means qk_dim
    phi_hidden: int = 0        # 0 means qk_dim
    phi_depth: int = 2

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or v < 0:
                raise ValueError(f"{f.name} must be a non-negative integer, got {v!r}")
        for name in ("n_tokens", "model_dim", "heads", "qk_dim", "v_dim",
                     "blocks", "poly_degree", "phi_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def ffn_width(self) -> int:
        return self.ffn_hidden or 2 * self.model_dim

    @property
    def slice_w(self) -> int:
        return self.slice_width or self.qk_dim

    @property
    def phi_width(self) -> int:
        return self.phi_hidden or self.qk_dim

    @property
    def feature_dim(self) -> int:
        """Output width of one feature map: poly_degree * slice width."""
        return self.poly_degree * self.slice_w


def phi_layer_widths(dims: ModelDims) -> list[tuple[int, int]]:
    """(in, out) widths of the feature-map MLP layers, depth phi_depth."""
    ins = [dims.qk_dim] + [dims.phi_width] * (dims.phi_depth - 1)
    outs = [dims.phi_width] * (dims.phi_depth - 1) + [dims.feature_dim]
    return list(zip(ins, outs))
