"""Toolkit for converting softmax attention blocks into linear/hybrid attention.

The pieces, bottom to top:

* :mod:`hybridattn.numerics`      - checked float64 arrays, deterministic RNG,
  finite-difference gradient oracle.
* :mod:`hybridattn.attention`     - softmax / linear / hybrid kernels, token
  partition, learnable non-negative feature maps, transformer block.
* :mod:`hybridattn.backprop`      - hand-derived gradients for all of the above.
* :mod:`hybridattn.distill`       - per-block feature-map distillation against a
  frozen teacher and the per-(block, rate) error table.
* :mod:`hybridattn.planner`       - FLOPs cost model and budgeted block-rate
  selection (multiple-choice knapsack, plus a homogeneous baseline).
* :mod:`hybridattn.toymodel`      - small denoising transformer used as teacher
  and student, synthetic data, surgery, finetuning, fidelity metrics.
* :mod:`hybridattn.serialization` - tensor container files, checkpoints, tables.
* :mod:`hybridattn.cli`           - batch front door over the pipeline stages.
"""

from .numerics import (
    EvaluationError,
    NonFiniteError,
    SeededRng,
    ShapeError,
    as_tensor,
    checked_mode,
    finite_diff_grad,
    gaussian,
    matmul,
    row_softmax_stabilized,
)
from .dims import ModelDims, phi_layer_widths
from .attention import (
    AttentionWeights,
    BlockParams,
    FeatureMap,
    FfnWeights,
    PhiPair,
    TokenPartition,
    apply_feature_map,
    block_forward,
    hybrid_attention,
    init_feature_map,
    init_phi_pair,
    linear_attention,
    partition_tokens,
    project_qkv,
    softmax_attention,
)
from .optim import AdamState, TreeAdamW, adamw_step, init_adam_state

__version__ = "0.1.0"
