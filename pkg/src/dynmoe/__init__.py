"""Mixture-of-experts layers with threshold-gated variable-k routing,
an orthogonality-plus-norm auxiliary loss, and an adaptive process that
grows and prunes the expert set during training."""

from .adaptive import AdaptConfig, AdaptReport, RoutingRecord, adapt, init_new_expert, record
from .losses import (
    AuxLossReport,
    diversity_simplicity_loss,
    get_plugin,
    gshard_style_balance_loss,
)
from .moe_layer import (
    ExpertMlp,
    MoeLayer,
    count_activated_params,
    load_layer,
    moe_backward,
    moe_forward,
    moe_forward_weighted,
    save_layer,
)
from .numerics import (
    ConfigurationError,
    DegenerateInputError,
    DimensionError,
    DivergenceError,
    NonFiniteError,
    Param,
    cosine_scores,
    finite_diff_grad,
    matmul,
    sigmoid,
)
from .router import (
    GatingDecision,
    RouterParams,
    TopKDecision,
    route_eval,
    route_top_any,
    route_top_any_backward,
    route_top_k_baseline,
)

__all__ = [
    "AdaptConfig",
    "AdaptReport",
    "AuxLossReport",
    "ConfigurationError",
    "DegenerateInputError",
    "DimensionError",
    "DivergenceError",
    "ExpertMlp",
    "GatingDecision",
    "MoeLayer",
    "NonFiniteError",
    "Param",
    "RouterParams",
    "RoutingRecord",
    "TopKDecision",
    "adapt",
    "cosine_scores",
    "count_activated_params",
    "diversity_simplicity_loss",
    "finite_diff_grad",
    "get_plugin",
    "gshard_style_balance_loss",
    "init_new_expert",
    "load_layer",
    "matmul",
    "moe_backward",
    "moe_forward",
    "moe_forward_weighted",
    "record",
    "route_eval",
    "route_top_any",
    "route_top_any_backward",
    "route_top_k_baseline",
    "save_layer",
    "sigmoid",
]

__version__ = "0.1.0"
