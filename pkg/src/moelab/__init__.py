"""Router mixture-of-experts regression lab.

Cosine, perturbed-cosine, and linear gating over single-feature experts;
least-squares fitting by mini-batch SGD; Voronoi losses against generating
parameters; convergence-rate sweeps with log-log slope fits; and numerical
diagnostics for the gating-score identities and expert identifiability.
"""

from .model import (
    Atom,
    Dataset,
    ExpertFamily,
    MixingMeasure,
    RouterSpec,
    constant_experts,
    cosine_router,
    expert_value,
    ffn_experts,
    gating_weights,
    linear_experts,
    linear_router,
    measure_from_packed,
    perturbed_router,
    polynomial_experts,
    predict,
    router_score,
)

__version__ = "0.1.0"

__all__ = [
    "Atom",
    "Dataset",
    "ExpertFamily",
    "MixingMeasure",
    "RouterSpec",
    "constant_experts",
    "cosine_router",
    "expert_value",
    "ffn_experts",
    "gating_weights",
    "linear_experts",
    "linear_router",
    "measure_from_packed",
    "perturbed_router",
    "polynomial_experts",
    "predict",
    "router_score",
]
