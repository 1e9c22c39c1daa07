"""Selects the batch-kernel backend at import time.

The compiled extension is preferred when importable; the numpy fallback is
used otherwise. ``MOELAB_BACKEND=python`` (or ``cython``) forces a choice,
which the parity tests and the benchmark rely on. Both backends implement
the same two entry points with identical semantics.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py
from .errors import ContractError
from .model import ExpertFamily, MixingMeasure, RouterSpec

_choice = os.environ.get("MOELAB_BACKEND", "").lower()
if _choice in ("", "cython"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        if _choice == "cython":
            raise
        _impl = _kernels_py
        BACKEND = "python"
elif _choice == "python":
    _impl = _kernels_py
    BACKEND = "python"
else:
    raise ContractError(f"unknown MOELAB_BACKEND value {_choice!r}")

# Above this batch size the vectorized numpy path wins (SIMD exp + BLAS
# matmuls beat the scalar-loop extension); below it the extension wins
# (no per-call array machinery). Purely a speed dispatch: both paths agree
# to float tolerance, and the cut depends only on the batch size, so
# results stay deterministic.
LARGE_BATCH = 4096


def _dispatch(n_rows: int):
    if BACKEND == "cython" and n_rows > LARGE_BATCH:
        return _kernels_py
    return _impl

_ROUTER_CODE = {"linear": 0, "cosine": 1, "perturbed": 2}
_FAMILY_CODE = {"linear": 0, "polynomial": 1, "constant": 6}
_ACT_CODE = {"relu": 2, "gelu": 3, "tanh": 4, "sigmoid": 5}


def kernel_codes(spec: RouterSpec, family: ExpertFamily) -> tuple[int, float, float, int, int]:
    router = _ROUTER_CODE[spec.kind]
    if family.kind == "ffn":
        fam = _ACT_CODE[family.activation]
    else:
        fam = _FAMILY_CODE[family.kind]
    return router, spec.tau1, spec.tau2, fam, family.degree


def predict_batch(spec: RouterSpec, family: ExpertFamily, G: MixingMeasure, X) -> np.ndarray:
    """Vectorized model predictions over the rows of X."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != G.d1:
        raise ContractError(f"X must be (n, {G.d1}), got {X.shape}")
    beta0, B1, A, b = G.packed()
    impl = _dispatch(X.shape[0])
    return impl.predict_batch(X, beta0, B1, A, b, *kernel_codes(spec, family))


def mse_and_grad_packed(spec, family, beta0, B1, A, b, X, Y, nx=None):
    """Backend gradient on the packed parameter arrays (hot path).

    ``nx`` optionally carries precomputed per-row norms of X (bitwise equal
    to recomputation because the norm of a row depends only on that row).
    """
    impl = _dispatch(X.shape[0])
    return impl.mse_and_grad(X, Y, beta0, B1, A, b, *kernel_codes(spec, family), nx=nx)


def row_norms(X) -> np.ndarray:
    return _kernels_py.row_norms(X)
