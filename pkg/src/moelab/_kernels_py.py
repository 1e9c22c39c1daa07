"""Pure-numpy batch kernels: forward pass and analytic squared-loss gradient.

This is the fallback (and large-batch) implementation paired with the
compiled extension in ``_kernels.pyx``. Both expose the same entry points
and must agree to float tolerance; within one backend the gradient's
internal forward pass reuses exactly the prediction code path, so
residuals on data generated by the same model are bitwise zero.

Large (n, k) temporaries are drawn from a per-thread workspace pool:
re-mapping ~25 multi-megabyte arrays per call otherwise dominates the run
time through page faults. Pooled buffers never escape; outputs are fresh
arrays.

Encodings (shared with the extension):
    router: 0 linear, 1 cosine, 2 perturbed
    family: 0 linear, 1 polynomial(degree), 2 relu, 3 gelu, 4 tanh,
            5 sigmoid, 6 constant
"""

from __future__ import annotations

import math
import threading

import numpy as np

DEGENERATE_NORM = 1e-12
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_erf = np.frompyfunc(math.erf, 1, 1)


def _erf_array(z: np.ndarray) -> np.ndarray:
    return _erf(z).astype(np.float64)


def row_norms(X: np.ndarray) -> np.ndarray:
    """Per-row Euclidean norms; row i depends only on row i, so slices of a
    precomputed full-array result are bitwise identical to recomputation."""
    return np.sqrt(np.einsum("ij,ij->i", X, X))


_POOL: dict = {}
_POOL_LIMIT = 64


def _workspace(n: int, k: int):
    key = (threading.get_ident(), n, k)
    ws = _POOL.get(key)
    if ws is None:
        if len(_POOL) >= _POOL_LIMIT:
            _POOL.clear()
        ws = {
            "S": np.empty((n, k)),
            "W": np.empty((n, k)),
            "U": np.empty((n, k)),
            "H": np.empty((n, k)),
            "F": np.empty(n),
            "E": np.empty(n),
            "n1": np.empty((n, 1)),
        }
        _POOL[key] = ws
    return ws


def _phi_into(U, family, degree, out):
    if family == 0:
        np.copyto(out, U)
    elif family == 1:
        np.power(U, degree, out=out)
    elif family == 2:
        np.maximum(U, 0.0, out=out)
    elif family == 3:
        np.multiply(U, _INV_SQRT2, out=out)
        out[...] = _erf_array(out)
        out += 1.0
        out *= 0.5
        out *= U
    elif family == 4:
        np.tanh(U, out=out)
    elif family == 5:
        np.negative(U, out=out)
        np.exp(out, out=out)
        out += 1.0
        np.reciprocal(out, out=out)
    else:
        raise ValueError(f"unknown family code {family}")


def _dphi_into(U, family, degree, out):
    """Activation derivative written into ``out`` (may alias buffers other
    than U). The relu subgradient at the kink is 0."""
    if family == 0:
        out.fill(1.0)
    elif family == 1:
        np.power(U, degree - 1, out=out)
        out *= degree
    elif family == 2:
        np.heaviside(U, 0.0, out=out)
    elif family == 3:
        cdf = 0.5 * (1.0 + _erf_array(U * _INV_SQRT2))
        np.multiply(U, U, out=out)
        out *= -0.5
        np.exp(out, out=out)
        out *= _INV_SQRT2PI
        out *= U
        out += cdf
    elif family == 4:
        np.tanh(U, out=out)
        out *= out
        np.subtract(1.0, out, out=out)
    elif family == 5:
        np.negative(U, out=out)
        np.exp(out, out=out)
        out += 1.0
        np.reciprocal(out, out=out)  # sigma
        tmp = 1.0 - out
        out *= tmp
    else:
        raise ValueError(f"unknown family code {family}")


def _forward(X, beta0, B1, A, b, router, tau1, tau2, family, degree, nx, ws):
    n, k = X.shape[0], beta0.shape[0]
    if nx is None:
        nx = row_norms(X)
    S, W, U, H, F = ws["S"], ws["W"], ws["U"], ws["H"], ws["F"]
    np.matmul(X, B1.T, out=S)
    nb = row_norms(B1)
    if router == 1:
        ok_b = nb >= DEGENERATE_NORM
        ok_x = nx >= DEGENERATE_NORM
        inv_b = np.where(ok_b, 1.0 / np.where(ok_b, nb, 1.0), 0.0)
        inv_x = np.where(ok_x, 1.0 / np.where(ok_x, nx, 1.0), 0.0)
        S *= inv_b[None, :]
        S *= inv_x[:, None]
    elif router == 2:
        S *= (1.0 / (nb + tau1))[None, :]
        S *= (1.0 / (nx + tau2))[:, None]

    m = ws["n1"]
    np.add(S, beta0[None, :], out=W)
    np.max(W, axis=1, keepdims=True, out=m)
    W -= m
    np.exp(W, out=W)
    np.sum(W, axis=1, keepdims=True, out=m)
    W /= m

    if family == 6:
        U.fill(0.0)
        H[...] = b[None, :]
    else:
        np.matmul(X, A.T, out=U)
        U += b[None, :]
        _phi_into(U, family, degree, H)
    np.einsum("nk,nk->n", W, H, out=F)
    return S, nb, nx


def predict_batch(X, beta0, B1, A, b, router, tau1, tau2, family, degree, nx=None):
    """Model predictions for every row of X; returns a fresh (n,) array."""
    ws = _workspace(X.shape[0], beta0.shape[0])
    _forward(X, beta0, B1, A, b, router, tau1, tau2, family, degree, nx, ws)
    return ws["F"].copy()


def mse_and_grad(X, Y, beta0, B1, A, b, router, tau1, tau2, family, degree, nx=None):
    """Mean squared error and its analytic gradient over a batch.

    Returns (mse, d_beta0 (k,), d_B1 (k,d1), d_A (k,d1), d_b (k,)) for the
    objective mean((Y - predict)^2).
    """
    n, k = X.shape[0], beta0.shape[0]
    ws = _workspace(n, k)
    S, nb, nx = _forward(X, beta0, B1, A, b, router, tau1, tau2, family, degree, nx, ws)
    W, U, H, F, E = ws["W"], ws["U"], ws["H"], ws["F"], ws["E"]

    np.subtract(F, Y, out=E)
    mse = float(E @ E) / n
    E *= 2.0 / n

    # Gz = (2/n) e w_i (h_i - f): the softmax-logit gradient (into H)
    H -= F[:, None]
    W *= E[:, None]  # W becomes P = (2/n) e w_i
    H *= W
    Gz = H
    d_beta0 = Gz.sum(axis=0)

    if router == 0:
        d_B1 = Gz.T @ X
    elif router == 1:
        ok_b = nb >= DEGENERATE_NORM
        ok_x = nx >= DEGENERATE_NORM
        inv_nb = np.where(ok_b, 1.0 / np.where(ok_b, nb, 1.0), 0.0)
        inv_nx = np.where(ok_x, 1.0 / np.where(ok_x, nx, 1.0), 0.0)
        coef = np.einsum("nk,nk->k", Gz, S) * inv_nb**2
        Gz *= inv_nx[:, None]
        d_B1 = (Gz.T @ X) * inv_nb[:, None]
        d_B1 -= coef[:, None] * B1
        d_B1[~ok_b] = 0.0
    else:
        ok_b = nb >= DEGENERATE_NORM
        inv_nb = np.where(ok_b, 1.0 / np.where(ok_b, nb, 1.0), 0.0)
        coef = np.einsum("nk,nk->k", Gz, S) * inv_nb / (nb + tau1)
        Gz *= (1.0 / (nx + tau2))[:, None]
        d_B1 = (Gz.T @ X) * (1.0 / (nb + tau1))[:, None]
        d_B1 -= coef[:, None] * B1

    if family == 6:
        d_A = np.zeros_like(A)
        d_b = W.sum(axis=0)
    else:
        _dphi_into(U, family, degree, S)  # S is free now
        W *= S  # P * phi'(u)
        d_A = W.T @ X
        d_b = W.sum(axis=0)

    return mse, d_beta0, d_B1, d_A, d_b
