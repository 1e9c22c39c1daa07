"""Gradients, derivative identities of the gating score, and rank checks.

Three layers live here:

* the analytic squared-loss gradient (``grad_mse``) and the central
  finite-difference oracle (``finite_diff_gradient``) that validates it;
* executable forms of the score-scaling identities: ``pde_residual``
  contracts the analytic gradient of H = exp(score) * h against the router
  vector (identically zero for the cosine score, nonzero once the norms are
  offset), and ``homogeneity_residual`` does the same for higher orders via
  the scale path s -> F(x, (1+s) * beta1);
* a sampled singular-value surrogate (``identifiability_check``) for the
  linear independence of the derivative family of exp(score) * h, which
  separates expert families with degenerate derivative ladders (linear,
  constant) from those without (relu, tanh, gelu, sigmoid, polynomial).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import ConfigError, ContractError, EvaluationError
from .model import (
    DEGENERATE_NORM,
    Dataset,
    ExpertFamily,
    MixingMeasure,
    RouterSpec,
    measure_from_packed,
    router_score,
)

RANK_DEFICIENCY_RTOL = 1e-8
RANK_SAMPLES = 512
RANK_REPETITIONS = 16


@dataclass(frozen=True)
class GradientRecord:
    """Partial derivatives of a scalar objective w.r.t. a mixing measure."""

    d_beta0: np.ndarray  # (k,)
    d_beta1: np.ndarray  # (k, d1)
    d_eta: np.ndarray  # (k, d1+1)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.d_beta0, self.d_beta1.ravel(), self.d_eta.ravel()])


def flatten_measure(G: MixingMeasure) -> np.ndarray:
    """Pack a measure as [beta0 (k), beta1 (k*d1), eta (k*(d1+1))]."""
    beta0, B1, A, b = G.packed()
    eta = np.concatenate([A, b[:, None]], axis=1)
    return np.concatenate([beta0, B1.ravel(), eta.ravel()])


def unflatten_measure(theta: np.ndarray, k: int, d1: int) -> MixingMeasure:
    beta0 = theta[:k]
    B1 = theta[k : k + k * d1].reshape(k, d1)
    eta = theta[k + k * d1 :].reshape(k, d1 + 1)
    return measure_from_packed(beta0, B1, eta[:, :d1], eta[:, d1])


def grad_mse(
    spec: RouterSpec, family: ExpertFamily, G: MixingMeasure, batch: Dataset
) -> tuple[float, GradientRecord]:
    """Batch MSE and its exact analytic gradient.

    mse = mean((y - predict)^2); the gradient chains through the softmax,
    the router score (quotient rule for the normalized scores, with zero
    contribution at degenerate cosine norms) and the expert activation
    (relu subgradient at the kink taken as 0).
    """
    if batch.n == 0:
        raise ContractError("empty batch")
    if batch.X.shape[1] != G.d1:
        raise ContractError("batch dimension does not match the measure")
    beta0, B1, A, b = G.packed()
    mse, d0, dB1, dA, db = backend.mse_and_grad_packed(
        spec, family, beta0, B1, A, b, batch.X, batch.Y
    )
    return mse, GradientRecord(d0, dB1, np.concatenate([dA, db[:, None]], axis=1))


def mse_objective(spec: RouterSpec, family: ExpertFamily, data: Dataset, k: int, d1: int):
    """Batch MSE as a function of the flattened parameter vector."""

    def objective(theta: np.ndarray) -> float:
        G = unflatten_measure(theta, k, d1)
        pred = backend.predict_batch(spec, family, G, data.X)
        resid = data.Y - pred
        return float(resid @ resid) / data.n

    return objective


def finite_diff_gradient(objective, theta: np.ndarray, h_rel: float = 1e-5) -> np.ndarray:
    """Central finite differences with per-coordinate step h_rel*(1+|theta_j|)."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for j in range(theta.size):
        h = h_rel * (1.0 + abs(theta[j]))
        up = theta.copy()
        up[j] += h
        down = theta.copy()
        down[j] -= h
        fu, fd = objective(up), objective(down)
        if not (math.isfinite(fu) and math.isfinite(fd)):
            raise EvaluationError(f"objective non-finite near coordinate {j}")
        grad[j] = (fu - fd) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# analytic score derivatives (per input, per atom)


def score_gradient(spec: RouterSpec, beta1: np.ndarray, x: np.ndarray) -> np.ndarray:
    """d score / d beta1 for one router vector and one input."""
    beta1 = np.asarray(beta1, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == "linear":
        return x.copy()
    nb = float(np.linalg.norm(beta1))
    nx = float(np.linalg.norm(x))
    if spec.kind == "cosine":
        if nb < DEGENERATE_NORM or nx < DEGENERATE_NORM:
            return np.zeros_like(beta1)
        s = float(beta1 @ x) / (nb * nx)
        return x / (nb * nx) - s * beta1 / nb**2
    s = float(beta1 @ x) / ((nb + spec.tau1) * (nx + spec.tau2))
    out = x / ((nb + spec.tau1) * (nx + spec.tau2))
    if nb >= DEGENERATE_NORM:
        out = out - s * beta1 / ((nb + spec.tau1) * nb)
    return out


def score_hessian(spec: RouterSpec, beta1: np.ndarray, x: np.ndarray) -> np.ndarray:
    """d^2 score / d beta1^2 for the perturbed router (smooth everywhere off 0)."""
    if spec.kind != "perturbed":
        raise ContractError("score_hessian is implemented for the perturbed router")
    beta1 = np.asarray(beta1, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    u = float(np.linalg.norm(beta1))
    if u < DEGENERATE_NORM:
        raise ContractError("score_hessian requires a nondegenerate router vector")
    w2 = float(np.linalg.norm(x)) + spec.tau2
    c = float(beta1 @ x)
    g2 = 1.0 / (u * (u + spec.tau1) ** 2)
    dg2 = -1.0 / (u**2 * (u + spec.tau1) ** 2) - 2.0 / (u * (u + spec.tau1) ** 3)
    H = -g2 * (np.outer(x, beta1) + np.outer(beta1, x))
    H -= c * g2 * np.eye(beta1.size)
    H -= (c * dg2 / u) * np.outer(beta1, beta1)
    return H / w2


def _check_admissible(beta1, x):
    if float(np.linalg.norm(beta1)) < DEGENERATE_NORM or float(np.linalg.norm(x)) < DEGENERATE_NORM:
        raise ContractError("identity requires nondegenerate beta1 and x")


def pde_residual(
    spec: RouterSpec,
    beta1: np.ndarray,
    eta: np.ndarray,
    family: ExpertFamily,
    x: np.ndarray,
) -> float:
    """Contraction beta1' dH/dbeta1 with H = exp(score) * h(x, eta).

    Zero (to rounding) for the scale-invariant cosine score; equals
    H * tau1 * beta1'x / ((||beta1||+tau1)^2 (||x||+tau2)) for the perturbed
    score; (beta1'x) * exp(beta1'x) * h for the linear score.
    """
    from .model import expert_value

    beta1 = np.asarray(beta1, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check_admissible(beta1, x)
    H = math.exp(router_score(spec, beta1, x)) * expert_value(family, eta, x)
    return H * float(beta1 @ score_gradient(spec, beta1, x))


def homogeneity_residual(spec: RouterSpec, beta1: np.ndarray, x: np.ndarray, t: int) -> float:
    """Order-t contraction of the derivatives of F = exp(score) against beta1.

    Evaluated through the scale path phi(s) = F(x, (1+s) beta1), whose t-th
    derivative at s = 0 equals the multi-index contraction by the chain
    rule. t = 1 is analytic; t = 2 uses a central second difference with
    step 1e-3.
    """
    beta1 = np.asarray(beta1, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check_admissible(beta1, x)
    if t == 1:
        F = math.exp(router_score(spec, beta1, x))
        return F * float(beta1 @ score_gradient(spec, beta1, x))
    if t == 2:
        h = 1e-3

        def phi(s: float) -> float:
            return math.exp(router_score(spec, (1.0 + s) * beta1, x))

        return (phi(h) - 2.0 * phi(0.0) + phi(-h)) / h**2
    raise ContractError(f"t must be 1 or 2, got {t}")


# ---------------------------------------------------------------------------
# identifiability rank check


@dataclass(frozen=True)
class IdentifiabilityReport:
    """Worst-case singular-value extremes of the sampled derivative matrix."""

    order: int
    matrix_rows: int
    matrix_cols: int
    min_singular_value: float
    max_singular_value: float
    deficient: bool

    def __str__(self):
        tag = "DEFICIENT" if self.deficient else "full-rank"
        return (
            f"order={self.order} rows={self.matrix_rows} cols={self.matrix_cols} "
            f"sv_min={self.min_singular_value:.3e} sv_max={self.max_singular_value:.3e} "
            f"[{tag}]"
        )


def _activation_ladder(family: ExpertFamily, U: np.ndarray, b: float):
    """(h, dh_db, d2h_db2) sampled over preactivations; None = not twice
    classically differentiable (relu), so no second-order column exists."""
    if family.kind == "constant":
        return np.full_like(U, b), np.ones_like(U), np.zeros_like(U)
    if family.kind == "linear":
        return U.copy(), np.ones_like(U), np.zeros_like(U)
    if family.kind == "polynomial":
        p = family.degree
        return U**p, p * U ** (p - 1), p * (p - 1) * U ** (p - 2)
    act = family.activation
    if act == "relu":
        return np.maximum(U, 0.0), (U > 0.0).astype(np.float64), None
    if act == "tanh":
        th = np.tanh(U)
        return th, 1.0 - th * th, -2.0 * th * (1.0 - th * th)
    if act == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-U))
        return s, s * (1.0 - s), s * (1.0 - s) * (1.0 - 2.0 * s)
    if act == "gelu":
        cdf = 0.5 * (1.0 + np.vectorize(math.erf)(U / math.sqrt(2.0)))
        pdf = np.exp(-0.5 * U * U) / math.sqrt(2.0 * math.pi)
        return U * cdf, cdf + U * pdf, pdf * (2.0 - U * U)
    raise ContractError(f"unknown activation {act!r}")


def _expert_alive(family: ExpertFamily, U: np.ndarray) -> bool:
    """Reject degenerate parameter draws whose expert carries no mass on the
    sampled domain (e.g. a relu inactive almost everywhere): the
    independence condition quantifies over nondegenerate representatives,
    so a dead expert refutes nothing about the family."""
    if family.kind == "ffn" and family.activation == "relu":
        return float(np.mean(U > 0.0)) >= 0.1
    return True


def _derivative_columns(spec, family, atoms, X, order):
    """Sampled derivative functions of exp(score) * h for every atom.

    Per atom the column set is the derivative ladder: the function itself,
    all router-vector first partials, the expert derivative along its bias
    coordinate, and at order 2 the router second partials, the mixed
    router-bias partials, and the second bias derivative where the family
    is twice classically differentiable. Restricting the expert block to
    the bias direction keeps one representative of each genuinely new
    derivative function phi^(m) while leaving out the monomial-dressed
    copies, whose affine-scaling redundancies would otherwise dominate the
    rank test for every homogeneous family.
    """
    M, d1 = X.shape
    cols = []
    for beta0, beta1, a, b in atoms:
        scores = np.array([router_score(spec, beta1, x) for x in X])
        F = np.exp(scores)
        grads = np.array([score_gradient(spec, beta1, x) for x in X])  # (M, d1)
        U = X @ a + b
        h, dphi, ddphi = _activation_ladder(family, U, b)
        if family.kind == "constant":
            U = np.zeros(M)

        cols.append(F * h)
        for u in range(d1):
            cols.append(F * grads[:, u] * h)
        cols.append(F * dphi)
        if order == 2:
            hess = np.array([score_hessian(spec, beta1, x) for x in X])  # (M, d1, d1)
            for u in range(d1):
                for v in range(u, d1):
                    cols.append(F * (grads[:, u] * grads[:, v] + hess[:, u, v]) * h)
            for u in range(d1):
                cols.append(F * grads[:, u] * dphi)
            if ddphi is not None:
                cols.append(F * ddphi)
    return np.array(cols).T  # (M, n_cols)


def identifiability_check(
    spec: RouterSpec,
    family: ExpertFamily,
    k: int,
    order: int,
    seed: int,
    d1: int = 2,
) -> IdentifiabilityReport:
    """Sampled rank test of the derivative family of exp(score) * h.

    Draws k atoms with distinct expert parameters, samples 512 inputs from
    Uniform([-1,1]^d1), assembles the derivative columns up to the given
    order, and reports singular-value extremes (unit-normalized nonzero
    columns; identically zero derivative functions stay as zero columns).
    Repeats over 16 seeded draws and reports the most deficient one. This
    samples a finite surrogate of an almost-everywhere independence
    condition: evidence, not proof.
    """
    from .rng import Stream, derive_seed

    if spec.kind != "perturbed":
        raise ContractError("identifiability_check is defined for the perturbed router")
    if order not in (1, 2):
        raise ContractError(f"order must be 1 or 2, got {order}")
    if k < 1:
        raise ContractError("k must be >= 1")

    worst = None
    for rep in range(RANK_REPETITIONS):
        stream = Stream(derive_seed(seed, f"identifiability/{rep}"))
        X = stream.uniform(-1.0, 1.0, RANK_SAMPLES * d1).reshape(RANK_SAMPLES, d1)
        atoms = []
        for _ in range(k):
            beta0 = float(stream.normal(1)[0])
            beta1 = stream.normal(d1)
            for _attempt in range(1000):
                a = np.zeros(d1) if family.kind == "constant" else stream.normal(d1)
                b = float(stream.normal(1)[0])
                if _expert_alive(family, X @ a + b):
                    break
            else:
                raise ContractError("could not draw a nondegenerate expert")
            atoms.append((beta0, beta1, a, b))

        matrix = _derivative_columns(spec, family, atoms, X, order)
        if matrix.shape[0] < matrix.shape[1]:
            raise ConfigError(
                f"rank test needs more rows than columns, got {matrix.shape}"
            )
        norms = np.linalg.norm(matrix, axis=0)
        nonzero = norms > 0.0
        matrix = matrix.copy()
        matrix[:, nonzero] /= norms[nonzero]
        sv = np.linalg.svd(matrix, compute_uv=False)
        smin, smax = float(sv[-1]), float(sv[0])
        if worst is None or smin * worst[1] < worst[0] * smax:
            worst = (smin, smax, matrix.shape)

    smin, smax, shape = worst
    return IdentifiabilityReport(
        order=order,
        matrix_rows=shape[0],
        matrix_cols=shape[1],
        min_singular_value=smin,
        max_singular_value=smax,
        deficient=bool(smin < RANK_DEFICIENCY_RTOL * smax),
    )
