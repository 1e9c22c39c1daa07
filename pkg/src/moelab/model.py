"""Parameter containers and the mixture-of-experts forward pass.

A model is a mixing measure: an ordered list of atoms, each carrying a
log-weight ``beta0``, a router vector ``beta1`` and expert parameters
``eta = (a, b)``. The regression function is

    predict(x) = sum_i softmax(score_i(x) + beta0_i) * h(x, eta_i)

where the router score and the expert map h are selected by ``RouterSpec``
and ``ExpertFamily``. Everything here is immutable after construction and
pure, so unrestricted concurrent use is safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

# below this norm the cosine score (and its gradient contribution) is 0:
# the symmetric, limit-free choice, and the value the perturbed formula
# takes at beta1 = 0.
DEGENERATE_NORM = 1e-12

ROUTER_KINDS = ("linear", "cosine", "perturbed")
FAMILY_KINDS = ("linear", "polynomial", "ffn", "constant")
ACTIVATIONS = ("relu", "gelu", "tanh", "sigmoid")


def _as_readonly(v, name: str) -> np.ndarray:
    arr = np.array(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractError(f"{name} must be a 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RouterSpec:
    """Which gating score to use: linear, cosine, or perturbed cosine.

    ``tau1``/``tau2`` are the norm offsets of the perturbed score and are
    only meaningful for ``kind="perturbed"``.
    """

    kind: str
    tau1: float = 0.0
    tau2: float = 0.0

    def __post_init__(self):
        if self.kind not in ROUTER_KINDS:
            raise ContractError(f"unknown router kind {self.kind!r}")
        if self.kind == "perturbed":
            if not (self.tau1 > 0.0 and self.tau2 > 0.0):
                raise ContractError("perturbed router requires tau1 > 0 and tau2 > 0")
        elif self.tau1 or self.tau2:
            raise ContractError(f"{self.kind} router carries no tau parameters")

    @property
    def name(self) -> str:
        return {"linear": "Linear", "cosine": "Cosine", "perturbed": "PerturbedCosine"}[self.kind]


def linear_router() -> RouterSpec:
    return RouterSpec("linear")


def cosine_router() -> RouterSpec:
    return RouterSpec("cosine")


def perturbed_router(tau1: float, tau2: float | None = None) -> RouterSpec:
    return RouterSpec("perturbed", tau1, tau1 if tau2 is None else tau2)


@dataclass(frozen=True)
class ExpertFamily:
    """Expert map h(x, (a, b)) on a single affine feature u = a'x + b.

    linear        u
    polynomial    u**degree           (degree >= 2)
    ffn           activation(u)       (relu / gelu / tanh / sigmoid)
    constant      b, with a inert     (diagnostics-only family)
    """

    kind: str
    degree: int = 0
    activation: str = ""

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise ContractError(f"unknown expert family {self.kind!r}")
        if self.kind == "polynomial" and self.degree < 2:
            raise ContractError("polynomial family requires degree >= 2")
        if self.kind == "ffn" and self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")

    @property
    def name(self) -> str:
        if self.kind == "polynomial":
            return f"polynomial_{self.degree}"
        if self.kind == "ffn":
            return f"ffn_{self.activation}"
        return self.kind


def linear_experts() -> ExpertFamily:
    return ExpertFamily("linear")


def polynomial_experts(degree: int) -> ExpertFamily:
    return ExpertFamily("polynomial", degree=degree)


def ffn_experts(activation: str) -> ExpertFamily:
    return ExpertFamily("ffn", activation=activation)


def constant_experts() -> ExpertFamily:
    return ExpertFamily("constant")


@dataclass(frozen=True)
class Atom:
    """One mixture component: log-weight, router vector, expert parameters."""

    beta0: float
    beta1: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        if not math.isfinite(self.beta0):
            raise ContractError("beta0 must be finite")
        object.__setattr__(self, "beta1", _as_readonly(self.beta1, "beta1"))
        object.__setattr__(self, "eta", _as_readonly(self.eta, "eta"))
        if self.eta.shape[0] != self.beta1.shape[0] + 1:
            raise ContractError(
                f"eta must have length d1+1={self.beta1.shape[0] + 1}, got {self.eta.shape[0]}"
            )


@dataclass(frozen=True)
class MixingMeasure:
    """Ordered list of atoms; the object being estimated."""

    atoms: tuple[Atom, ...]

    def __post_init__(self):
        atoms = tuple(self.atoms)
        if len(atoms) < 1:
            raise ContractError("a mixing measure needs at least one atom")
        d1 = atoms[0].beta1.shape[0]
        for a in atoms:
            if a.beta1.shape[0] != d1:
                raise ContractError("atoms disagree on router dimension")
        object.__setattr__(self, "atoms", atoms)

    @property
    def k(self) -> int:
        return len(self.atoms)

    @property
    def d1(self) -> int:
        return self.atoms[0].beta1.shape[0]

    def packed(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Struct-of-arrays view: (beta0 (k,), beta1 (k,d1), a (k,d1), b (k,))."""
        k, d1 = self.k, self.d1
        beta0 = np.array([a.beta0 for a in self.atoms])
        beta1 = np.empty((k, d1))
        aa = np.empty((k, d1))
        bb = np.empty(k)
        for i, at in enumerate(self.atoms):
            beta1[i] = at.beta1
            aa[i] = at.eta[:d1]
            bb[i] = at.eta[d1]
        return beta0, beta1, aa, bb


def measure_from_packed(beta0, beta1, a, b) -> MixingMeasure:
    atoms = tuple(
        Atom(float(beta0[i]), beta1[i], np.append(a[i], b[i])) for i in range(len(beta0))
    )
    return MixingMeasure(atoms)


@dataclass(frozen=True)
class Dataset:
    """Inputs X (n, d1), responses Y (n,), and the generating noise variance."""

    X: np.ndarray
    Y: np.ndarray
    sigma2: float = 0.0

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        Y = np.asarray(self.Y, dtype=np.float64)
        if X.ndim != 2 or Y.ndim != 1 or X.shape[0] != Y.shape[0]:
            raise ContractError(f"inconsistent dataset shapes {X.shape} / {Y.shape}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ContractError("dataset has non-finite entries")
        X.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return self.X.shape[0]


# ---------------------------------------------------------------------------
# scalar forward pass


def router_score(spec: RouterSpec, beta1: np.ndarray, x: np.ndarray) -> float:
    """Gating score of one expert for one input.

    linear     beta1'x
    cosine     beta1'x / (||beta1|| ||x||), 0 if either norm is degenerate
    perturbed  beta1'x / ((||beta1|| + tau1) (||x|| + tau2))
    """
    beta1 = np.asarray(beta1, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if beta1.shape != x.shape:
        raise ContractError(f"dimension mismatch: beta1 {beta1.shape} vs x {x.shape}")
    if spec.kind == "linear":
        return float(beta1 @ x)
    nb = float(np.linalg.norm(beta1))
    nx = float(np.linalg.norm(x))
    if spec.kind == "cosine":
        if nb < DEGENERATE_NORM or nx < DEGENERATE_NORM:
            return 0.0
        return float(beta1 @ x) / (nb * nx)
    return float(beta1 @ x) / ((nb + spec.tau1) * (nx + spec.tau2))


def gating_weights(spec: RouterSpec, G: MixingMeasure, x: np.ndarray) -> np.ndarray:
    """Softmax over per-atom router scores plus log-weights; sums to 1."""
    z = np.array([router_score(spec, a.beta1, x) + a.beta0 for a in G.atoms])
    z -= z.max()
    w = np.exp(z)
    return w / w.sum()


def activation_value(name: str, u: float) -> float:
    if name == "relu":
        return u if u > 0.0 else 0.0
    if name == "gelu":
        # exact Gaussian-CDF form; deterministic, no tanh approximation
        return u * 0.5 * (1.0 + math.erf(u / math.sqrt(2.0)))
    if name == "tanh":
        return math.tanh(u)
    if name == "sigmoid":
        return 1.0 / (1.0 + math.exp(-u))
    raise ContractError(f"unknown activation {name!r}")


def expert_value(family: ExpertFamily, eta: np.ndarray, x: np.ndarray) -> float:
    """Evaluate h(x, eta) with eta = (a, b)."""
    eta = np.asarray(eta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    d1 = x.shape[0]
    if eta.shape[0] != d1 + 1:
        raise ContractError(f"eta must have length d1+1={d1 + 1}, got {eta.shape[0]}")
    if family.kind == "constant":
        return float(eta[d1])
    u = float(eta[:d1] @ x) + float(eta[d1])
    if family.kind == "linear":
        return u
    if family.kind == "polynomial":
        return u**family.degree
    return activation_value(family.activation, u)


def predict(spec: RouterSpec, family: ExpertFamily, G: MixingMeasure, x: np.ndarray) -> float:
    """Regression function value: gating-weighted sum of expert values."""
    w = gating_weights(spec, G, x)
    h = np.array([expert_value(family, a.eta, x) for a in G.atoms])
    return float(w @ h)
