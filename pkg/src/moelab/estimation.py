"""Least-squares fitting: near-truth initialization and mini-batch SGD.

The protocol is deliberately bare: initialize every coordinate as the
corresponding generating parameter plus small Gaussian noise, then run
plain SGD (no momentum, no weight decay, no projection) on the mean squared
error for a fixed number of epochs. Over-parameterized fits duplicate the
first generating atom and split its weight in half so the extra atom starts
inside an occupied Voronoi cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import ContractError, DivergenceError, UnsupportedConfigError
from .model import Dataset, ExpertFamily, MixingMeasure, RouterSpec, measure_from_packed
from .rng import Stream, derive_seed


@dataclass(frozen=True)
class SgdConfig:
    epochs: int = 10
    learning_rate: float = 0.1
    batch_size: int = 32
    init_scale: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if not self.learning_rate > 0.0:
            raise ContractError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


def init_near(G_star: MixingMeasure, k_fit: int, init_scale: float, seed: int) -> MixingMeasure:
    """Initialize k_fit atoms near the generating atoms.

    k_fit == k*:   atom i = generating atom i + N(0, init_scale^2) on every
                   coordinate.
    k_fit == k*+1: atoms 1 and k*+1 are both copies of generating atom 1
                   with beta0 shifted by -ln 2 (an exact halving of the
                   weight) before perturbation; the rest as above.
    """
    k_star = G_star.k
    if k_fit < k_star:
        raise UnsupportedConfigError(f"k_fit={k_fit} below the generating k*={k_star}")
    if k_fit > k_star + 1:
        raise UnsupportedConfigError("only k* and k*+1 atom fits are supported")

    beta0, B1, A, b = G_star.packed()
    if k_fit == k_star + 1:
        split = beta0[0] - math.log(2.0)
        beta0 = np.concatenate([[split], beta0[1:], [split]])
        B1 = np.concatenate([B1, B1[:1]], axis=0)
        A = np.concatenate([A, A[:1]], axis=0)
        b = np.concatenate([b, b[:1]])

    d1 = G_star.d1
    stream = Stream(derive_seed(seed, "init_near"))
    noise = stream.normal(k_fit * (1 + d1 + d1 + 1), std=init_scale).reshape(k_fit, -1)
    beta0 = beta0 + noise[:, 0]
    B1 = B1 + noise[:, 1 : 1 + d1]
    A = A + noise[:, 1 + d1 : 1 + 2 * d1]
    b = b + noise[:, 1 + 2 * d1]
    return measure_from_packed(beta0, B1, A, b)


def sgd_fit(
    spec: RouterSpec,
    family: ExpertFamily,
    data: Dataset,
    G0: MixingMeasure,
    cfg: SgdConfig,
) -> MixingMeasure:
    """Mini-batch SGD on the mean squared error.

    Each epoch reshuffles the data with a seed derived from (cfg.seed,
    epoch) and walks consecutive batches, so the result depends only on
    (data, G0, cfg), never on host parallelism.

    Returns the average of the iterates visited during the final epoch
    (Polyak tail averaging). With a constant learning rate the raw final
    iterate sits inside a stationary noise ball whose radius does not
    shrink with n; the tail average cancels that noise at the same
    square-root rate as the statistical error, so the returned measure
    tracks the least-squares minimizer.
    """
    if data.n == 0:
        raise ContractError("empty dataset")
    if data.X.shape[1] != G0.d1:
        raise ContractError("dataset dimension does not match the initial measure")

    beta0, B1, A, b = G0.packed()
    X, Y = data.X, data.Y
    nx_all = backend.row_norms(X)
    n = data.n
    lr = cfg.learning_rate
    step = 0
    sums = None
    full_batch = cfg.batch_size >= n
    for epoch in range(cfg.epochs):
        if full_batch:
            # one batch holds everything: shuffling would only permute the
            # summation order, so skip it
            Xs, Ys, nxs = X, Y, nx_all
        else:
            perm = Stream(derive_seed(cfg.seed, f"shuffle/{epoch}")).permutation(n)
            Xs, Ys, nxs = X[perm], Y[perm], nx_all[perm]
        last_epoch = epoch == cfg.epochs - 1
        if last_epoch:
            # deviations from an anchor keep the average bitwise exact at a
            # fixed point (all-zero gradients leave parameters untouched)
            anchor = [beta0.copy(), B1.copy(), A.copy(), b.copy()]
            sums = [np.zeros_like(beta0), np.zeros_like(B1), np.zeros_like(A), np.zeros_like(b)]
            tail_steps = 0
        for start in range(0, n, cfg.batch_size):
            xb = Xs[start : start + cfg.batch_size]
            yb = Ys[start : start + cfg.batch_size]
            mse, d0, dB1, dA, db = backend.mse_and_grad_packed(
                spec, family, beta0, B1, A, b, xb, yb, nx=nxs[start : start + cfg.batch_size]
            )
            if not math.isfinite(mse):
                raise DivergenceError(step)
            beta0 -= lr * d0
            B1 -= lr * dB1
            A -= lr * dA
            b -= lr * db
            step += 1
            if last_epoch:
                for acc, cur, ref in zip(sums, (beta0, B1, A, b), anchor):
                    acc += cur - ref
                tail_steps += 1
    if sums is None:
        return G0
    return measure_from_packed(*(ref + acc / tail_steps for ref, acc in zip(anchor, sums)))


def training_mse(
    spec: RouterSpec, family: ExpertFamily, G: MixingMeasure, data: Dataset
) -> float:
    pred = backend.predict_batch(spec, family, G, data.X)
    resid = data.Y - pred
    return float(resid @ resid) / data.n
