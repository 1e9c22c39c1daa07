"""Synthetic ground truth, dataset generation, rate sweeps, slope fits.

The generating measure is drawn once per sweep: router parameters
(beta1, beta0) iid N(0, 0.01/d) for the first six atoms and exactly zero
after that; expert parameters (a, b) iid N(0, 1/d) for every atom. Inputs
are Uniform([-1,1]^d) and responses carry N(0, sigma2) noise.

Every trial derives its own seed from (master seed, setting name, router
name, sample-size index, replicate) through an FNV-1a hash and the
splitmix64 finalizer, so the full result table is independent of execution
order and degree of parallelism.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import backend
from .errors import ContractError, DivergenceError, InsufficientDataError
from .estimation import SgdConfig, init_near, sgd_fit, training_mse
from .metrics import LossKind, voronoi_loss
from .model import (
    Dataset,
    ExpertFamily,
    MixingMeasure,
    RouterSpec,
    cosine_router,
    ffn_experts,
    linear_router,
    measure_from_packed,
    perturbed_router,
    polynomial_experts,
)
from .rng import MASK64, Stream, derive_seed, fnv1a64, splitmix64_finalize

SETTINGS = ("ExactSpecified", "OverSpecified", "MisspecF1", "MisspecF2")
DEFAULT_SAMPLE_SIZES = (1000, 2154, 4642, 10000, 21544, 46416, 100000)
DESK_MAX_N = 46416
ROUTED_ATOMS = 6  # atoms beyond this index get zero router parameters


@dataclass(frozen=True)
class SweepConfig:
    master_seed: int = 0
    d: int = 32
    k_star: int = 8
    sigma2: float = 0.01
    tau: float = 0.1
    settings: tuple[str, ...] = SETTINGS
    routers: tuple[RouterSpec, ...] = ()
    family: ExpertFamily = field(default_factory=lambda: ffn_experts("relu"))
    sample_sizes: tuple[int, ...] = DEFAULT_SAMPLE_SIZES
    replicates: int = 20
    sgd: SgdConfig = field(default_factory=SgdConfig)
    mc_samples: int = 20_000

    def __post_init__(self):
        object.__setattr__(self, "settings", tuple(self.settings))
        object.__setattr__(self, "sample_sizes", tuple(self.sample_sizes))
        routers = tuple(self.routers) or (cosine_router(), perturbed_router(self.tau))
        object.__setattr__(self, "routers", routers)
        for s in self.settings:
            if s not in SETTINGS:
                raise ContractError(f"unknown setting {s!r}")
        if list(self.sample_sizes) != sorted(set(self.sample_sizes)):
            raise ContractError("sample_sizes must be strictly increasing")
        if self.replicates < 1:
            raise ContractError("replicates must be >= 1")

    def desk_mode(self) -> "SweepConfig":
        """Laptop-budget variant: 10 replicates, sample sizes capped."""
        sizes = tuple(n for n in self.sample_sizes if n <= DESK_MAX_N)
        return replace(self, replicates=min(self.replicates, 10), sample_sizes=sizes)


@dataclass(frozen=True)
class TrialResult:
    setting: str
    router: str
    tau: float
    family: str
    n: int
    replicate: int
    trial_seed: int
    loss_name: str
    loss_value: float
    train_mse: float
    wall_ms: float

    @property
    def sort_key(self):
        return (self.setting, self.router, self.n, self.replicate)


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    slope_stderr: float
    points_used: int


def trial_seed(master_seed: int, setting: str, router: str, n_index: int, replicate: int) -> int:
    """Documented 64-bit trial-seed mixer: splitmix64 finalizer over the
    master seed XOR an FNV-1a hash of 'setting|router|n_index|replicate'."""
    tag = f"{setting}|{router}|{n_index}|{replicate}".encode("utf-8")
    return splitmix64_finalize((master_seed ^ fnv1a64(tag)) & MASK64)


def sample_true_measure(d: int, k_star: int, seed: int) -> MixingMeasure:
    """Generating measure of the synthetic protocol (see module docstring)."""
    if k_star < 1:
        raise ContractError("k_star must be >= 1")
    stream = Stream(derive_seed(seed, "true_measure"))
    k_routed = min(ROUTED_ATOMS, k_star)
    router_std = math.sqrt(0.01 / d)
    expert_std = math.sqrt(1.0 / d)
    routed = stream.normal(k_routed * (d + 1), std=router_std).reshape(k_routed, d + 1)
    experts = stream.normal(k_star * (d + 1), std=expert_std).reshape(k_star, d + 1)
    beta1 = np.zeros((k_star, d))
    beta0 = np.zeros(k_star)
    beta1[:k_routed] = routed[:, :d]
    beta0[:k_routed] = routed[:, d]
    return measure_from_packed(beta0, beta1, experts[:, :d], experts[:, d])


def generate_dataset(
    spec: RouterSpec,
    family: ExpertFamily,
    G_star: MixingMeasure,
    n: int,
    sigma2: float,
    seed: int,
) -> Dataset:
    """n inputs uniform on [-1,1]^d with model responses plus Gaussian noise."""
    if n < 1:
        raise ContractError("n must be >= 1")
    d = G_star.d1
    stream = Stream(derive_seed(seed, "dataset"))
    X = stream.uniform(-1.0, 1.0, n * d).reshape(n, d)
    Y = backend.predict_batch(spec, family, G_star, X)
    if sigma2 > 0.0:
        Y = Y + stream.normal(n, std=math.sqrt(sigma2))
    return Dataset(X, Y, sigma2=sigma2)


# ---------------------------------------------------------------------------
# sweep


def _arms(cfg: SweepConfig, setting: str) -> tuple[RouterSpec, ...]:
    """Fitted-router arms per setting. The misspecified settings compare the
    fixed pairs from the study design; the well-specified settings sweep
    whatever the config lists."""
    if setting == "MisspecF1":
        return (cosine_router(), perturbed_router(cfg.tau))
    if setting == "MisspecF2":
        return (linear_router(), perturbed_router(cfg.tau))
    return cfg.routers


def _setting_plan(cfg: SweepConfig, setting: str, arm: RouterSpec):
    """(generator spec, generator family, fit family, k_fit, loss kind)."""
    if setting == "ExactSpecified":
        return arm, cfg.family, cfg.family, cfg.k_star, LossKind("L3")
    if setting == "OverSpecified":
        return arm, cfg.family, cfg.family, cfg.k_star + 1, LossKind("L2")
    if setting == "MisspecF1":
        return linear_router(), cfg.family, cfg.family, cfg.k_star, LossKind("L3")
    fam = polynomial_experts(2)
    return linear_router(), fam, fam, cfg.k_star, LossKind("L3")


def _run_trial(task) -> TrialResult:
    (setting, arm, gen_spec, gen_family, fit_family, k_fit, kind,
     G_star, n, replicate, seed, sigma2, sgd_base) = task
    t0 = time.perf_counter()
    data = generate_dataset(gen_spec, gen_family, G_star, n, sigma2, seed=derive_seed(seed, "data"))
    G0 = init_near(G_star, k_fit, sgd_base.init_scale, seed=derive_seed(seed, "init"))
    sgd_cfg = replace(sgd_base, seed=derive_seed(seed, "sgd"))
    try:
        G_hat = sgd_fit(arm, fit_family, data, G0, sgd_cfg)
        loss_name = kind.name
        loss_value = voronoi_loss(G_hat, G_star, kind)
        train = training_mse(arm, fit_family, G_hat, data)
    except DivergenceError as err:
        loss_name = f"error-divergence-step{err.step}"
        loss_value = math.nan
        train = math.nan
    wall_ms = 1000.0 * (time.perf_counter() - t0)
    return TrialResult(
        setting=setting,
        router=arm.name,
        tau=arm.tau1,
        family=fit_family.name,
        n=n,
        replicate=replicate,
        trial_seed=seed,
        loss_name=loss_name,
        loss_value=loss_value,
        train_mse=train,
        wall_ms=wall_ms,
    )


def sweep_tasks(cfg: SweepConfig) -> list[tuple]:
    G_star = sample_true_measure(cfg.d, cfg.k_star, cfg.master_seed)
    tasks = []
    for setting in cfg.settings:
        for arm in _arms(cfg, setting):
            gen_spec, gen_family, fit_family, k_fit, kind = _setting_plan(cfg, setting, arm)
            for n_index, n in enumerate(cfg.sample_sizes):
                for rep in range(cfg.replicates):
                    seed = trial_seed(cfg.master_seed, setting, arm.name, n_index, rep)
                    tasks.append(
                        (setting, arm, gen_spec, gen_family, fit_family, k_fit,
                         kind, G_star, n, rep, seed, cfg.sigma2, cfg.sgd)
                    )
    return tasks


def run_sweep(cfg: SweepConfig, jobs: int = 1) -> list[TrialResult]:
    """All trials of the sweep, sorted by (setting, router, n, replicate).

    Each trial is self-contained under its derived seed, so the result set
    is identical for any jobs value; workers only change wall time.
    """
    tasks = sweep_tasks(cfg)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_trial, tasks, chunksize=4))
    else:
        results = [_run_trial(t) for t in tasks]
    return sorted(results, key=lambda r: r.sort_key)


def mean_losses(results: list[TrialResult]) -> dict[tuple[str, str, str], list[tuple[int, float, float]]]:
    """Group to (setting, router, loss_name) -> [(n, mean, std)] with error
    rows dropped."""
    groups: dict[tuple[str, str, str], dict[int, list[float]]] = {}
    for r in results:
        if not math.isfinite(r.loss_value):
            continue
        key = (r.setting, r.router, r.loss_name)
        groups.setdefault(key, {}).setdefault(r.n, []).append(r.loss_value)
    out = {}
    for key, by_n in groups.items():
        rows = []
        for n in sorted(by_n):
            vals = np.array(by_n[n])
            rows.append((n, float(vals.mean()), float(vals.std(ddof=0))))
        out[key] = rows
    return out


def fit_slope(points: list[tuple[int, float]]) -> RateFit:
    """OLS of log(mean loss) on log(n); the slope is the empirical rate
    exponent. Non-positive means are excluded before the log transform."""
    usable = [(n, v) for n, v in points if v > 0.0]
    if len(usable) < 2:
        raise InsufficientDataError(
            f"need >= 2 positive points for a slope fit, got {len(usable)}"
        )
    x = np.log([n for n, _ in usable])
    y = np.log([v for _, v in usable])
    m = len(usable)
    xbar, ybar = x.mean(), y.mean()
    sxx = float(((x - xbar) ** 2).sum())
    slope = float(((x - xbar) @ (y - ybar)) / sxx)
    intercept = float(ybar - slope * xbar)
    resid = y - (intercept + slope * x)
    rss = float(resid @ resid)
    tss = float(((y - ybar) ** 2).sum())
    r_squared = 1.0 if tss == 0.0 else 1.0 - rss / tss
    stderr = 0.0 if m <= 2 else math.sqrt(rss / (m - 2) / sxx)
    return RateFit(slope, intercept, r_squared, stderr, m)
