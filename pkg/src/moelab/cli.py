"""Command-line interface: verify, identifiability, sweep, slopes, plot,
diagnose-ratio.

Exit codes: 0 success, 1 check failure, 2 configuration or IO error. The
CLI is the only part of the package that touches the filesystem; every
subcommand writes only inside its declared output path.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import charts, results_io
from .calculus import (
    finite_diff_gradient,
    flatten_measure,
    grad_mse,
    homogeneity_residual,
    identifiability_check,
    mse_objective,
    pde_residual,
)
from .errors import ConfigError, ContractError, InsufficientDataError
from .estimation import SgdConfig
from .experiments import (
    DEFAULT_SAMPLE_SIZES,
    SETTINGS,
    SweepConfig,
    fit_slope,
    mean_losses,
    run_sweep,
    sample_true_measure,
)
from .metrics import ratio_diagnostic
from .model import (
    ExpertFamily,
    RouterSpec,
    constant_experts,
    cosine_router,
    ffn_experts,
    linear_experts,
    linear_router,
    perturbed_router,
    polynomial_experts,
)
from .rng import Stream, derive_seed


def _parse_router(value, tau: float) -> RouterSpec:
    if isinstance(value, str):
        name = value.lower().replace("_", "").replace("-", "")
        if name == "linear":
            return linear_router()
        if name == "cosine":
            return cosine_router()
        if name in ("perturbed", "perturbedcosine"):
            return perturbed_router(tau)
        raise ConfigError(f"unknown router {value!r}")
    if isinstance(value, dict):
        extra = set(value) - {"kind", "tau1", "tau2"}
        if extra:
            raise ConfigError(f"unknown router keys {sorted(extra)}")
        kind = str(value.get("kind", ""))
        name = kind.lower().replace("_", "").replace("-", "")
        if name in ("perturbed", "perturbedcosine"):
            return RouterSpec("perturbed", float(value.get("tau1", tau)), float(value.get("tau2", tau)))
        return _parse_router(kind, tau)
    raise ConfigError(f"router entries must be strings or objects, got {value!r}")


def _parse_family(value) -> ExpertFamily:
    name = str(value).lower()
    if name == "linear":
        return linear_experts()
    if name == "constant":
        return constant_experts()
    if name.startswith("polynomial"):
        degree = name.split("_", 1)[1] if "_" in name else "2"
        return polynomial_experts(int(degree))
    if name.startswith("ffn_"):
        return ffn_experts(name.split("_", 1)[1])
    raise ConfigError(f"unknown expert family {value!r}")


_SWEEP_KEYS = {
    "master_seed", "d", "k_star", "sigma2", "tau", "settings", "routers",
    "family", "sample_sizes", "replicates", "sgd", "mc_samples",
}
_SGD_KEYS = {"epochs", "learning_rate", "batch_size", "init_scale", "seed"}

# sweep-level optimizer defaults: whole-dataset batches (the batch size
# clamps to n) make the fit a deterministic gradient descent toward the
# least-squares minimizer; see the decisions in estimation.sgd_fit.
SWEEP_SGD_DEFAULTS = SgdConfig(epochs=400, learning_rate=0.1, batch_size=1_000_000_000, init_scale=0.01, seed=0)


def load_config(path: str | None) -> SweepConfig:
    if path is None:
        return SweepConfig(sgd=SWEEP_SGD_DEFAULTS)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}:{err.lineno}: invalid JSON: {err.msg}") from err
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}:1: config must be a JSON object")
    extra = set(raw) - _SWEEP_KEYS
    if extra:
        raise ConfigError(f"{path}:1: unknown config keys {sorted(extra)}")
    tau = float(raw.get("tau", 0.1))
    kwargs = {}
    for key in ("master_seed", "d", "k_star", "replicates", "mc_samples"):
        if key in raw:
            kwargs[key] = int(raw[key])
    for key in ("sigma2", "tau"):
        if key in raw:
            kwargs[key] = float(raw[key])
    if "settings" in raw:
        kwargs["settings"] = tuple(str(s) for s in raw["settings"])
    if "routers" in raw:
        kwargs["routers"] = tuple(_parse_router(r, tau) for r in raw["routers"])
    if "family" in raw:
        kwargs["family"] = _parse_family(raw["family"])
    if "sample_sizes" in raw:
        kwargs["sample_sizes"] = tuple(int(n) for n in raw["sample_sizes"])
    sgd_raw = raw.get("sgd", {})
    if not isinstance(sgd_raw, dict):
        raise ConfigError(f"{path}:1: 'sgd' must be an object")
    extra = set(sgd_raw) - _SGD_KEYS
    if extra:
        raise ConfigError(f"{path}:1: unknown sgd keys {sorted(extra)}")
    sgd_kwargs = dict(
        epochs=int(sgd_raw.get("epochs", SWEEP_SGD_DEFAULTS.epochs)),
        learning_rate=float(sgd_raw.get("learning_rate", SWEEP_SGD_DEFAULTS.learning_rate)),
        batch_size=int(sgd_raw.get("batch_size", SWEEP_SGD_DEFAULTS.batch_size)),
        init_scale=float(sgd_raw.get("init_scale", SWEEP_SGD_DEFAULTS.init_scale)),
        seed=int(sgd_raw.get("seed", SWEEP_SGD_DEFAULTS.seed)),
    )
    try:
        kwargs["sgd"] = SgdConfig(**sgd_kwargs)
        return SweepConfig(**kwargs)
    except (ContractError, ValueError) as err:
        raise ConfigError(f"{path}:1: {err}") from err


# ---------------------------------------------------------------------------
# verify suites


def _verify_gradients(report) -> bool:
    from .model import Dataset

    stream = Stream(derive_seed(20_240_515, "verify-grad"))
    routers = [linear_router(), cosine_router(), perturbed_router(0.1)]
    families = [
        linear_experts(),
        polynomial_experts(2),
        ffn_experts("relu"),
        ffn_experts("gelu"),
        ffn_experts("tanh"),
        ffn_experts("sigmoid"),
    ]
    worst = 0.0
    for case in range(100):
        d1 = 2 + int(stream.uniform01(1)[0] * 31)
        k = 1 + int(stream.uniform01(1)[0] * 8)
        spec = routers[case % 3]
        family = families[case % 6]
        from .model import measure_from_packed

        G = measure_from_packed(
            stream.normal(k, std=0.3),
            stream.normal(k * d1, std=0.8).reshape(k, d1),
            stream.normal(k * d1, std=0.8).reshape(k, d1),
            stream.normal(k, std=0.8),
        )
        nb = 8
        X = stream.uniform(-1.0, 1.0, nb * d1).reshape(nb, d1)
        Y = stream.normal(nb)
        if family.kind == "ffn" and family.activation == "relu":
            _, B1, A, b = G.packed()
            U = X @ A.T + b
            if np.any(np.abs(U) < 1e-6):
                continue  # kink exclusion band
        data = Dataset(X, Y)
        mse, rec = grad_mse(spec, family, G, data)
        fd = finite_diff_gradient(mse_objective(spec, family, data, k, d1), flatten_measure(G))
        an = rec.flatten()
        err = np.abs(an - fd)
        rel = err / np.maximum(np.abs(fd), 1e-2)
        bad = (rel > 1e-6) & (err > 1e-8)
        worst = max(worst, float(rel.max()))
        if np.any(bad):
            report(f"gradient-check case {case} ({spec.kind}/{family.name}): "
                   f"max rel err {rel.max():.2e}", False)
            return False
    report(f"gradient-check: 100 random configurations, worst rel err {worst:.2e}", True)
    return True


def _verify_pde(report) -> bool:
    stream = Stream(derive_seed(20_240_515, "verify-pde"))
    fam = ffn_experts("tanh")
    ok = True
    worst_cos = 0.0
    for _ in range(1000):
        d1 = 2 + int(stream.uniform01(1)[0] * 15)
        beta1 = stream.normal(d1)
        eta = stream.normal(d1 + 1)
        x = stream.uniform(-1.0, 1.0, d1)
        if np.linalg.norm(x) < 1e-6:
            continue
        H = math.exp(float(beta1 @ x) / (np.linalg.norm(beta1) * np.linalg.norm(x)))
        res = pde_residual(cosine_router(), beta1, eta, fam, x)
        worst_cos = max(worst_cos, abs(res) / abs(H))
    ok &= worst_cos <= 1e-10
    report(f"scale identity (cosine): max |residual|/H = {worst_cos:.2e} <= 1e-10", worst_cos <= 1e-10)

    spec = perturbed_router(0.1)
    min_pert = math.inf
    count = 0
    while count < 1000:
        d1 = 2 + int(stream.uniform01(1)[0] * 15)
        beta1 = stream.normal(d1)
        eta = stream.normal(d1 + 1)
        x = stream.uniform(-1.0, 1.0, d1)
        if abs(float(beta1 @ x)) < 0.1:
            continue
        count += 1
        min_pert = min(min_pert, abs(pde_residual(spec, beta1, eta, fam, x)))
    ok &= min_pert >= 1e-4
    report(f"scale identity (perturbed): min |residual| = {min_pert:.2e} >= 1e-4", min_pert >= 1e-4)
    return bool(ok)


def _verify_homogeneity(report) -> bool:
    stream = Stream(derive_seed(20_240_515, "verify-homog"))
    worst1 = worst2 = 0.0
    for _ in range(1000):
        d1 = 2 + int(stream.uniform01(1)[0] * 15)
        beta1 = stream.normal(d1)
        x = stream.uniform(-1.0, 1.0, d1)
        if np.linalg.norm(x) < 1e-6:
            continue
        worst1 = max(worst1, abs(homogeneity_residual(cosine_router(), beta1, x, 1)))
        worst2 = max(worst2, abs(homogeneity_residual(cosine_router(), beta1, x, 2)))
    ok = worst1 <= 1e-10 and worst2 <= 1e-4
    report(f"homogeneity contraction t=1: max |residual| = {worst1:.2e} <= 1e-10", worst1 <= 1e-10)
    report(f"homogeneity contraction t=2: max |residual| = {worst2:.2e} <= 1e-4", worst2 <= 1e-4)
    return ok


def cmd_verify(args) -> int:
    failures = []

    def report(msg: str, passed: bool):
        line = f"[{'PASS' if passed else 'FAIL'}] {msg}"
        print(line)
        if not passed:
            failures.append(msg)

    ok = _verify_gradients(report)
    ok &= _verify_pde(report)
    ok &= _verify_homogeneity(report)
    print("verify:", "all suites passed" if ok else f"{len(failures)} failure(s)")
    return 0 if ok else 1


_IDENT_TABLE = [
    ("ffn_relu", ffn_experts("relu"), 2, False),
    ("ffn_tanh", ffn_experts("tanh"), 2, False),
    ("polynomial_2", polynomial_experts(2), 2, False),
    ("linear", linear_experts(), 2, True),
    ("linear", linear_experts(), 1, False),
    ("constant", constant_experts(), 1, True),
]


def cmd_identifiability(args) -> int:
    spec = perturbed_router(0.1)
    ok = True
    for name, family, order, expect in _IDENT_TABLE:
        rep = identifiability_check(spec, family, k=3, order=order, seed=args.seed or 0)
        match = rep.deficient == expect
        ok &= match
        status = "PASS" if match else "FAIL"
        print(f"[{status}] {name:13s} {rep} expected {'deficient' if expect else 'full-rank'}")
    return 0 if ok else 1


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if args.desk:
        cfg = cfg.desk_mode()
    results = run_sweep(cfg, jobs=args.jobs)
    out = args.out or "results.csv"
    if os.path.isdir(out):
        out = os.path.join(out, "results.csv")
    results_io.write_results(results, out)
    n_err = sum(1 for r in results if not math.isfinite(r.loss_value))
    print(f"sweep: wrote {len(results)} rows to {out}" + (f" ({n_err} failed trials)" if n_err else ""))
    return 0


def _slope_map(results):
    fits = {}
    for (setting, router, loss_name), rows in sorted(mean_losses(results).items()):
        try:
            fits[f"{setting}/{router}/{loss_name}"] = fit_slope([(n, m) for n, m, _ in rows])
        except InsufficientDataError:
            continue
    return fits


def cmd_slopes(args) -> int:
    results = results_io.read_results(_require_input(args, "results.csv"))
    fits = _slope_map(results)
    out = args.out or "slopes.json"
    if os.path.isdir(out):
        out = os.path.join(out, "slopes.json")
    results_io.write_slopes(fits, out)
    for key, fit in sorted(fits.items()):
        print(f"{key}: slope={fit.slope:+.4f} r2={fit.r_squared:.4f} "
              f"stderr={fit.slope_stderr:.4f} points={fit.points_used}")
    print(f"slopes: wrote {len(fits)} fits to {out}")
    return 0


def cmd_plot(args) -> int:
    results = results_io.read_results(_require_input(args, "results.csv"))
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    grouped = mean_losses(results)
    by_setting: dict[str, list] = {}
    for (setting, router, loss_name), rows in sorted(grouped.items()):
        by_setting.setdefault(setting, []).append((router, loss_name, rows))
    written = []
    for setting, entries in sorted(by_setting.items()):
        series = [(router, rows) for router, _, rows in entries]
        fits = {}
        for router, _, rows in entries:
            try:
                fits[router] = fit_slope([(n, m) for n, m, _ in rows])
            except InsufficientDataError:
                continue
        loss_name = entries[0][1]
        path = os.path.join(out_dir, f"rates_{setting}.svg")
        charts.render_plot(series, fits, path, title=f"{setting} ({loss_name})")
        written.append(path)
    print("plot: wrote " + ", ".join(written))
    return 0


def cmd_diagnose_ratio(args) -> int:
    cfg = load_config(args.config)
    G_star = sample_true_measure(cfg.d, cfg.k_star, cfg.master_seed if args.seed is None else args.seed)
    ns = [10, 100, 1000]
    print("router-rescaling sequence diagnostic (r = 1)")
    ok = True
    for spec in (cosine_router(), perturbed_router(cfg.tau)):
        rows = ratio_diagnostic(spec, cfg.family, G_star, ns, r=1.0, n_mc=cfg.mc_samples, seed=cfg.master_seed)
        print(f"-- {spec.name}")
        print(f"{'n':>6} {'loss_1r':>14} {'distance':>14} {'ratio':>14}")
        for n, loss, dist, ratio in rows:
            print(f"{n:>6} {loss:>14.6e} {dist:>14.6e} {ratio:>14.6e}")
        if spec.kind == "cosine":
            decays = rows[-1][3] <= 0.5 * rows[0][3]
            ok &= decays
            print(f"   cosine ratio decay (n=1000 vs n=10): {'PASS' if decays else 'FAIL'}")
        else:
            persists = rows[-1][3] >= 0.1 * rows[0][3]
            ok &= persists
            print(f"   perturbed ratio persistence: {'PASS' if persists else 'FAIL'}")
    return 0 if ok else 1


def _require_input(args, default_name: str) -> str:
    path = args.config or default_name
    if not os.path.exists(path):
        raise ConfigError(f"input file {path!r} not found (pass it with --config)")
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moelab",
        description="Router mixture-of-experts regression lab",
    )
    parser.add_argument("--config", help="JSON config path (sweep) or input file (slopes/plot)")
    parser.add_argument("--out", help="output file or directory")
    parser.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                        help="worker processes for sweeps (default: host parallelism)")
    parser.add_argument("--desk", action="store_true",
                        help="desk mode: 10 replicates, sample sizes capped at 46416")
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    parser.add_argument(
        "subcommand",
        choices=["verify", "identifiability", "sweep", "slopes", "plot", "diagnose-ratio"],
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 2 if err.code not in (0, None) else 0
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    handlers = {
        "verify": cmd_verify,
        "identifiability": cmd_identifiability,
        "sweep": cmd_sweep,
        "slopes": cmd_slopes,
        "plot": cmd_plot,
        "diagnose-ratio": cmd_diagnose_ratio,
    }
    try:
        return handlers[args.subcommand](args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
