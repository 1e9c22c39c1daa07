"""Bit-exact CSV serialization of sweep results and the slopes JSON report.

The CSV schema is fixed: header
``setting,router,tau,family,n,replicate,trial_seed,loss_name,loss_value,train_mse,wall_ms``,
floats rendered with repr-faithful 17 significant digits, rows sorted by
(setting, router, n, replicate). Two sweeps with the same master seed must
produce byte-identical files at any worker count, so the wall-clock column
is normalized to 0 on write; live timings belong to the log, not the file.
"""

from __future__ import annotations

import json
import math
import os
from typing import Iterable

from .errors import ConfigError
from .experiments import RateFit, TrialResult

CSV_HEADER = "setting,router,tau,family,n,replicate,trial_seed,loss_name,loss_value,train_mse,wall_ms"


def _fmt(x: float) -> str:
    if math.isnan(x):
        return "nan"
    return format(x, ".17g")


def write_results(results: Iterable[TrialResult], path: str) -> None:
    rows = sorted(results, key=lambda r: r.sort_key)
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r.setting},{r.router},{_fmt(r.tau)},{r.family},{r.n},{r.replicate},"
            f"{r.trial_seed},{r.loss_name},{_fmt(r.loss_value)},{_fmt(r.train_mse)},"
            f"{_fmt(0.0)}"
        )
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_results(path: str) -> list[TrialResult]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != CSV_HEADER:
        raise ConfigError(f"{path}:1: expected header {CSV_HEADER!r}")
    out = []
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != 11:
            raise ConfigError(f"{path}:{lineno}: expected 11 fields, got {len(parts)}")
        try:
            out.append(
                TrialResult(
                    setting=parts[0],
                    router=parts[1],
                    tau=float(parts[2]),
                    family=parts[3],
                    n=int(parts[4]),
                    replicate=int(parts[5]),
                    trial_seed=int(parts[6]),
                    loss_name=parts[7],
                    loss_value=float(parts[8]),
                    train_mse=float(parts[9]),
                    wall_ms=float(parts[10]),
                )
            )
        except ValueError as err:
            raise ConfigError(f"{path}:{lineno}: {err}") from err
    return out


def write_slopes(fits: dict[str, RateFit], path: str) -> None:
    """slopes.json: 'setting/router/loss_name' -> fit fields."""
    payload = {
        key: {
            "slope": fit.slope,
            "intercept": fit.intercept,
            "r_squared": fit.r_squared,
            "slope_stderr": fit.slope_stderr,
            "points_used": fit.points_used,
        }
        for key, fit in sorted(fits.items())
    }
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
