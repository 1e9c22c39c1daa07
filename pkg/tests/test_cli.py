import json
import math
import os

import numpy as np
import pytest

from moelab import charts, results_io
from moelab.cli import load_config, main
from moelab.errors import ConfigError
from moelab.experiments import RateFit, SweepConfig, TrialResult, fit_slope


def write_config(tmp_path, payload):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(payload))
    return str(path)


SMALL = {
    "master_seed": 0,
    "d": 4,
    "k_star": 3,
    "settings": ["ExactSpecified"],
    "sample_sizes": [200, 400, 800],
    "replicates": 2,
    "sgd": {"epochs": 2, "batch_size": 1000000000},
    "mc_samples": 500,
}


class TestConfig:
    def test_defaults_load(self):
        cfg = load_config(None)
        assert cfg.d == 32
        assert cfg.k_star == 8
        assert len(cfg.sample_sizes) == 7

    def test_unknown_keys_rejected(self, tmp_path):
        path = write_config(tmp_path, {"master_sead": 1})
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unknown_sgd_keys_rejected(self, tmp_path):
        path = write_config(tmp_path, {"sgd": {"momentum": 0.9}})
        with pytest.raises(ConfigError):
            load_config(path)

    def test_router_strings_and_objects(self, tmp_path):
        path = write_config(
            tmp_path,
            {"routers": ["cosine", {"kind": "PerturbedCosine", "tau1": 0.2, "tau2": 0.3}], "tau": 0.1},
        )
        cfg = load_config(path)
        assert cfg.routers[0].kind == "cosine"
        assert cfg.routers[1].tau1 == 0.2
        assert cfg.routers[1].tau2 == 0.3

    def test_malformed_json_reports_line(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{\n  broken\n}")
        with pytest.raises(ConfigError, match="bad.json:2"):
            load_config(str(path))


class TestCsvRoundTrip:
    def make_results(self):
        return [
            TrialResult("ExactSpecified", "Cosine", 0.0, "ffn_relu", 1000, 0, 42,
                        "L3", 0.123456789012345678, 0.0099, 0.0),
            TrialResult("ExactSpecified", "Cosine", 0.0, "ffn_relu", 1000, 1, 43,
                        "L3", 1.0 / 3.0, 1e-17, 0.0),
        ]

    def test_round_trip_exact(self, tmp_path):
        path = str(tmp_path / "results.csv")
        results = self.make_results()
        results_io.write_results(results, path)
        back = results_io.read_results(path)
        assert back == results

    def test_header_and_row_count(self, tmp_path):
        path = str(tmp_path / "results.csv")
        results_io.write_results(self.make_results(), path)
        lines = open(path).read().splitlines()
        assert lines[0] == results_io.CSV_HEADER
        assert len(lines) == 3

    def test_empty_results_header_only(self, tmp_path):
        path = str(tmp_path / "results.csv")
        results_io.write_results([], path)
        assert open(path).read() == results_io.CSV_HEADER + "\n"

    def test_floats_survive_17_digits(self, tmp_path):
        path = str(tmp_path / "results.csv")
        vals = [1.0 / 3.0, math.pi, 1e-300, 7.2e15, 0.1 + 0.2]
        results = [
            TrialResult("S", "R", v, "f", 10, i, 1, "L3", v, v, 0.0)
            for i, v in enumerate(vals)
        ]
        results_io.write_results(results, path)
        back = results_io.read_results(path)
        for r, v in zip(back, vals):
            assert r.loss_value == v
            assert r.tau == v

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("a,b,c\n")
        with pytest.raises(ConfigError, match="x.csv:1"):
            results_io.read_results(str(path))


class TestCliCommands:
    def test_sweep_slopes_plot_pipeline(self, tmp_path):
        cfg_path = write_config(tmp_path, SMALL)
        csv_path = str(tmp_path / "results.csv")
        rc = main(["--config", cfg_path, "--out", csv_path, "--jobs", "1", "sweep"])
        assert rc == 0
        rows = results_io.read_results(csv_path)
        assert len(rows) == 2 * 3 * 2  # routers x sizes x replicates

        slopes_path = str(tmp_path / "slopes.json")
        rc = main(["--config", csv_path, "--out", slopes_path, "slopes"])
        assert rc == 0
        slopes = json.loads(open(slopes_path).read())
        assert set(slopes) == {
            "ExactSpecified/Cosine/L3",
            "ExactSpecified/PerturbedCosine/L3",
        }
        for fit in slopes.values():
            assert set(fit) == {"slope", "intercept", "r_squared", "slope_stderr", "points_used"}

        out_dir = str(tmp_path / "plots")
        rc = main(["--config", csv_path, "--out", out_dir, "plot"])
        assert rc == 0
        svg = open(os.path.join(out_dir, "rates_ExactSpecified.svg")).read()
        assert svg.count('class="series"') == 2
        assert svg.count('class="fit"') == 2

    def test_sweep_determinism_across_jobs(self, tmp_path):
        cfg_path = write_config(tmp_path, SMALL)
        p1 = str(tmp_path / "a.csv")
        p2 = str(tmp_path / "b.csv")
        assert main(["--config", cfg_path, "--out", p1, "--jobs", "1", "sweep"]) == 0
        assert main(["--config", cfg_path, "--out", p2, "--jobs", "2", "sweep"]) == 0
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_seed_override_changes_results(self, tmp_path):
        cfg_path = write_config(tmp_path, SMALL)
        p1 = str(tmp_path / "a.csv")
        p2 = str(tmp_path / "b.csv")
        assert main(["--config", cfg_path, "--out", p1, "sweep"]) == 0
        assert main(["--config", cfg_path, "--out", p2, "--seed", "5", "sweep"]) == 0
        assert open(p1, "rb").read() != open(p2, "rb").read()

    def test_missing_config_exits_2(self, tmp_path):
        assert main(["--config", str(tmp_path / "nope.json"), "sweep"]) == 2

    def test_unknown_subcommand_exits_2(self):
        assert main(["frobnicate"]) == 2

    def test_slope_of_exact_power_law_csv(self, tmp_path):
        rows = []
        for i, n in enumerate((100, 1000, 10000)):
            rows.append(TrialResult("S", "R", 0.0, "f", n, 0, 1, "L3", float(n) ** -0.5, 0.0, 0.0))
        csv_path = str(tmp_path / "power.csv")
        results_io.write_results(rows, csv_path)
        slopes_path = str(tmp_path / "slopes.json")
        assert main(["--config", csv_path, "--out", slopes_path, "slopes"]) == 0
        fit = json.loads(open(slopes_path).read())["S/R/L3"]
        assert fit["slope"] == pytest.approx(-0.5, abs=1e-12)


class TestCharts:
    SERIES = [
        ("PerturbedCosine", [(1000, 0.1, 0.01), (10000, 0.03, 0.004), (100000, 0.01, 0.001)]),
        ("Cosine", [(1000, 0.12, 0.01), (10000, 0.08, 0.006), (100000, 0.06, 0.004)]),
    ]

    def fits(self):
        return {name: fit_slope([(n, m) for n, m, _ in pts]) for name, pts in self.SERIES}

    def test_deterministic_bytes(self, tmp_path):
        p1, p2 = str(tmp_path / "a.svg"), str(tmp_path / "b.svg")
        charts.render_plot(self.SERIES, self.fits(), p1, title="t")
        charts.render_plot(self.SERIES, self.fits(), p2, title="t")
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_series_and_fit_counts_and_legend(self, tmp_path):
        path = str(tmp_path / "c.svg")
        charts.render_plot(self.SERIES, self.fits(), path)
        svg = open(path).read()
        assert svg.count('class="series"') == 2
        assert svg.count('class="fit"') == 2
        slope = self.fits()["Cosine"].slope
        assert f"O(n^{slope:.2f})" in svg

    def test_zero_series_skipped_with_annotation(self, tmp_path):
        series = self.SERIES + [("Linear", [(1000, 0.0, 0.0), (10000, 0.0, 0.0)])]
        path = str(tmp_path / "d.svg")
        charts.render_plot(series, self.fits(), path)
        svg = open(path).read()
        assert svg.count('class="series"') == 2
        assert 'class="skipped"' in svg and "Linear" in svg
