import json
import pathlib

import numpy as np
import pytest

import lrvb.harness as harness
from lrvb.harness import (
    ConfigError,
    CsvSchemaError,
    LEVERAGE_HEADER,
    RESULTS_HEADER,
    config_from_dict,
    config_from_json,
    desk_profile,
    fit_artifact,
    phase_seed,
    report,
    run_experiment,
    run_leverage_experiment,
    simulate,
    write_summary_csv,
)
from lrvb.mixture import DataMoments, FitOptions, MixturePriors, fit

DATA = pathlib.Path(__file__).parent / "data"


def smoke_config(**overrides):
    payload = {
        "k": 2, "n": 150, "n_sims": 2,
        "truth_pi": [0.5, 0.5], "truth_mu": [-2.0, 2.0], "truth_tau": [1.0, 1.0],
        "master_seed": 31415,
        "priors": {}, "fit": {},
        "mh": {"n_draws": 15_000, "n_burn": 1_500, "proposal_scale": 1.5, "seed": 0},
    }
    payload.update(overrides)
    return config_from_dict(payload)


class TestConfig:
    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            config_from_dict({"k": 2, "bogus": 1})

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="mh"):
            smoke_config(mh={"n_draws": 100, "n_burn": 10, "steps": 5})

    def test_missing_keys(self):
        with pytest.raises(ConfigError, match="missing"):
            config_from_dict({"k": 2})

    def test_overlay_on_profile(self):
        base = desk_profile()
        cfg = config_from_dict({"n_sims": 3}, base=base)
        assert cfg.n_sims == 3
        assert cfg.n == base.n

    def test_from_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"n_sims": 4}))
        cfg = config_from_json(str(path), base=desk_profile())
        assert cfg.n_sims == 4

    def test_validation(self):
        with pytest.raises(ConfigError, match="simplex"):
            smoke_config(truth_pi=[0.7, 0.7])
        with pytest.raises(ConfigError, match="length"):
            smoke_config(truth_mu=[0.0])


class TestSeedsAndSimulate:
    def test_phase_seeds_distinct_and_stable(self):
        a = phase_seed(1, 0, "simulate")
        assert a == phase_seed(1, 0, "simulate")
        assert a != phase_seed(1, 0, "fit")
        assert a != phase_seed(1, 1, "simulate")
        assert a != phase_seed(2, 0, "simulate")

    def test_simulate_deterministic(self):
        cfg = smoke_config()
        assert np.array_equal(simulate(cfg, 1), simulate(cfg, 1))
        assert not np.array_equal(simulate(cfg, 0), simulate(cfg, 1))

    def test_component_frequencies(self):
        cfg = smoke_config(n=100_000, truth_pi=[0.3, 0.7],
                           truth_mu=[-6.0, 6.0])
        x = simulate(cfg, 0)
        freq = float(np.mean(x > 0.0))  # components 12 sds apart
        se = np.sqrt(0.3 * 0.7 / 100_000)
        assert abs(freq - 0.7) < 4 * se

    def test_large_precision_collapses_spread(self):
        cfg = smoke_config(n=20_000, truth_tau=[1e8, 1e8])
        x = simulate(cfg, 0)
        residual = np.minimum(np.abs(x + 2.0), np.abs(x - 2.0))
        assert float(np.var(residual)) < 1e-6


@pytest.fixture(scope="module")
def results_csv(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp") / "results.csv"
    rows = run_experiment(smoke_config(), str(out))
    return out, rows


class TestExperiment:

    def test_row_count(self, results_csv):
        out, rows = results_csv
        assert len(rows) == 2 * 3 * 6
        text = out.read_text().splitlines()
        assert len(text) == 1 + 36
        assert text[0] == ",".join(RESULTS_HEADER)

    def test_byte_identical_rerun(self, results_csv, tmp_path):
        out, _ = results_csv
        again = tmp_path / "again.csv"
        run_experiment(smoke_config(), str(again))
        assert out.read_bytes() == again.read_bytes()

    def test_per_sim_isolation(self, results_csv, tmp_path):
        out, rows = results_csv
        only_one = tmp_path / "one.csv"
        run_experiment(smoke_config(), str(only_one), sim_ids=[1])
        expected = [r for r in rows if r[0] == "1"]
        got = only_one.read_text().splitlines()[1:]
        assert got == [",".join(r) for r in expected]

    def test_report_thresholds(self, results_csv):
        out, _ = results_csv
        result = report(str(out))
        assert result.ok
        assert "verdict: ok" in result.text

    def test_failed_sim_recorded_not_raised(self, tmp_path, monkeypatch):
        real = harness.simulate

        def broken(cfg, sim_id):
            if sim_id == 0:
                return np.full(cfg.n, np.nan)
            return real(cfg, sim_id)

        monkeypatch.setattr(harness, "simulate", broken)
        out = tmp_path / "partial.csv"
        rows = run_experiment(smoke_config(), str(out))
        errors = [r for r in rows if r[-1]]
        assert len(errors) == 1
        assert errors[0][0] == "0"
        good = [r for r in rows if not r[-1]]
        assert len(good) == 18  # sim 1 fully present


class TestLeverageExperiment:
    def test_rows_and_correlation(self, tmp_path):
        cfg = smoke_config(n=80, fit={"tolerance": 1e-11})
        out = tmp_path / "leverage.csv"
        rows = run_leverage_experiment(cfg, str(out))
        assert len(rows) == 80 * 2
        header = out.read_text().splitlines()[0]
        assert header == ",".join(LEVERAGE_HEADER)
        lrvb_scores = np.array([float(r[4]) for r in rows])
        pert_scores = np.array([float(r[5]) for r in rows])
        assert np.corrcoef(lrvb_scores, pert_scores)[0, 1] > 0.99

    def test_symmetric_truth_symmetric_scores(self, tmp_path):
        cfg = smoke_config(n=60, fit={"tolerance": 1e-11})
        out = tmp_path / "leverage.csv"
        rows = run_leverage_experiment(cfg, str(out))
        x = np.array([float(r[1]) for r in rows[::2]])
        s1 = np.array([float(r[4]) for r in rows[0::2]])  # component 1
        s2 = np.array([float(r[4]) for r in rows[1::2]])  # component 2
        # score of component 1 at location x matches component 2 near -x
        order = np.argsort(x)
        rev = np.argsort(-x)
        match = np.interp(-x[order], x[rev][::-1], s2[rev][::-1])
        mask = np.abs(s1[order]) > 0.1 * np.abs(s1).max()
        rel = np.abs(s1[order] - match)[mask] / np.abs(s1[order])[mask]
        assert np.median(rel) < 0.25  # interpolation-limited, shape-level check


class TestReport:
    def test_identical_methods_give_unit_ratios(self, tmp_path):
        path = tmp_path / "flat.csv"
        lines = [",".join(RESULTS_HEADER)]
        for sim in range(2):
            for method in ("mh", "mfvb", "lrvb"):
                for group in ("logpi", "mu", "logtau"):
                    for k in (1, 2):
                        lines.append(f"{sim},{method},{group}_{k},0.1,0.25,,,")
        path.write_text("\n".join(lines) + "\n")
        result = report(str(path))
        for row in result.summary_rows:
            if row[1].endswith("median"):
                assert row[2] == "1"

    def test_golden_fixture_byte_identical(self):
        result = report(str(DATA / "golden_results.csv"),
                        str(DATA / "golden_leverage.csv"))
        assert result.text == (DATA / "golden_summary.txt").read_text()

    def test_golden_summary_csv(self, tmp_path):
        result = report(str(DATA / "golden_results.csv"),
                        str(DATA / "golden_leverage.csv"))
        out = tmp_path / "summary.csv"
        write_summary_csv(result, str(out))
        assert out.read_bytes() == (DATA / "golden_summary.csv").read_bytes()

    def test_empty_results_error(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text(",".join(RESULTS_HEADER) + "\n")
        with pytest.raises(CsvSchemaError, match="no data rows"):
            report(str(path))

    def test_malformed_row_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(",".join(RESULTS_HEADER) + "\n1,mh,mu_1,0.1\n")
        with pytest.raises(CsvSchemaError, match="line 2"):
            report(str(path))

    def test_missing_method_rows(self, tmp_path):
        path = tmp_path / "missing.csv"
        lines = [",".join(RESULTS_HEADER)]
        for method in ("mh", "mfvb"):
            for group in ("logpi", "mu", "logtau"):
                lines.append(f"0,{method},{group}_1,0.1,0.2,,,")
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(CsvSchemaError, match="missing method"):
            report(str(path))

    def test_header_mismatch(self, tmp_path):
        path = tmp_path / "hdr.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(CsvSchemaError, match="header"):
            report(str(path))


class TestFitArtifact:
    def test_round_trips_through_json(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=40)
        result = fit(DataMoments.from_observations(x), MixturePriors(), k=2,
                     opts=FitOptions(seed=0))
        from lrvb.linear_response import (
            assemble_sigma_q, build_layout, jacobian_M, lrvb_covariance)
        layout = build_layout(2, 40, "mixture")
        est = lrvb_covariance(
            assemble_sigma_q(result.posterior, layout),
            jacobian_M(result.posterior, DataMoments.from_observations(x),
                       MixturePriors(), layout),
            layout)
        payload = fit_artifact(result, layout, est.sigma_hat_theta)
        text = json.dumps(payload)
        back = json.loads(text)
        assert back["converged"] is True
        assert back["theta_labels"][0] == "logpi_1"
        assert len(back["sigma_hat_theta"]) == 10 * 10
        matrix = np.array(back["sigma_hat_theta"]).reshape(10, 10)
        assert np.allclose(matrix, est.sigma_hat_theta)
        assert len(back["posterior"]["mu"]) == 2
