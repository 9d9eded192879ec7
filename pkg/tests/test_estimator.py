import json
import subprocess
import sys

import numpy as np
import pytest
from sklearn.base import clone

from lrvb.estimator import NormalMixtureLRVB


@pytest.fixture(scope="module")
def sample():
    rng = np.random.default_rng(77)
    return np.concatenate([rng.normal(-2, 1, 150), rng.normal(2, 1, 150)])


@pytest.fixture(scope="module")
def fitted(sample):
    return NormalMixtureLRVB(n_components=2, random_state=0).fit(sample)


class TestEstimatorApi:
    def test_get_set_params_and_clone(self):
        est = NormalMixtureLRVB(n_components=3, tol=1e-8)
        params = est.get_params()
        assert params["n_components"] == 3
        assert params["tol"] == 1e-8
        cloned = clone(est)
        assert cloned.get_params() == params
        est.set_params(n_restarts=5)
        assert est.n_restarts == 5

    def test_fit_attributes(self, fitted):
        assert fitted.converged_
        assert fitted.final_residual_ <= fitted.tol
        assert fitted.n_iter_ >= 1
        assert set(fitted.point_estimates_) == {"logpi", "mu", "logtau"}
        assert fitted.covariance_.shape == (10, 10)
        assert fitted.covariance_labels_[0] == "logpi_1"
        assert np.allclose(fitted.covariance_, fitted.covariance_.T)
        assert np.all(np.linalg.eigvalsh(fitted.covariance_) > -1e-10)

    def test_column_vector_input(self, sample):
        est = NormalMixtureLRVB(n_components=2, compute_covariance=False)
        est.fit(sample.reshape(-1, 1))
        assert est.converged_

    def test_multicolumn_rejected(self):
        est = NormalMixtureLRVB()
        with pytest.raises(ValueError, match="univariate"):
            est.fit(np.zeros((10, 2)))

    def test_predict_proba(self, fitted, sample):
        proba = fitted.predict_proba(sample[:20])
        assert proba.shape == (20, 2)
        assert np.max(np.abs(proba.sum(axis=1) - 1.0)) < 1e-10
        labels = fitted.predict(sample[:20])
        assert np.array_equal(labels, proba.argmax(axis=1))

    def test_predict_before_fit_raises(self, sample):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            NormalMixtureLRVB().predict_proba(sample)

    def test_separated_components_found(self, fitted):
        mu = np.sort(fitted.point_estimates_["mu"])
        assert abs(mu[0] + 2.0) < 0.3
        assert abs(mu[1] - 2.0) < 0.3


class TestCli:
    def test_simulate_fit_lrvb_pipeline(self, tmp_path):
        data_path = tmp_path / "data.json"
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"n": 120, "n_sims": 1}))

        def run(*args):
            return subprocess.run([sys.executable, "-m", "lrvb.cli", *args],
                                  capture_output=True, text=True)

        out = run("simulate", "--config", str(config), "--out", str(data_path))
        assert out.returncode == 0, out.stderr
        assert len(json.loads(data_path.read_text())["x"]) == 120

        art = tmp_path / "fit.json"
        out = run("lrvb", "--config", str(config), "--data", str(data_path),
                  "--out", str(art))
        assert out.returncode == 0, out.stderr
        payload = json.loads(art.read_text())
        assert payload["converged"]
        assert len(payload["sigma_hat_theta"]) == 100

    def test_report_exit_codes(self, tmp_path):
        bad = tmp_path / "bad.csv"
        header = "sim_id,method,parameter,point_estimate,sd_estimate,mc_se,timing_ms,error"
        lines = [header]
        for method, sd in (("mh", "1.0"), ("mfvb", "2.0"), ("lrvb", "2.0")):
            for group in ("logpi", "mu", "logtau"):
                lines.append(f"0,{method},{group}_1,0.0,{sd},,,")
        bad.write_text("\n".join(lines) + "\n")
        out = subprocess.run(
            [sys.executable, "-m", "lrvb.cli", "report", "--results", str(bad)],
            capture_output=True, text=True)
        assert out.returncode == 1  # mfvb/lrvb ratio 2.0 is out of band
        assert "FAIL" in out.stdout
