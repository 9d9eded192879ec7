"""Experiment orchestration: simulation, method comparison, CSV outputs.

Everything downstream of this module is file-shaped: the sd-comparison
experiment emits one results CSV, the influence experiment emits one
leverage CSV, and ``report`` folds either back into a summary.  All
randomness is derived from (master_seed, sim_id, phase), so any single
simulation can be reproduced in isolation and a rerun of the whole batch is
byte-identical.  Wall-clock capture in the results CSV is opt-in for that
reason; the leverage CSV always carries its two path timings because the
speed comparison is part of that experiment's point.
"""

import csv
import json
import pathlib
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from .expfam import dirichlet_moments, trigamma
from .leverage import LeverageModel, manual_perturbation_all, mixture_leverage
from .linear_response import assemble_sigma_q, build_layout, jacobian_M, lrvb_covariance
from .mh import (
    MhConfig,
    UnconstrainedParams,
    find_map,
    mh_independence,
    proposal_covariance_from_theta,
    sample_moments,
)
from .mixture import (
    DataMoments,
    FitOptions,
    MixturePosterior,
    MixturePriors,
    component_order,
    fit,
    point_estimates,
)

__all__ = [
    "SimulationConfig",
    "ConfigError",
    "CsvSchemaError",
    "RESULTS_HEADER",
    "LEVERAGE_HEADER",
    "desk_profile",
    "paper_profile",
    "leverage_profile",
    "config_from_dict",
    "config_from_json",
    "phase_seed",
    "simulate",
    "run_experiment",
    "run_leverage_experiment",
    "report",
    "ReportResult",
    "fit_artifact",
]

RESULTS_HEADER = ["sim_id", "method", "parameter", "point_estimate",
                  "sd_estimate", "mc_se", "timing_ms", "error"]
LEVERAGE_HEADER = ["n", "x_star", "k", "responsibility", "lrvb_score",
                   "perturbation_score", "lrvb_ms", "perturb_ms"]

# phase tags for per-sim random streams
_PHASES = {"simulate": 0, "fit": 1, "mh": 2, "leverage": 3}


class ConfigError(ValueError):
    """Config parsing failed; message names the offending key."""


class CsvSchemaError(ValueError):
    """A results/leverage CSV does not match its schema."""


@dataclass(frozen=True)
class SimulationConfig:
    k: int
    n: int
    n_sims: int
    truth_pi: np.ndarray
    truth_mu: np.ndarray
    truth_tau: np.ndarray
    master_seed: int
    priors: MixturePriors
    mh: MhConfig
    fit: FitOptions

    def __post_init__(self):
        object.__setattr__(self, "truth_pi", np.asarray(self.truth_pi, dtype=float))
        object.__setattr__(self, "truth_mu", np.asarray(self.truth_mu, dtype=float))
        object.__setattr__(self, "truth_tau", np.asarray(self.truth_tau, dtype=float))
        if self.n_sims < 1 or self.k < 1 or self.n < 1:
            raise ConfigError("k, n, n_sims must all be at least 1")
        for name in ("truth_pi", "truth_mu", "truth_tau"):
            if getattr(self, name).shape != (self.k,):
                raise ConfigError(f"{name} must have length k = {self.k}")
        if abs(self.truth_pi.sum() - 1.0) > 1e-10 or np.any(self.truth_pi <= 0.0):
            raise ConfigError("truth_pi must be a strictly positive simplex vector")
        if np.any(self.truth_tau <= 0.0):
            raise ConfigError("truth_tau must be strictly positive")


def desk_profile(master_seed: int = 20240) -> SimulationConfig:
    """Desk-scale comparison: small enough for CI, big enough to see the gap."""
    return SimulationConfig(
        k=2, n=1000, n_sims=20,
        truth_pi=np.array([0.5, 0.5]),
        truth_mu=np.array([-2.0, 2.0]),
        truth_tau=np.array([1.0, 1.0]),
        master_seed=master_seed,
        priors=MixturePriors(),
        mh=MhConfig(n_draws=100_000, n_burn=5_000, proposal_scale=1.5, seed=0),
        fit=FitOptions(),
    )


def paper_profile(master_seed: int = 20240) -> SimulationConfig:
    """Full-scale comparison; the truth values are this artifact's choice."""
    return SimulationConfig(
        k=3, n=3000, n_sims=100,
        truth_pi=np.array([0.3, 0.3, 0.4]),
        truth_mu=np.array([-4.0, 0.0, 4.0]),
        truth_tau=np.array([1.0, 1.0, 1.0]),
        master_seed=master_seed,
        priors=MixturePriors(),
        mh=MhConfig(n_draws=100_000, n_burn=5_000, proposal_scale=1.5, seed=0),
        fit=FitOptions(),
    )


def leverage_profile(master_seed: int = 20240) -> SimulationConfig:
    """Influence experiment defaults: two components, five hundred points."""
    return SimulationConfig(
        k=2, n=500, n_sims=1,
        truth_pi=np.array([0.5, 0.5]),
        truth_mu=np.array([-2.0, 2.0]),
        truth_tau=np.array([1.0, 1.0]),
        master_seed=master_seed,
        priors=MixturePriors(),
        mh=MhConfig(n_draws=100_000, n_burn=5_000, proposal_scale=1.5, seed=0),
        fit=FitOptions(tolerance=1e-11),
    )


# ---------------------------------------------------------------------------
# Strict config parsing (unknown keys rejected at every level)
# ---------------------------------------------------------------------------


def _build_strict(cls, payload: dict, context: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {context}")
    try:
        return cls(**payload)
    except TypeError as exc:
        raise ConfigError(f"bad {context}: {exc}") from None


def config_from_dict(payload: dict, base: SimulationConfig | None = None) -> SimulationConfig:
    """Build a config from a JSON-shaped dict, overlaying ``base`` if given."""
    if not isinstance(payload, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {f.name for f in fields(SimulationConfig)}
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in config")
    merged = {}
    if base is not None:
        merged = {f.name: getattr(base, f.name) for f in fields(SimulationConfig)}
    for key, value in payload.items():
        if key == "priors":
            merged[key] = _build_strict(MixturePriors, value, "priors")
        elif key == "mh":
            merged[key] = _build_strict(MhConfig, value, "mh")
        elif key == "fit":
            merged[key] = _build_strict(FitOptions, value, "fit")
        else:
            merged[key] = value
    missing = allowed - set(merged)
    if missing:
        raise ConfigError(f"missing key(s) {sorted(missing)} in config")
    return SimulationConfig(**merged)


def config_from_json(path: str, base: SimulationConfig | None = None) -> SimulationConfig:
    with open(path) as handle:
        try:
            payload = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return config_from_dict(payload, base=base)


# ---------------------------------------------------------------------------
# Seeds and simulation
# ---------------------------------------------------------------------------


def phase_seed(master_seed: int, sim_id: int, phase: str) -> int:
    """Independent stream per (simulation, phase), stable across runs."""
    seq = np.random.SeedSequence((int(master_seed), int(sim_id), _PHASES[phase]))
    return int(seq.generate_state(1, np.uint64)[0])


def simulate(cfg: SimulationConfig, sim_id: int) -> np.ndarray:
    """One synthetic dataset: labels from truth_pi, then conditional normals."""
    rng = np.random.default_rng(phase_seed(cfg.master_seed, sim_id, "simulate"))
    labels = rng.choice(cfg.k, size=cfg.n, p=cfg.truth_pi)
    return rng.normal(cfg.truth_mu[labels], 1.0 / np.sqrt(cfg.truth_tau[labels]))


# ---------------------------------------------------------------------------
# Method summaries for one simulation
# ---------------------------------------------------------------------------


def _format(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _mfvb_sds(post: MixturePosterior) -> dict:
    logpi_sd = np.sqrt(np.diag(dirichlet_moments(post.pi).cov))
    mu_sd = np.array([np.sqrt(b.variance) for b in post.mu])
    logtau_sd = np.array([np.sqrt(trigamma(b.shape)) for b in post.tau])
    return {"logpi": logpi_sd, "mu": mu_sd, "logtau": logtau_sd}


def _method_rows(sim_id, method, point, sd, mc_se, timing_ms, k) -> list[list[str]]:
    rows = []
    for group in ("logpi", "mu", "logtau"):
        for j in range(k):
            rows.append([
                str(sim_id), method, f"{group}_{j + 1}",
                _format(point[group][j]), _format(sd[group][j]),
                _format(mc_se[group][j]) if mc_se is not None else "",
                _format(timing_ms), "",
            ])
    return rows


def _simulation_rows(cfg: SimulationConfig, sim_id: int, record_timing: bool) -> list[list[str]]:
    x = simulate(cfg, sim_id)
    data = DataMoments.from_observations(x)
    opts = replace(cfg.fit, seed=phase_seed(cfg.master_seed, sim_id, "fit"))

    started = time.perf_counter()
    result = fit(data, cfg.priors, cfg.k, opts)
    fit_ms = 1000.0 * (time.perf_counter() - started)
    if not result.converged:
        raise RuntimeError(f"MFVB fit did not converge "
                           f"(residual {result.final_residual:.3e})")
    post = result.posterior
    order = component_order(post)
    pe = point_estimates(post)
    point = {"logpi": pe.logpi[order], "mu": pe.mu[order], "logtau": pe.logtau[order]}

    layout = build_layout(cfg.k, cfg.n, "mixture")
    started = time.perf_counter()
    jac = jacobian_M(post, data, cfg.priors, layout, tol=opts.tolerance)
    sigma_q = assemble_sigma_q(post, layout)
    est = lrvb_covariance(sigma_q, jac, layout)
    lrvb_ms = 1000.0 * (time.perf_counter() - started)

    raw = _mfvb_sds(post)
    mfvb_sd = {g: raw[g][order] for g in raw}
    hat_diag = np.diag(est.sigma_hat_theta)
    lrvb_sd = {
        "logpi": np.sqrt([hat_diag[layout.logpi_index(j)] for j in order]),
        "mu": np.sqrt([hat_diag[layout.mu_index(j)] for j in order]),
        "logtau": np.sqrt([hat_diag[layout.logtau_index(j)] for j in order]),
    }

    started = time.perf_counter()
    map_point = find_map(x, cfg.priors, UnconstrainedParams.from_point_estimates(pe))
    proposal = proposal_covariance_from_theta(est.sigma_hat_theta, layout)
    mh_cfg = replace(cfg.mh, seed=phase_seed(cfg.master_seed, sim_id, "mh"))
    draws = mh_independence(x, cfg.priors, map_point, mh_cfg, proposal)
    moments = sample_moments(draws)
    mh_ms = 1000.0 * (time.perf_counter() - started)

    k = cfg.k
    mh_point = {"logpi": moments.mean[:k], "mu": moments.mean[k:2 * k],
                "logtau": moments.mean[2 * k:]}
    mh_sd = {"logpi": moments.sd[:k], "mu": moments.sd[k:2 * k],
             "logtau": moments.sd[2 * k:]}
    mh_se = {"logpi": moments.sd_mc_se[:k], "mu": moments.sd_mc_se[k:2 * k],
             "logtau": moments.sd_mc_se[2 * k:]}

    rows = []
    rows += _method_rows(sim_id, "mh", mh_point, mh_sd, mh_se,
                         mh_ms if record_timing else "", k)
    rows += _method_rows(sim_id, "mfvb", point, mfvb_sd, None,
                         fit_ms if record_timing else "", k)
    rows += _method_rows(sim_id, "lrvb", point, lrvb_sd, None,
                         lrvb_ms if record_timing else "", k)
    return rows


def run_experiment(cfg: SimulationConfig, out_path: str,
                   sim_ids=None, record_timing: bool = False) -> list[list[str]]:
    """Simulate, fit, correct, and sample for each sim; write the results CSV.

    A failing simulation contributes one row carrying the error message and
    is skipped by ``report``; it never aborts the batch.  With
    ``record_timing`` off (the default) reruns are byte-identical.
    """
    ids = list(range(cfg.n_sims)) if sim_ids is None else sorted(sim_ids)
    all_rows = []
    for sim_id in ids:
        try:
            all_rows.extend(_simulation_rows(cfg, sim_id, record_timing))
        except Exception as exc:  # per-sim isolation
            all_rows.append([str(sim_id), "", "", "", "", "", "",
                             f"{type(exc).__name__}: {exc}"])
    with open(out_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(RESULTS_HEADER)
        writer.writerows(all_rows)
    return all_rows


def run_leverage_experiment(cfg: SimulationConfig, out_path: str,
                            sim_id: int = 0) -> list[list[str]]:
    """Influence scores against the perturb-and-refit oracle, one CSV row per (n, k)."""
    x_star = simulate(cfg, sim_id)
    model = LeverageModel(
        data_star=x_star, truth_pi=cfg.truth_pi, truth_tau=cfg.truth_tau,
        mu_prior_mean=cfg.priors.normal_mean,
        mu_prior_variance=cfg.priors.normal_variance,
    )
    opts = replace(cfg.fit,
                   tolerance=min(cfg.fit.tolerance, 1e-11),
                   seed=phase_seed(cfg.master_seed, sim_id, "leverage"))

    base = fit(DataMoments.from_observations(x_star), model.priors(), cfg.k,
               opts, frozen=model.frozen())
    started = time.perf_counter()
    scores = mixture_leverage(model, opts, base=base)
    lrvb_ms = 1000.0 * (time.perf_counter() - started)
    perturb, perturb_seconds = manual_perturbation_all(model, opts=opts, base=base)
    perturb_ms = 1000.0 * perturb_seconds

    order = component_order(scores.fit.posterior)
    resp = scores.fit.posterior.resp
    rows = []
    for n in range(model.n):
        for slot, j in enumerate(order):
            rows.append([
                str(n), _format(x_star[n]), str(slot + 1),
                _format(resp[n, j]), _format(scores.mu_scores[j, n]),
                _format(perturb[j, n]), _format(lrvb_ms), _format(perturb_ms),
            ])
    with open(out_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(LEVERAGE_HEADER)
        writer.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReportResult:
    text: str
    summary_rows: list
    ok: bool


def _read_csv(path: str, header: list[str]) -> list[dict]:
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        rows = list(reader)
    if not rows:
        raise CsvSchemaError(f"{path}: empty file")
    if rows[0] != header:
        raise CsvSchemaError(f"{path}: line 1: header mismatch "
                             f"(expected {','.join(header)})")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise CsvSchemaError(f"{path}: line {lineno}: expected "
                                 f"{len(header)} fields, found {len(row)}")
        out.append(dict(zip(header, row)))
    if not out:
        raise CsvSchemaError(f"{path}: no data rows")
    return out


def _group_of(parameter: str) -> str:
    return parameter.rsplit("_", 1)[0]


def report(results_path: str, leverage_path: str | None = None,
           ratio_band: tuple[float, float] = (0.9, 1.1),
           underestimate_fraction: float = 0.9,
           leverage_correlation: float = 0.99) -> ReportResult:
    """Fold the CSVs into ratio medians, influence agreement, and a verdict.

    The verdict thresholds default to the acceptance targets: LRVB/MH group
    medians inside ``ratio_band``, MFVB underestimating on the log pi and
    log tau groups, and (when a leverage CSV is given) score correlation
    above ``leverage_correlation``.
    """
    rows = _read_csv(results_path, RESULTS_HEADER)
    failed_sims = sorted({r["sim_id"] for r in rows if r["error"]})
    good = [r for r in rows if not r["error"] and r["sim_id"] not in failed_sims]

    sds: dict = {}
    timing: dict = {}
    for r in good:
        try:
            sd = float(r["sd_estimate"])
        except ValueError:
            raise CsvSchemaError(
                f"{results_path}: sim {r['sim_id']} {r['method']} "
                f"{r['parameter']}: bad sd_estimate {r['sd_estimate']!r}")
        sds.setdefault((r["sim_id"], r["parameter"]), {})[r["method"]] = sd
        if r["timing_ms"]:
            timing.setdefault(r["method"], []).append(float(r["timing_ms"]))

    ratios = {g: {"lrvb": [], "mfvb": []} for g in ("logpi", "mu", "logtau")}
    for (sim, parameter), methods in sorted(sds.items()):
        if {"mh", "mfvb", "lrvb"} - set(methods):
            raise CsvSchemaError(f"{results_path}: sim {sim} parameter "
                                 f"{parameter}: missing method rows")
        group = _group_of(parameter)
        ratios[group]["lrvb"].append(methods["lrvb"] / methods["mh"])
        ratios[group]["mfvb"].append(methods["mfvb"] / methods["mh"])

    lines = [f"results: {pathlib.PurePath(results_path).name}",
             f"sims: {len({s for s, _ in sds})} ok, {len(failed_sims)} failed"]
    summary_rows = []
    ok = True
    all_mfvb = []
    for group in ("logpi", "mu", "logtau"):
        for method in ("lrvb", "mfvb"):
            values = np.array(ratios[group][method])
            med = float(np.median(values))
            q1, q3 = np.percentile(values, [25.0, 75.0])
            lines.append(f"{group:>7} sd_{method}/sd_mh median {med:.6g} "
                         f"iqr [{q1:.6g}, {q3:.6g}] cells {values.size}")
            summary_rows.append([group, f"sd_{method}_over_mh_median", f"{med:.6g}"])
            summary_rows.append([group, f"sd_{method}_over_mh_iqr_low", f"{q1:.6g}"])
            summary_rows.append([group, f"sd_{method}_over_mh_iqr_high", f"{q3:.6g}"])
        med_lrvb = float(np.median(ratios[group]["lrvb"]))
        med_mfvb = float(np.median(ratios[group]["mfvb"]))
        all_mfvb.extend(ratios[group]["mfvb"])
        if not ratio_band[0] <= med_lrvb <= ratio_band[1]:
            ok = False
            lines.append(f"{group:>7} FAIL lrvb median outside "
                         f"[{ratio_band[0]:g}, {ratio_band[1]:g}]")
        if group in ("logpi", "logtau") and not med_mfvb < med_lrvb:
            ok = False
            lines.append(f"{group:>7} FAIL mfvb median not below lrvb median")
    frac_under = float(np.mean(np.array(all_mfvb) < 1.0))
    lines.append(f"mfvb underestimates mh in {frac_under:.6g} of cells")
    summary_rows.append(["all", "mfvb_underestimate_fraction", f"{frac_under:.6g}"])
    if frac_under < underestimate_fraction:
        ok = False
        lines.append(f"    all FAIL underestimate fraction below "
                     f"{underestimate_fraction:g}")

    if timing:
        for method in sorted(timing):
            med = float(np.median(timing[method]))
            lines.append(f"timing {method} median {med:.6g} ms")
            summary_rows.append(["timing", f"{method}_median_ms", f"{med:.6g}"])

    if leverage_path is not None:
        lrows = _read_csv(leverage_path, LEVERAGE_HEADER)
        lrvb_scores = np.array([float(r["lrvb_score"]) for r in lrows])
        pert_scores = np.array([float(r["perturbation_score"]) for r in lrows])
        corr = float(np.corrcoef(lrvb_scores, pert_scores)[0, 1])
        big = np.abs(lrvb_scores) > 0.1 * np.abs(lrvb_scores).max()
        rel = float(np.max(np.abs(lrvb_scores - pert_scores)[big]
                           / np.abs(lrvb_scores)[big]))
        lrvb_ms = float(lrows[0]["lrvb_ms"])
        perturb_ms = float(lrows[0]["perturb_ms"])
        speedup = perturb_ms / lrvb_ms if lrvb_ms > 0 else float("inf")
        lines.append(f"leverage correlation {corr:.6g}")
        lines.append(f"leverage max rel err (scores above 10% of max) {rel:.6g}")
        lines.append(f"leverage timing ratio perturbation/lrvb {speedup:.6g}")
        summary_rows.append(["leverage", "correlation", f"{corr:.6g}"])
        summary_rows.append(["leverage", "max_rel_err_big_scores", f"{rel:.6g}"])
        summary_rows.append(["leverage", "timing_ratio", f"{speedup:.6g}"])
        if not corr > leverage_correlation:
            ok = False
            lines.append(f"leverage FAIL correlation at or below "
                         f"{leverage_correlation:g}")

    lines.append("verdict: " + ("ok" if ok else "FAIL"))
    return ReportResult(text="\n".join(lines) + "\n",
                        summary_rows=summary_rows, ok=ok)


def write_summary_csv(result: ReportResult, out_path: str):
    with open(out_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["group", "metric", "value"])
        writer.writerows(result.summary_rows)


# ---------------------------------------------------------------------------
# JSON fit artifacts
# ---------------------------------------------------------------------------


def fit_artifact(result, layout=None, sigma_hat=None) -> dict:
    """JSON-shaped payload: posterior blocks plus the labeled dense covariance."""
    post = result.posterior
    payload = {
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "final_residual": float(result.final_residual),
        "posterior": {
            "pi": {"alpha": post.pi.alpha.tolist()},
            "mu": [{"mean": b.mean, "variance": b.variance} for b in post.mu],
            "tau": [{"shape": b.shape, "rate": b.rate} for b in post.tau],
            "resp": post.resp.tolist(),
        },
    }
    if sigma_hat is not None:
        payload["theta_labels"] = layout.theta_labels()
        payload["sigma_hat_theta"] = [float(v) for v in np.asarray(sigma_hat).ravel()]
    return payload
