"""Command-line entry point.

Subcommands mirror the pipeline stages: ``simulate`` writes a dataset,
``fit`` / ``lrvb`` / ``mh`` run one stage on a dataset, ``leverage`` and
``experiment`` run the batch experiments, and ``report`` summarizes a
results CSV (optionally joined with a leverage CSV) and exits nonzero when
the comparison thresholds fail.
"""

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from .harness import (
    config_from_json,
    desk_profile,
    fit_artifact,
    leverage_profile,
    paper_profile,
    phase_seed,
    report,
    run_experiment,
    run_leverage_experiment,
    simulate,
    write_summary_csv,
)
from .linear_response import assemble_sigma_q, build_layout, jacobian_M, lrvb_covariance
from .mh import (
    MhConfig,
    UnconstrainedParams,
    find_map,
    mh_independence,
    proposal_covariance_from_theta,
    sample_moments,
)
from .mixture import DataMoments, fit, point_estimates

_PROFILES = {"desk": desk_profile, "paper": paper_profile}


def _add_common(parser):
    parser.add_argument("--config", help="JSON config overlaying the profile")
    parser.add_argument("--seed", type=int, help="override master_seed")
    parser.add_argument("--out", required=True, help="output path")
    parser.add_argument("--profile", choices=sorted(_PROFILES), default="desk")


def _resolve_config(args, profile_builder=None):
    builder = profile_builder or _PROFILES[args.profile]
    cfg = builder()
    if args.config:
        cfg = config_from_json(args.config, base=cfg)
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    return cfg


def _load_data(path):
    with open(path) as handle:
        payload = json.load(handle)
    if "x" not in payload:
        raise SystemExit(f"{path}: expected a JSON object with an 'x' array")
    return np.asarray(payload["x"], dtype=float)


def _fit_stage(cfg, x, with_covariance):
    data = DataMoments.from_observations(x)
    result = fit(data, cfg.priors, cfg.k, cfg.fit)
    if not with_covariance:
        return result, None, None
    layout = build_layout(cfg.k, x.size, "mixture")
    jac = jacobian_M(result.posterior, data, cfg.priors, layout,
                     tol=cfg.fit.tolerance)
    est = lrvb_covariance(assemble_sigma_q(result.posterior, layout), jac, layout)
    return result, layout, est


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="lrvb",
        description="mean-field mixture fits with corrected covariances",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write one synthetic dataset as JSON")
    _add_common(p)
    p.add_argument("--sim-id", type=int, default=0)

    p = sub.add_parser("fit", help="MFVB fit of a dataset, JSON artifact out")
    _add_common(p)
    p.add_argument("--data", required=True, help="JSON file with an 'x' array")

    p = sub.add_parser("lrvb", help="fit plus corrected covariance, JSON out")
    _add_common(p)
    p.add_argument("--data", required=True)

    p = sub.add_parser("mh", help="MAP-centered independence chain, JSON out")
    _add_common(p)
    p.add_argument("--data", required=True)

    p = sub.add_parser("leverage", help="influence experiment, CSV out")
    _add_common(p)

    p = sub.add_parser("experiment", help="sd comparison experiment, CSV out")
    _add_common(p)
    p.add_argument("--sims", help="comma-separated sim ids (default: all)")
    p.add_argument("--timings", action="store_true",
                   help="record wall clock (breaks byte-level reproducibility)")

    p = sub.add_parser("report", help="summarize results, exit 0 iff thresholds hold")
    p.add_argument("--results", required=True, help="results CSV")
    p.add_argument("--leverage", help="leverage CSV to fold in")
    p.add_argument("--out", help="summary CSV path")
    p.add_argument("--ratio-band", nargs=2, type=float, default=(0.9, 1.1),
                   metavar=("LO", "HI"))
    p.add_argument("--underestimate-fraction", type=float, default=0.9)
    p.add_argument("--leverage-correlation", type=float, default=0.99)

    args = parser.parse_args(argv)

    if args.command == "report":
        result = report(args.results, leverage_path=args.leverage,
                        ratio_band=tuple(args.ratio_band),
                        underestimate_fraction=args.underestimate_fraction,
                        leverage_correlation=args.leverage_correlation)
        sys.stdout.write(result.text)
        if args.out:
            write_summary_csv(result, args.out)
        return 0 if result.ok else 1

    if args.command == "simulate":
        cfg = _resolve_config(args)
        x = simulate(cfg, args.sim_id)
        payload = {"x": x.tolist(), "sim_id": args.sim_id,
                   "seed": phase_seed(cfg.master_seed, args.sim_id, "simulate")}
        with open(args.out, "w") as handle:
            json.dump(payload, handle)
        return 0

    if args.command in ("fit", "lrvb"):
        cfg = _resolve_config(args)
        x = _load_data(args.data)
        result, layout, est = _fit_stage(cfg, x, with_covariance=args.command == "lrvb")
        payload = fit_artifact(result, layout,
                               est.sigma_hat_theta if est is not None else None)
        with open(args.out, "w") as handle:
            json.dump(payload, handle)
        return 0

    if args.command == "mh":
        cfg = _resolve_config(args)
        x = _load_data(args.data)
        result, layout, est = _fit_stage(cfg, x, with_covariance=True)
        pe = point_estimates(result.posterior)
        map_point = find_map(x, cfg.priors, UnconstrainedParams.from_point_estimates(pe))
        proposal = proposal_covariance_from_theta(est.sigma_hat_theta, layout)
        draws = mh_independence(x, cfg.priors, map_point, cfg.mh, proposal)
        moments = sample_moments(draws)
        labels = ([f"logpi_{j + 1}" for j in range(cfg.k)]
                  + [f"mu_{j + 1}" for j in range(cfg.k)]
                  + [f"logtau_{j + 1}" for j in range(cfg.k)])
        payload = {
            "acceptance_rate": draws.acceptance_rate,
            "low_acceptance": draws.low_acceptance,
            "parameters": labels,
            "mean": moments.mean.tolist(),
            "sd": moments.sd.tolist(),
            "sd_mc_se": moments.sd_mc_se.tolist(),
        }
        with open(args.out, "w") as handle:
            json.dump(payload, handle)
        return 0

    if args.command == "leverage":
        cfg = _resolve_config(args, profile_builder=leverage_profile)
        run_leverage_experiment(cfg, args.out)
        return 0

    if args.command == "experiment":
        cfg = _resolve_config(args)
        sim_ids = None
        if args.sims:
            sim_ids = [int(s) for s in args.sims.split(",") if s != ""]
        run_experiment(cfg, args.out, sim_ids=sim_ids, record_timing=args.timings)
        return 0

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
