"""Command-line front end: trials, sweeps, oracle checks, basis fits."""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import asdict

import numpy as np

from .channel import ScenarioConfig, fit_bem, sample_scenario
from .ddio import alpha_coeff, alpha_geometric, dd_operator_apply, \
    synthesize_received
from .harness import (SweepSpec, TRIAL_COLUMNS, desk_scale_config,
                      full_scale_config, load_config, run_sweep, run_trial,
                      write_sweep_csv)
from .otfs import build_layout, generate_frame

log = logging.getLogger("otfs_ra")


def _base_config(args) -> ScenarioConfig:
    base = full_scale_config() if args.profile == "full" \
        else desk_scale_config()
    if args.config:
        base = load_config(args.config, base=base)
    return base


def _add_config_args(p):
    p.add_argument("--config", default=None,
                   help="sectioned key=value scenario file")
    p.add_argument("--profile", choices=("desk", "full"), default="desk",
                   help="base profile the config file overrides")


# ------------------------------------------------------------
# run
# ------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = _base_config(args)
    baselines = tuple(b for b in args.baselines.split(",") if b)
    res = run_trial(cfg, args.seed, mode=args.mode, baselines=baselines)
    d = asdict(res)
    for key in TRIAL_COLUMNS:
        print(f"{key:>16}: {d[key]}")
    return 0


# ------------------------------------------------------------
# sweep
# ------------------------------------------------------------

def cmd_sweep(args) -> int:
    from .plotting import render_sweep_figures

    cfg = _base_config(args)
    spec = SweepSpec.load(args.spec)
    result = run_sweep(spec, cfg, jobs=args.jobs)
    summary_path = write_sweep_csv(result, args.out)
    print(f"rows:    {args.out}")
    print(f"summary: {summary_path}")
    for path in render_sweep_figures(result, args.out):
        print(f"figure:  {path}")
    failures = [r for r in result.rows if r["error"]]
    for row in failures:
        log.error("trial %s at %s=%s failed: %s", row["trial"],
                  row["axis"], row["value"], row["error"])
    return 1 if failures else 0


# ------------------------------------------------------------
# oracle
# ------------------------------------------------------------

def cmd_oracle(args) -> int:
    """Analytical equivalences, printed as max errors.

    The delay-Doppler closed form is checked against the time-domain
    synthesize-and-demodulate path on basis-representable channels, and
    the cross-cell leakage coefficient against its raw geometric sum.
    """
    rng = np.random.default_rng(args.seed)
    worst_alpha = 0.0
    for _ in range(10_000):
        N = int(rng.integers(2, 16))
        R = int(rng.integers(1, 3))
        l, lp = int(rng.integers(0, 8)), int(rng.integers(0, 4))
        k, kp = int(rng.integers(0, N)), int(rng.integers(0, N))
        qp = int(rng.integers(-6, 7))
        worst_alpha = max(worst_alpha,
                          abs(alpha_coeff(l, lp, k, kp, qp, R, N)
                              - alpha_geometric(l, lp, k, kp, qp, R, N)))
    print(f"alpha closed form vs geometric sum: "
          f"max |error| = {worst_alpha:.3e}  (tol 1e-12)")

    worst_dd = 0.0
    for trial in range(args.trials):
        M = int(rng.choice([4, 8, 16]))
        N = int(rng.choice([2, 4, 8]))
        L = int(rng.integers(0, 3))
        Q = int(rng.integers(0, 7))
        R = int(rng.choice([1, 2]))
        delta_f = 240e3
        cfg = ScenarioConfig(
            M=M, N=N, M_cp=max(L, 1), U=1, S_a=1, N_z=2, N_y=1, P=2,
            delta_f=delta_f, tau_max=max(L, 0.25) / (M * delta_f),
            nu_max=0.1 * delta_f / N, Q_I=2, Q_R=max(Q, 1),
            M_p=0, N_p=0, M_g=0, N_g=0, l_p=L, p_lambda=1.0)
        layout = build_layout(cfg)
        frames = [generate_frame(layout,
                                 np.random.default_rng(50 + trial))]
        real = sample_scenario(cfg,
                               rng=np.random.default_rng(100 + trial))
        bem = fit_bem(real, R, Q)
        _, dd_batch = synthesize_received(real, frames, cfg, bem=bem,
                                          noiseless=True)
        op = dd_operator_apply(bem, frames, cfg)
        den = np.linalg.norm(dd_batch.dd)
        if den > 0:
            worst_dd = max(worst_dd,
                           np.linalg.norm(op.dd - dd_batch.dd) / den)
    print(f"DD closed form vs time-domain path:  "
          f"max rel error = {worst_dd:.3e}  (tol 1e-10, "
          f"{args.trials} configs)")
    ok = worst_alpha < 1e-12 and worst_dd < 1e-10
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


# ------------------------------------------------------------
# fit-bem
# ------------------------------------------------------------

def cmd_fit_bem(args) -> int:
    """Modeling accuracy of the basis expansion vs R and Q."""
    cfg = _base_config(args)
    q_values = [int(v) for v in args.q.split(",") if v.strip()]
    print(f"{'R':>3} {'Q':>4} {'median NMSE (dB)':>18} "
          f"{'worst NMSE (dB)':>17}")
    for R in (1, 2):
        for Q in q_values:
            per_seed = []
            for seed in range(args.seeds):
                real = sample_scenario(
                    cfg, rng=np.random.default_rng(
                        np.random.SeedSequence([args.seed, seed])))
                bem = fit_bem(real, R, Q)
                act = real.activity.astype(bool)
                ratios = bem.modeling_nmse[act]
                if ratios.size:
                    per_seed.append(float(np.mean(ratios)))
            if not per_seed:
                continue
            to_db = [10 * math.log10(max(v, 1e-30)) for v in per_seed]
            print(f"{R:>3} {Q:>4} {np.median(to_db):>18.2f} "
                  f"{max(to_db):>17.2f}")
    return 0


# ------------------------------------------------------------
# entry point
# ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otfs-ra",
        description="Grant-free OTFS random access over cooperating "
                    "LEO satellites: trials, sweeps, and self checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="single end-to-end trial")
    _add_config_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", default="centralized",
                   choices=("centralized", "distributed",
                            "non-cooperative"))
    p.add_argument("--baselines", default="",
                   help="comma list from {mmse, oracle-ls}")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="Monte-Carlo sweep to CSV + figures")
    _add_config_args(p)
    p.add_argument("--spec", required=True, help="sweep spec file")
    p.add_argument("--out", required=True, help="per-trial CSV path")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle",
                       help="analytical equivalence checks, max errors")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("fit-bem",
                       help="basis modeling NMSE vs R and Q")
    _add_config_args(p)
    p.add_argument("--q", default="2,4,6,8", help="comma list of Q values")
    p.add_argument("--seeds", type=int, default=5,
                   help="scenario draws per (R, Q) cell")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit_bem)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("OTFS_RA_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:          # surface a clean one-line failure
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
