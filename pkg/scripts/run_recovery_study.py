"""Multi-seed parameter recovery study at a configurable scale.

Simulates cohorts from known truth values, refits each with a reduced
sampler budget, and tabulates 95% interval coverage per parameter.
"""

import argparse
from pathlib import Path

from momentum.model import ModelParams
from momentum.sampler import SamplerConfig
from momentum.validate import SyntheticSpec, recovery_study, write_recovery_outputs

GLOBALS = ("mu_beta", "gamma1", "gamma2", "tau1", "tau2", "rho")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", type=Path, default=Path("recovery_out"))
    ap.add_argument("--players", type=int, default=20)
    ap.add_argument("--games-per-player", type=int, default=2000)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--mu-beta", type=float, default=0.3)
    ap.add_argument("--gamma1", type=float, default=0.25)
    ap.add_argument("--gamma2", type=float, default=0.005)
    ap.add_argument("--tau1", type=float, default=0.3)
    ap.add_argument("--tau2", type=float, default=0.3)
    ap.add_argument("--rho", type=float, default=0.2)
    ap.add_argument("--chains", type=int, default=2)
    ap.add_argument("--warmup", type=int, default=500)
    ap.add_argument("--samples", type=int, default=500)
    ap.add_argument("--n-jobs", type=int, default=2)
    ap.add_argument("--seed", type=int, default=1001)
    args = ap.parse_args()

    truth = ModelParams(mu_beta=args.mu_beta, gamma1=args.gamma1,
                        gamma2=args.gamma2, tau1=args.tau1, tau2=args.tau2,
                        rho=args.rho, sigma=1.0, sigma_g1=1.0, sigma_g2=1.0)
    spec = SyntheticSpec(n_players=args.players,
                         games_per_player=args.games_per_player,
                         true_params=truth, n=1, seed=args.seed)
    cfg = SamplerConfig(chains=args.chains, warmup_iters=args.warmup,
                        sampling_iters=args.samples, seed=args.seed)
    reports = recovery_study(spec, cfg, args.seeds, n_jobs=args.n_jobs)
    write_recovery_outputs(reports, args.out_dir)
    for name in GLOBALS:
        covered = sum(rep.row(name).covered for rep in reports)
        print(f"{name:8s} 95% coverage: {covered}/{len(reports)}")
    flagged = sum(rep.flagged for rep in reports)
    print(f"flagged fits: {flagged}/{len(reports)} -> {args.out_dir}")


if __name__ == "__main__":
    main()
