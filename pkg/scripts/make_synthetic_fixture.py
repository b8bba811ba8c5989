"""Generate a small synthetic cohort games file for pipeline smoke runs.

Writes a canonical games TSV (plus the generating truth) that `momentum fit`
can consume directly. Useful as a self-contained fixture when no real export
is at hand.
"""

import argparse
import json
from pathlib import Path

from momentum.ingest import write_canonical
from momentum.model import ModelParams
from momentum.validate import SyntheticSpec, simulate_synthetic, synthetic_records


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", type=Path, default=Path("fixture"))
    ap.add_argument("--players", type=int, default=4)
    ap.add_argument("--games-per-player", type=int, default=300)
    ap.add_argument("--mu-beta", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    truth = ModelParams(mu_beta=args.mu_beta, gamma1=0.15, gamma2=0.004,
                        tau1=0.3, tau2=0.2, rho=0.1, sigma=1.0,
                        sigma_g1=1.0, sigma_g2=1.0)
    spec = SyntheticSpec(n_players=args.players,
                         games_per_player=args.games_per_player,
                         true_params=truth, n=1, seed=args.seed)
    dataset, latent = simulate_synthetic(spec)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for j in range(dataset.n_players):
        records.extend(synthetic_records(dataset, latent, j))
    write_canonical(records, args.out_dir / "games.tsv")
    with open(args.out_dir / "truth.json", "w", encoding="utf-8") as f:
        json.dump({
            "mu_beta": latent.params.mu_beta,
            "gamma1": latent.params.gamma1,
            "gamma2": latent.params.gamma2,
            "tau1": latent.params.tau1,
            "tau2": latent.params.tau2,
            "rho": latent.params.rho,
            "alpha": [float(a) for a in latent.params.alpha],
            "beta": [float(b) for b in latent.params.beta],
        }, f, indent=1, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(records)} games for {dataset.n_players} players "
          f"to {args.out_dir}")


if __name__ == "__main__":
    main()
