"""Ranges of region sizes and inclusion probabilities after perturbation,
over many seeds (10 regions, high probabilities, scale 10,000)."""

import argparse

import numpy as np

from capture_mse.simgen import PerturbationSpec, base_population, perturb, stream


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=1000)
    ap.add_argument("--distribution", default="Normal")
    args = ap.parse_args()
    base = base_population(10, 0.8, 0.7)
    spec = PerturbationSpec(args.distribution)
    rows = []
    for seed in range(args.seeds):
        pop = perturb(base, spec, stream(seed))
        rows.append((np.ptp(pop.sizes), np.ptp(pop.pi_a), np.ptp(pop.pi_b), pop.pi_a.mean()))
    rows = np.array(rows)
    for name, col in zip(("N_l width", "piA width", "piB width", "mean piA"), rows.T):
        q = np.quantile(col, [0.025, 0.5, 0.975])
        print(f"{name:10s} median {q[1]:.4f}  95% interval [{q[0]:.4f}, {q[2]:.4f}]")


if __name__ == "__main__":
    main()
