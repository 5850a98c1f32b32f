"""Re-run one scenario cell several times with independent seeds and print
marb / mse per method, plus how often Mixed beats Chapman.

    python3 scripts/table_cell.py --N 30000 --regions 10 --reps 10 --P 10 --S 10
"""

import argparse
import logging

from capture_mse.harness import ScenarioConfig, run_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--distribution", default="Normal")
    ap.add_argument("--N", type=int, default=30000)
    ap.add_argument("--regions", type=int, default=10)
    ap.add_argument("--probabilities", default="high")
    ap.add_argument("--P", type=int, default=10)
    ap.add_argument("--S", type=int, default=10)
    ap.add_argument("--reps", type=int, default=10)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    wins_mse = wins_marb = 0
    for rep in range(args.reps):
        cfg = ScenarioConfig(args.distribution, args.N, args.regions, args.probabilities,
                             populations=args.P, samples_per_population=args.S,
                             base_seed=args.seed + rep)
        res = run_scenario(cfg, jobs=args.jobs)
        s = res.summaries
        line = "  ".join(f"{m}: marb={v.marb_percent:.3f} mse={v.mse:.1f} inf={v.infinite_count}"
                         for m, v in s.items())
        print(f"rep {rep}: {line}  warnings={res.warnings}")
        wins_mse += s["Mixed"].mse < s["FixedChapman"].mse
        wins_marb += s["Mixed"].marb_percent < s["FixedChapman"].marb_percent
    print(f"Mixed beats Chapman: mse {wins_mse}/{args.reps}, marb {wins_marb}/{args.reps}")


if __name__ == "__main__":
    main()
