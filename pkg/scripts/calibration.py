"""Calibration study: estimated variance components for several seeds."""

import argparse
import time

from capture_mse.simgen import DEFAULT_VARIANCES, calibrate_variances, stream


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--replicates", type=int, default=1000)
    args = ap.parse_args()
    print("target", DEFAULT_VARIANCES)
    for seed in args.seeds:
        t0 = time.time()
        res = calibrate_variances(stream(seed), replicates=args.replicates)
        ratios = " ".join(f"{v / t:.2f}" for v, t in zip(res.sigma2, DEFAULT_VARIANCES))
        print(f"seed {seed}: sigma2={tuple(round(v, 5) for v in res.sigma2)} "
              f"ratio to target [{ratios}] warning-free {res.warning_free}/{res.fits} "
              f"({time.time() - t0:.0f}s)")


if __name__ == "__main__":
    main()
