"""Full-size runs on the public cascaded-tanks benchmark file.

    python3 scripts/benchmark.py /path/to/dataBenchmark.csv [--seeds 20] [--steps 20000]

Hours of compute on one core; set SDNID_WORKERS to use more. The
Ts/tau value defaults to the BLA estimate on the estimation record.
"""

import argparse
import logging

from sdnid.experiments import benchmark_study


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("data")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--ratio", type=float, help="fixed Ts/tau (default: BLA estimate)")
    p.add_argument("--recompute", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = benchmark_study(args.data, args.seeds, args.steps, args.ratio,
                          recompute=args.recompute or None)
    print(f"Ts/tau = {out['ratio']:.4g}")
    print(f"best test RMSE {out['best_test_rmse']:.4f} V, mean {out['mean_test_rmse']:.4f} V, "
          f"{out['diverged']} diverged of {len(out['runs'])}")


if __name__ == "__main__":
    main()
