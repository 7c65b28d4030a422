"""Run (or load) the desk-scale Ts/tau study and print its summary.

    python3 scripts/desk_study.py                 # cached results if present
    SDNID_RECOMPUTE=1 python3 scripts/desk_study.py
    python3 scripts/desk_study.py --steps 300 --seeds 2   # quick look

Writes a plot-ready sweep table next to the cached JSON.
"""

import argparse
import logging

from sdnid import experiments as ex
from sdnid.data import write_table


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int)
    p.add_argument("--seeds", type=int)
    p.add_argument("--recompute", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    changes = {k: v for k, v in (("steps", args.steps), ("seeds", args.seeds)) if v}
    setup = ex.DeskSetup(**changes)
    results = ex.desk_results(setup, recompute=args.recompute or None)
    runs = results["sweep"]["runs"] + results["baseline"]["runs"]
    table = ex.cache_path(setup).with_suffix(".csv")
    write_table(table, {k: [r[k] for r in runs] for k in runs[0]})

    s = ex.summarize(results)
    print(f"BLA estimate          Ts/tau = {s['bla_ratio']:.4g} (grid point {s['bla_point']:.4g})")
    print(f"CV winner             Ts/tau = {s['cv_winner']:.4g}")
    print("median test RMSE by Ts/tau:")
    for g, m in s["test_medians"].items():
        print(f"  {g:10.4g}  {m:.4g}")
    print(f"baseline Ts/tau = {setup.baseline_ratio:g}: median {s['baseline_median']:.4g}")
    print(f"valley {s['valley'][0]:.4g} .. {s['valley'][1]:.4g}, best {s['valley_best']:.4g}")
    if "trainable_final_ratio" in s:
        print(f"trainable: final Ts/tau {s['trainable_final_ratio']:.4g}, "
              f"last-10% change {s['trainable_window_change']:.2e}, "
              f"median test RMSE {s['trainable_test_median']:.4g}")
    print(f"table: {table}")


if __name__ == "__main__":
    main()
