"""Run (or resume) the long transfer experiments behind the acceptance tests.

    python scripts/acceptance_experiments.py [--cache results] [--only grasp|suction]

Every finished run is cached as JSON under ``--cache``; rerunning skips it.
"""

import argparse
import logging
import time

import numpy as np

from afflab import experiments as ex
from afflab.pipeline import mean_ci95


def summarize(recs, field):
    by = {}
    for r in recs:
        by.setdefault((r["vision_task"], r["strategy"]), []).append(r[field] if field != "unseen"
                                                                    else r["rates"]["test"])
    for (v, s), vals in by.items():
        m, lo, hi = mean_ci95(vals)
        print(f"  {v:>13} {s:>13}  {field:>10}: {m:.3f} [{lo:.3f}, {hi:.3f}]  {np.round(vals, 3).tolist()}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cache", default="results")
    ap.add_argument("--only", choices=["grasp", "suction"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    spec = ex.TransferSpec()
    for name, cells in (("suction", ex.SUCTION_TRANSFER), ("grasp", ex.GRASP_ORDERING)):
        if args.only and args.only != name:
            continue
        t0 = time.time()
        recs = ex.transfer_grid(spec, cells, args.cache)
        print(f"{name}: {time.time() - t0:.0f}s this session, "
              f"{sum(r['seconds'] for r in recs):.0f}s total compute")
        for f in ("zero_shot", "final_rate", "unseen"):
            summarize(recs, f)


if __name__ == "__main__":
    main()
