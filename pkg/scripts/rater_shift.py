"""Utterance- vs system-level SRCC degradation when test labels come from a
disjoint rater pool.

    python scripts/rater_shift.py --seeds 0 1 2 3 4
"""
import argparse
import json

import numpy as np

from moemos.pipeline import RunConfig, load_config, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--json", help="write per-seed results here")
    args = ap.parse_args()
    base = load_config(args.config) if args.config else RunConfig()

    rows = []
    for seed in args.seeds:
        res = run_experiment(base.with_seed(seed))
        (u_same, s_same, acc), (u_shift, s_shift, _) = res.same, res.shifted
        row = {"seed": seed, "accuracy": acc,
               "utt_srcc_same": u_same.srcc, "utt_srcc_shifted": u_shift.srcc,
               "sys_srcc_same": s_same.srcc, "sys_srcc_shifted": s_shift.srcc}
        row["utt_drop"] = row["utt_srcc_same"] - row["utt_srcc_shifted"]
        row["sys_drop"] = row["sys_srcc_same"] - row["sys_srcc_shifted"]
        rows.append(row)
        print(f"seed {seed:3d}  acc {acc:.3f}  utterance {u_same.srcc:.4f} -> {u_shift.srcc:.4f} "
              f"({row['utt_drop']:+.4f})  system {s_same.srcc:.4f} -> {s_shift.srcc:.4f} ({row['sys_drop']:+.4f})",
              flush=True)

    utt = np.array([r["utt_drop"] for r in rows])
    sysd = np.array([r["sys_drop"] for r in rows])
    print(f"\nmean drop: utterance {utt.mean():+.4f} (sd {utt.std(ddof=1) if len(utt) > 1 else 0:.4f}), "
          f"system {sysd.mean():+.4f}; utterance drop positive on {np.mean(utt > 0):.0%} of seeds")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
