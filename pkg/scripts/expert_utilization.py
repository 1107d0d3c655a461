"""Expert argmax frequencies on the test split with and without the diversity
regularizer, optionally over several gamma values.

    python scripts/expert_utilization.py --gammas 0.01 0.1 1.0
"""
import argparse

import numpy as np

from moemos.model import expert_utilization
from moemos.pipeline import RunConfig, gate_matrix, load_config, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--gammas", type=float, nargs="+", default=[0.01])
    args = ap.parse_args()
    base = (load_config(args.config) if args.config else RunConfig()).with_seed(args.seed)

    print(f"{'gamma':>6} {'lambda1':>7}  {'mean gate':<32} {'argmax frequency':<32} max")
    for gamma in args.gammas:
        for lam1 in (1.0, 0.0):
            d = base.to_dict()
            d["loss"].update(gamma=gamma, lambda1=lam1)
            res = run_experiment(RunConfig.from_dict(d))
            mean_w, freq = expert_utilization(gate_matrix(res.model, res.prepared.test))
            print(f"{gamma:>6g} {lam1:>7g}  {np.array2string(mean_w, precision=3):<32} "
                  f"{np.array2string(freq, precision=3):<32} {freq.max():.3f}", flush=True)


if __name__ == "__main__":
    main()
