"""Compare the four embedding distances with the 5-fold clustering protocol.

    python scripts/metric_study.py --checkpoint toy_run/model.dsf --data toy_run/dataset

Without ``--data`` the synthetic toy corpus is regenerated; ``--trials``
controls the number of sampled 5-fold subsets per metric.
"""

import argparse

import numpy as np

from foldnet import analyze, encode, model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--data", help="dataset directory; default: regenerate the toy corpus")
    ap.add_argument("--trials", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    state = model.load_checkpoint(args.checkpoint)
    proteins = encode.load_dataset(args.data) if args.data else encode.generate_synthetic(encode.SyntheticSpec())
    db = analyze.build_template_db(state, proteins)
    print("metric\tmean\tstd")
    for metric in analyze.Metric:
        res = analyze.clustering_protocol(db.features, db.folds, metric, args.trials, seed=args.seed)
        print(f"{metric.label}\t{res.mean:.4f}\t{np.std(res.accuracies):.4f}")


if __name__ == "__main__":
    main()
