"""Convergence curves of the toy task for several length-bin sizes.

    python scripts/bin_size_study.py --sizes 15 50 200 --out bin_study.tsv

One row per (bin size, pass) with loss and training / validation accuracy,
ready for plotting loss or accuracy against the pass index.
"""

import argparse
import time

from foldnet import encode, model, train


def run(bin_size, epochs, seed):
    corpus = encode.generate_synthetic(encode.SyntheticSpec(seed=seed))
    tr, va = train.split_by_fold(corpus, 0.8, seed=seed)
    state = model.build_model(model.ModelConfig(num_folds=20), seed=seed)
    sched = train.TrainSchedule(bin_size=bin_size, total_epochs=epochs, seed=seed, track_train_accuracy=True)
    t0 = time.time()
    res = train.train(state, tr, sched, va)
    return res.passes, time.time() - t0


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[15, 50, 200])
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="bin_size_curves.tsv")
    args = ap.parse_args()
    rows = ["bin_size\tpass\tloss\ttrain_top1\tval_top1\tval_top5"]
    for size in args.sizes:
        passes, secs = run(size, args.epochs, args.seed)
        for r in passes:
            rows.append(f"{size}\t{r['pass']}\t{r['loss']:.6f}\t{r['train_top1']:.4f}\t"
                        f"{r['val_top1']:.4f}\t{r['val_top5']:.4f}")
        last = passes[-1]
        print(f"bin {size:4d}: final train top-1 {last['train_top1']:.3f}, "
              f"best val top-1 {max(r['val_top1'] for r in passes):.3f}  ({secs:.0f}s)", flush=True)
    with open(args.out, "w") as fh:
        fh.write("\n".join(rows) + "\n")


if __name__ == "__main__":
    main()
