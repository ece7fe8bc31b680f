"""Synthetic corpus -> training -> evaluation -> embedding analyses, in one go.

    python scripts/toy_pipeline.py --out toy_run --epochs 100

Writes a checkpoint, training log, accuracy table, clustering summary, one
template ranking, divergence tables and a truncation report under ``--out``.
"""

import argparse
import time
from pathlib import Path

import numpy as np

from foldnet import analyze, encode, model, perturb, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="toy_run")
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--bin-size", type=int, default=15)
    ap.add_argument("--folds", type=int, default=20)
    ap.add_argument("--per-fold", type=int, default=50)
    ap.add_argument("--trials", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    corpus = encode.generate_synthetic(encode.SyntheticSpec(
        num_folds=args.folds, proteins_per_fold=args.per_fold, seed=args.seed))
    tr, va = train.split_by_fold(corpus, 0.8, seed=args.seed)
    state = model.build_model(model.ModelConfig(num_folds=args.folds), seed=args.seed)
    sched = train.TrainSchedule(bin_size=args.bin_size, total_epochs=args.epochs, seed=args.seed,
                                track_train_accuracy=True)
    t0 = time.time()
    res = train.train(state, tr, sched, va,
                      progress=lambda r: print(f"pass {r['pass']:3d}  loss {r['loss']:.4f}  "
                                               f"train {r['train_top1']:.3f}  val {r['val_top1']:.3f}",
                                               flush=True))
    print(f"training took {time.time() - t0:.0f}s")
    best = res.best_state
    model.save_checkpoint(best, out / "model.dsf")
    train.write_log(out / "train_log.jsonl", res.log)

    acc_tr = train.evaluate_topk(best, tr)
    acc_va = train.evaluate_topk(best, va)
    lines = ["set\ttop1\ttop5\ttop10"] + [
        f"{name}\t{a[1]:.4f}\t{a[5]:.4f}\t{a[10]:.4f}" for name, a in (("train", acc_tr), ("valid", acc_va))]
    (out / "accuracy.tsv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))

    db = analyze.build_template_db(best, corpus)
    db.save(out / "templates.dsft")
    summary = ["metric\tmean_accuracy"]
    for metric in analyze.Metric:
        r = analyze.clustering_protocol(db.features, db.folds, metric, trials=args.trials, seed=args.seed)
        summary.append(f"{metric.label}\t{r.mean:.4f}")
    (out / "cluster_summary.tsv").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))

    query = va[0]
    train_db = analyze.build_template_db(best, tr)
    ranked = analyze.rank_templates(best, query, train_db)
    print(f"templates for {query.id} (fold {query.label}):",
          ", ".join(f"{t.id}[{t.fold}]" for t in ranked.templates[:5]))

    wilds = [p for p in va if 80 <= len(p) <= 120][:3]
    for i, wild in enumerate(wilds):
        pset = perturb.generate_variants(wild.residues, seed=[args.seed, i], wild_id=wild.id)
        controls = perturb.generate_controls(200, (80, 120), [p for p in corpus if p.id != wild.id],
                                             seed=[args.seed, i])
        d = perturb.divergence_experiment(best, wild, pset, controls)
        (out / f"divergence_{wild.id}.tsv").write_text(d.to_tsv())
        print(f"{wild.id}: variant median {np.median(d.values()):.3g}, control median "
              f"{np.median(d.values('control')):.3g}, p={d.test.p_value:.2g}")
    rng = np.random.default_rng(args.seed)
    sample = [corpus[i] for i in np.sort(rng.choice(len(corpus), min(100, len(corpus)), replace=False))]
    report = perturb.truncation_scan(best, sample)
    (out / "truncation.tsv").write_text(report.to_tsv())
    print(f"mean stable prefix fraction: {report.mean_fraction:.3f}")


if __name__ == "__main__":
    main()
