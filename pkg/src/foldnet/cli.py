"""Command-line entry point: ``foldnet <subcommand> [flags]``.

Exit status: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import copy
import datetime
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analyze, encode, model, perturb, train

log = logging.getLogger("foldnet")

DEFAULTS = {
    "dataset": None,
    "out": "foldnet_out",
    "seed": 0,
    "model": {},
    "schedule": {},
    "synthetic": {},
    "split": {"train_fraction": 0.8},
    "analysis": {"metric": "kl", "trials": 1000, "topk": 5, "top_templates": 10},
    "perturb": {"repeats_per_kind": 50, "max_indel_total": 20, "controls": 500,
                "length_range": [80, 120], "profile_mode": "reuse", "wild_types": 3,
                "truncation_sample": 100, "step": 1},
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args):
    """defaults < config file < command-line flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            cfg = _merge(cfg, json.loads(Path(args.config).read_text()))
        except FileNotFoundError:
            raise DataError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"config file {args.config} is not valid JSON: {exc}") from None
    flags = {
        "dataset": getattr(args, "data", None),
        "out": args.out,
        "seed": args.seed,
    }
    for k, v in flags.items():
        if v is not None:
            cfg[k] = v
    if getattr(args, "bin_size", None) is not None:
        cfg["schedule"]["bin_size"] = args.bin_size
    if getattr(args, "epochs", None) is not None:
        cfg["schedule"]["total_epochs"] = args.epochs
    if getattr(args, "trials", None) is not None:
        cfg["analysis"]["trials"] = args.trials
    if getattr(args, "topk", None) is not None:
        cfg["analysis"]["topk"] = args.topk
    if getattr(args, "metric", None) is not None:
        cfg["analysis"]["metric"] = args.metric
    return cfg


def config_hash(cfg):
    # the output location does not influence results, so it is not part of the hash
    payload = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


class Run:
    """Output directory bookkeeping shared by every subcommand."""

    def __init__(self, command, cfg):
        self.command, self.cfg = command, cfg
        self.out = Path(cfg["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.seed = int(cfg["seed"])
        self.hash = config_hash(cfg)
        self.outputs = []

    @property
    def header(self):
        return f"# seed={self.seed} config={self.hash}"

    def write_text(self, name, text, header=True):
        path = self.out / name
        path.write_text((self.header + "\n" if header else "") + text)
        self.outputs.append(name)
        return path

    def finish(self):
        manifest = {
            "command": self.command,
            "seed": self.seed,
            "config_hash": self.hash,
            "config": self.cfg,
            "outputs": sorted(set(self.outputs)),
            "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        }
        (self.out / f"manifest_{self.command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _dataset(cfg):
    root = cfg.get("dataset")
    if not root:
        raise DataError("no dataset directory given (use --data or 'dataset' in the config)")
    root = Path(root)
    if root.is_file() and root.suffix == ".npz":
        return encode.load_encoded(root)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    return encode.load_dataset(root)


def _labelled(proteins):
    missing = [p.id for p in proteins if p.label is None]
    if missing:
        raise DataError(f"{len(missing)} proteins lack fold labels (e.g. {missing[0]!r})")
    return proteins


def _model_config(cfg, proteins=None):
    overrides = dict(cfg["model"])
    if "num_folds" not in overrides and proteins:
        overrides["num_folds"] = max(p.label for p in proteins) + 1
    return model.ModelConfig(**overrides)


def _schedule(cfg):
    return train.TrainSchedule(**{"seed": cfg["seed"], **cfg["schedule"]})


def _split(cfg, proteins):
    return train.split_by_fold(proteins, cfg["split"]["train_fraction"], seed=cfg["seed"])


def _checkpoint(args):
    if not args.checkpoint:
        raise DataError("--checkpoint is required")
    path = Path(args.checkpoint)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    return model.load_checkpoint(path)


def _target(args, cfg):
    if args.sequence:
        seq = encode.clean_sequence(args.sequence.strip(), "query")
        return encode.derive_features(seq, id="query")
    if args.id:
        for p in _dataset(cfg):
            if p.id == args.id:
                return p
        raise DataError(f"protein {args.id!r} not found in {cfg['dataset']}")
    raise UsageError("give --sequence or --data with --id")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args, run):
    spec = encode.SyntheticSpec(**{**run.cfg["synthetic"], "seed": run.seed})
    proteins = encode.generate_synthetic(spec)
    target = run.out / "dataset"
    encode.write_dataset(target, proteins)
    run.outputs.append("dataset/")
    print(f"wrote {len(proteins)} proteins in {spec.num_folds} folds to {target}")


def cmd_encode(args, run):
    report = encode.ParseReport()
    root = Path(run.cfg["dataset"] or "")
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    proteins = encode.load_dataset(root, report)
    encode.save_encoded(run.out / "encoded.npz", proteins)
    run.outputs.append("encoded.npz")
    lines = ["letter\tcount"] + [f"{k}\t{v}" for k, v in sorted(report.substitutions.items())]
    run.write_text("substitutions.tsv", "\n".join(lines) + "\n")
    print(f"encoded {len(proteins)} proteins ({report.total} residue substitutions)")


def cmd_train(args, run):
    proteins = _labelled(_dataset(run.cfg))
    train_set, valid_set = _split(run.cfg, proteins)
    state = model.build_model(_model_config(run.cfg, proteins), seed=run.seed)
    schedule = _schedule(run.cfg)
    result = train.train(state, train_set, schedule, valid_set or None)
    model.save_checkpoint(result.best_state, run.out / "model.dsf")
    run.outputs.append("model.dsf")
    train.write_log(run.out / "train_log.jsonl",
                    [{"kind": "header", "seed": run.seed, "config": run.hash}] + result.log)
    run.outputs.append("train_log.jsonl")
    split_lines = ["id\tset"] + [f"{p.id}\ttrain" for p in train_set] + [f"{p.id}\tvalid" for p in valid_set]
    run.write_text("split.tsv", "\n".join(split_lines) + "\n")
    acc = train.evaluate_topk(result.best_state, train_set, (1,))
    print(f"trained {schedule.total_epochs} passes; training top-1 {acc[1]:.4f}")


def cmd_eval(args, run):
    state = _checkpoint(args)
    proteins = _labelled(_dataset(run.cfg))
    train_set, valid_set = _split(run.cfg, proteins)
    ks = sorted({1, 5, 10, run.cfg["analysis"]["topk"]})
    ks = [k for k in ks if k <= state.config.num_folds]
    sizes = train.fold_sizes(train_set)
    lines = ["set\tgroup\tcount\t" + "\t".join(f"top{k}" for k in ks)]
    for name, subset in (("train", train_set), ("valid", valid_set)):
        if not subset:
            continue
        acc = train.evaluate_topk(state, subset, ks)
        lines.append(f"{name}\tall\t{len(subset)}\t" + "\t".join(f"{acc[k]:.6f}" for k in ks))
        usable = [p for p in subset if p.label in sizes]
        for group, res in train.group_evaluate(state, usable, sizes, ks).items():
            lines.append(f"{name}\t{group}\t{res['count']}\t" + "\t".join(f"{res[k]:.6f}" for k in ks))
    text = "\n".join(lines) + "\n"
    run.write_text("accuracy.tsv", text)
    sys.stdout.write(text)


def cmd_predict(args, run):
    state = _checkpoint(args)
    target = _target(args, run.cfg)
    k = run.cfg["analysis"]["topk"]
    top = model.predict_topk(state, target, k)
    text = "rank\tfold\tprobability\n" + "".join(
        f"{i + 1}\t{f}\t{p:.9f}\n" for i, (f, p) in enumerate(top))
    run.write_text("prediction.tsv", text)
    sys.stdout.write(text)


def cmd_extract(args, run):
    state = _checkpoint(args)
    proteins = _labelled(_dataset(run.cfg))
    db = analyze.build_template_db(state, proteins)
    db.save(run.out / "templates.dsft")
    db.to_tsv(run.out / "templates.tsv")
    run.outputs += ["templates.dsft", "templates.tsv"]
    print(f"extracted {len(db)} fold embeddings of dimension {db.features.shape[1]}")


def _load_db(args, run):
    if args.db:
        if not Path(args.db).exists():
            raise DataError(f"template database not found: {args.db}")
        return analyze.TemplateDB.load(args.db)
    return analyze.build_template_db(_checkpoint(args), _labelled(_dataset(run.cfg)))


def cmd_cluster(args, run):
    db = _load_db(args, run)
    metric = run.cfg["analysis"]["metric"]
    metrics = [m.value for m in analyze.Metric] if metric == "all" else [metric]
    trials = int(run.cfg["analysis"]["trials"])
    summary = ["metric\tmean_accuracy\ttrials"]
    for m in metrics:
        res = analyze.clustering_protocol(db.features, db.folds, m, trials, seed=run.seed)
        run.write_text(f"cluster_{m}.tsv", "trial\taccuracy\n" + "".join(
            f"{t}\t{a:.6f}\n" for t, a in enumerate(res.accuracies)))
        summary.append(f"{m}\t{res.mean:.6f}\t{trials}")
    text = "\n".join(summary) + "\n"
    run.write_text("cluster_summary.tsv", text)
    sys.stdout.write(text)


def cmd_rank(args, run):
    state = _checkpoint(args)
    if not args.db:
        raise DataError("--db is required for rank")
    db = _load_db(args, run)
    target = _target(args, run.cfg)
    res = analyze.rank_templates(state, target, db, top_folds=5,
                                 top_templates=run.cfg["analysis"]["top_templates"])
    lines = [f"# status={res.status} predicted_folds={','.join(map(str, res.predicted_folds))}",
             "rank\tid\tfold\tkl_d"]
    lines += [f"{i + 1}\t{t.id}\t{t.fold}\t{t.score:.9g}" for i, t in enumerate(res.templates)]
    text = "\n".join(lines) + "\n"
    run.write_text("ranking.tsv", text)
    sys.stdout.write(text)


def cmd_perturb(args, run):
    state = _checkpoint(args)
    proteins = _dataset(run.cfg)
    pc = run.cfg["perturb"]
    lo, hi = pc["length_range"]
    if isinstance(pc["wild_types"], list):
        by_id = {p.id: p for p in proteins}
        missing = [w for w in pc["wild_types"] if w not in by_id]
        if missing:
            raise DataError(f"wild types not in dataset: {missing}")
        wilds = [by_id[w] for w in pc["wild_types"]]
    else:
        wilds = [p for p in proteins if lo <= len(p) <= hi][:int(pc["wild_types"])]
    summary = ["wild_type\tvariants\tcontrols\tvariant_median\tcontrol_median\tz\tp_value"]
    for i, wild in enumerate(wilds):
        pset = perturb.generate_variants(wild.residues, pc["repeats_per_kind"], pc["max_indel_total"],
                                         seed=[run.seed, i], wild_id=wild.id)
        others = [p for p in proteins if p.id != wild.id]
        controls = perturb.generate_controls(pc["controls"], (lo, hi), others, seed=[run.seed, i])
        res = perturb.divergence_experiment(state, wild, pset, controls, pc["profile_mode"])
        run.write_text(f"divergence_{wild.id}.tsv", res.to_tsv())
        summary.append(f"{wild.id}\t{len(pset.variants)}\t{len(controls)}\t"
                       f"{np.median(res.values()):.6g}\t{np.median(res.values('control')):.6g}\t"
                       f"{res.test.z:.4f}\t{res.test.p_value:.4g}")
    run.write_text("divergence_summary.tsv", "\n".join(summary) + "\n")
    rng = np.random.default_rng(run.seed)
    n = min(int(pc["truncation_sample"]), len(proteins))
    sample = [proteins[i] for i in np.sort(rng.choice(len(proteins), n, replace=False))]
    report = perturb.truncation_scan(state, sample, step=int(pc["step"]))
    run.write_text("truncation.tsv", report.to_tsv())
    sys.stdout.write("\n".join(summary) + "\n")
    print(f"mean stable prefix fraction over {n} proteins: {report.mean_fraction:.4f}")


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic labelled dataset directory"),
    "encode": (cmd_encode, "parse a dataset directory into an encoded cache"),
    "train": (cmd_train, "train a model with length-binned mini-batches"),
    "eval": (cmd_eval, "top-k accuracy overall and per fold-size group"),
    "predict": (cmd_predict, "top-k folds for one sequence"),
    "extract": (cmd_extract, "fold embeddings of a dataset as a template database"),
    "cluster": (cmd_cluster, "repeated 5-fold clustering benchmark of a distance metric"),
    "rank": (cmd_rank, "rank templates for a target by KL-D within its top-5 folds"),
    "perturb": (cmd_perturb, "variant divergence experiment and truncation scan"),
}


def build_parser():
    parser = _Parser(prog="foldnet", description="Variable-length convolutional fold classifier.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", metavar="PATH", help="JSON run configuration")
        p.add_argument("--seed", type=int, metavar="N", help="random seed (default 0)")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--data", metavar="DIR", help="dataset directory (or encoded .npz cache)")
        p.add_argument("--checkpoint", metavar="PATH", help="model checkpoint (.dsf)")
        p.add_argument("--topk", type=int, metavar="N", help="number of folds to report")
        p.add_argument("--metric", choices=["euclid", "manh", "corr", "kl", "all"],
                       help="embedding distance metric")
        p.add_argument("--bin-size", type=int, metavar="N", help="length bin size for training")
        p.add_argument("--epochs", type=int, metavar="N", help="number of outer training passes")
        p.add_argument("--trials", type=int, metavar="N", help="clustering protocol trials")
        p.add_argument("--db", metavar="PATH", help="template database (.dsft)")
        p.add_argument("--sequence", metavar="SEQ", help="query sequence (one-letter codes)")
        p.add_argument("--id", metavar="ID", help="query protein id within --data")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        cfg = resolve_config(args)
        current = Run(args.command, cfg)
        func(args, current)
        current.finish()
    except UsageError as exc:
        print(f"foldnet {args.command}: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, ValueError, KeyError, TypeError,
            train.TrainingError) as exc:
        print(f"foldnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
