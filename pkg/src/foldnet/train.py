"""Length-binned mini-batch training and top-k evaluation."""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .batching import PaddedBatch, pad_batch
from .model import backward, forward, predict

log = logging.getLogger(__name__)

__all__ = [
    "LengthBin", "PaddedBatch", "TrainSchedule", "TrainResult", "TrainingError", "SGDMomentum",
    "make_bins", "pad_batch", "train", "train_step", "evaluate_topk", "group_evaluate",
    "fold_size_group", "fold_sizes", "topk_accuracy", "split_by_fold", "write_log",
]


class TrainingError(RuntimeError):
    pass


@dataclass
class LengthBin:
    bin_index: int
    members: list  # EncodedProtein
    max_length: int

    @property
    def ids(self):
        return [p.id for p in self.members]


def make_bins(proteins, bin_size):
    """Group proteins by length: length ``L`` goes to bin ``(L - 1) // bin_size``."""
    if bin_size < 1:
        raise ValueError("bin_size must be >= 1")
    groups = defaultdict(list)
    for p in proteins:
        groups[(len(p) - 1) // bin_size].append(p)
    return [LengthBin(b, groups[b], max(len(p) for p in groups[b])) for b in sorted(groups)]


@dataclass
class TrainSchedule:
    bin_size: int = 15
    total_epochs: int = 100
    epochs_per_bin_visit: int = 3
    batch_capacity: int = 64
    optimizer: str = "sgd_momentum"
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    track_train_accuracy: bool = False

    def __post_init__(self):
        if self.bin_size < 1 or self.epochs_per_bin_visit < 1 or self.batch_capacity < 1:
            raise ValueError("bin_size, epochs_per_bin_visit and batch_capacity must be >= 1")
        if self.total_epochs < 0:
            raise ValueError("total_epochs must be >= 0")
        if self.optimizer not in ("sgd_momentum", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class SGDMomentum:
    """Plain SGD with heavy-ball momentum; ``momentum=0`` gives vanilla SGD."""

    def __init__(self, learning_rate=0.01, momentum=0.9):
        self.lr, self.momentum = learning_rate, momentum
        self.velocity = {}

    def step(self, state, grads):
        for name, param in state.trainable():
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(param)
            v *= self.momentum
            v -= self.lr * grads[name]
            param += v


def train_step(state, batch, optimizer, rng=None):
    """One gradient step on ``batch``; returns the pre-step loss."""
    act = forward(state, batch, "train", rng)
    loss, probs = nn.softmax_cross_entropy(act.logits, batch.labels)
    if not np.isfinite(loss):
        return loss
    grads = backward(state, act, nn.softmax_cross_entropy_backward(probs, batch.labels))
    optimizer.step(state, grads)
    return loss


@dataclass
class TrainResult:
    state: object
    best_state: object
    log: list = field(default_factory=list)

    @property
    def passes(self):
        return [r for r in self.log if r["kind"] == "pass"]


def train(state, corpus, schedule=None, validation=None, progress=None):
    """Train ``state`` in place on ``corpus`` following ``schedule``.

    Each outer pass visits the length bins in a seed-shuffled order and trains
    every bin for ``epochs_per_bin_visit`` epochs in batches of at most
    ``batch_capacity`` proteins. After each pass the validation top-1/5/10
    accuracy is logged, and the state with the best validation top-1 is kept.
    """
    schedule = schedule or TrainSchedule()
    corpus = list(corpus)
    n_folds = state.config.num_folds
    for p in corpus:
        if p.label is None or not 0 <= p.label < n_folds:
            raise ValueError(f"protein {p.id!r} has label {p.label!r} outside [0, {n_folds})")
    result = TrainResult(state=state, best_state=state)
    if schedule.total_epochs == 0 or not corpus:
        return result
    rng = np.random.default_rng(schedule.seed)
    momentum = schedule.momentum if schedule.optimizer == "sgd_momentum" else 0.0
    opt = SGDMomentum(schedule.learning_rate, momentum)
    bins = make_bins(corpus, schedule.bin_size)
    best_top1 = -1.0
    for pass_idx in range(schedule.total_epochs):
        pass_losses = []
        for b in rng.permutation(len(bins)):
            members = bins[b].members
            visit_losses = []
            for epoch in range(schedule.epochs_per_bin_visit):
                perm = rng.permutation(len(members))
                n_chunks = -(-len(members) // schedule.batch_capacity)
                for c, chunk in enumerate(np.array_split(perm, n_chunks)):
                    batch = pad_batch([members[i] for i in chunk])
                    loss = train_step(state, batch, opt, rng)
                    if not np.isfinite(loss):
                        raise TrainingError(f"non-finite loss in pass {pass_idx}, bin "
                                            f"{bins[b].bin_index}, epoch {epoch}, batch {c}")
                    visit_losses.append(loss * len(chunk))
            rec = {"kind": "bin", "pass": pass_idx, "bin": bins[b].bin_index,
                   "loss": float(sum(visit_losses) / (len(members) * schedule.epochs_per_bin_visit))}
            result.log.append(rec)
            pass_losses.append((rec["loss"], len(members)))
        summary = {"kind": "pass", "pass": pass_idx,
                   "loss": float(sum(l * n for l, n in pass_losses) / len(corpus))}
        if schedule.track_train_accuracy:
            summary["train_top1"] = evaluate_topk(state, corpus, (1,))[1]
        if validation:
            acc = evaluate_topk(state, validation, (1, 5, 10))
            summary.update({f"val_top{k}": v for k, v in acc.items()})
            if acc[1] > best_top1:
                best_top1 = acc[1]
                result.best_state = state.copy()
        result.log.append(summary)
        if progress is not None:
            progress(summary)
        log.info("pass %d: %s", pass_idx, summary)
    if not validation:
        result.best_state = state
    return result


def write_log(path, records):
    """Line-delimited JSON, one record per line."""
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def topk_accuracy(ranked_folds, labels, ks=(1, 5, 10)):
    """Accuracy@k from per-protein fold rankings (best first) and true labels."""
    labels = list(labels)
    if not labels:
        return {k: 0.0 for k in ks}
    hits = {k: 0 for k in ks}
    for ranking, label in zip(ranked_folds, labels):
        if label is None:
            raise ValueError("unlabelled protein in evaluation set")
        rank = int(np.flatnonzero(np.asarray(ranking) == label)[0])
        for k in ks:
            hits[k] += rank < k
    return {k: hits[k] / len(labels) for k in ks}


def evaluate_topk(state, corpus, ks=(1, 5, 10)):
    """Fraction of proteins whose true fold is among the top ``k`` predictions."""
    corpus = list(corpus)
    if not corpus:
        return {k: 0.0 for k in ks}
    preds, _ = predict(state, corpus)
    return topk_accuracy([p.ranked_folds for p in preds], [p.label for p in corpus], ks)


def fold_size_group(n):
    """'small' (<= 5 proteins), 'medium' (6-50) or 'large' (> 50)."""
    if n <= 5:
        return "small"
    if n <= 50:
        return "medium"
    return "large"


def fold_sizes(corpus):
    return Counter(p.label for p in corpus)


def group_evaluate(state, corpus, sizes, ks=(1, 5, 10)):
    """Top-k accuracy per fold-size group; ``sizes`` maps fold -> training count."""
    groups = defaultdict(list)
    for p in corpus:
        if p.label not in sizes:
            raise KeyError(f"fold {p.label} of protein {p.id!r} missing from fold sizes")
        groups[fold_size_group(sizes[p.label])].append(p)
    out = {}
    for name in ("small", "medium", "large"):
        members = groups.get(name, [])
        out[name] = {"count": len(members), **evaluate_topk(state, members, ks)}
    return out


def split_by_fold(corpus, train_fraction=0.8, seed=0):
    """Per-fold random split; a fold with one protein goes entirely to training."""
    rng = np.random.default_rng(seed)
    by_fold = defaultdict(list)
    for p in corpus:
        by_fold[p.label].append(p)
    train_set, valid_set = [], []
    for fold in sorted(by_fold, key=lambda f: (f is None, f)):
        members = by_fold[fold]
        perm = rng.permutation(len(members))
        n_train = max(1, int(round(train_fraction * len(members))))
        train_set += [members[i] for i in perm[:n_train]]
        valid_set += [members[i] for i in perm[n_train:]]
    return train_set, valid_set
