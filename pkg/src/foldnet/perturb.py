"""Robustness of fold embeddings to sequence edits and C-terminal truncation."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .analyze import Metric, _rows
from .encode import AMINO_ACIDS, PROFILE, EncodedProtein, derive_features, one_hot
from .model import predict

KINDS = ("mutation", "insertion", "deletion")
PROFILE_MODES = ("reuse", "zero", "derive")


@dataclass
class Variant:
    id: str
    kind: str
    sequence: str
    source_positions: np.ndarray  # wild-type index per residue, -1 for inserted residues


@dataclass
class PerturbationSet:
    wild_type: str
    variants: list = field(default_factory=list)
    controls: list = field(default_factory=list)  # EncodedProtein

    def counts(self):
        return Counter(v.kind for v in self.variants)


def _composition(rng, total, parts):
    """Random split of ``total`` into ``parts`` positive integers."""
    if parts == 1:
        return [total]
    cuts = np.sort(rng.choice(np.arange(1, total), parts - 1, replace=False))
    return list(np.diff(np.concatenate([[0], cuts, [total]])))


def _mutate(rng, seq, n):
    L = len(seq)
    new = list(seq)
    for pos in rng.choice(L, min(n, L), replace=False):
        new[pos] = AMINO_ACIDS[rng.integers(20)]
    return "".join(new), np.arange(L)


def _insert(rng, seq, n):
    L = len(seq)
    sites = int(rng.integers(1, min(n, L + 1) + 1))
    sizes = _composition(rng, n, sites)
    slots = np.sort(rng.choice(L + 1, sites, replace=False))
    out, src, prev = [], [], 0
    for slot, size in zip(slots, sizes):
        out.append(seq[prev:slot])
        src.extend(range(prev, slot))
        out.append("".join(AMINO_ACIDS[i] for i in rng.integers(0, 20, size)))
        src.extend([-1] * size)
        prev = slot
    out.append(seq[prev:])
    src.extend(range(prev, L))
    return "".join(out), np.array(src)


def _delete(rng, seq, n):
    L = len(seq)
    n = min(n, L - 1)
    kept = L - n
    sites = int(rng.integers(1, min(n, kept + 1) + 1))
    sizes = _composition(rng, n, sites)
    # segment k is removed right after the slots[k]-th kept residue
    slots = np.sort(rng.choice(kept + 1, sites, replace=False))
    keep = np.ones(L, dtype=bool)
    removed = 0
    for slot, size in zip(slots, sizes):
        start = slot + removed
        keep[start:start + size] = False
        removed += size
    src = np.flatnonzero(keep)
    return "".join(seq[i] for i in src), src


def generate_variants(sequence, repeats_per_kind=50, max_indel_total=20, seed=0, wild_id="wt"):
    """Random mutation/insertion/deletion variants of ``sequence``, deduplicated.

    Every variant edits between 1 and ``max_indel_total`` residues at uniformly
    random positions; indel residues are spread over a random number of sites.
    """
    if len(sequence) < 2:
        raise ValueError("need a sequence of length >= 2")
    rng = np.random.default_rng(seed)
    editors = {"mutation": _mutate, "insertion": _insert, "deletion": _delete}
    pset, seen = PerturbationSet(wild_id), set()
    for kind in KINDS:
        for r in range(repeats_per_kind):
            n = int(rng.integers(1, max_indel_total + 1))
            seq, src = editors[kind](rng, sequence, n)
            if seq in seen:
                continue
            seen.add(seq)
            pset.variants.append(Variant(f"{wild_id}_{kind[:3]}{r:03d}", kind, seq, src))
    return pset


def generate_controls(count=500, length_range=(80, 120), source=None, seed=0, allow_random=True,
                      featurize=derive_features):
    """Control proteins with lengths in ``length_range`` (inclusive).

    Drawn without replacement from ``source`` when it has enough eligible
    proteins; any shortfall is filled with uniform random sequences encoded by
    ``featurize`` (unless ``allow_random`` is False).
    """
    lo, hi = length_range
    rng = np.random.default_rng(seed)
    eligible = [p for p in (source or []) if lo <= len(p) <= hi]
    if not eligible and not allow_random:
        raise ValueError(f"no source protein with length in [{lo}, {hi}] and random controls disabled")
    if len(eligible) >= count:
        return [eligible[i] for i in np.sort(rng.choice(len(eligible), count, replace=False))]
    controls = list(eligible)
    if allow_random:
        for i in range(count - len(controls)):
            L = int(rng.integers(lo, hi + 1))
            seq = "".join(AMINO_ACIDS[j] for j in rng.integers(0, 20, L))
            controls.append(featurize(seq, id=f"random_{i:04d}"))
    return controls


def encode_variant(wild, variant, profile_mode="reuse"):
    """Features for an edited sequence.

    ``reuse`` copies the wild type's profile/SS/SA rows through the edit
    (inserted residues copy the nearest preceding wild-type row), ``zero`` does
    the same but blanks the profile block, ``derive`` recomputes every block
    from the sequence.
    """
    if profile_mode not in PROFILE_MODES:
        raise ValueError(f"profile_mode must be one of {PROFILE_MODES}")
    if profile_mode == "derive":
        return derive_features(variant.sequence, id=variant.id, label=wild.label)
    src = np.asarray(variant.source_positions).copy()
    for i in range(len(src)):
        if src[i] < 0:
            src[i] = src[i - 1] if i > 0 else 0
    src = np.maximum(src, 0)
    feats = wild.features[src].copy()
    feats[:, :20] = one_hot(variant.sequence)
    prov = dict(wild.provenance)
    if profile_mode == "zero":
        feats[:, PROFILE] = 0.0
        prov["profile"] = False
    return EncodedProtein(variant.id, variant.sequence, feats, wild.label, prov)


# --------------------------------------------------------------------------
# Wilcoxon rank-sum
# --------------------------------------------------------------------------

@dataclass
class RankSumResult:
    statistic: float  # rank sum of the first sample
    z: float
    p_value: float
    method: str  # "exact" or "normal"


def _midranks(values):
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_rank_sum_pvalue(ranks, n_x, observed):
    # distribution of the rank sum of n_x out of all ranks, by dynamic programming
    # over doubled (hence integer) midranks; counts[k][s] = #subsets of size k with sum s
    doubled = np.rint(2 * ranks).astype(int)
    total = int(doubled.sum())
    counts = np.zeros((n_x + 1, total + 1))
    counts[0, 0] = 1.0
    for r in doubled:
        counts[1:, r:] += counts[:-1, :total + 1 - r].copy()
    dist = counts[n_x]
    sums = np.arange(total + 1)
    centre = n_x * (len(ranks) + 1)  # doubled mean
    dev = abs(2 * observed - centre)
    extreme = np.abs(sums - centre) >= dev - 1e-9
    return float(dist[extreme].sum() / dist.sum())


def ranksum_test(x, y, exact_max=8):
    """Two-sided Wilcoxon rank-sum test of ``x`` against ``y``.

    Exact enumeration when both samples have at most ``exact_max`` values,
    otherwise the normal approximation with tie and continuity correction.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    n_x, n_y = len(x), len(y)
    if n_x == 0 or n_y == 0:
        raise ValueError("both samples must be non-empty")
    ranks = _midranks(np.concatenate([x, y]))
    w = float(ranks[:n_x].sum())
    n = n_x + n_y
    u = w - n_x * (n_x + 1) / 2.0
    mean_u = n_x * n_y / 2.0
    ties = np.unique(ranks, return_counts=True)[1]
    tie_term = float(np.sum(ties ** 3 - ties)) / (n * (n - 1)) if n > 1 else 0.0
    var_u = n_x * n_y / 12.0 * ((n + 1) - tie_term)
    z = 0.0 if var_u <= 0 else (u - mean_u) / math.sqrt(var_u)
    if n_x <= exact_max and n_y <= exact_max:
        return RankSumResult(w, z, _exact_rank_sum_pvalue(ranks, n_x, w), "exact")
    if var_u <= 0:
        return RankSumResult(w, 0.0, 1.0, "normal")
    zc = max(abs(u - mean_u) - 0.5, 0.0) / math.sqrt(var_u)
    return RankSumResult(w, math.copysign(zc, u - mean_u), math.erfc(zc / math.sqrt(2.0)), "normal")


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------

@dataclass
class DivergenceResult:
    wild_type: str
    rows: list  # (sequence_id, kind, length, kl_d)
    test: RankSumResult

    def values(self, kind=None):
        if kind is None:
            return np.array([r[3] for r in self.rows if r[1] != "control"])
        return np.array([r[3] for r in self.rows if r[1] == kind])

    def to_tsv(self):
        lines = ["sequence_id\tkind\tlength\tkl_d"]
        lines += [f"{sid}\t{kind}\t{length}\t{kl:.9g}" for sid, kind, length, kl in self.rows]
        return "\n".join(lines) + "\n"


def divergence_experiment(state, wild, pset, controls=None, profile_mode="reuse"):
    """KL-D of every variant and control embedding from the wild type's embedding.

    Variants are compared against controls with a two-sided rank-sum test.
    """
    controls = pset.controls if controls is None else controls
    variants = [encode_variant(wild, v, profile_mode) for v in pset.variants]
    proteins = [wild] + variants + list(controls)
    _, feats = predict(state, proteins)
    kl = _rows(Metric.KL, feats[0], feats[1:])
    rows = [(v.id, v.kind, len(v.sequence), float(d)) for v, d in zip(pset.variants, kl)]
    rows += [(c.id, "control", len(c), float(d)) for c, d in zip(controls, kl[len(variants):])]
    var_vals = kl[:len(variants)]
    ctl_vals = kl[len(variants):]
    test = ranksum_test(var_vals, ctl_vals) if len(var_vals) and len(ctl_vals) \
        else RankSumResult(float("nan"), float("nan"), float("nan"), "none")
    return DivergenceResult(wild.id, rows, test)


@dataclass
class TruncationRow:
    id: str
    length: int
    full_top1: int
    stable_prefix: int
    prefix_top1: np.ndarray  # top-1 fold per evaluated prefix length
    prefix_lengths: np.ndarray

    @property
    def fraction(self):
        return self.stable_prefix / self.length


@dataclass
class TruncationReport:
    rows: list

    @property
    def mean_fraction(self):
        return float(np.mean([r.fraction for r in self.rows])) if self.rows else float("nan")

    def to_tsv(self):
        lines = ["id\tlength\tfull_top1\tstable_prefix\tfraction"]
        lines += [f"{r.id}\t{r.length}\t{r.full_top1}\t{r.stable_prefix}\t{r.fraction:.6f}"
                  for r in self.rows]
        lines.append(f"# mean_fraction\t{self.mean_fraction:.6f}\tproteins\t{len(self.rows)}")
        return "\n".join(lines) + "\n"


def prefix(protein, k):
    return EncodedProtein(f"{protein.id}[:{k}]", protein.residues[:k], protein.features[:k],
                          protein.label, dict(protein.provenance))


def truncation_scan(state, corpus, step=1):
    """For each protein, the shortest N-terminal prefix from which every longer
    prefix predicts the same top-1 fold as the full sequence."""
    if step < 1:
        raise ValueError("step must be >= 1")
    rows = []
    for p in corpus:
        L = len(p)
        lengths = list(range(step, L, step)) + [L]
        preds, _ = predict(state, [prefix(p, k) for k in lengths])
        top1 = np.array([int(pr.ranked_folds[0]) for pr in preds])
        (full,), _ = predict(state, [p])
        full_top1 = int(full.ranked_folds[0])
        stable = len(lengths) - 1
        while stable > 0 and top1[stable - 1] == full_top1:
            stable -= 1
        if top1[-1] != full_top1:
            stable = len(lengths) - 1  # full-length row always qualifies by definition
        rows.append(TruncationRow(p.id, L, full_top1, lengths[stable], top1, np.array(lengths)))
    return TruncationReport(rows)
