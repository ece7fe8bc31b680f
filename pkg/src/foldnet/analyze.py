"""Distances between fold embeddings, clustering, and template ranking."""

from __future__ import annotations

import enum
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import extract_features, predict

KL_SMOOTHING = 1e-10
CORR_FLOOR = 1e-12

TEMPLATE_MAGIC = b"DSFT"
TEMPLATE_VERSION = 1


class Metric(str, enum.Enum):
    EUCLID = "euclid"
    MANH = "manh"
    CORR = "corr"
    KL = "kl"

    @property
    def label(self):
        return {"euclid": "Euclid-D", "manh": "Manh-D", "corr": "Corr-D", "kl": "KL-D"}[self.value]


class DegenerateCorrelationWarning(RuntimeWarning):
    """A zero-variance vector made the correlation distance fall back to ln 2."""


def _rows(metric, q, T):
    # distance from vector q to every row of T; shared by distance() and pairwise_distances()
    if metric is Metric.EUCLID:
        return np.sqrt(np.sum((q - T) ** 2, axis=-1))
    if metric is Metric.MANH:
        return np.sum(np.abs(q - T), axis=-1)
    if metric is Metric.KL:
        qs, ts = q + KL_SMOOTHING, T + KL_SMOOTHING
        return np.sum((qs - ts) * (np.log(qs) - np.log(ts)), axis=-1)
    qc = q - q.mean()
    tc = T - T.mean(axis=-1, keepdims=True)
    sq = np.sum(qc * qc)
    st = np.sum(tc * tc, axis=-1)
    denom = np.sqrt(sq * st)
    degenerate = denom == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.sum(qc * tc, axis=-1) / denom
    out = np.log(np.clip(1.0 - corr, CORR_FLOOR, 2.0))
    if np.any(degenerate):
        warnings.warn("zero-variance feature vector; correlation distance set to ln 2",
                      DegenerateCorrelationWarning, stacklevel=3)
        out = np.where(degenerate, np.log(2.0), out)
    return out


def distance(metric, q, t):
    """Distance between two fold embeddings under ``metric`` (smaller = more similar).

    euclid: sqrt(sum (q-t)^2); manh: sum |q-t|;
    corr: ln(clip(1 - pearson(q, t), 1e-12, 2)), ln 2 for a constant vector;
    kl: sum(q' ln(q'/t') + t' ln(t'/q')) with q' = q + 1e-10, t' = t + 1e-10.
    """
    metric = Metric(metric)
    q = np.asarray(q, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if q.shape != t.shape or q.ndim != 1:
        raise ValueError(f"feature vectors must be 1-D of equal length, got {q.shape} and {t.shape}")
    return float(_rows(metric, q, t[None, :])[0])


def pairwise_distances(metric, features):
    metric = Metric(metric)
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("need a non-empty [N, dim] feature matrix")
    return np.stack([_rows(metric, X[i], X) for i in range(len(X))])


# --------------------------------------------------------------------------
# clustering
# --------------------------------------------------------------------------

def hierarchical_cluster(dist, num_clusters):
    """Average-linkage agglomerative clustering down to ``num_clusters`` groups.

    Ties between equally close pairs go to the lexicographically smallest
    (i, j), where a cluster is identified by its smallest member. Labels are
    numbered by smallest member.
    """
    D = np.array(dist, dtype=np.float64)
    n = len(D)
    if D.shape != (n, n):
        raise ValueError("distance matrix must be square")
    if not 1 <= num_clusters <= n:
        raise ValueError(f"num_clusters must be in [1, {n}]")
    sizes = np.ones(n)
    active = np.ones(n, dtype=bool)
    members = {i: [i] for i in range(n)}
    work = D.copy()
    work[np.tril_indices(n)] = np.inf
    for _ in range(n - num_clusters):
        flat = int(np.argmin(work))
        i, j = divmod(flat, n)
        ni, nj = sizes[i], sizes[j]
        merged = (ni * D[i] + nj * D[j]) / (ni + nj)
        D[i, :] = merged
        D[:, i] = merged
        D[i, i] = 0.0
        sizes[i] = ni + nj
        active[j] = False
        members[i] += members.pop(j)
        # refresh the upper-triangle view for row/column i and retire j
        others = np.flatnonzero(active)
        lower, upper = others[others < i], others[others > i]
        work[lower, i] = D[lower, i]
        work[i, upper] = D[i, upper]
        work[j, :] = np.inf
        work[:, j] = np.inf
    labels = np.empty(n, dtype=np.int64)
    for label, slot in enumerate(sorted(members)):
        labels[members[slot]] = label
    return labels


def contingency(assignment, truth):
    a_vals, a_idx = np.unique(np.asarray(assignment), return_inverse=True)
    t_vals, t_idx = np.unique(np.asarray(truth), return_inverse=True)
    table = np.zeros((len(a_vals), len(t_vals)), dtype=np.int64)
    np.add.at(table, (a_idx, t_idx), 1)
    return table


def clustering_accuracy(assignment, truth):
    """Fraction correctly placed under the best one-to-one cluster/fold matching.

    Unequal cluster and fold counts leave the surplus unmatched.
    """
    assignment, truth = np.asarray(assignment), np.asarray(truth)
    if assignment.shape != truth.shape:
        raise ValueError("assignment and truth must have equal length")
    if assignment.size == 0:
        raise ValueError("empty assignment")
    table = contingency(assignment, truth)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum() / assignment.size)


@dataclass
class ProtocolResult:
    metric: Metric
    accuracies: list = field(default_factory=list)

    @property
    def mean(self):
        return float(np.mean(self.accuracies)) if self.accuracies else float("nan")


def clustering_protocol(features, folds, metric="kl", trials=1000, seed=0,
                        folds_per_trial=5, max_proteins=100):
    """Repeated fold-sampling clustering benchmark.

    Each trial draws ``folds_per_trial`` folds among those with at least two
    proteins, keeps at most ``max_proteins`` of their proteins, clusters them
    into ``folds_per_trial`` groups and scores :func:`clustering_accuracy`.
    Trial ``t`` uses the random stream ``(seed, t)``.
    """
    metric = Metric(metric)
    X = np.asarray(features, dtype=np.float64)
    folds = np.asarray(folds)
    uniq, counts = np.unique(folds, return_counts=True)
    eligible = uniq[counts >= 2]
    if len(eligible) < folds_per_trial:
        raise ValueError(f"need at least {folds_per_trial} folds with >= 2 proteins, "
                         f"found {len(eligible)}")
    result = ProtocolResult(metric)
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        chosen = rng.choice(eligible, folds_per_trial, replace=False)
        pool = np.flatnonzero(np.isin(folds, chosen))
        if len(pool) > max_proteins:
            pool = np.sort(rng.choice(pool, max_proteins, replace=False))
        labels = hierarchical_cluster(pairwise_distances(metric, X[pool]),
                                      min(folds_per_trial, len(pool)))
        result.accuracies.append(clustering_accuracy(labels, folds[pool]))
    return result


# --------------------------------------------------------------------------
# template database and ranking
# --------------------------------------------------------------------------

class TemplateDBError(ValueError):
    pass


@dataclass
class TemplateDB:
    ids: list
    folds: np.ndarray  # [N] int
    features: np.ndarray  # [N, dim]

    def __post_init__(self):
        self.folds = np.asarray(self.folds, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.ids) != len(self.folds) or len(self.ids) != len(self.features):
            raise ValueError("ids, folds and features must describe the same records")

    def __len__(self):
        return len(self.ids)

    def save(self, path):
        """Binary layout: ``DSFT`` | u32 version | u64 count | u32 dim | per record
        u32 id byte length + UTF-8 id | count x i32 fold | count x dim f32 (all LE)."""
        parts = [TEMPLATE_MAGIC, struct.pack("<IQI", TEMPLATE_VERSION, len(self), self.features.shape[1])]
        for rec_id in self.ids:
            raw = rec_id.encode("utf-8")
            parts += [struct.pack("<I", len(raw)), raw]
        parts.append(self.folds.astype("<i4").tobytes())
        parts.append(np.ascontiguousarray(self.features, dtype="<f4").tobytes())
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path):
        blob = Path(path).read_bytes()
        if blob[:4] != TEMPLATE_MAGIC:
            raise TemplateDBError(f"{path}: bad magic {blob[:4]!r}")
        if len(blob) < 20:
            raise TemplateDBError(f"{path}: truncated header")
        version, count, dim = struct.unpack("<IQI", blob[4:20])
        if version != TEMPLATE_VERSION:
            raise TemplateDBError(f"{path}: unsupported version {version}")
        pos, ids = 20, []
        try:
            for _ in range(count):
                (n,) = struct.unpack("<I", blob[pos:pos + 4])
                ids.append(blob[pos + 4:pos + 4 + n].decode("utf-8"))
                pos += 4 + n
        except (struct.error, UnicodeDecodeError) as exc:
            raise TemplateDBError(f"{path}: corrupt id table") from exc
        need = pos + 4 * count + 4 * count * dim
        if need != len(blob):
            raise TemplateDBError(f"{path}: expected {need} bytes, found {len(blob)}")
        folds = np.frombuffer(blob, "<i4", count, pos).astype(np.int64)
        feats = np.frombuffer(blob, "<f4", count * dim, pos + 4 * count).reshape(count, dim)
        return cls(ids, folds, feats.astype(np.float64))

    def to_tsv(self, path):
        with open(path, "w") as fh:
            fh.write("id\tfold\t" + "\t".join(f"f{i}" for i in range(self.features.shape[1])) + "\n")
            for rec_id, fold, row in zip(self.ids, self.folds, self.features):
                fh.write(f"{rec_id}\t{fold}\t" + "\t".join(f"{v:.9g}" for v in row) + "\n")


def build_template_db(state, proteins):
    proteins = list(proteins)
    for p in proteins:
        if p.label is None:
            raise ValueError(f"template {p.id!r} has no fold label")
    return TemplateDB([p.id for p in proteins], [p.label for p in proteins],
                      extract_features(state, proteins))


@dataclass
class RankedTemplate:
    id: str
    fold: int
    score: float


@dataclass
class RankResult:
    status: str  # "ok" or "empty_pool"
    predicted_folds: list
    templates: list

    @property
    def empty(self):
        return self.status == "empty_pool"


def rank_by_feature(query, predicted_folds, db, top_templates=10):
    """KL-D ranking of the db records whose fold is in ``predicted_folds``."""
    pool = np.flatnonzero(np.isin(db.folds, list(predicted_folds)))
    if len(pool) == 0:
        return RankResult("empty_pool", list(predicted_folds), [])
    scores = _rows(Metric.KL, np.asarray(query, dtype=np.float64), db.features[pool])
    ranked = sorted(zip(scores, (db.ids[i] for i in pool), pool), key=lambda r: (r[0], r[1]))
    return RankResult("ok", list(predicted_folds),
                      [RankedTemplate(rid, int(db.folds[i]), float(s))
                       for s, rid, i in ranked[:top_templates]])


def rank_templates(state, target, db, top_folds=5, top_templates=10):
    """Rank templates from the target's ``top_folds`` predicted folds by KL-D.

    Returns a :class:`RankResult`; when no template belongs to a predicted fold
    the status is ``"empty_pool"``.
    """
    if len(db) == 0:
        raise ValueError("template database is empty")
    (pred,), feats = predict(state, [target])
    folds = [int(f) for f in pred.ranked_folds[:top_folds]]
    return rank_by_feature(feats[0], folds, db, top_templates)
