"""Input parsing and the 45-column per-residue encoding.

Column layout of an encoded protein (row = residue):

    0-19   one-hot residue, in PSI-BLAST column order ``ARNDCQEGHILKMFPSTWYV``
    20-39  profile scores (raw PSSM log-odds, same residue order)
    40-42  secondary structure one-hot (helix, strand, loop)
    43-44  solvent accessibility one-hot (exposed, buried)

Blocks that are not supplied are zero-filled and flagged in
``EncodedProtein.provenance``.
"""

from __future__ import annotations

import enum
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

AMINO_ACIDS = "ARNDCQEGHILKMFPSTWYV"
AA_INDEX = {a: i for i, a in enumerate(AMINO_ACIDS)}
NONSTANDARD = {"B": "D", "Z": "E", "X": "A", "U": "C", "O": "K", "J": "L"}
NUM_FEATURES = 45
ONEHOT, PROFILE, SS_COLS, SA_COLS = slice(0, 20), slice(20, 40), slice(40, 43), slice(43, 45)


class ParseError(ValueError):
    """Malformed input file; carries the path and (1-based) line or row number."""

    def __init__(self, message, path=None, line=None):
        self.path, self.line = path, line
        where = ""
        if path is not None:
            where = f"{path}:" + (f"{line}: " if line is not None else " ")
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class SecondaryStructure(enum.IntEnum):
    HELIX = 0
    STRAND = 1
    LOOP = 2


class SolventAccessibility(enum.IntEnum):
    EXPOSED = 0
    BURIED = 1


SS_LETTERS = {"H": SecondaryStructure.HELIX, "E": SecondaryStructure.STRAND, "C": SecondaryStructure.LOOP}
SA_LETTERS = {"e": SolventAccessibility.EXPOSED, "b": SolventAccessibility.BURIED}


@dataclass
class ParseReport:
    """Non-standard residue substitutions seen while parsing."""

    substitutions: Counter = field(default_factory=Counter)
    per_record: dict = field(default_factory=dict)

    def record(self, rec_id, letter):
        self.substitutions[letter] += 1
        self.per_record.setdefault(rec_id, Counter())[letter] += 1

    @property
    def total(self):
        return sum(self.substitutions.values())


@dataclass
class ProfileMatrix:
    scores: np.ndarray  # [L, 20], columns in AMINO_ACIDS order
    residues: str


@dataclass
class EncodedProtein:
    id: str
    residues: str
    features: np.ndarray  # [L, 45]
    label: int | None = None
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.residues)


# --------------------------------------------------------------------------
# sequences
# --------------------------------------------------------------------------

def canonical_residue(letter):
    """Map a residue letter onto the 20-letter alphabet, or raise KeyError."""
    letter = letter.upper()
    if letter in AA_INDEX:
        return letter
    return NONSTANDARD[letter]


def clean_sequence(seq, rec_id="", report=None):
    out = []
    for ch in seq.upper():
        if ch in AA_INDEX:
            out.append(ch)
        elif ch in NONSTANDARD:
            out.append(NONSTANDARD[ch])
            if report is not None:
                report.record(rec_id, ch)
        else:
            raise ValueError(f"invalid residue {ch!r}")
    return "".join(out)


def parse_fasta_text(text, path=None, report=None):
    records, seen = [], {}
    cur_id, cur_line, chunks = None, None, []

    def flush():
        if cur_id is None:
            return
        seq = "".join(chunks)
        if not seq:
            raise ParseError(f"record {cur_id!r} has an empty sequence", path, cur_line)
        records.append((cur_id, seq))

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(">"):
            flush()
            fields = line[1:].split()
            if not fields:
                raise ParseError("malformed header (no identifier)", path, lineno)
            cur_id, cur_line, chunks = fields[0], lineno, []
            if cur_id in seen:
                raise ParseError(f"duplicate id {cur_id!r} (first seen on line {seen[cur_id]})",
                                 path, lineno)
            seen[cur_id] = lineno
            continue
        if cur_id is None:
            raise ParseError("sequence data before the first '>' header", path, lineno)
        try:
            chunks.append(clean_sequence(line.replace(" ", "").rstrip("*"), cur_id, report))
        except ValueError as exc:
            raise ParseError(f"{exc} in record {cur_id!r}", path, lineno) from None
    flush()
    if report is not None and report.total:
        log.warning("%s: substituted %d non-standard residues: %s",
                    path or "<fasta>", report.total, dict(report.substitutions))
    return records


def parse_fasta(path, report=None):
    """Read ``(id, sequence)`` records from a FASTA file.

    Sequences are upper-cased and non-standard letters are mapped through
    ``NONSTANDARD``; pass a :class:`ParseReport` to collect the substitutions.
    """
    path = Path(path)
    return parse_fasta_text(path.read_text(), path=path, report=report)


def write_fasta(path, records, width=60):
    lines = []
    for rec_id, seq in records:
        lines.append(f">{rec_id}")
        lines.extend(seq[i:i + width] for i in range(0, len(seq), width))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


# --------------------------------------------------------------------------
# PSSM
# --------------------------------------------------------------------------

_PSSM_ROW = re.compile(r"^\s*(\d+)\s+([A-Za-z])\s+(.*)$")


def parse_pssm_text(text, expected_sequence=None, path=None):
    columns = list(AMINO_ACIDS)
    rows, letters = [], []
    header_seen = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split()
        if not header_seen and len(tokens) >= 20 and all(len(t) == 1 and t.isalpha() for t in tokens[:20]):
            columns = tokens[:20]
            if sorted(columns) != sorted(AMINO_ACIDS):
                raise ParseError(f"unexpected PSSM column header {' '.join(columns)}", path, lineno)
            header_seen = True
            continue
        m = _PSSM_ROW.match(raw)
        if not m:
            if rows and not raw.strip():
                break  # blank line before the K / Lambda trailer
            if rows:
                raise ParseError(f"malformed PSSM row: {raw.strip()[:40]!r}", path, lineno)
            continue
        index = int(m.group(1))
        fields = m.group(3).split()
        if len(fields) < 20:
            raise ParseError(f"PSSM row {index} has {len(fields)} score columns, need 20", path, lineno)
        try:
            values = [int(f) for f in fields[:20]]
        except ValueError:
            raise ParseError(f"non-numeric score in PSSM row {index}", path, lineno) from None
        if index != len(rows) + 1:
            raise ParseError(f"PSSM row index {index} out of sequence (expected {len(rows) + 1})",
                             path, lineno)
        rows.append(values)
        letters.append(m.group(2))
    if not rows:
        raise ParseError("no PSSM rows found", path)
    raw_scores = np.array(rows, dtype=np.float64)
    order = [columns.index(a) for a in AMINO_ACIDS]
    scores = raw_scores[:, order]
    try:
        residues = "".join(canonical_residue(a) for a in letters)
    except KeyError as exc:
        raise ParseError(f"unknown residue letter {exc.args[0]!r} in PSSM", path) from None
    if expected_sequence is not None:
        if len(residues) != len(expected_sequence):
            raise ParseError(f"PSSM has {len(residues)} rows but sequence has "
                             f"{len(expected_sequence)} residues", path)
        for i, (a, b) in enumerate(zip(residues, expected_sequence)):
            if a != b:
                raise ParseError(f"PSSM residue {a!r} at row {i + 1} does not match sequence "
                                 f"residue {b!r}", path, None)
    return ProfileMatrix(scores, residues)


def parse_pssm(path, expected_sequence=None):
    """Read the first 20 score columns of an ASCII PSI-BLAST profile.

    Rows look like ``<index> <residue> <20 log-odds ints> [ignored columns]``.
    Residue letters are checked against ``expected_sequence`` when given.
    """
    path = Path(path)
    return parse_pssm_text(path.read_text(), expected_sequence, path=path)


def write_pssm(path, sequence, scores):
    """Write an integer score matrix in the PSI-BLAST ASCII layout."""
    scores = np.asarray(scores)
    if scores.shape != (len(sequence), 20):
        raise ValueError(f"scores shape {scores.shape} does not match sequence length {len(sequence)}")
    if not np.array_equal(scores, np.round(scores)):
        raise ValueError("PSSM scores must be integers")
    lines = [
        "",
        "Last position-specific scoring matrix computed, weighted observed percentages rounded down,"
        " information per position, and relative weight of gapless real matches to pseudocounts",
        "           " + " ".join(f"{a:>3}" for a in AMINO_ACIDS),
    ]
    for i, (res, row) in enumerate(zip(sequence, scores.astype(int)), start=1):
        lines.append(f"{i:5d} {res}  " + " ".join(f"{v:3d}" for v in row) + "   0.00 0.00")
    lines += ["", "                      K         Lambda",
              "Standard Ungapped    0.1340     0.3170", ""]
    Path(path).write_text("\n".join(lines))


# --------------------------------------------------------------------------
# secondary structure / solvent accessibility
# --------------------------------------------------------------------------

def _parse_letters(text, length, table, what, path):
    letters = "".join(line.strip() for line in text.splitlines() if not line.startswith(">"))
    out = []
    for i, ch in enumerate(letters):
        if ch not in table:
            raise ParseError(f"unknown {what} letter {ch!r} at position {i + 1}", path)
        out.append(table[ch])
    if len(out) != length:
        raise ParseError(f"{what} annotation has {len(out)} letters, expected {length}", path)
    return out


def parse_ss_text(text, length, path=None):
    return _parse_letters(text, length, SS_LETTERS, "secondary structure", path)


def parse_sa_text(text, length, path=None):
    return _parse_letters(text, length, SA_LETTERS, "solvent accessibility", path)


def parse_ss(path, length):
    """Per-residue H/E/C letters -> list of :class:`SecondaryStructure`."""
    return parse_ss_text(Path(path).read_text(), length, path)


def parse_sa(path, length):
    """Per-residue e/b letters -> list of :class:`SolventAccessibility`."""
    return parse_sa_text(Path(path).read_text(), length, path)


def format_ss(classes):
    inv = {v: k for k, v in SS_LETTERS.items()}
    return "".join(inv[SecondaryStructure(c)] for c in classes)


def format_sa(classes):
    inv = {v: k for k, v in SA_LETTERS.items()}
    return "".join(inv[SolventAccessibility(c)] for c in classes)


# --------------------------------------------------------------------------
# encoding
# --------------------------------------------------------------------------

def one_hot(sequence):
    out = np.zeros((len(sequence), 20))
    out[np.arange(len(sequence)), [AA_INDEX[a] for a in sequence]] = 1.0
    return out


def encode_protein(sequence, profile=None, ss=None, sa=None, id="", label=None):
    """Assemble the [L, 45] feature matrix for one protein.

    ``profile`` is a :class:`ProfileMatrix` or an [L, 20] array; ``ss``/``sa`` are
    class sequences. Missing blocks are zero-filled.
    """
    if not sequence:
        raise ValueError(f"protein {id!r} has an empty sequence")
    L = len(sequence)
    bad = set(sequence) - set(AMINO_ACIDS)
    if bad:
        raise ValueError(f"protein {id!r} contains non-canonical residues {sorted(bad)}")
    feats = np.zeros((L, NUM_FEATURES))
    feats[:, ONEHOT] = one_hot(sequence)
    if profile is not None:
        scores = profile.scores if isinstance(profile, ProfileMatrix) else np.asarray(profile, dtype=float)
        if scores.shape != (L, 20):
            raise ValueError(f"protein {id!r}: profile shape {scores.shape} != ({L}, 20)")
        feats[:, PROFILE] = scores
    if ss is not None:
        if len(ss) != L:
            raise ValueError(f"protein {id!r}: {len(ss)} secondary-structure labels for {L} residues")
        feats[np.arange(L), 40 + np.asarray(ss, dtype=int)] = 1.0
    if sa is not None:
        if len(sa) != L:
            raise ValueError(f"protein {id!r}: {len(sa)} accessibility labels for {L} residues")
        feats[np.arange(L), 43 + np.asarray(sa, dtype=int)] = 1.0
    provenance = {"profile": profile is not None, "ss": ss is not None, "sa": sa is not None}
    return EncodedProtein(id, sequence, feats, label, provenance)


def standardize_profiles(proteins, stats=None):
    """Z-score the profile columns with corpus-wide statistics (off by default).

    Returns the statistics ``(mean, std)`` so a held-out set can reuse them.
    """
    if stats is None:
        rows = np.concatenate([p.features[:, PROFILE] for p in proteins if p.provenance.get("profile")])
        stats = rows.mean(axis=0), rows.std(axis=0) + 1e-8
    mean, std = stats
    for p in proteins:
        if p.provenance.get("profile"):
            p.features[:, PROFILE] = (p.features[:, PROFILE] - mean) / std
    return stats


# --------------------------------------------------------------------------
# synthetic corpora
# --------------------------------------------------------------------------

# crude residue propensities used only to fill the SS/SA channels of synthetic data
_HELIX_FORMERS = set("AELMQKRH")
_STRAND_FORMERS = set("VIYFWT")
_BURIED = set("AVILMFWC")


def synthetic_profile(sequence, window=2):
    """Integer residue counts in a ``±window`` neighbourhood (a smoothed one-hot)."""
    oh = one_hot(sequence)
    csum = np.vstack([np.zeros((1, 20)), np.cumsum(oh, axis=0)])
    L = len(sequence)
    lo = np.clip(np.arange(L) - window, 0, L)
    hi = np.clip(np.arange(L) + window + 1, 0, L)
    return csum[hi] - csum[lo]


def synthetic_ss(sequence):
    return [SecondaryStructure.HELIX if a in _HELIX_FORMERS
            else SecondaryStructure.STRAND if a in _STRAND_FORMERS
            else SecondaryStructure.LOOP for a in sequence]


def synthetic_sa(sequence):
    return [SolventAccessibility.BURIED if a in _BURIED else SolventAccessibility.EXPOSED
            for a in sequence]


def derive_features(sequence, id="", label=None, profile_window=2):
    """Encode a sequence with all four blocks computed from the sequence itself."""
    return encode_protein(sequence, synthetic_profile(sequence, profile_window),
                          synthetic_ss(sequence), synthetic_sa(sequence), id=id, label=label)


@dataclass
class SyntheticSpec:
    num_folds: int = 20
    proteins_per_fold: int = 50
    min_length: int = 40
    max_length: int = 120
    motifs_per_fold: int = 3
    motif_length: int = 8
    noise_rate: float = 0.05
    profile_window: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("num_folds", "proteins_per_fold", "min_length", "motifs_per_fold", "motif_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_length < self.min_length:
            raise ValueError("max_length < min_length")
        if self.min_length < self.motifs_per_fold * self.motif_length:
            raise ValueError("min_length must fit all motifs of a fold")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must be in [0, 1]")


def fold_motifs(spec):
    """The distinct motif strings defining each fold, ``[fold][motif]``."""
    rng = np.random.default_rng([spec.seed, 0])
    seen, motifs = set(), []
    for _ in range(spec.num_folds):
        fold = []
        while len(fold) < spec.motifs_per_fold:
            m = "".join(rng.choice(list(AMINO_ACIDS), spec.motif_length))
            if m not in seen:
                seen.add(m)
                fold.append(m)
        motifs.append(fold)
    return motifs


def generate_synthetic(spec):
    """Labelled corpus where each fold is a set of motifs planted in random background."""
    motifs = fold_motifs(spec)
    rng = np.random.default_rng([spec.seed, 1])
    alphabet = np.array(list(AMINO_ACIDS))
    out = []
    for fold in range(spec.num_folds):
        for i in range(spec.proteins_per_fold):
            L = int(rng.integers(spec.min_length, spec.max_length + 1))
            seq = list(rng.choice(alphabet, L))
            planted = [motifs[fold][j] for j in rng.permutation(spec.motifs_per_fold)]
            free = L - sum(len(m) for m in planted)
            # random composition of the free residues into len(planted) + 1 gaps
            cuts = np.sort(rng.integers(0, free + 1, len(planted)))
            gaps = np.diff(np.concatenate([[0], cuts]))
            pos = 0
            for gap, motif in zip(gaps, planted):
                pos += int(gap)
                for k, a in enumerate(motif):
                    if spec.noise_rate and rng.random() < spec.noise_rate:
                        a = str(rng.choice(alphabet))
                    seq[pos + k] = a
                pos += len(motif)
            out.append(derive_features("".join(seq), id=f"syn_f{fold:03d}_{i:04d}", label=fold,
                                       profile_window=spec.profile_window))
    return out


# --------------------------------------------------------------------------
# dataset directories and encoded caches
# --------------------------------------------------------------------------

def read_labels(path):
    """``id<TAB>fold_index`` lines after one header line."""
    labels = {}
    lines = Path(path).read_text().splitlines()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError("expected 'id<TAB>fold_index'", path, lineno)
        try:
            labels[parts[0]] = int(parts[1])
        except ValueError:
            raise ParseError(f"fold index {parts[1]!r} is not an integer", path, lineno) from None
        if labels[parts[0]] < 0:
            raise ParseError("negative fold index", path, lineno)
    return labels


def write_labels(path, labels):
    lines = ["id\tfold_index"] + [f"{k}\t{v}" for k, v in labels.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(root, report=None):
    """Encode every protein of a dataset directory.

    Layout: ``sequences.fasta``, optional ``labels.tsv``, and optional per-protein
    ``profiles/<id>.pssm``, ``ss/<id>.ss``, ``sa/<id>.sa``.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    fasta = root / "sequences.fasta"
    if not fasta.exists():
        raise FileNotFoundError(f"missing {fasta}")
    records = parse_fasta(fasta, report)
    labels = read_labels(root / "labels.tsv") if (root / "labels.tsv").exists() else {}
    out = []
    for rec_id, seq in records:
        pssm, ss, sa = (root / "profiles" / f"{rec_id}.pssm", root / "ss" / f"{rec_id}.ss",
                        root / "sa" / f"{rec_id}.sa")
        out.append(encode_protein(
            seq,
            profile=parse_pssm(pssm, seq) if pssm.exists() else None,
            ss=parse_ss(ss, len(seq)) if ss.exists() else None,
            sa=parse_sa(sa, len(seq)) if sa.exists() else None,
            id=rec_id, label=labels.get(rec_id)))
    return out


def write_dataset(root, proteins):
    """Write proteins in the dataset-directory layout (inverse of :func:`load_dataset`)."""
    root = Path(root)
    for sub in ("profiles", "ss", "sa"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_fasta(root / "sequences.fasta", [(p.id, p.residues) for p in proteins])
    write_labels(root / "labels.tsv", {p.id: p.label for p in proteins if p.label is not None})
    for p in proteins:
        if p.provenance.get("profile"):
            write_pssm(root / "profiles" / f"{p.id}.pssm", p.residues, p.features[:, PROFILE])
        if p.provenance.get("ss"):
            (root / "ss" / f"{p.id}.ss").write_text(format_ss(p.features[:, SS_COLS].argmax(1)) + "\n")
        if p.provenance.get("sa"):
            (root / "sa" / f"{p.id}.sa").write_text(format_sa(p.features[:, SA_COLS].argmax(1)) + "\n")


def save_encoded(path, proteins):
    lengths = np.array([len(p) for p in proteins], dtype=np.int64)
    np.savez(path,
             ids=np.array([p.id for p in proteins]),
             residues=np.array([p.residues for p in proteins]),
             labels=np.array([-1 if p.label is None else p.label for p in proteins], dtype=np.int64),
             lengths=lengths,
             provenance=np.array([[p.provenance.get(k, False) for k in ("profile", "ss", "sa")]
                                  for p in proteins], dtype=bool).reshape(-1, 3),
             features=np.concatenate([p.features for p in proteins]) if proteins
             else np.zeros((0, NUM_FEATURES)))


def load_encoded(path):
    with np.load(path) as z:
        bounds = np.concatenate([[0], np.cumsum(z["lengths"])])
        return [EncodedProtein(str(i), str(r), z["features"][a:b].copy(),
                               None if lab < 0 else int(lab),
                               dict(zip(("profile", "ss", "sa"), map(bool, prov))))
                for i, r, lab, prov, a, b in zip(z["ids"], z["residues"], z["labels"],
                                                 z["provenance"], bounds[:-1], bounds[1:])]
