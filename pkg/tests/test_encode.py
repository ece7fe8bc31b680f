from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from foldnet import encode
from foldnet.encode import ParseError

FIXTURES = Path(__file__).parent / "fixtures"
SAMPLE_SEQ = "MKVLAAGIVGWRTEDCHYQSPNAF"


# ---------------------------------------------------------------- FASTA

def test_fasta_fixture():
    (rec,) = encode.parse_fasta(FIXTURES / "sample.fasta")
    assert rec == ("sample", SAMPLE_SEQ)


def test_fasta_substitutions_are_reported():
    report = encode.ParseReport()
    recs = encode.parse_fasta_text(">a\nacxb\n>b\nUUO*\n", report=report)
    assert recs == [("a", "ACAD"), ("b", "CCK")]
    assert report.substitutions == {"X": 1, "B": 1, "U": 2, "O": 1}
    assert report.total == 5


@pytest.mark.parametrize("text, line, fragment", [
    (">a\n>b\nAC\n", 1, "empty sequence"),
    (">a\nAC\n>a\nGG\n", 3, "duplicate"),
    (">\nAC\n", 1, "malformed header"),
    ("AC\n>a\nAC\n", 1, "before the first"),
    (">a\nAC1D\n", 2, "invalid residue"),
    (">a\nA#C\n", 2, "invalid residue"),
])
def test_fasta_errors(text, line, fragment):
    with pytest.raises(ParseError, match=fragment) as info:
        encode.parse_fasta_text(text, path="x.fasta")
    assert info.value.line == line
    assert info.value.path == "x.fasta"


def test_fasta_empty_last_record():
    with pytest.raises(ParseError):
        encode.parse_fasta_text(">a\nAC\n>b\n")


def test_fasta_write_roundtrip(tmp_path):
    recs = [("p1", "ACDEFGHIKLMNPQRSTVWY" * 4), ("p2", "M")]
    encode.write_fasta(tmp_path / "x.fa", recs, width=7)
    assert encode.parse_fasta(tmp_path / "x.fa") == recs


# ---------------------------------------------------------------- PSSM

def test_pssm_fixture_reads_first_twenty_columns():
    prof = encode.parse_pssm(FIXTURES / "sample.pssm", SAMPLE_SEQ)
    assert prof.residues == SAMPLE_SEQ
    assert prof.scores.shape == (24, 20)
    first = FIXTURES.joinpath("sample.pssm").read_text().splitlines()[3].split()
    np.testing.assert_array_equal(prof.scores[0], [int(v) for v in first[2:22]])


def test_pssm_fixture_roundtrip_exact(tmp_path):
    prof = encode.parse_pssm(FIXTURES / "sample.pssm", SAMPLE_SEQ)
    encode.write_pssm(tmp_path / "a.pssm", prof.residues, prof.scores)
    again = encode.parse_pssm(tmp_path / "a.pssm", SAMPLE_SEQ)
    assert np.array_equal(again.scores, prof.scores) and again.residues == prof.residues
    encode.write_pssm(tmp_path / "b.pssm", again.residues, again.scores)
    assert (tmp_path / "a.pssm").read_bytes() == (tmp_path / "b.pssm").read_bytes()


@given(st.data())
@settings(max_examples=40, deadline=None)
def test_pssm_writer_roundtrip_property(tmp_path_factory, data):
    L = data.draw(st.integers(1, 30))
    seq = "".join(data.draw(st.lists(st.sampled_from(encode.AMINO_ACIDS), min_size=L, max_size=L)))
    scores = np.array(data.draw(st.lists(st.integers(-99, 99), min_size=20 * L, max_size=20 * L))).reshape(L, 20)
    path = tmp_path_factory.mktemp("pssm") / "x.pssm"
    encode.write_pssm(path, seq, scores)
    prof = encode.parse_pssm(path, seq)
    assert np.array_equal(prof.scores, scores) and prof.residues == seq


def test_pssm_column_header_reorders():
    order = list(reversed(encode.AMINO_ACIDS))
    text = "   " + " ".join(order) + "\n    1 A " + " ".join(str(i) for i in range(20)) + "\n"
    prof = encode.parse_pssm_text(text)
    assert prof.scores[0, encode.AA_INDEX["V"]] == 0
    assert prof.scores[0, encode.AA_INDEX["A"]] == 19


def _pssm_lines():
    return FIXTURES.joinpath("sample.pssm").read_text().splitlines()


@pytest.mark.parametrize("edit, fragment", [
    (lambda ls: ls[:3] + ls[4:], "out of sequence"),
    (lambda ls: ls[:5] + [" ".join(ls[5].split()[:4] + ["x1"] + ls[5].split()[5:])] + ls[6:],
     "non-numeric"),
    (lambda ls: ls[:5] + [" ".join(ls[5].split()[:10])] + ls[6:], "score columns"),
    (lambda ls: ls[:3], "no PSSM rows"),
    (lambda ls: ls[:5] + ["   x3 V  1 2 3"] + ls[6:], "malformed PSSM row"),
])
def test_pssm_malformed(edit, fragment):
    with pytest.raises(ParseError, match=fragment):
        encode.parse_pssm_text("\n".join(edit(_pssm_lines())))


def test_pssm_sequence_mismatch():
    text = FIXTURES.joinpath("sample.pssm").read_text()
    with pytest.raises(ParseError, match="rows but sequence"):
        encode.parse_pssm_text(text, SAMPLE_SEQ[:-1])
    with pytest.raises(ParseError, match="does not match"):
        encode.parse_pssm_text(text, "W" + SAMPLE_SEQ[1:])


def test_write_pssm_rejects_non_integer(tmp_path):
    with pytest.raises(ValueError):
        encode.write_pssm(tmp_path / "x", "A", np.full((1, 20), 0.5))


# ---------------------------------------------------------------- SS / SA

def test_ss_sa_parse_and_format():
    ss = encode.parse_ss_text(">x\nHHE\nC\n", 4)
    assert ss == [encode.SecondaryStructure.HELIX] * 2 + [encode.SecondaryStructure.STRAND,
                                                           encode.SecondaryStructure.LOOP]
    assert encode.format_ss(ss) == "HHEC"
    sa = encode.parse_sa_text("ebbe", 4)
    assert encode.format_sa(sa) == "ebbe"


@pytest.mark.parametrize("parser, text, n, fragment", [
    (encode.parse_ss_text, "HHX", 3, "unknown"),
    (encode.parse_ss_text, "HH", 3, "expected 3"),
    (encode.parse_ss_text, "hhe", 3, "unknown"),
    (encode.parse_sa_text, "eeB", 3, "unknown"),
    (encode.parse_sa_text, "eeee", 3, "expected 3"),
])
def test_ss_sa_malformed(parser, text, n, fragment):
    with pytest.raises(ParseError, match=fragment):
        parser(text, n)


# ---------------------------------------------------------------- encoding

def test_encode_layout():
    seq = "ACW"
    prof = np.arange(60, dtype=float).reshape(3, 20)
    ss = [encode.SecondaryStructure.LOOP, encode.SecondaryStructure.HELIX, encode.SecondaryStructure.STRAND]
    sa = [encode.SolventAccessibility.BURIED, encode.SolventAccessibility.EXPOSED,
          encode.SolventAccessibility.EXPOSED]
    p = encode.encode_protein(seq, prof, ss, sa, id="t", label=2)
    assert p.features.shape == (3, 45)
    assert p.features[0, 0] == 1 and p.features[1, 4] == 1 and p.features[2, 17] == 1
    assert p.features[:, :20].sum() == 3
    np.testing.assert_array_equal(p.features[:, 20:40], prof)
    np.testing.assert_array_equal(p.features[:, 40:43], [[0, 0, 1], [1, 0, 0], [0, 1, 0]])
    np.testing.assert_array_equal(p.features[:, 43:45], [[0, 1], [1, 0], [1, 0]])
    assert p.provenance == {"profile": True, "ss": True, "sa": True}


def test_encode_missing_blocks_zero_filled():
    p = encode.encode_protein("MK", id="z")
    assert not p.features[:, 20:].any()
    assert p.provenance == {"profile": False, "ss": False, "sa": False}


@pytest.mark.parametrize("kwargs", [dict(sequence=""), dict(sequence="AXC"),
                                    dict(sequence="AC", profile=np.zeros((3, 20))),
                                    dict(sequence="AC", ss=[0])])
def test_encode_rejects_bad_input(kwargs):
    with pytest.raises(ValueError):
        encode.encode_protein(**kwargs)


def test_synthetic_profile_counts():
    prof = encode.synthetic_profile("AAC", window=1)
    np.testing.assert_array_equal(prof[:, encode.AA_INDEX["A"]], [2, 2, 1])
    np.testing.assert_array_equal(prof[:, encode.AA_INDEX["C"]], [0, 1, 1])


def test_standardize_profiles_optional():
    prots = [encode.derive_features("ACDEFGHIK"), encode.derive_features("MMMKL")]
    raw = [p.features.copy() for p in prots]
    stats = encode.standardize_profiles(prots)
    rows = np.concatenate([p.features[:, 20:40] for p in prots])
    np.testing.assert_allclose(rows.mean(axis=0), 0, atol=1e-9)
    assert all(np.array_equal(p.features[:, :20], r[:, :20]) for p, r in zip(prots, raw))
    assert len(stats) == 2


# ---------------------------------------------------------------- synthetic corpus

def test_synthetic_corpus_shape():
    spec = encode.SyntheticSpec(num_folds=4, proteins_per_fold=5, seed=2)
    corpus = encode.generate_synthetic(spec)
    assert len(corpus) == 20
    assert sorted({p.label for p in corpus}) == [0, 1, 2, 3]
    assert all(40 <= len(p) <= 120 for p in corpus)
    assert len({p.id for p in corpus}) == 20


def test_synthetic_is_deterministic_and_plants_motifs():
    spec = encode.SyntheticSpec(num_folds=3, proteins_per_fold=4, noise_rate=0.0, seed=5)
    a, b = encode.generate_synthetic(spec), encode.generate_synthetic(spec)
    assert [p.residues for p in a] == [p.residues for p in b]
    motifs = encode.fold_motifs(spec)
    for p in a:
        assert all(m in p.residues for m in motifs[p.label])


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        encode.SyntheticSpec(min_length=10, motifs_per_fold=3, motif_length=8)


# ---------------------------------------------------------------- dataset I/O

def test_dataset_roundtrip(tmp_path):
    corpus = encode.generate_synthetic(encode.SyntheticSpec(num_folds=2, proteins_per_fold=3, seed=1))
    encode.write_dataset(tmp_path / "ds", corpus)
    loaded = encode.load_dataset(tmp_path / "ds")
    for a, b in zip(corpus, loaded):
        assert (a.id, a.residues, a.label) == (b.id, b.residues, b.label)
        np.testing.assert_array_equal(a.features, b.features)


def test_encoded_cache_roundtrip(tmp_path):
    corpus = [encode.derive_features("ACDE", id="a", label=1), encode.encode_protein("MK", id="b")]
    encode.save_encoded(tmp_path / "c.npz", corpus)
    back = encode.load_encoded(tmp_path / "c.npz")
    assert [(p.id, p.residues, p.label, p.provenance) for p in back] == \
           [(p.id, p.residues, p.label, p.provenance) for p in corpus]
    assert all(np.array_equal(a.features, b.features) for a, b in zip(corpus, back))


def test_labels_errors(tmp_path):
    path = tmp_path / "labels.tsv"
    path.write_text("id\tfold_index\na\tseven\n")
    with pytest.raises(ParseError):
        encode.read_labels(path)
    path.write_text("id\tfold_index\na\t-1\n")
    with pytest.raises(ParseError):
        encode.read_labels(path)


def test_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        encode.load_dataset(tmp_path / "nope")
