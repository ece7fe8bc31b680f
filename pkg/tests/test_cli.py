import json

import pytest

from foldnet import cli

TINY = {
    "synthetic": {"num_folds": 5, "proteins_per_fold": 6, "min_length": 20, "max_length": 40,
                  "motifs_per_fold": 2, "motif_length": 5},
    "model": {"window_sizes": [3, 5], "filters_per_layer": 4, "conv_depth": 2, "kmax": 5,
              "hidden_units": 16},
    "schedule": {"total_epochs": 3, "bin_size": 10},
    "analysis": {"trials": 4},
    "perturb": {"repeats_per_kind": 3, "controls": 6, "length_range": [20, 40], "wild_types": 1,
                "truncation_sample": 3},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    out = root / "out"
    assert cli.run(["synth", "--config", str(cfg), "--out", str(out)]) == 0
    data = out / "dataset"
    assert cli.run(["train", "--config", str(cfg), "--out", str(out), "--data", str(data)]) == 0
    return root, cfg, out, data


def test_help_lists_flags(capsys):
    assert cli.run(["train", "--help"]) == 0
    text = capsys.readouterr().out
    for flag in ("--config", "--seed", "--out", "--data", "--checkpoint", "--topk", "--metric",
                 "--bin-size", "--epochs", "--trials", "--db", "--sequence", "--id", "--verbose"):
        assert flag in text
    assert cli.run(["--help"]) == 0
    text = capsys.readouterr().out
    for name in cli.COMMANDS:
        assert name in text


@pytest.mark.parametrize("argv", [[], ["bogus"], ["train", "--epochs", "many"],
                                  ["cluster", "--metric", "cosine"], ["train", "--unknown"]])
def test_usage_errors_exit_1(argv, capsys):
    assert cli.run(argv) == 1


def test_data_errors_exit_2(tmp_path, capsys):
    assert cli.run(["train", "--out", str(tmp_path), "--data", str(tmp_path / "missing")]) == 2
    assert str(tmp_path / "missing") in capsys.readouterr().err
    assert cli.run(["eval", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "none.dsf")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.run(["synth", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_predict_requires_target(workspace, tmp_path):
    _, cfg, out, _ = workspace
    assert cli.run(["predict", "--config", str(cfg), "--out", str(tmp_path),
                    "--checkpoint", str(out / "model.dsf")]) == 1


def test_train_outputs(workspace):
    _, _, out, _ = workspace
    assert (out / "model.dsf").read_bytes()[:4] == b"DSF1"
    records = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
    assert records[0]["kind"] == "header"
    assert sum(r["kind"] == "pass" for r in records) == 3
    manifest = json.loads((out / "manifest_train.json").read_text())
    assert manifest["config"]["schedule"]["total_epochs"] == 3
    assert (out / "split.tsv").read_text().startswith("# seed=0 config=")


def test_eval_and_predict(workspace, tmp_path, capsys):
    _, cfg, out, data = workspace
    ck = str(out / "model.dsf")
    assert cli.run(["eval", "--config", str(cfg), "--out", str(tmp_path), "--data", str(data),
                    "--checkpoint", ck]) == 0
    lines = (tmp_path / "accuracy.tsv").read_text().splitlines()
    assert lines[1].startswith("set\tgroup\tcount\ttop1\ttop5")
    assert any(l.startswith("valid\tall") for l in lines)
    capsys.readouterr()
    assert cli.run(["predict", "--config", str(cfg), "--out", str(tmp_path), "--checkpoint", ck,
                    "--sequence", "MKVLAAGIVGWRTEDCHYQSPNAF", "--topk", "5"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert rows[0] == "rank\tfold\tprobability" and len(rows) == 6
    probs = [float(r.split("\t")[2]) for r in rows[1:]]
    assert probs == sorted(probs, reverse=True) and sum(probs) <= 1 + 1e-9
    assert cli.run(["predict", "--out", str(tmp_path), "--checkpoint", ck, "--sequence", "MK",
                    "--topk", "6"]) == 2  # more folds than the model has


def test_extract_cluster_rank_perturb(workspace, tmp_path, capsys):
    _, cfg, out, data = workspace
    common = ["--config", str(cfg), "--out", str(tmp_path), "--data", str(data),
              "--checkpoint", str(out / "model.dsf")]
    assert cli.run(["extract", *common]) == 0
    db = str(tmp_path / "templates.dsft")
    assert cli.run(["cluster", *common, "--db", db, "--metric", "all"]) == 0
    summary = (tmp_path / "cluster_summary.tsv").read_text().splitlines()
    assert [l.split("\t")[0] for l in summary[2:]] == ["euclid", "manh", "corr", "kl"]
    assert cli.run(["rank", *common, "--db", db, "--id", "syn_f001_0002"]) == 0
    ranking = (tmp_path / "ranking.tsv").read_text().splitlines()
    assert ranking[1].startswith("# status=ok") and ranking[2] == "rank\tid\tfold\tkl_d"
    assert cli.run(["perturb", *common]) == 0
    assert (tmp_path / "truncation.tsv").exists()
    assert (tmp_path / "divergence_summary.tsv").read_text().count("\n") == 3


def test_encode_cache(workspace, tmp_path):
    _, cfg, _, data = workspace
    assert cli.run(["encode", "--config", str(cfg), "--out", str(tmp_path), "--data", str(data)]) == 0
    assert (tmp_path / "encoded.npz").exists()


def test_reproducible_outputs(workspace, tmp_path):
    _, cfg, _, data = workspace
    for name in ("a", "b"):
        assert cli.run(["train", "--config", str(cfg), "--out", str(tmp_path / name),
                        "--data", str(data), "--epochs", "1", "--seed", "5"]) == 0
    for f in ("model.dsf", "train_log.jsonl", "split.tsv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    ck = str(tmp_path / "a" / "model.dsf")
    for name in ("c", "d"):
        base = ["--config", str(cfg), "--out", str(tmp_path / name), "--data", str(data), "--checkpoint", ck]
        assert cli.run(["eval", *base]) == 0
        assert cli.run(["cluster", *base, "--trials", "3"]) == 0
    for f in ("accuracy.tsv", "cluster_summary.tsv", "cluster_kl.tsv"):
        assert (tmp_path / "c" / f).read_bytes() == (tmp_path / "d" / f).read_bytes()
