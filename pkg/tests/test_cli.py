import pytest
from click.testing import CliRunner

import harness
from cli import cli
from errors import NonFiniteValue

BACH = ["**kern\n4c\n8d\n8e\n4f\n*-\n", "**kern\n8c\n8e\n4g\n*-\n", "**kern\n4d\n4f\n2a\n*-\n"]
HAYDN = ["**kern\n2G\n4B\n4d\n*-\n", "**kern\n2A\n2c\n*-\n", "**kern\n1G\n2B\n*-\n"]


@pytest.fixture
def runner(monkeypatch, tmp_path):
    monkeypatch.setenv("RESULTS_DB", str(tmp_path / "runs.db"))
    return CliRunner()


@pytest.fixture
def workspace(runner, kern_corpus, tmp_path):
    """A manifest, vocabulary and cache for six one-voice scores."""
    manifest = kern_corpus({"bach": BACH, "haydn": HAYDN})
    vocab, cache = tmp_path / "vocab.json", tmp_path / "corpus.npz"
    result = runner.invoke(cli, ["--quiet", "build-vocab", "--manifest", str(manifest), "--vocab", str(vocab)])
    assert result.exit_code == 0, result.output
    result = runner.invoke(cli, ["--quiet", "encode", "--manifest", str(manifest), "--vocab", str(vocab), "--cache", str(cache)])
    assert result.exit_code == 0, result.output
    return {"manifest": manifest, "vocab": vocab, "cache": cache}


def xval_args(ws, out, *extra):
    return [
        "--quiet", "xval",
        "--vocab", str(ws["vocab"]), "--cache", str(ws["cache"]), "--out", str(out),
        "--arch", "histogram", "--folds", "3", "--epochs", "1", "--sample-size", "4",
        *extra,
    ]


def test_build_vocab_is_deterministic(runner, workspace, tmp_path):
    first = workspace["vocab"].read_bytes()
    again = tmp_path / "again.json"
    result = runner.invoke(cli, ["--quiet", "build-vocab", "--manifest", str(workspace["manifest"]), "--vocab", str(again)])
    assert result.exit_code == 0
    assert again.read_bytes() == first
    assert "6 scores" in result.output


def test_build_vocab_rejects_empty_manifest(runner, tmp_path):
    (tmp_path / "empty.tsv").write_text("# nothing here\n")
    result = runner.invoke(cli, ["build-vocab", "--manifest", str(tmp_path / "empty.tsv"), "--vocab", str(tmp_path / "v.json")])
    assert result.exit_code == 2
    assert not (tmp_path / "v.json").exists()


def test_encode_lists_composers(workspace, runner, tmp_path):
    result = runner.invoke(cli, [
        "--quiet", "encode", "--manifest", str(workspace["manifest"]),
        "--vocab", str(workspace["vocab"]), "--cache", str(tmp_path / "c2.npz"),
    ])
    assert result.exit_code == 0
    assert "6 scores, 2 composers" in result.output
    assert "Haydn" in result.output


def test_xval_writes_results_and_is_reproducible(runner, workspace, tmp_path):
    a = runner.invoke(cli, xval_args(workspace, tmp_path / "a"))
    assert a.exit_code == 0, a.output
    b = runner.invoke(cli, xval_args(workspace, tmp_path / "b"))
    assert b.exit_code == 0, b.output
    assert (tmp_path / "a" / "summary.tsv").read_bytes() == (tmp_path / "b" / "summary.tsv").read_bytes()
    assert (tmp_path / "a" / "confusion.csv").read_bytes() == (tmp_path / "b" / "confusion.csv").read_bytes()
    assert "Overall" in a.output
    assert (tmp_path / "runs.db").exists()


def test_unknown_architecture_is_a_usage_error(runner, workspace, tmp_path):
    args = xval_args(workspace, tmp_path / "x")
    args[args.index("histogram")] = "transformer"
    result = runner.invoke(cli, args)
    assert result.exit_code == 2


def test_missing_cache_exits_2(runner, workspace, tmp_path):
    workspace = {**workspace, "cache": tmp_path / "absent.npz"}
    result = runner.invoke(cli, xval_args(workspace, tmp_path / "x"))
    assert result.exit_code == 2
    assert "does not exist" in result.output


def test_divergence_exits_3(runner, workspace, tmp_path, monkeypatch):
    def explode(*args, **kwargs):
        raise NonFiniteValue("non-finite value in loss")

    monkeypatch.setattr(harness, "softmax_cross_entropy", explode)
    result = runner.invoke(cli, xval_args(workspace, tmp_path / "x"))
    assert result.exit_code == 3
    assert "fold 0" in result.output


def test_subset_writes_square_confusion(runner, workspace, tmp_path):
    result = runner.invoke(cli, [
        "--quiet", "subset", "--vocab", str(workspace["vocab"]), "--cache", str(workspace["cache"]),
        "--out", str(tmp_path / "sub"), "--composers", "haydn,bach", "--arch", "histogram",
        "--folds", "3", "--epochs", "1", "--sample-size", "4",
    ])
    assert result.exit_code == 0, result.output
    header = (tmp_path / "sub" / "confusion.csv").read_text().splitlines()[0]
    assert header == "composer,haydn,bach"


def test_sweep_writes_grid_and_per_size_results(runner, workspace, tmp_path):
    out = tmp_path / "sweep"
    result = runner.invoke(cli, [
        "--quiet", "sweep", "--vocab", str(workspace["vocab"]), "--cache", str(workspace["cache"]),
        "--out", str(out), "--arch", "histogram", "--sizes", "2,4", "--folds", "3", "--epochs", "1",
    ])
    assert result.exit_code == 0, result.output
    assert (out / "sweep.tsv").read_text().startswith("architecture\t2\t4\tspearman")
    assert (out / "histogram" / "s2" / "experiment.json").exists()
    assert (out / "histogram" / "s4" / "summary.tsv").exists()

    result = runner.invoke(cli, ["report", str(out)])
    assert "by sample size" in result.output


def test_sweep_rejects_bad_sizes(runner, workspace, tmp_path):
    result = runner.invoke(cli, [
        "sweep", "--vocab", str(workspace["vocab"]), "--cache", str(workspace["cache"]),
        "--out", str(tmp_path / "s"), "--sizes", "ten",
    ])
    assert result.exit_code == 2


def test_report(runner, workspace, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    result = runner.invoke(cli, ["report", str(empty)])
    assert result.exit_code == 0
    assert "no runs" in result.output

    runner.invoke(cli, xval_args(workspace, tmp_path / "results" / "xval-histogram"))
    result = runner.invoke(cli, ["report", str(tmp_path / "results"), "--compare"])
    assert result.exit_code == 0, result.output
    assert "Per-composer accuracy" in result.output
    assert "Overall" in result.output

    (tmp_path / "results" / "xval-histogram" / "experiment.json").write_text("{broken")
    result = runner.invoke(cli, ["report", str(tmp_path / "results")])
    assert result.exit_code == 2

    result = runner.invoke(cli, ["report", str(tmp_path / "nowhere")])
    assert result.exit_code == 2


def test_report_pdf(runner, workspace, tmp_path):
    runner.invoke(cli, xval_args(workspace, tmp_path / "results" / "xval-histogram"))
    pdf = tmp_path / "report.pdf"
    result = runner.invoke(cli, ["report", str(tmp_path / "results"), "--pdf", str(pdf)])
    assert result.exit_code == 0, result.output
    assert pdf.read_bytes().startswith(b"%PDF")


def test_inspect_without_vocab(runner, quartet_text, tmp_path):
    score = tmp_path / "op33.krn"
    score.write_text(quartet_text)
    result = runner.invoke(cli, ["inspect", str(score), "--row", "4", "--vocab", str(tmp_path / "none.json")])
    assert result.exit_code == 0, result.output
    assert "T=7 spines=4" in result.output
    assert "pitches=[42, 45]" in result.output
    assert "pitches=[54]" in result.output


def test_inspect_row_out_of_range(runner, quartet_text, tmp_path):
    score = tmp_path / "op33.krn"
    score.write_text(quartet_text)
    result = runner.invoke(cli, ["inspect", str(score), "--row", "7"])
    assert result.exit_code == 2


def test_inspect_with_vocab(runner, workspace):
    score = sorted((workspace["manifest"].parent / "kern" / "bach").glob("*.krn"))[0]
    result = runner.invoke(cli, ["inspect", str(score), "--row", "0", "--vocab", str(workspace["vocab"])])
    assert result.exit_code == 0, result.output
    assert "bits=" in result.output
    assert "value_index=0" in result.output


def test_baseline(runner, workspace):
    result = runner.invoke(cli, ["baseline", "--vocab", str(workspace["vocab"]), "--cache", str(workspace["cache"])])
    assert result.exit_code == 0
    assert "majority baseline: 50.0%" in result.output
    result = runner.invoke(cli, [
        "baseline", "--vocab", str(workspace["vocab"]), "--cache", str(workspace["cache"]), "--composers", "haydn",
    ])
    assert "majority baseline: 100.0%" in result.output
    result = runner.invoke(cli, [
        "baseline", "--vocab", str(workspace["vocab"]), "--cache", str(workspace["cache"]), "--composers", "chopin",
    ])
    assert result.exit_code == 2


def test_describe(runner, workspace):
    result = runner.invoke(cli, ["describe", "--vocab", str(workspace["vocab"]), "--arch", "histogram", "--classes", "2"])
    assert result.exit_code == 0
    assert result.output.startswith("histogram: C=2")
    assert "total parameters" in result.output
