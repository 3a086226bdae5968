import json

import numpy as np
import pytest
from pydantic import ValidationError

import harness
from errors import CorruptRecord, DivergenceError, NonFiniteValue, TooFewScores
from harness import (
    ConfusionMatrix,
    TrainConfig,
    cross_validate,
    evaluate,
    accuracy,
    find_summaries,
    kfold_split,
    majority_baseline,
    replay_run,
    sample_size_sweep,
    subset_experiment,
    summary_table,
    train,
    write_results,
    write_sweep,
)
from model_zoo import ModelConfig
from results_db import list_experiments, record_experiment

SMALL = {"n": 3, "k": 4, "k2": 4, "harmonic_k": 4, "harmonic_k2": 4}


def config_for(corpus, arch="histogram", s=4, **overrides):
    N, D = 10, 4
    return ModelConfig.for_architecture(arch, N=N, D=D, P=corpus.P, C=corpus.C, s=s, **{**SMALL, **overrides})


def quick(**overrides):
    return TrainConfig(**{"max_epochs": 2, "batch_size": 8, "micro_batch": 4, "lr": 1e-2, **overrides})


# ---------- folds ----------

def test_one_score_per_fold():
    plan = kfold_split([f"s{i}" for i in range(10)], k=10, seed=3)
    assert plan.fold_sizes() == [1] * 10
    assert sorted(plan.folds) == list(range(10))


def test_fold_sizes_are_balanced_and_stratified():
    labels = np.repeat(np.arange(19), [40 + 13 * c for c in range(19)])[:2500]
    labels = np.concatenate([labels, np.zeros(2500 - labels.size, dtype=np.int64)])
    plan = kfold_split(range(2500), k=10, seed=0, labels=labels)
    assert plan.fold_sizes() == [250] * 10
    for c in range(19):
        per_fold = [sum(1 for i in plan.members(f) if labels[i] == c) for f in range(10)]
        assert max(per_fold) - min(per_fold) <= 1


def test_folds_cover_and_are_disjoint():
    plan = kfold_split(range(37), k=10, seed=1)
    members = [set(plan.members(f)) for f in range(10)]
    assert set().union(*members) == set(range(37))
    assert sum(len(m) for m in members) == 37


def test_fold_plan_is_seeded():
    a = kfold_split(range(50), k=5, seed=7)
    b = kfold_split(range(50), k=5, seed=7)
    c = kfold_split(range(50), k=5, seed=8)
    assert a == b
    assert a.folds != c.folds


def test_roles_use_next_fold_for_validation():
    plan = kfold_split(range(30), k=10, seed=0)
    train_idx, val_idx, test_idx = plan.roles(9)
    assert val_idx == plan.members(0)
    assert test_idx == plan.members(9)
    assert not set(train_idx) & (set(val_idx) | set(test_idx))
    assert len(train_idx) + len(val_idx) + len(test_idx) == 30


def test_too_few_scores():
    with pytest.raises(TooFewScores):
        kfold_split(range(5), k=10)
    with pytest.raises(TooFewScores):
        kfold_split(range(5), k=1)


# ---------- baselines and metrics ----------

def test_majority_baseline():
    assert majority_baseline([0] * 209 + [1] * 82) == pytest.approx(209 / 291)
    assert majority_baseline([0, 1, 0, 1]) == 0.5
    assert majority_baseline([3, 3, 3]) == 1.0


def test_confusion_matrix():
    cm = ConfusionMatrix.from_predictions([0, 0, 1, 1, 2], [0, 1, 1, 1, 0], ["a", "b", "c"])
    assert cm.counts.tolist() == [[1, 1, 0], [0, 2, 0], [1, 0, 0]]
    assert cm.overall_accuracy == pytest.approx(3 / 5)
    assert cm.per_class_accuracy() == {"a": 50.0, "b": 100.0, "c": 0.0}
    assert cm.percentages[0].tolist() == [50.0, 50.0, 0.0]
    again = ConfusionMatrix.from_csv(cm.to_csv())
    assert again.counts.tolist() == cm.counts.tolist()
    assert again.class_names == ["a", "b", "c"]


def test_confusion_matrix_rejects_bad_csv():
    with pytest.raises(CorruptRecord):
        ConfusionMatrix.from_csv("composer,a,b\na,1,x\nb,0,1\n")
    with pytest.raises(CorruptRecord):
        ConfusionMatrix.from_csv("composer,a,b\na,1,2\n")


def test_train_config_rejects_zero_epochs():
    with pytest.raises(ValidationError):
        TrainConfig(max_epochs=0)


# ---------- training ----------

@pytest.mark.parametrize("arch", ["voice", "voice-deep", "full", "harmonic", "hybrid"])
def test_reaches_full_training_accuracy(make_corpus, arch):
    corpus = make_corpus(per_class=10, classes=2)
    idx = list(range(len(corpus)))
    mc = config_for(corpus, arch, k=8, k2=8, harmonic_k=8, harmonic_k2=8)
    record, params = train(corpus, idx, idx, mc, quick(max_epochs=200, batch_size=4))
    assert record.best_val_accuracy == 1.0
    assert accuracy(evaluate(corpus, idx, params, mc), corpus.labels) == 1.0


def test_best_epoch_matches_replay(make_corpus):
    corpus = make_corpus(per_class=6, classes=3)
    idx = list(range(len(corpus)))
    mc = config_for(corpus, "voice")
    record, params = train(corpus, idx[::2], idx[1::2], mc, quick(max_epochs=6, lr=3e-2))
    assert len(record.val_accuracy) == 6
    assert record.best_epoch == replay_run(record)
    restored = accuracy(evaluate(corpus, idx[1::2], params, mc), corpus.labels[idx[1::2]])
    assert restored == record.best_val_accuracy
    assert restored >= record.val_accuracy[-1]


def test_divergence_is_reported_with_fold(make_corpus, monkeypatch):
    def explode(*args, **kwargs):
        raise NonFiniteValue("non-finite value in loss")

    monkeypatch.setattr(harness, "softmax_cross_entropy", explode)
    corpus = make_corpus(per_class=5)
    with pytest.raises(DivergenceError) as err:
        cross_validate(corpus, config_for(corpus), quick(), k=5)
    assert err.value.fold == 0
    assert str(err.value).startswith("fold 0:")


# ---------- cross-validation ----------

def test_cross_validation_pools_every_score(make_corpus):
    corpus = make_corpus(per_class=10, classes=2)
    result = cross_validate(corpus, config_for(corpus), quick(), k=5)
    assert len(result.runs) == 5
    assert result.confusion.total == 20
    tested = [i for r in result.runs for i in r.test_ids]
    assert sorted(tested) == sorted(corpus.paths)
    diag = np.trace(result.confusion.counts) / result.confusion.total
    assert result.overall_accuracy == diag
    assert result.mean_accuracy == pytest.approx(np.mean(result.fold_accuracies))
    assert result.model_config.C == 2


def _comparable(result):
    return [r.model_dump(exclude={"wall_time"}) for r in result.runs]


def test_cross_validation_is_reproducible(make_corpus):
    corpus = make_corpus(per_class=6, classes=2)
    a = cross_validate(corpus, config_for(corpus, "voice"), quick(seed=4), k=3)
    b = cross_validate(corpus, config_for(corpus, "voice"), quick(seed=4), k=3)
    assert _comparable(a) == _comparable(b)


def test_parallel_folds_match_sequential(make_corpus):
    corpus = make_corpus(per_class=6, classes=2)
    seq = cross_validate(corpus, config_for(corpus, "voice"), quick(), k=3, jobs=1)
    par = cross_validate(corpus, config_for(corpus, "voice"), quick(), k=3, jobs=3)
    assert _comparable(seq) == _comparable(par)


def test_single_class_corpus_is_trivially_correct(make_corpus):
    corpus = make_corpus(per_class=6, classes=1)
    result = cross_validate(corpus, config_for(corpus), quick(max_epochs=1), k=3)
    assert result.overall_accuracy == 1.0
    assert result.confusion.counts.tolist() == [[6]]


def test_subset_relabels_classes(make_corpus):
    corpus = make_corpus(per_class=5, classes=3, composers=["bach", "haydn", "mozart"])
    result = subset_experiment(corpus, [("mozart", None), ("bach", None)], config_for(corpus), quick(), k=5)
    assert result.confusion.class_names == ["mozart", "bach"]
    assert result.confusion.counts.shape == (2, 2)
    assert result.model_config.C == 2


def test_sweep_grid(make_corpus, tmp_path):
    corpus = make_corpus(per_class=4, classes=2)
    configs = [config_for(corpus, "histogram"), config_for(corpus, "voice")]
    sweep = sample_size_sweep(corpus, configs, quick(max_epochs=1), sizes=[2, 4], k=4)
    assert set(sweep.accuracy) == {"histogram", "voice"}
    assert all(len(v) == 2 for v in sweep.accuracy.values())
    assert sweep.results[("voice", 2)].model_config.s == 2
    text = write_sweep(tmp_path, sweep)
    assert text.splitlines()[0] == "architecture\t2\t4\tspearman"
    assert (tmp_path / "sweep.tsv").read_text() == text


def test_sweep_trend_is_nan_when_flat():
    sweep = harness.SweepResult(sizes=[1, 2, 3], accuracy={"a": [0.5, 0.5, 0.5], "b": [0.1, 0.2, 0.4]})
    trend = sweep.trend()
    assert np.isnan(trend["a"])
    assert trend["b"] == pytest.approx(1.0)


# ---------- results directory ----------

def test_write_results_layout(make_corpus, tmp_path):
    corpus = make_corpus(per_class=5, classes=2, composers=["haydn", "mozart"])
    corpus.labels[:] = [0] * 5 + [1] * 5
    result = cross_validate(corpus, config_for(corpus), quick(), k=5)
    out = tmp_path / "xval-histogram"
    summary = write_results(out, result, corpus, quick(), invocation=["xval", "--arch", "histogram"], save_models=True)

    for name in ["plan.json", "confusion.csv", "confusion_pct.csv", "summary.tsv", "experiment.json"]:
        assert (out / name).exists()
    assert sorted(p.name for p in (out / "runs").iterdir()) == [f"fold_{f:02d}.json" for f in range(5)]
    assert (out / "models" / "fold_03.npz").exists()
    sidecar = json.loads((out / "models" / "fold_03.json").read_text())
    assert sidecar["fold"] == 3

    lines = (out / "summary.tsv").read_text().splitlines()
    assert lines[0] == "composer\tscores\thistogram"
    assert lines[1].startswith("Haydn\t5\t")
    assert lines[-1] == f"Overall\t10\t{100 * result.overall_accuracy:.1f}"
    assert summary_table(summary) == (out / "summary.tsv").read_text()

    ((found_dir, loaded),) = find_summaries(tmp_path)
    assert found_dir == out
    assert loaded.invocation == ["xval", "--arch", "histogram"]
    assert loaded.train_config["seed"] == 0


def test_corrupt_summary_is_reported(tmp_path):
    (tmp_path / "run").mkdir()
    (tmp_path / "run" / "experiment.json").write_text("{not json")
    with pytest.raises(CorruptRecord):
        find_summaries(tmp_path)


def test_results_index(make_corpus, tmp_path):
    corpus = make_corpus(per_class=5, classes=2)
    result = cross_validate(corpus, config_for(corpus), quick(max_epochs=1), k=5)
    summary = write_results(tmp_path / "r", result, corpus, quick(max_epochs=1))
    db = tmp_path / "runs.db"
    record_experiment(summary, tmp_path / "r", result.runs, db_path=db)
    record_experiment(summary, tmp_path / "r", result.runs, db_path=db)
    rows = list_experiments(db)
    assert len(rows) == 1
    assert rows[0]["architecture"] == "histogram"
    assert rows[0]["class_count"] == 2
    assert list_experiments(db, experiment="sweep") == []
    assert list_experiments(tmp_path / "missing.db") == []
