"""
Corpus-scale checks. They need the real KernScores-derived corpus listed in
the manifest named by KERNCLF_MANIFEST and are only collected with --run-slow.
"""

import os

import pytest

from harness import TrainConfig, cross_validate, majority_baseline, sample_size_sweep, subset_experiment
from model_zoo import ModelConfig
from tensor_encoder import build_vocab_from_scores, encode_corpus, load_manifest, parse_corpus

MANIFEST = os.getenv("KERNCLF_MANIFEST")

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(not MANIFEST, reason="KERNCLF_MANIFEST is not set"),
]


@pytest.fixture(scope="module")
def corpus():
    entries = load_manifest(MANIFEST)
    parsed = parse_corpus(entries, progress=True)
    vocab = build_vocab_from_scores(zip(parsed, (e.duration_scale for e in entries)))
    return vocab, encode_corpus(entries, vocab, parsed=parsed)


def _config(vocab, corpus, arch):
    return ModelConfig.for_architecture(arch, N=vocab.N, D=vocab.D, P=vocab.P, C=corpus.C)


def test_string_quartet_majority_baseline(corpus):
    _, encoded = corpus
    quartets = encoded.select([("haydn", "quartets"), ("mozart", "quartets")])
    assert majority_baseline(quartets) == pytest.approx(209 / 291, abs=1e-3)


def test_three_composer_ordering(corpus):
    vocab, encoded = corpus
    selectors = [("bach", "chorales"), ("haydn", "quartets"), ("beethoven", "quartets")]
    config = TrainConfig(progress=True)
    hybrid = subset_experiment(encoded, selectors, _config(vocab, encoded, "hybrid"), config, jobs=os.cpu_count() or 1)
    histogram = subset_experiment(encoded, selectors, _config(vocab, encoded, "histogram"), config)
    assert hybrid.overall_accuracy > histogram.overall_accuracy
    assert hybrid.overall_accuracy >= 0.90


@pytest.mark.parametrize("arch,target", [("histogram", 0.642), ("hybrid", 0.817)])
def test_full_corpus_accuracy(corpus, arch, target):
    vocab, encoded = corpus
    result = cross_validate(encoded, _config(vocab, encoded, arch), TrainConfig(progress=True), jobs=os.cpu_count() or 1)
    assert abs(result.overall_accuracy - target) <= 0.03


def test_accuracy_grows_with_sample_size(corpus):
    vocab, encoded = corpus
    configs = [_config(vocab, encoded, a) for a in ("histogram", "voice-deep", "hybrid")]
    sweep = sample_size_sweep(encoded, configs, TrainConfig(), jobs=os.cpu_count() or 1)
    assert all(rho > 0 for rho in sweep.trend().values())
