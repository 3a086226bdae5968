import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from tensor_encoder import EncodedCorpus, ScoreTensor  # noqa: E402

# First six beats of Haydn Op. 33 No. 1, lines 23-30 of the file.
QUARTET_LINES = [
    "2..r\t2..r\t2..r\t2..r",
    "8r\t8r\t8r\t8dd",
    "=1\t=1\t=1\t=1",
    "1r\t1r\t8r\t4dd",
    ".\t.\t8f# 8a\t.",
    ".\t.\t8a 8f#\t8ff#",
    ".\t.\t8a 8f#\t16ee",
    ".\t.\t.\t16dd",
]

QUARTET_TEXT = "\n".join(["**kern\t**kern\t**kern\t**kern", "*M3/4\t*M3/4\t*M3/4\t*M3/4"] + QUARTET_LINES + ["*-\t*-\t*-\t*-"]) + "\n"


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run corpus-scale reproductions")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def quartet_text():
    return QUARTET_TEXT


@pytest.fixture
def kern_corpus(tmp_path):
    """
    Write small one-spine scores and a manifest. Takes {composer: [score text, ...]}
    and returns the manifest path.
    """
    def write(scores: dict, scale: str = "1", collection: str = "works"):
        lines = ["path\tcomposer\tcollection\tduration_scale"]
        for composer, texts in scores.items():
            folder = tmp_path / "kern" / composer
            folder.mkdir(parents=True, exist_ok=True)
            for i, text in enumerate(texts):
                (folder / f"{i:03d}.krn").write_text(text, encoding="utf-8")
            lines.append(f"kern/{composer}/*.krn\t{composer}\t{collection}\t{scale}")
        manifest = tmp_path / "manifest.tsv"
        manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return manifest

    return write


def synthetic_corpus(per_class=10, classes=2, T=12, P=2, N=10, D=4, seed=0, composers=None):
    """
    Binary tensors where class c plays pitches from its own band with
    note-value index c, so the classes are separable.
    """
    rng = np.random.default_rng(seed)
    F = N + D + 1
    names = composers or [f"composer-{c}" for c in range(classes)]
    tensors, labels, paths = [], [], []
    for c in range(classes):
        lo = 2 + 3 * c
        for i in range(per_class):
            x = np.zeros((T, P, F), dtype=np.uint8)
            for t in range(T):
                for p in range(P):
                    if rng.random() < 0.2:
                        x[t, p, N + D] = 1
                        continue
                    x[t, p, lo + rng.integers(0, 3)] = 1
                    x[t, p, N + (c % D)] = 1
            tensors.append(ScoreTensor(data=x, label=c))
            labels.append(c)
            paths.append(f"{names[c]}/{i:03d}.krn")
    return EncodedCorpus(
        tensors=tensors,
        labels=np.array(labels, dtype=np.int64),
        class_names=list(names),
        paths=paths,
        composers=[names[c] for c in labels],
        collections=["works"] * len(labels),
        vocab_digest="synthetic",
    )


@pytest.fixture
def make_corpus():
    return synthetic_corpus
