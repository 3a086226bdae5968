"""
Experiment harness: stratified k-fold plans, mini-batch Adam training with
retrospective early stopping, cross-validation, subset experiments, the
sample-size sweep and the results directory.
"""

import os
import csv
import time
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.stats import spearmanr
from sklearn.metrics import confusion_matrix
from tqdm import tqdm

from artifacts import atomic_write_text
from autodiff import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, ADAM_LR, AdamState, Tape, adam_step, softmax_cross_entropy
from composers import corpus_order, display_name
from errors import CorruptRecord, DivergenceError, NonFiniteValue, TooFewScores
from model_zoo import ModelConfig, forward, init_params, predict, save_model
from tensor_encoder import EncodedCorpus

logger = logging.getLogger(__name__)

TRAIN_MAX_EPOCHS = int(os.getenv("TRAIN_MAX_EPOCHS", 100))
TRAIN_BATCH_SIZE = int(os.getenv("TRAIN_BATCH_SIZE", 32))
TRAIN_MICRO_BATCH = int(os.getenv("TRAIN_MICRO_BATCH", 4))

DEFAULT_FOLDS = 10
SWEEP_SIZES = [10, 20, 50, 100, 250, 500]


# ========== Folds ==========

class FoldPlan(BaseModel):
    seed: int
    k: int
    ids: List[str]
    folds: List[int]

    def members(self, fold: int) -> List[int]:
        return [i for i, f in enumerate(self.folds) if f == fold]

    def fold_sizes(self) -> List[int]:
        return [self.folds.count(f) for f in range(self.k)]

    def roles(self, test: int) -> Tuple[List[int], List[int], List[int]]:
        """(train, validation, test) positions; validation is the next fold."""
        val = (test + 1) % self.k
        train = [i for i, f in enumerate(self.folds) if f not in (test, val)]
        return train, self.members(val), self.members(test)


def kfold_split(ids: Sequence, k: int = DEFAULT_FOLDS, seed: int = 0, labels: Optional[Sequence[int]] = None) -> FoldPlan:
    """
    Shuffle each class with a seeded generator, then deal all classes
    round-robin into k folds with one running counter, so fold sizes differ
    by at most one and every fold gets a share of every class.
    """
    ids = [str(i) for i in ids]
    if k < 2:
        raise TooFewScores(f"need at least 2 folds, got {k}")
    if len(ids) < k:
        raise TooFewScores(f"{len(ids)} scores cannot fill {k} folds")
    labels = np.zeros(len(ids), dtype=np.int64) if labels is None else np.asarray(labels)

    rng = np.random.default_rng(seed)
    folds = [0] * len(ids)
    counter = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        for i in rng.permutation(members):
            folds[int(i)] = counter % k
            counter += 1
    return FoldPlan(seed=seed, k=k, ids=ids, folds=folds)


# ========== Training ==========

class TrainConfig(BaseModel):
    max_epochs: int = Field(TRAIN_MAX_EPOCHS, ge=1)
    batch_size: int = Field(TRAIN_BATCH_SIZE, ge=1)
    micro_batch: int = Field(TRAIN_MICRO_BATCH, ge=1)
    lr: float = Field(ADAM_LR, gt=0)
    beta1: float = Field(ADAM_BETA1, ge=0, lt=1)
    beta2: float = Field(ADAM_BETA2, ge=0, lt=1)
    eps: float = Field(ADAM_EPS, gt=0)
    seed: int = 0
    progress: bool = False


class RunRecord(BaseModel):
    fold: Optional[int] = None
    architecture: str
    seed: int
    arch_config: dict
    train_config: dict
    train_loss: List[float] = []
    val_accuracy: List[float] = []
    best_epoch: int = 0
    best_val_accuracy: float = 0.0
    test_accuracy: Optional[float] = None
    test_ids: List[str] = []
    test_labels: List[int] = []
    test_predictions: List[int] = []
    wall_time: float = 0.0


def accuracy(predictions, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(np.asarray(predictions) == labels))


def evaluate(corpus: EncodedCorpus, indices: Sequence[int], params, config: ModelConfig, micro_batch: int = TRAIN_MICRO_BATCH) -> np.ndarray:
    """Predicted class per score, computed without recording."""
    preds = []
    indices = list(indices)
    for start in range(0, len(indices), micro_batch):
        X, _ = corpus.batch(indices[start:start + micro_batch], config.s)
        preds.append(predict(forward(X, params, config)))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def _snapshot(params) -> Dict[str, np.ndarray]:
    return {name: p.values.copy() for name, p in params.items()}


def train(
    corpus: EncodedCorpus,
    train_idx: Sequence[int],
    val_idx: Sequence[int],
    model_config: ModelConfig,
    config: TrainConfig,
    fold: Optional[int] = None,
) -> Tuple[RunRecord, Dict]:
    """
    Mini-batch Adam on the mean cross-entropy. Each mini-batch is evaluated in
    micro-batches whose gradients accumulate with weight |micro|/|batch|.
    Validation accuracy is measured after every epoch and the parameters of
    the best epoch (earliest on ties) are returned.
    """
    overlap = set(train_idx) & set(val_idx)
    if overlap and list(train_idx) != list(val_idx):
        logger.warning(f"⚠️ train and validation sets share {len(overlap)} scores")
    if len(train_idx) == 0:
        raise TooFewScores("training set is empty")

    started = time.perf_counter()
    params = init_params(model_config, seed=config.seed)
    state = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    rng = np.random.default_rng(config.seed)
    record = RunRecord(
        fold=fold,
        architecture=model_config.architecture.value,
        seed=config.seed,
        arch_config=model_config.model_dump(mode="json"),
        train_config=config.model_dump(mode="json", exclude={"progress"}),
    )
    val_labels = corpus.labels[list(val_idx)]
    best_params = _snapshot(params)
    best_acc = -1.0

    label = f"fold {fold}" if fold is not None else "train"
    epochs = tqdm(range(1, config.max_epochs + 1), desc=label, unit="epoch", disable=not config.progress)
    for epoch in epochs:
        order = rng.permutation(np.asarray(train_idx))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            for p in params.values():
                p.zero_grad()
            batch_loss = 0.0
            for ms in range(0, len(batch), config.micro_batch):
                micro = batch[ms:ms + config.micro_batch]
                X, y = corpus.batch(micro, model_config.s)
                weight = len(micro) / len(batch)
                try:
                    with Tape() as tape:
                        loss = softmax_cross_entropy(forward(X, params, model_config), y)
                    tape.backward(loss, seed=weight)
                except NonFiniteValue as e:
                    raise DivergenceError(f"epoch {epoch}: {e}", fold=fold, epoch=epoch) from e
                batch_loss += float(loss.values) * weight

            adam_step(params, state)
            for name, p in params.items():
                if not np.all(np.isfinite(p.values)):
                    raise DivergenceError(f"epoch {epoch}: parameter {name} became non-finite", fold=fold, epoch=epoch)
            epoch_loss += batch_loss * len(batch)

        mean_loss = epoch_loss / len(order)
        if not np.isfinite(mean_loss):
            raise DivergenceError(f"epoch {epoch}: loss is {mean_loss}", fold=fold, epoch=epoch)
        val_acc = accuracy(evaluate(corpus, val_idx, params, model_config, config.micro_batch), val_labels)
        record.train_loss.append(mean_loss)
        record.val_accuracy.append(val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = _snapshot(params)
            record.best_epoch = epoch
        epochs.set_postfix(loss=f"{mean_loss:.4f}", val=f"{val_acc:.3f}")

    record.best_val_accuracy = best_acc
    record.wall_time = time.perf_counter() - started
    for name, p in params.items():
        p.values[...] = best_params[name]
    logger.debug(f"{label}: best epoch {record.best_epoch} val={best_acc:.3f}")
    return record, params


# ========== Confusion matrices ==========

@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_names: List[str]

    @classmethod
    def from_predictions(cls, labels, predictions, class_names: List[str]) -> "ConfusionMatrix":
        counts = confusion_matrix(labels, predictions, labels=list(range(len(class_names))))
        return cls(counts=counts.astype(np.int64), class_names=list(class_names))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def percentages(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            pct = np.where(rows > 0, 100.0 * self.counts / np.maximum(rows, 1), 0.0)
        return pct

    @property
    def overall_accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    def per_class_accuracy(self) -> Dict[str, float]:
        """Diagonal of the row-normalized percentages."""
        return {name: float(v) for name, v in zip(self.class_names, np.diag(self.percentages))}

    def to_csv(self, percentages: bool = False) -> str:
        values = self.percentages if percentages else self.counts
        lines = [",".join(["composer"] + self.class_names)]
        for name, row in zip(self.class_names, values):
            cells = [f"{v:.1f}" for v in row] if percentages else [str(int(v)) for v in row]
            lines.append(",".join([name] + cells))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "ConfusionMatrix":
        rows = list(csv.reader(text.strip().splitlines()))
        try:
            names = rows[0][1:]
            counts = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
        except (IndexError, ValueError) as e:
            raise CorruptRecord(f"malformed confusion matrix: {e}") from e
        if counts.shape != (len(names), len(names)):
            raise CorruptRecord(f"confusion matrix is {counts.shape}, expected {len(names)}x{len(names)}")
        return cls(counts=counts, class_names=names)


# ========== Cross-validation ==========

@dataclass
class CrossValResult:
    runs: List[RunRecord]
    confusion: ConfusionMatrix
    plan: FoldPlan
    model_config: ModelConfig
    models: Dict[int, Dict] = field(default_factory=dict)

    @property
    def fold_accuracies(self) -> List[float]:
        return [r.test_accuracy for r in self.runs]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def overall_accuracy(self) -> float:
        return self.confusion.overall_accuracy


def _run_fold(corpus, plan, fold, model_config, config: TrainConfig):
    train_idx, val_idx, test_idx = plan.roles(fold)
    fold_config = config.model_copy(update={"seed": config.seed + fold})
    try:
        record, params = train(corpus, train_idx, val_idx, model_config, fold_config, fold=fold)
    except DivergenceError as e:
        if e.fold is None:
            e.fold = fold
        raise
    preds = evaluate(corpus, test_idx, params, model_config, config.micro_batch)
    labels = corpus.labels[test_idx]
    record.test_accuracy = accuracy(preds, labels)
    record.test_ids = [plan.ids[i] for i in test_idx]
    record.test_labels = [int(v) for v in labels]
    record.test_predictions = [int(v) for v in preds]
    logger.info(f"🧪 fold {fold}: test {100 * record.test_accuracy:.1f}% (best epoch {record.best_epoch})")
    return record, params


def cross_validate(
    corpus: EncodedCorpus,
    model_config: ModelConfig,
    config: TrainConfig,
    k: int = DEFAULT_FOLDS,
    jobs: int = 1,
) -> CrossValResult:
    """
    k independent training runs following the fold plan's roles. Test
    predictions are pooled into one confusion matrix.
    """
    model_config = model_config.model_copy(update={"C": corpus.C, "P": corpus.P})
    ids = corpus.paths or [str(i) for i in range(len(corpus))]
    plan = kfold_split(ids, k=k, seed=config.seed, labels=corpus.labels)

    logger.info(f"📊 {model_config.architecture.value}: {len(corpus)} scores, {corpus.C} classes, {k} folds, s={model_config.s}")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(
                lambda f: _run_fold(corpus, plan, f, model_config, config.model_copy(update={"progress": False})),
                range(k),
            ))
    else:
        outcomes = [_run_fold(corpus, plan, f, model_config, config) for f in range(k)]

    runs = [r for r, _ in outcomes]
    labels = np.concatenate([r.test_labels for r in runs])
    preds = np.concatenate([r.test_predictions for r in runs])
    confusion = ConfusionMatrix.from_predictions(labels, preds, corpus.class_names)
    result = CrossValResult(
        runs=runs,
        confusion=confusion,
        plan=plan,
        model_config=model_config,
        models={r.fold: p for r, p in outcomes},
    )
    logger.info(f"✅ {model_config.architecture.value}: overall {100 * result.overall_accuracy:.1f}%")
    return result


def subset_experiment(
    corpus: EncodedCorpus,
    selectors: Sequence[Tuple[str, Optional[str]]],
    model_config: ModelConfig,
    config: TrainConfig,
    k: int = DEFAULT_FOLDS,
    jobs: int = 1,
) -> CrossValResult:
    """Cross-validate on the selected composers with densely relabelled classes."""
    sub = corpus.select(selectors)
    logger.info(f"📊 subset {', '.join(sub.class_names)}: {len(sub)} scores")
    return cross_validate(sub, model_config, config, k=k, jobs=jobs)


@dataclass
class SweepResult:
    sizes: List[int]
    accuracy: Dict[str, List[float]]
    results: Dict[Tuple[str, int], CrossValResult] = field(default_factory=dict)

    def trend(self) -> Dict[str, float]:
        """Spearman correlation between s and accuracy per architecture."""
        out = {}
        for arch, accs in self.accuracy.items():
            if len(set(accs)) < 2:
                out[arch] = float("nan")
                continue
            rho, _ = spearmanr(self.sizes, accs)
            out[arch] = float(rho)
        return out


def sample_size_sweep(
    corpus: EncodedCorpus,
    model_configs: Sequence[ModelConfig],
    config: TrainConfig,
    sizes: Sequence[int] = SWEEP_SIZES,
    k: int = DEFAULT_FOLDS,
    jobs: int = 1,
) -> SweepResult:
    if any(s < 1 for s in sizes):
        raise ValueError(f"sample sizes must be positive: {list(sizes)}")
    sweep = SweepResult(sizes=list(sizes), accuracy={})
    for mc in model_configs:
        arch = mc.architecture.value
        sweep.accuracy[arch] = []
        for s in sizes:
            result = cross_validate(corpus, mc.model_copy(update={"s": s}), config, k=k, jobs=jobs)
            sweep.accuracy[arch].append(result.overall_accuracy)
            sweep.results[(arch, s)] = result
    return sweep


def majority_baseline(labels) -> float:
    """Accuracy of always predicting the most frequent class."""
    if isinstance(labels, EncodedCorpus):
        labels = labels.labels
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return 0.0
    return float(np.bincount(labels).max() / labels.size)


# ========== Results directory ==========

class ExperimentSummary(BaseModel):
    experiment: str
    architecture: str
    seed: int
    sample_size: int
    folds: int
    invocation: List[str] = []
    vocab_sha256: str = ""
    class_names: List[str]
    class_counts: Dict[str, int]
    fold_accuracies: List[float]
    overall_accuracy: float
    per_class_accuracy: Dict[str, float]
    arch_config: dict
    train_config: dict
    created_at: str = ""


def summary_table(summary: ExperimentSummary) -> str:
    """Per-composer accuracy rows ordered by score count, then Overall."""
    lines = ["composer\tscores\t" + summary.architecture]
    for slug in corpus_order(summary.class_names, summary.class_counts):
        lines.append(f"{display_name(slug)}\t{summary.class_counts[slug]}\t{summary.per_class_accuracy[slug]:.1f}")
    lines.append(f"Overall\t{sum(summary.class_counts.values())}\t{100 * summary.overall_accuracy:.1f}")
    return "\n".join(lines) + "\n"


def write_results(
    out_dir,
    result: CrossValResult,
    corpus: EncodedCorpus,
    config: TrainConfig,
    experiment: str = "xval",
    invocation: Optional[List[str]] = None,
    save_models: bool = False,
) -> ExperimentSummary:
    out = Path(out_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)

    summary = ExperimentSummary(
        experiment=experiment,
        architecture=result.model_config.architecture.value,
        seed=config.seed,
        sample_size=result.model_config.s,
        folds=result.plan.k,
        invocation=invocation or [],
        vocab_sha256=corpus.vocab_digest,
        class_names=list(corpus.class_names),
        class_counts=corpus.class_counts(),
        fold_accuracies=result.fold_accuracies,
        overall_accuracy=result.overall_accuracy,
        per_class_accuracy=result.confusion.per_class_accuracy(),
        arch_config=result.model_config.model_dump(mode="json"),
        train_config=config.model_dump(mode="json", exclude={"progress"}),
        created_at=datetime.now().isoformat(timespec="seconds"),
    )

    for run in result.runs:
        atomic_write_text(out / "runs" / f"fold_{run.fold:02d}.json", run.model_dump_json(indent=2) + "\n")
    atomic_write_text(out / "plan.json", result.plan.model_dump_json(indent=2) + "\n")
    atomic_write_text(out / "confusion.csv", result.confusion.to_csv())
    atomic_write_text(out / "confusion_pct.csv", result.confusion.to_csv(percentages=True))
    atomic_write_text(out / "summary.tsv", summary_table(summary))
    atomic_write_text(out / "experiment.json", summary.model_dump_json(indent=2) + "\n")

    if save_models:
        for fold, params in result.models.items():
            save_model(
                out / "models" / f"fold_{fold:02d}.npz",
                result.model_config,
                params,
                vocab_digest=corpus.vocab_digest,
                extra={"fold": fold, "seed": config.seed + fold},
            )
    logger.info(f"✅ results written to {out}")
    return summary


def write_sweep(out_dir, sweep: SweepResult) -> str:
    header = "architecture\t" + "\t".join(str(s) for s in sweep.sizes) + "\tspearman"
    trend = sweep.trend()
    lines = [header]
    for arch, accs in sweep.accuracy.items():
        cells = "\t".join(f"{100 * a:.1f}" for a in accs)
        lines.append(f"{arch}\t{cells}\t{trend[arch]:.3f}")
    text = "\n".join(lines) + "\n"
    atomic_write_text(Path(out_dir) / "sweep.tsv", text)
    return text


def load_summary(path) -> ExperimentSummary:
    path = Path(path)
    try:
        return ExperimentSummary.model_validate_json(path.read_text(encoding="utf-8"))
    except (ValueError, OSError) as e:
        raise CorruptRecord(f"{path}: {e}") from e


def find_summaries(results_dir) -> List[Tuple[Path, ExperimentSummary]]:
    root = Path(results_dir)
    return [(p.parent, load_summary(p)) for p in sorted(root.rglob("experiment.json"))]


def replay_run(record: RunRecord) -> int:
    """The epoch retrospective selection should have chosen: earliest maximum."""
    return int(np.argmax(record.val_accuracy)) + 1 if record.val_accuracy else 0
