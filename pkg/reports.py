"""
Report tables assembled from results directories: per-composer accuracy by
architecture, subset confusion matrices, the sample-size grid, and deltas
against the published benchmark numbers.
"""

import os
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from composers import corpus_order, display_name
from errors import CorruptRecord
from harness import ConfusionMatrix, ExperimentSummary, find_summaries
from model_zoo import Architecture

logger = logging.getLogger(__name__)

BENCHMARKS_PATH = os.getenv(
    "BENCHMARKS_PATH",
    os.path.join(os.path.dirname(os.path.abspath(__file__)), "benchmarks.json"),
)

ARCH_ORDER = [a.value for a in Architecture]


@dataclass
class ReportTable:
    title: str
    header: List[str]
    rows: List[List[str]] = field(default_factory=list)

    def to_text(self) -> str:
        widths = [max(len(str(r[i])) for r in [self.header] + self.rows) for i in range(len(self.header))]
        def fmt(row):
            first = str(row[0]).ljust(widths[0])
            rest = [str(c).rjust(w) for c, w in zip(row[1:], widths[1:])]
            return "  ".join([first] + rest)
        lines = [self.title, fmt(self.header), "-" * (sum(widths) + 2 * (len(widths) - 1))]
        lines += [fmt(r) for r in self.rows]
        return "\n".join(lines)


def load_benchmarks(path=BENCHMARKS_PATH) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _pct(v: Optional[float]) -> str:
    return "-" if v is None else f"{v:.1f}"


def accuracy_table(summaries: List[ExperimentSummary]) -> Optional[ReportTable]:
    """One column per architecture; the last run of an architecture wins."""
    by_arch: Dict[str, ExperimentSummary] = {}
    for s in summaries:
        if s.experiment == "xval":
            by_arch[s.architecture] = s
    if not by_arch:
        return None

    archs = [a for a in ARCH_ORDER if a in by_arch]
    counts: Dict[str, int] = {}
    for s in by_arch.values():
        counts.update(s.class_counts)

    table = ReportTable(title="Per-composer accuracy (%)", header=["Composer", "Scores"] + archs)
    for slug in corpus_order(list(counts), counts):
        row = [display_name(slug), str(counts[slug])]
        row += [_pct(by_arch[a].per_class_accuracy.get(slug)) for a in archs]
        table.rows.append(row)
    table.rows.append(["Overall", str(sum(counts.values()))] + [_pct(100 * by_arch[a].overall_accuracy) for a in archs])
    return table


def confusion_table(result_dir, summary: ExperimentSummary) -> ReportTable:
    path = Path(result_dir) / "confusion.csv"
    if not path.exists():
        raise CorruptRecord(f"{result_dir}: experiment.json present but confusion.csv missing")
    cm = ConfusionMatrix.from_csv(path.read_text(encoding="utf-8"))
    names = [display_name(n) for n in cm.class_names]
    table = ReportTable(
        title=f"Confusion matrix, {summary.architecture} on {', '.join(names)} (row %)",
        header=["Composer"] + names,
    )
    for name, row in zip(names, cm.percentages):
        table.rows.append([name] + [f"{v:.1f}" for v in row])
    return table


def sweep_table(path) -> ReportTable:
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    rows = [line.split("\t") for line in lines]
    if not rows or rows[0][0] != "architecture" or any(len(r) != len(rows[0]) for r in rows):
        raise CorruptRecord(f"{path}: malformed sweep table")
    return ReportTable(
        title="Accuracy (%) by sample size s",
        header=["Architecture"] + [f"s={s}" for s in rows[0][1:-1]] + ["spearman"],
        rows=rows[1:],
    )


def compare_table(summaries: List[ExperimentSummary], benchmarks: dict) -> Optional[ReportTable]:
    """Our overall and per-composer accuracy next to the published figures."""
    published = benchmarks.get("full_corpus", {})
    archs = published.get("architectures", [])
    by_arch = {s.architecture: s for s in summaries if s.experiment == "xval" and s.architecture in archs}
    if not by_arch:
        return None

    table = ReportTable(title="Against published accuracy (ours / published / delta)", header=["Composer"])
    cols = [a for a in ARCH_ORDER if a in by_arch]
    table.header += cols
    counts: Dict[str, int] = {}
    for s in by_arch.values():
        counts.update(s.class_counts)

    def cell(ours, theirs):
        if ours is None or theirs is None:
            return "-"
        return f"{ours:.1f}/{theirs:.1f}/{ours - theirs:+.1f}"

    per_composer = published.get("per_composer", {})
    for slug in corpus_order(list(counts), counts):
        row = [display_name(slug)]
        for a in cols:
            ref = per_composer.get(slug)
            row.append(cell(by_arch[a].per_class_accuracy.get(slug), ref[archs.index(a)] if ref else None))
        table.rows.append(row)
    overall = published.get("overall", [])
    table.rows.append(["Overall"] + [
        cell(100 * by_arch[a].overall_accuracy, overall[archs.index(a)] if overall else None) for a in cols
    ])
    return table


def subset_benchmark(summary: ExperimentSummary, benchmarks: dict) -> Optional[dict]:
    wanted = set(summary.class_names)
    for name, bench in benchmarks.get("subsets", {}).items():
        composers = {sel.split(":")[0] for sel in bench["selectors"]}
        if composers == wanted:
            return {"name": name, **bench}
    return None


def build_report(results_dir, compare: bool = False, benchmarks: Optional[dict] = None) -> List[ReportTable]:
    found = find_summaries(results_dir)
    summaries = [s for _, s in found]
    tables: List[ReportTable] = []

    table = accuracy_table(summaries)
    if table:
        tables.append(table)

    if compare:
        benchmarks = benchmarks or load_benchmarks()
        table = compare_table(summaries, benchmarks)
        if table:
            tables.append(table)

    for result_dir, summary in found:
        if summary.experiment != "subset":
            continue
        table = confusion_table(result_dir, summary)
        if compare:
            bench = subset_benchmark(summary, benchmarks)
            if bench:
                order = [sel.split(":")[0] for sel in bench["selectors"]]
                table.rows.append(["published diagonal"] + [
                    _pct(bench["diagonal"][order.index(n)]) if n in order else "-" for n in summary.class_names
                ])
        tables.append(table)

    for path in sorted(Path(results_dir).rglob("sweep.tsv")):
        tables.append(sweep_table(path))

    logger.debug(f"report for {results_dir}: {len(found)} experiments, {len(tables)} tables")
    return tables
