"""
kernclf: build vocabularies, encode corpora, run cross-validated experiments
and render their results.

Every option can be set from the environment: KERNCLF_<COMMAND>_<OPTION>
(e.g. KERNCLF_XVAL_SEED), and the shared paths from KERNCLF_MANIFEST,
KERNCLF_VOCAB, KERNCLF_CACHE and KERNCLF_OUT.
"""

import os
import sys
import logging
from fractions import Fraction
from pathlib import Path
from typing import List, Optional

import click
from dotenv import load_dotenv

load_dotenv()

from pydantic import BaseModel, ValidationError

import results_db
from composers import display_name, get_composer, parse_selectors
from errors import CacheFormatError, InputError, KernClassifierError
from harness import (
    DEFAULT_FOLDS,
    SWEEP_SIZES,
    TrainConfig,
    cross_validate,
    majority_baseline,
    sample_size_sweep,
    subset_experiment,
    summary_table,
    write_results,
    write_sweep,
)
from kern_parser import CellKind, parse_file
from model_zoo import Architecture, ModelConfig, describe
from report_pdf import write_report_pdf
from reports import build_report
from tensor_encoder import (
    SAMPLE_SIZE,
    build_vocab_from_scores,
    decode_score,
    encode_corpus,
    encode_score,
    load_cache,
    load_manifest,
    load_vocab,
    parse_corpus,
    save_cache,
    save_vocab,
)

logger = logging.getLogger("kernclf")

LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
ARCH_CHOICES = [a.value for a in Architecture]


class WorkspaceConfig(BaseModel):
    manifest: Optional[Path] = None
    vocab: Optional[Path] = None
    cache: Optional[Path] = None
    out: Optional[Path] = None
    seed: int = 0
    train: TrainConfig = TrainConfig()
    model_overrides: dict = {}

    def require(self, *names: str):
        for name in names:
            path = getattr(self, name)
            if path is None:
                raise InputError(f"--{name} is required")
            if name != "out" and not path.exists():
                raise InputError(f"{name} {path} does not exist")


class KernGroup(click.Group):
    """Maps library exceptions onto exit codes: 2 for bad input, 3 for runtime failures."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except KernClassifierError as e:
            click.echo(f"❌ {e}", err=True)
            ctx.exit(e.exit_code)
        except ValidationError as e:
            click.echo(f"❌ invalid configuration: {e}", err=True)
            ctx.exit(2)


def _progress(ctx) -> bool:
    return not ctx.obj.get("quiet") and sys.stderr.isatty()


def _invocation(ctx) -> List[str]:
    args = [ctx.info_name]
    for name, value in sorted(ctx.params.items()):
        if value is None or value is False:
            continue
        flag = "--" + name.replace("_", "-")
        if value is True:
            args.append(flag)
        elif isinstance(value, (list, tuple)):
            args += [f"{flag}={v}" for v in value]
        else:
            args.append(f"{flag}={value}")
    return args


def _banner(title: str):
    click.echo("=" * 60)
    click.echo(title)
    click.echo("=" * 60)


def _load_workspace(ctx, **fields) -> WorkspaceConfig:
    train = TrainConfig(**{
        k: v for k, v in {
            "max_epochs": fields.pop("epochs", None),
            "lr": fields.pop("lr", None),
            "batch_size": fields.pop("batch_size", None),
            "micro_batch": fields.pop("micro_batch", None),
            "seed": fields.get("seed"),
        }.items() if v is not None
    }, progress=_progress(ctx))
    return WorkspaceConfig(train=train, **{k: v for k, v in fields.items() if v is not None})


def _load_corpus(ws: WorkspaceConfig):
    ws.require("vocab", "cache")
    vocab = load_vocab(ws.vocab)
    corpus = load_cache(ws.cache)
    if corpus.vocab_digest and corpus.vocab_digest != vocab.digest():
        raise CacheFormatError(f"{ws.cache} was encoded with a different vocabulary than {ws.vocab}")
    if len(corpus) == 0:
        raise CacheFormatError(f"{ws.cache} holds no scores")
    return vocab, corpus


def _model_config(arch: str, vocab, corpus, s: int, overrides: dict) -> ModelConfig:
    return ModelConfig.for_architecture(arch, N=vocab.N, D=vocab.D, P=vocab.P, C=corpus.C, s=s, **overrides)


def _record(out: Path, summary, runs):
    db_path = os.getenv("RESULTS_DB") or out.parent / "runs.db"
    results_db.record_experiment(summary, out, runs=runs, db_path=db_path)


# ========== Shared options ==========

manifest_option = click.option("--manifest", type=click.Path(path_type=Path), envvar="KERNCLF_MANIFEST", help="Corpus manifest (TSV).")
vocab_option = click.option("--vocab", type=click.Path(path_type=Path), envvar="KERNCLF_VOCAB", default="vocab.json", show_default=True)
cache_option = click.option("--cache", type=click.Path(path_type=Path), envvar="KERNCLF_CACHE", default="corpus.npz", show_default=True)
out_option = click.option("--out", type=click.Path(path_type=Path), envvar="KERNCLF_OUT", help="Results directory.")
seed_option = click.option("--seed", type=int, default=0, show_default=True)


def training_options(f):
    for opt in reversed([
        click.option("--sample-size", type=int, default=SAMPLE_SIZE, show_default=True, help="Window length s."),
        click.option("--epochs", type=int, default=None, help="Max epochs (default TRAIN_MAX_EPOCHS)."),
        click.option("--lr", type=float, default=None, help="Adam learning rate."),
        click.option("--batch-size", type=int, default=None),
        click.option("--micro-batch", type=int, default=None, help="Scores per gradient-accumulation step."),
        click.option("--folds", type=int, default=DEFAULT_FOLDS, show_default=True),
        click.option("--jobs", type=int, default=1, show_default=True, help="Folds trained in parallel."),
        click.option("--k", "k", type=int, default=None, help="First-layer width."),
        click.option("--k2", "k2", type=int, default=None, help="Second-layer width."),
        click.option("--n", "n", type=int, default=None, help="Time window."),
        click.option("--j", "j", type=int, default=None, help="Pitch window."),
    ]):
        f = opt(f)
    return f


def _split_training(params: dict) -> tuple:
    overrides = {name: params.pop(name) for name in ("k", "k2", "n", "j")}
    run = {name: params.pop(name) for name in ("sample_size", "folds", "jobs")}
    return overrides, run


# ========== Commands ==========

@click.group(cls=KernGroup)
@click.option("--quiet", is_flag=True, help="No progress bars, warnings only.")
@click.pass_context
def cli(ctx, quiet):
    """Composer attribution from **kern scores."""
    logging.basicConfig(level=logging.WARNING if quiet else LOG_LEVEL, format="%(message)s")
    ctx.ensure_object(dict)
    ctx.obj["quiet"] = quiet


@cli.command("build-vocab")
@manifest_option
@vocab_option
@click.pass_context
def cmd_build_vocab(ctx, manifest, vocab):
    """Scan the corpus and write the note-value vocabulary."""
    ws = WorkspaceConfig(manifest=manifest, vocab=vocab)
    ws.require("manifest")
    entries = load_manifest(ws.manifest)
    parsed = parse_corpus(entries, progress=_progress(ctx))
    result = build_vocab_from_scores(zip(parsed, (e.duration_scale for e in entries)))
    save_vocab(result, ws.vocab)
    click.echo(f"✅ {len(entries)} scores -> {ws.vocab}: N={result.N} D={result.D} P={result.P} pitch_base={result.pitch_base}")


@cli.command("encode")
@manifest_option
@vocab_option
@cache_option
@click.option("--permissive", is_flag=True, help="Map unseen values to the nearest vocabulary entry.")
@click.pass_context
def cmd_encode(ctx, manifest, vocab, cache, permissive):
    """Encode every manifest score into the binary tensor cache."""
    ws = WorkspaceConfig(manifest=manifest, vocab=vocab, cache=cache)
    ws.require("manifest", "vocab")
    entries = load_manifest(ws.manifest)
    for slug in sorted({e.composer for e in entries}):
        if get_composer(slug) is None:
            logger.warning(f"⚠️ composer {slug!r} is not in the registry")
    voc = load_vocab(ws.vocab)
    corpus = encode_corpus(entries, voc, permissive=permissive, progress=_progress(ctx))
    save_cache(corpus, ws.cache)
    counts = corpus.class_counts()
    click.echo(f"✅ {len(corpus)} scores, {corpus.C} composers -> {ws.cache}")
    for slug, n in counts.items():
        click.echo(f"  {display_name(slug):<16} {n:>5}")


@cli.command("xval")
@vocab_option
@cache_option
@out_option
@seed_option
@click.option("--arch", type=click.Choice(ARCH_CHOICES), default="hybrid", show_default=True)
@training_options
@click.option("--save-models", is_flag=True, help="Keep each fold's best checkpoint.")
@click.pass_context
def cmd_xval(ctx, vocab, cache, out, seed, arch, save_models, **params):
    """10-fold cross-validation of one architecture on the whole corpus."""
    overrides, run = _split_training(params)
    ws = _load_workspace(ctx, vocab=vocab, cache=cache, out=out or Path(f"results/xval-{arch}"), seed=seed, model_overrides=overrides, **params)
    voc, corpus = _load_corpus(ws)
    mc = _model_config(arch, voc, corpus, run["sample_size"], ws.model_overrides)

    _banner(f"Cross-validation: {arch}, {len(corpus)} scores, {corpus.C} composers, seed {seed}")
    result = cross_validate(corpus, mc, ws.train, k=run["folds"], jobs=run["jobs"])
    summary = write_results(ws.out, result, corpus, ws.train, experiment="xval",
                            invocation=_invocation(ctx), save_models=save_models)
    _record(ws.out, summary, result.runs)
    click.echo(summary_table(summary).replace("\t", "  "))
    click.echo(f"✅ overall {100 * summary.overall_accuracy:.1f}%  ->  {ws.out}")


@cli.command("subset")
@vocab_option
@cache_option
@out_option
@seed_option
@click.option("--composers", required=True, help="Selectors, e.g. bach:chorales,haydn:quartets,beethoven:quartets")
@click.option("--arch", type=click.Choice(ARCH_CHOICES), default="hybrid", show_default=True)
@training_options
@click.pass_context
def cmd_subset(ctx, vocab, cache, out, seed, composers, arch, **params):
    """Cross-validation restricted to a few composers (or collections)."""
    overrides, run = _split_training(params)
    selectors = parse_selectors(composers)
    name = "-".join(c for c, _ in selectors)
    ws = _load_workspace(ctx, vocab=vocab, cache=cache, out=out or Path(f"results/subset-{name}-{arch}"), seed=seed, model_overrides=overrides, **params)
    voc, corpus = _load_corpus(ws)
    sub = corpus.select(selectors)
    mc = _model_config(arch, voc, sub, run["sample_size"], ws.model_overrides)

    _banner(f"Subset: {', '.join(display_name(c) for c in sub.class_names)} ({len(sub)} scores), {arch}")
    result = subset_experiment(corpus, selectors, mc, ws.train, k=run["folds"], jobs=run["jobs"])
    summary = write_results(ws.out, result, sub, ws.train, experiment="subset", invocation=_invocation(ctx))
    _record(ws.out, summary, result.runs)

    names = [display_name(c) for c in sub.class_names]
    click.echo("confusion (row %): " + "  ".join(names))
    for label, row in zip(names, result.confusion.percentages):
        click.echo(f"  {label:<16}" + "".join(f"{v:>8.1f}" for v in row))
    click.echo(f"✅ overall {100 * summary.overall_accuracy:.1f}%  ->  {ws.out}")


@cli.command("sweep")
@vocab_option
@cache_option
@out_option
@seed_option
@click.option("--arch", "archs", type=click.Choice(ARCH_CHOICES), multiple=True,
              default=["histogram", "voice-deep", "hybrid"], show_default=True)
@click.option("--sizes", default=",".join(str(s) for s in SWEEP_SIZES), show_default=True)
@training_options
@click.pass_context
def cmd_sweep(ctx, vocab, cache, out, seed, archs, sizes, **params):
    """Cross-validated accuracy as a function of the sample window s."""
    overrides, run = _split_training(params)
    try:
        size_list = [int(s) for s in sizes.split(",") if s.strip()]
    except ValueError:
        raise click.BadParameter(f"sizes must be integers: {sizes}", param_hint="--sizes")
    ws = _load_workspace(ctx, vocab=vocab, cache=cache, out=out or Path("results/sweep"), seed=seed, model_overrides=overrides, **params)
    voc, corpus = _load_corpus(ws)
    configs = [_model_config(a, voc, corpus, size_list[0], ws.model_overrides) for a in archs]

    _banner(f"Sample-size sweep: {', '.join(archs)} x s in {size_list}")
    sweep = sample_size_sweep(corpus, configs, ws.train, sizes=size_list, k=run["folds"], jobs=run["jobs"])
    for (arch, s), result in sweep.results.items():
        sub_out = ws.out / arch / f"s{s}"
        summary = write_results(sub_out, result, corpus, ws.train, experiment="sweep", invocation=_invocation(ctx))
        _record(sub_out, summary, result.runs)
    click.echo(write_sweep(ws.out, sweep).replace("\t", "  "))
    for arch, rho in sweep.trend().items():
        if not rho > 0:
            logger.warning(f"⚠️ {arch}: accuracy does not increase with s (spearman {rho:.3f})")


@cli.command("report")
@click.argument("results_dir", type=click.Path(path_type=Path), envvar="KERNCLF_OUT", default="results")
@click.option("--compare", is_flag=True, help="Show deltas against the published accuracies.")
@click.option("--pdf", type=click.Path(path_type=Path), default=None, help="Also render the tables to a PDF.")
def cmd_report(results_dir, compare, pdf):
    """Render the tables of every experiment under RESULTS_DIR."""
    if not results_dir.exists():
        raise InputError(f"results directory {results_dir} does not exist")
    tables = build_report(results_dir, compare=compare)
    if not tables:
        click.echo(f"no runs in {results_dir}")
        return
    for table in tables:
        click.echo(table.to_text())
        click.echo()
    if pdf:
        write_report_pdf(pdf, tables, str(results_dir))
        click.echo(f"✅ PDF written to {pdf}")


@cli.command("inspect")
@click.argument("score", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@vocab_option
@click.option("--row", type=int, default=None, help="Data row (0-based) whose set bits to print.")
@click.option("--scale", default="1", show_default=True, help="Duration scale, e.g. 1/4.")
def cmd_inspect(score, vocab, row, scale):
    """Parse (and, given a vocabulary, encode) one **kern file."""
    parsed = parse_file(score)
    click.echo(f"{score}: T={parsed.T} spines={parsed.spine_count}")
    kinds = {k: sum(c.kind == k for r in parsed.rows for c in r.cells) for k in CellKind}
    click.echo("  " + "  ".join(f"{k.value}={n}" for k, n in kinds.items()))
    if row is None:
        return
    if not 0 <= row < parsed.T:
        raise InputError(f"row {row} outside 0..{parsed.T - 1}")
    click.echo(f"row {row} (line {parsed.rows[row].line}):")
    if vocab is None or not vocab.exists():
        for p, cell in enumerate(parsed.rows[row].cells):
            click.echo(f"  spine {p}: {cell.kind.value} duration={cell.duration} pitches={list(cell.pitches)}")
        return

    voc = load_vocab(vocab)
    tensor = encode_score(parsed, voc, Fraction(scale))
    decoded = decode_score(tensor, voc)[row]
    for p, cell in enumerate(decoded):
        bits = [int(i) for i in tensor.data[row, p].nonzero()[0]]
        click.echo(f"  spine {p}: bits={bits} {cell.kind.value} pitches={list(cell.pitches)} value_index={cell.duration_index}")


@cli.command("baseline")
@vocab_option
@cache_option
@click.option("--composers", default=None, help="Selectors; the whole corpus when omitted.")
def cmd_baseline(vocab, cache, composers):
    """Accuracy of always predicting the most frequent composer."""
    ws = WorkspaceConfig(vocab=vocab, cache=cache)
    _, corpus = _load_corpus(ws)
    if composers:
        corpus = corpus.select(parse_selectors(composers))
    counts = corpus.class_counts()
    for slug, n in counts.items():
        click.echo(f"  {display_name(slug):<16} {n:>5}")
    click.echo(f"majority baseline: {100 * majority_baseline(corpus):.1f}%")


@cli.command("describe")
@vocab_option
@click.option("--arch", type=click.Choice(ARCH_CHOICES), default="hybrid", show_default=True)
@click.option("--classes", type=int, default=19, show_default=True)
def cmd_describe(vocab, arch, classes):
    """Parameter shapes and counts of an architecture for a vocabulary."""
    voc = load_vocab(vocab)
    mc = ModelConfig.for_architecture(arch, N=voc.N, D=voc.D, P=voc.P, C=classes)
    for line in describe(mc):
        click.echo(line)


def main():
    cli(auto_envvar_prefix="KERNCLF")


if __name__ == "__main__":
    main()
