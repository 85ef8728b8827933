"""Command line entry points.

Subcommands mirror the pipeline: ``import`` raw MultiWOZ into normalized
corpora, ``embed`` a corpus into a store, ``run`` one experiment,
``grid`` a sweep, ``report`` finished runs, and ``repair-test`` the JSON
repair corpus. Every command exits non-zero on fatal errors.
"""

import json
import sys
from pathlib import Path

import click

from . import __version__
from .corpus import CorpusError, Schema, accumulate_turns, import_multiwoz, save_corpus
from .embedder import StoreFormatError
from .harness import (
    DEFAULT_SCHEMA_RESOURCE,
    ExperimentConfig,
    HarnessError,
    format_report_table,
    load_metrics,
    make_embed_backend,
    precompute_embeddings,
    run_experiment,
    run_grid,
)
from .repair import repair_and_parse

_CONFIG_ERRORS = (HarnessError, CorpusError, StoreFormatError, OSError)


@click.group()
@click.version_option(version=__version__, prog_name="icldst")
def main():
    """Retrieval-based in-context learning for dialogue state tracking."""


@main.command(name="import")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option(
    "--schema",
    "schema_path",
    type=click.Path(exists=True),
    default=None,
    help="Slot schema JSON; defaults to the packaged MultiWOZ 2.4 schema.",
)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option(
    "--strict/--no-strict",
    default=False,
    help="Fail when any dialogue is skipped instead of reporting and continuing.",
)
def import_cmd(data_path, schema_path, out_dir, strict):
    """Normalize a raw MultiWOZ 2.4 dataset into per-split corpus files."""
    schema = Schema.from_file(schema_path or DEFAULT_SCHEMA_RESOURCE)
    try:
        result = import_multiwoz(data_path, schema)
    except CorpusError as exc:
        raise click.ClickException(str(exc))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for split, dialogues in result.dialogues.items():
        samples = []
        for dialogue in dialogues:
            samples.extend(accumulate_turns(dialogue, split))
        save_corpus(samples, out / f"{split}.jsonl")
        counts[split] = len(samples)
    report = result.report
    payload = report.to_dict()
    payload["turns"] = counts
    (out / "import_report.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for split in ("train", "dev", "test"):
        click.echo(f"{split}: {counts.get(split, 0)} turns")
    if report.dialogue_errors:
        click.echo(f"skipped {len(report.dialogue_errors)} dialogues with errors")
        if strict:
            raise click.ClickException(
                f"{len(report.dialogue_errors)} dialogues failed to import"
            )


@main.command()
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option(
    "--mode",
    type=click.Choice(["user_only", "user_agent"]),
    default="user_only",
    show_default=True,
)
@click.option("--speaker-tags/--no-speaker-tags", default=True, show_default=True)
@click.option(
    "--backend",
    type=click.Choice(["mock", "service"]),
    default="mock",
    show_default=True,
)
@click.option("--dimension", type=int, default=256, show_default=True)
@click.option("--url", default=None, help="Embedding service URL (service backend).")
@click.option("--model", default=None, help="Model name (service backend).")
@click.option("--api-key-env", default=None)
@click.option("--batch-size", type=int, default=64, show_default=True)
@click.option("--timeout", type=float, default=30.0, show_default=True)
@click.option("--max-retries", type=int, default=3, show_default=True)
def embed(
    corpus,
    out_path,
    mode,
    speaker_tags,
    backend,
    dimension,
    url,
    model,
    api_key_env,
    batch_size,
    timeout,
    max_retries,
):
    """Embed a corpus into an emb-jsonl store (resumes partial jobs)."""
    spec = {"kind": backend, "dimension": dimension}
    if backend == "service":
        if not url or not model:
            raise click.ClickException("service backend needs --url and --model")
        spec.update(
            {
                "url": url,
                "model": model,
                "api_key_env": api_key_env,
                "timeout": timeout,
                "max_retries": max_retries,
                "batch_size": batch_size,
            }
        )
        spec.pop("dimension")
    try:
        embedder = make_embed_backend(spec)
        path = precompute_embeddings(
            corpus,
            out_path,
            embedder,
            text_mode=mode,
            speaker_tags=speaker_tags,
            batch_size=batch_size,
        )
    except _CONFIG_ERRORS as exc:
        raise click.ClickException(str(exc))
    click.echo(f"wrote {path}")


def _load_config(config_path, overrides) -> ExperimentConfig:
    config = ExperimentConfig.from_file(config_path)
    cleaned = {k: v for k, v in overrides.items() if v is not None}
    if cleaned:
        config = config.with_overrides(**cleaned)
    return config


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--k", "max_demos", type=int, default=None, help="Override max_demos.")
@click.option(
    "--strategy",
    "decoding_strategy",
    type=click.Choice(["slot_value_given_key", "key_value_generation"]),
    default=None,
)
@click.option("--limit", "sample_limit", type=int, default=None)
@click.option("--output", "output_dir", type=click.Path(), default=None)
@click.option("--strict-k", is_flag=True, default=False)
@click.option(
    "--dry-run", is_flag=True, default=False, help="Render prompts, call nothing."
)
def run(config_path, max_demos, decoding_strategy, sample_limit, output_dir, strict_k, dry_run):
    """Run one experiment configuration."""
    overrides = {
        "max_demos": max_demos,
        "decoding_strategy": decoding_strategy,
        "sample_limit": sample_limit,
        "output_dir": output_dir,
    }
    if strict_k:
        overrides["strict_k"] = True
    try:
        config = _load_config(config_path, overrides)
        report = run_experiment(config, dry_run=dry_run)
    except _CONFIG_ERRORS as exc:
        raise click.ClickException(str(exc))
    counts = report.counts
    if dry_run:
        click.echo(
            f"rendered prompts for {counts['samples']} samples "
            f"({counts['unfittable']} unfittable) under {config.output_dir}/prompts"
        )
        return
    click.echo(format_report_table([report.to_dict()]))
    if counts["failed"]:
        raise click.ClickException(f"{counts['failed']} samples failed")


def _parse_axis(text: str):
    name, sep, values = text.partition("=")
    if not sep or not values:
        raise click.ClickException(f"bad --axis {text!r}; expected name=v1,v2,...")
    parsed = []
    for chunk in values.split(","):
        chunk = chunk.strip()
        if chunk.lower() in ("true", "false"):
            parsed.append(chunk.lower() == "true")
        else:
            try:
                parsed.append(int(chunk))
            except ValueError:
                parsed.append(chunk)
    return name.strip(), parsed


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option(
    "--axis",
    "axis_specs",
    multiple=True,
    required=True,
    help="Axis as name=v1,v2,... (repeatable).",
)
@click.option("--cap", type=int, default=64, show_default=True)
@click.option("--output", "output_dir", type=click.Path(), default=None)
def grid(config_path, axis_specs, cap, output_dir):
    """Run a cartesian sweep and write a combined CSV."""
    axes = dict(_parse_axis(spec) for spec in axis_specs)
    try:
        config = _load_config(config_path, {"output_dir": output_dir})
        result = run_grid(config, axes, cap=cap)
    except _CONFIG_ERRORS as exc:
        raise click.ClickException(str(exc))
    click.echo(format_report_table([r.to_dict() for _, _, r in result.combos]))
    click.echo(f"combined results: {result.combined_csv}")


@main.command()
@click.argument("run_dirs", nargs=-1, required=False, type=click.Path(exists=True))
@click.option("--grid-dir", type=click.Path(exists=True), default=None)
def report(run_dirs, grid_dir):
    """Summarize finished runs from their metrics files."""
    dirs = list(run_dirs)
    if grid_dir:
        runs_root = Path(grid_dir) / "runs"
        if runs_root.is_dir():
            dirs.extend(sorted(str(p) for p in runs_root.iterdir() if p.is_dir()))
    if not dirs:
        raise click.ClickException("nothing to report; pass run dirs or --grid-dir")
    try:
        payloads = [load_metrics(d) for d in dirs]
    except HarnessError as exc:
        raise click.ClickException(str(exc))
    click.echo(format_report_table(payloads))


@main.command(name="repair-test")
@click.option(
    "--cases",
    "cases_path",
    type=click.Path(exists=True),
    default=None,
    help="Repair corpus JSONL; defaults to the packaged corpus.",
)
@click.option(
    "--min-parse-rate",
    type=float,
    default=0.95,
    show_default=True,
    help="Fail when the parsed fraction drops below this.",
)
def repair_test(cases_path, min_parse_rate):
    """Run the repair pipeline over its corpus and report parse rates."""
    path = Path(cases_path) if cases_path else Path(__file__).parent / "data" / "repair_corpus.jsonl"
    if not path.is_file():
        raise click.ClickException(f"no repair corpus at {path}")
    total = parsed = mismatched = 0
    statuses: dict = {}
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            case = json.loads(line)
            total += 1
            outcome = repair_and_parse(case["raw"])
            statuses[outcome.status] = statuses.get(outcome.status, 0) + 1
            if outcome.parsed:
                parsed += 1
            expected = case.get("expected_status")
            if expected and outcome.status != expected:
                mismatched += 1
                click.echo(
                    f"line {line_no}: expected {expected}, got {outcome.status}",
                    err=True,
                )
    if total == 0:
        raise click.ClickException(f"{path} holds no cases")
    rate = parsed / total
    for status in sorted(statuses):
        click.echo(f"{status}: {statuses[status]}")
    click.echo(f"parse rate: {parsed}/{total} = {rate:.3f}")
    if mismatched:
        raise click.ClickException(f"{mismatched} cases diverged from expectations")
    if rate < min_parse_rate:
        raise click.ClickException(
            f"parse rate {rate:.3f} below required {min_parse_rate:.3f}"
        )


if __name__ == "__main__":
    sys.exit(main())
