"""Command-line entry points: extract, evaluate, serve, report."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .backend import format_ledger_table, ledger_report, UsageLedger
from .evaluation import (
    EvalReport,
    format_grid,
    format_modality_grid,
    load_gold,
    predictions_from_run,
    score_run,
)
from .pipeline import MODES, load_config, run_extraction
from .schema import load_schema
from .store import Store


@click.group()
def main():
    """Evidence table extraction with per-cell provenance."""


@main.command()
@click.option("--config", "-c", "config_path", required=True,
              type=click.Path(exists=True), help="Pipeline config JSON.")
@click.option("--mode", type=click.Choice(MODES), default=None,
              help="Override the configured run mode.")
@click.option("--output", "-o", "output_dir", default=None,
              help="Override the configured output directory.")
def extract(config_path, mode, output_dir):
    """Run extraction over the configured documents."""
    try:
        config = load_config(config_path)
    except (OSError, KeyError, ValueError, FileNotFoundError) as exc:
        raise click.ClickException(f"bad config: {exc}")
    if mode:
        config.mode = mode
    if output_dir:
        config.output_dir = output_dir
    config.validate()

    summary = run_extraction(config)
    for result in summary.results:
        if result.status == "ok":
            click.echo(f"ok\t{result.doc_id}\tv{result.version}\t{result.n_cells} cells")
        else:
            click.echo(f"FAILED\t{result.doc_id}\t{result.error}")
    if not summary.ok:
        sys.exit(1)


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("gold_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--version", type=int, default=None, help="Run version (default latest).")
@click.option("--out", "out_dir", default=None,
              help="Directory for report files (default: the run directory).")
@click.option("--judge", "judge_name", default=None,
              help="Backend for free-text judging (default: deterministic fallback).")
def evaluate(run_dir, gold_path, version, out_dir, judge_name):
    """Score one document's run against a gold file.

    RUN_DIR is the document's directory inside the store.
    """
    run_dir = Path(run_dir)
    store = Store(run_dir.parent)
    doc_id = run_dir.name

    gold_doc_id, gold_cells = load_gold(gold_path)
    if gold_doc_id != doc_id:
        raise click.ClickException(
            f"gold file is for document {gold_doc_id!r}, run directory is {doc_id!r}")
    if not gold_cells:
        raise click.ClickException("gold file contains no cells")

    run = store.load_run(doc_id, version)
    schema_record = store.load_schema_record(doc_id)
    if schema_record is None:
        raise click.ClickException(f"no schema stored alongside runs in {run_dir}")
    schema = load_schema(schema_record)

    judge_backend = None
    if judge_name:
        from .backend import create_backend
        from . import mockmodel  # noqa: F401  (registers "mock")
        judge_backend = create_backend(judge_name)

    manifest_cfg = run["manifest"]["config"]
    report = score_run(
        predictions_from_run(run), gold_cells, schema, judge_backend,
        rel_tol=manifest_cfg.get("rel_tol", 0.005),
        abs_tol=manifest_cfg.get("abs_tol", 1e-9),
    )
    _write_report(report, run, Path(out_dir) if out_dir else run_dir)
    click.echo(format_grid(report))
    click.echo()
    click.echo(format_modality_grid(report))


def _write_report(report: EvalReport, run: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["doc_id"] = run["doc_id"]
    payload["run_version"] = run["version"]
    payload["usage"] = run["manifest"]["ledger_totals"]
    (out_dir / "eval_report.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out_dir / "eval_grid.txt").write_text(format_grid(report) + "\n", encoding="utf-8")
    (out_dir / "eval_modality.txt").write_text(
        format_modality_grid(report) + "\n", encoding="utf-8")
    verdict_lines = "\n".join(json.dumps(v, sort_keys=True) for v in report.verdicts)
    (out_dir / "eval_verdicts.jsonl").write_text(
        verdict_lines + ("\n" if verdict_lines else ""), encoding="utf-8")


@main.command()
@click.argument("store_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8040, show_default=True, type=int)
def serve(store_dir, host, port):
    """Serve the review API over a run store."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(store_dir), host=host, port=port, log_level="warning")


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--version", type=int, default=None)
def report(run_dir, version):
    """Print the token/call ledger for one document's run."""
    run_dir = Path(run_dir)
    store = Store(run_dir.parent)
    records = store.load_ledger_records(run_dir.name, version)
    ledger = UsageLedger()
    for rec in records:
        ledger.append(rec["agent"], rec["input_tokens"], rec["output_tokens"],
                      rec["wall_time"])
    click.echo(format_ledger_table(ledger_report(ledger)))


if __name__ == "__main__":
    main()
