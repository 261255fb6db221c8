"""Command-line interface.

Exit codes: 0 success, 1 error, 2 rejection (single-query ``ground`` only).
"""

from __future__ import annotations

import sys

import click

from .config import build_backends, load_config, replay_backends, wrap_recording
from .cassette import CassetteRecorder
from .errors import RefGroundError
from .evaluation import (
    load_dataset,
    recall_curve,
    run_bench,
    write_recall_rows,
    write_report,
)
from .gateway import ImagePayload
from .geometry import ImageDims, normalize
from .pipeline import ground
from .scenes import generate_scene_set


@click.group()
def main():
    """Training-free visual grounding engine and evaluation harness."""


def _fail(message: str) -> SystemExit:
    click.echo(f"error: {message}", err=True)
    return SystemExit(1)


@main.command("ground")
@click.argument("image_path", type=click.Path())
@click.argument("query")
@click.option("--config", "config_path", required=True, type=click.Path())
def cmd_ground(image_path, query, config_path):
    """Ground QUERY in IMAGE_PATH; print the predicted box and reasoning trace."""
    try:
        cfg = load_config(config_path)
        backends = build_backends(cfg)
        image = ImagePayload.from_file(image_path)
        result = ground(backends, image, query, cfg.pipeline_config())
    except (RefGroundError, OSError) as exc:
        raise _fail(str(exc))

    click.echo(f"query: {query}")
    if result.rejected:
        click.echo(f"rejected: true ({result.rejected_reason})")
    else:
        box = result.predicted_box
        norm = normalize(box, image.dims)
        click.echo("rejected: false")
        click.echo(f"predicted_box_pixels: {[round(v, 2) for v in box.as_list()]}")
        click.echo("predicted_box_normalized: [%s, %s, %s, %s]" % norm.format_fields())
    click.echo("trace:")
    for line in result.trace.raw_text.splitlines():
        click.echo(f"  {line}")
    click.echo("timings: " + " ".join(
        f"{stage}={seconds:.3f}s" for stage, seconds in result.stage_timings.items()
    ))
    if result.rejected:
        raise SystemExit(2)


def _run_bench_command(cfg, dataset_path, report_path, fmt, mode, resume,
                       backends=None):
    records = load_dataset(dataset_path)
    if backends is None:
        backends = build_backends(cfg)
    checkpoint = str(report_path) + ".checkpoint.jsonl" if report_path else None
    report, outcomes = run_bench(
        backends, records, cfg.pipeline_config(), mode=mode,
        recall_iou=cfg.recall_iou, checkpoint_path=checkpoint, resume=resume,
        workers=cfg.concurrency.samples,
    )
    if report_path:
        write_report(report, outcomes, report_path, fmt=fmt)
    click.echo(report.summary_line())
    if report.stage_timings:
        click.echo("mean stage timings: " + " ".join(
            f"{stage}={seconds:.3f}s" for stage, seconds in report.stage_timings.items()
        ))
    return report


@main.command("bench")
@click.argument("dataset_path", type=click.Path())
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--report", "report_path", default=None, type=click.Path())
@click.option("--format", "fmt", default="jsonl", type=click.Choice(["jsonl", "csv"]))
@click.option("--mode", default="caption",
              type=click.Choice(["caption", "query_echo", "query_plus"]))
@click.option("--resume", is_flag=True, help="Skip samples already in the checkpoint file.")
def cmd_bench(dataset_path, config_path, report_path, fmt, mode, resume):
    """Run the pipeline over a dataset and write an evaluation report."""
    try:
        cfg = load_config(config_path)
        _run_bench_command(cfg, dataset_path, report_path, fmt, mode, resume)
    except RefGroundError as exc:
        raise _fail(str(exc))


@main.command("recall")
@click.argument("dataset_path", type=click.Path())
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--sweep", required=True,
              help="Comma-separated detector confidence thresholds, e.g. 0.05,0.1,0.3")
@click.option("--report", "report_path", default=None, type=click.Path())
def cmd_recall(dataset_path, config_path, sweep, report_path):
    """Candidate-generation recall at each sweep point (pre/post NMS, major-only)."""
    try:
        cfg = load_config(config_path)
        values = [float(v) for v in sweep.split(",") if v.strip() != ""]
        if not values:
            raise RefGroundError("empty sweep")
        records = load_dataset(dataset_path)
        backends = build_backends(cfg)
        rows = recall_curve(backends, records, cfg.pipeline_config(), values,
                            recall_iou=cfg.recall_iou)
        if report_path:
            with open(report_path, "w", newline="") as fh:
                write_recall_rows(rows, fh)
            click.echo(f"wrote {len(rows)} rows to {report_path}")
        else:
            write_recall_rows(rows, sys.stdout)
    except (RefGroundError, ValueError, OSError) as exc:
        raise _fail(str(exc))


@main.command("gen-scenes")
@click.option("--seed", default=0, type=int)
@click.option("--n-scenes", default=20, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--width", default=320, type=int)
@click.option("--height", default=240, type=int)
@click.option("--small-fraction", default=0.0, type=float,
              help="Fraction of scenes whose target is below 2.5% of the image area.")
@click.option("--rejection-fraction", default=0.0, type=float,
              help="Fraction of scenes with a no-target query.")
def cmd_gen_scenes(seed, n_scenes, out_dir, width, height, small_fraction,
                   rejection_fraction):
    """Deterministically generate synthetic scenes, manifests, and a dataset file."""
    try:
        dataset = generate_scene_set(
            out_dir, n_scenes, seed, dims=ImageDims(width, height),
            small_fraction=small_fraction, rejection_fraction=rejection_fraction,
        )
    except RefGroundError as exc:
        raise _fail(str(exc))
    click.echo(f"wrote {n_scenes} scenes and {dataset}")


@main.command("record")
@click.argument("dataset_path", type=click.Path())
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--cassette", "cassette_path", required=True, type=click.Path())
@click.option("--report", "report_path", required=True, type=click.Path())
@click.option("--format", "fmt", default="jsonl", type=click.Choice(["jsonl", "csv"]))
@click.option("--mode", default="caption",
              type=click.Choice(["caption", "query_echo", "query_plus"]))
def cmd_record(dataset_path, config_path, cassette_path, report_path, fmt, mode):
    """Run bench against the configured backends while recording a cassette."""
    try:
        cfg = load_config(config_path)
        recorder = CassetteRecorder(cassette_path)
        backends = wrap_recording(build_backends(cfg), recorder,
                                  default_confidence_threshold=cfg.detector_confidence_threshold)
        _run_bench_command(cfg, dataset_path, report_path, fmt, mode,
                           resume=False, backends=backends)
        recorder.flush()
    except RefGroundError as exc:
        raise _fail(str(exc))
    click.echo(f"cassette written to {cassette_path}")


@main.command("replay")
@click.argument("dataset_path", type=click.Path())
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--cassette", "cassette_path", required=True, type=click.Path())
@click.option("--report", "report_path", required=True, type=click.Path())
@click.option("--format", "fmt", default="jsonl", type=click.Choice(["jsonl", "csv"]))
@click.option("--mode", default="caption",
              type=click.Choice(["caption", "query_echo", "query_plus"]))
def cmd_replay(dataset_path, config_path, cassette_path, report_path, fmt, mode):
    """Re-run bench strictly from a cassette; no backend or network is touched."""
    try:
        cfg = load_config(config_path)
        backends = replay_backends(
            cassette_path, default_confidence_threshold=cfg.detector_confidence_threshold
        )
        _run_bench_command(cfg, dataset_path, report_path, fmt, mode,
                           resume=False, backends=backends)
    except RefGroundError as exc:
        raise _fail(str(exc))


if __name__ == "__main__":
    main()
