"""Command-line entry point: run, validate, metrics and sweep."""

import csv
import itertools
import logging
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Any

import click
import yaml

from linkmpc.config import (
    ConfigError,
    dump_scenario,
    load_runtime_settings,
    load_scenario,
    load_scenario_file,
)
from linkmpc.csv_log import export_csv, load_log
from linkmpc.metrics import EmptyLogError, compute_metrics, format_metrics_report
from linkmpc.models import Metrics, Scenario
from linkmpc.simulator import SimulationAbort, run_closed_loop

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ABORT = 2

LOG_FILE = "log.csv"
METRICS_FILE = "metrics.txt"
METRICS_JSON_FILE = "metrics.json"
NORMALIZED_FILE = "config.normalized"
SUMMARY_FILE = "summary.csv"


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level),
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _collect_overrides(
    overrides: tuple[str, ...], rti_iters: int | None, duration: float | None
) -> list[str]:
    result = list(overrides)
    if rti_iters is not None:
        result.append(f"solver.max_sqp_iters={rti_iters}")
    if duration is not None:
        result.append(f"duration={duration}")
    return result


def write_run_outputs(scenario: Scenario, out_dir: Path, dump_qp: bool = False, timing: bool = False) -> Metrics:
    """Simulate and write log.csv, metrics.txt, metrics.json and config.normalized."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / NORMALIZED_FILE).write_text(dump_scenario(scenario), encoding="utf-8")
    try:
        log = run_closed_loop(scenario, dump_qp_dir=out_dir / "qp" if dump_qp else None)
    except SimulationAbort as e:
        if len(e.log):
            export_csv(e.log, out_dir / LOG_FILE, include_timing=timing)
        raise
    export_csv(log, out_dir / LOG_FILE, include_timing=timing)
    metrics = compute_metrics(log)
    (out_dir / METRICS_FILE).write_text(format_metrics_report(metrics), encoding="utf-8")
    (out_dir / METRICS_JSON_FILE).write_text(metrics.model_dump_json(indent=2), encoding="utf-8")
    return metrics


@click.group()
@click.option("--log-level", default=None, help="Logging level (env: LINKMPC_LOG_LEVEL).")
@click.pass_context
def cli(ctx: click.Context, log_level: str | None) -> None:
    """Link-aware NMPC simulator for a tilted multirotor tracking a ground vehicle."""
    try:
        settings = load_runtime_settings(log_level=log_level)
    except ConfigError as e:
        click.echo(f"Error: {e}", err=True)
        ctx.exit(EXIT_CONFIG)
    configure_logging(settings.log_level)
    ctx.ensure_object(dict)


config_option = click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="Scenario YAML file (default: built-in mission).",
)
set_option = click.option(
    "--set",
    "overrides",
    multiple=True,
    metavar="KEY=VALUE",
    help="Override a config value by dotted path (repeatable).",
)


@cli.command()
@config_option
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=Path("runs/latest"))
@set_option
@click.option("--rti-iters", type=int, default=None, help="SQP iterations per control period.")
@click.option("--duration", type=float, default=None, help="Override mission duration in seconds.")
@click.option("--seed", type=int, default=None, help="Reserved; every run is deterministic.")
@click.option("--dump-qp", is_flag=True, help="Write every condensed QP under OUT/qp/.")
@click.option("--timing", is_flag=True, help="Add the solver wall-time column to log.csv.")
@click.pass_context
def run(
    ctx: click.Context,
    config_path: Path | None,
    out_dir: Path,
    overrides: tuple[str, ...],
    rti_iters: int | None,
    duration: float | None,
    seed: int | None,
    dump_qp: bool,
    timing: bool,
) -> None:
    """Run one closed-loop mission."""
    if seed is not None:
        logger.info("Ignoring --seed %d: simulations are deterministic", seed)
    try:
        settings = load_runtime_settings(rti_iters=rti_iters)
        scenario = load_scenario_file(
            config_path, _collect_overrides(overrides, settings.rti_iters, duration)
        )
    except ConfigError as e:
        click.echo(f"Error: {e}", err=True)
        ctx.exit(EXIT_CONFIG)

    try:
        metrics = write_run_outputs(scenario, out_dir, dump_qp=dump_qp, timing=timing)
    except SimulationAbort as e:
        click.echo(f"Error: simulation aborted at t={e.time:.4f} s: {e}", err=True)
        ctx.exit(EXIT_ABORT)
    click.echo(format_metrics_report(metrics), nl=False)


@cli.command()
@config_option
@set_option
@click.pass_context
def validate(ctx: click.Context, config_path: Path | None, overrides: tuple[str, ...]) -> None:
    """Validate a scenario and print its normalized form."""
    try:
        scenario = load_scenario_file(config_path, list(overrides))
    except ConfigError as e:
        location = f" (line {e.line})" if e.line else ""
        click.echo(f"Invalid config{location}: {e}", err=True)
        ctx.exit(EXIT_CONFIG)
    click.echo(dump_scenario(scenario), nl=False)


@cli.command()
@click.option("--log", "log_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@config_option
@set_option
@click.option("--json", "as_json", is_flag=True, help="Print JSON instead of key = value lines.")
@click.pass_context
def metrics(
    ctx: click.Context,
    log_path: Path,
    config_path: Path | None,
    overrides: tuple[str, ...],
    as_json: bool,
) -> None:
    """Recompute metrics from an exported log.csv."""
    try:
        scenario = load_scenario_file(config_path, list(overrides))
        result = compute_metrics(load_log(log_path, scenario))
    except (ConfigError, EmptyLogError, ValueError) as e:
        click.echo(f"Error: {e}", err=True)
        ctx.exit(EXIT_CONFIG)
    click.echo(result.model_dump_json(indent=2) if as_json else format_metrics_report(result), nl=False)


# =============================================================================
# Sweep
# =============================================================================


def parse_grid(entries: tuple[str, ...]) -> list[tuple[str, list[Any]]]:
    """Parse 'key=v1,v2' or 'key=[v1, v2]' grid entries."""
    grid = []
    for entry in entries:
        if "=" not in entry:
            raise ConfigError(f"grid entry '{entry}' is not of the form key=v1,v2")
        key, raw = entry.split("=", 1)
        key = key.strip()
        try:
            parsed = yaml.safe_load(raw)
            if isinstance(parsed, list):
                values = parsed
            else:
                values = [yaml.safe_load(part) for part in raw.split(",")]
        except yaml.YAMLError as e:
            raise ConfigError(f"grid entry '{entry}' has unparseable values", field=key) from e
        if not key or not values:
            raise ConfigError(f"grid entry '{entry}' has no values", field=key)
        grid.append((key, values))
    return grid


def _format_override(key: str, value: Any) -> str:
    return f"{key}={yaml.safe_dump(value, default_flow_style=True).strip().removesuffix('...').strip()}"


def _sweep_member(base_text: str, overrides: list[str], out_dir: str) -> dict[str, Any]:
    """Run one grid point; failures are reported, not raised."""
    try:
        scenario = load_scenario(base_text, overrides)
        result = write_run_outputs(scenario, Path(out_dir))
    except ConfigError as e:
        return {"status": f"config error: {e}"}
    except SimulationAbort as e:
        return {"status": f"aborted at t={e.time:.4f}"}
    return {"status": "ok", **result.model_dump()}


@cli.command()
@config_option
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=Path("runs/sweep"))
@set_option
@click.option("--grid", "grid_entries", multiple=True, metavar="KEY=V1,V2", help="Grid axis (repeatable).")
@click.option("--jobs", type=int, default=None, help="Parallel workers (env: LINKMPC_JOBS).")
@click.option("--rti-iters", type=int, default=None)
@click.option("--duration", type=float, default=None)
@click.pass_context
def sweep(
    ctx: click.Context,
    config_path: Path | None,
    out_dir: Path,
    overrides: tuple[str, ...],
    grid_entries: tuple[str, ...],
    jobs: int | None,
    rti_iters: int | None,
    duration: float | None,
) -> None:
    """Run the Cartesian product of grid values, one subdirectory per point."""
    try:
        settings = load_runtime_settings(jobs=jobs, rti_iters=rti_iters)
        grid = parse_grid(grid_entries)
        if not grid:
            raise ConfigError("sweep needs at least one --grid entry")
        base_text = config_path.read_text(encoding="utf-8") if config_path else ""
        base_overrides = _collect_overrides(overrides, settings.rti_iters, duration)
        keys = [k for k, _ in grid]
        points = list(itertools.product(*(values for _, values in grid)))
        member_overrides = [
            base_overrides + [_format_override(k, v) for k, v in zip(keys, point)] for point in points
        ]
        # Reject invalid grid keys before any simulation starts.
        for ov in member_overrides:
            load_scenario(base_text, ov)
    except ConfigError as e:
        click.echo(f"Error: {e}", err=True)
        ctx.exit(EXIT_CONFIG)

    out_dir.mkdir(parents=True, exist_ok=True)
    logger.info("Sweeping %d combinations with %d workers", len(points), settings.jobs)
    results: dict[int, dict[str, Any]] = {}
    with ProcessPoolExecutor(max_workers=min(settings.jobs, len(points))) as pool:
        futures = {
            pool.submit(_sweep_member, base_text, ov, str(out_dir / f"run_{i:03d}")): i
            for i, ov in enumerate(member_overrides)
        }
        for future in as_completed(futures):
            i = futures[future]
            results[i] = future.result()
            logger.info("Sweep member %d finished: %s", i, results[i]["status"])

    metric_names = list(Metrics.model_fields)
    with open(out_dir / SUMMARY_FILE, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["run", "status", *keys, *metric_names])
        for i, point in enumerate(points):
            row = results[i]
            writer.writerow(
                [f"run_{i:03d}", row["status"], *point, *(row.get(name, "") for name in metric_names)]
            )

    failed = sum(1 for r in results.values() if r["status"] != "ok")
    click.echo(f"{len(points) - failed}/{len(points)} runs succeeded; summary in {out_dir / SUMMARY_FILE}")
    if failed:
        ctx.exit(EXIT_CONFIG)


def main() -> None:
    cli(obj={})


if __name__ == "__main__":
    main()
