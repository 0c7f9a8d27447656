"""
jetplan command line: scenario runs, covariance study, authority sweep, batches
"""
import hashlib
import json
import shutil
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import click
import pandas as pd
from pydantic import ValidationError

from src.models.scenario import MetricsLog, RunManifest, ScenarioConfig
from src.models.tracking import LtiModel
from src.services.tracker import DEFAULT_THRESHOLDS, intermittent_covariance_study
from src.simulation.runner import realized_path_metrics, run_scenario
from src.utils.config import get_settings
from src.utils.exceptions import ConfigError, JetPlanError
from src.utils.io import RunWriter, atomic_output_dir, promote_output_dir
from src.utils.logger import get_logger, setup_logging

logger = get_logger(__name__)

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


# ==================== Config loading ====================

def _line_of(text: str, loc: Tuple) -> Optional[int]:
    """Line of the deepest JSON key named in a validation error location."""
    position, found = 0, None
    for part in loc:
        if not isinstance(part, str):
            continue
        index = text.find(f'"{part}"', position)
        if index < 0:
            break
        position, found = index, index
    if found is None:
        return 1 if text else None
    return text.count("\n", 0, found) + 1


def load_config(path: Path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror or e}", source=str(path))
    try:
        return ScenarioConfig.model_validate_json(text)
    except ValidationError as e:
        errors = e.errors()
        first = errors[0]
        if first["type"] == "json_invalid":
            try:
                json.loads(text)
            except json.JSONDecodeError as decode:
                raise ConfigError(f"invalid JSON: {decode.msg}", line=decode.lineno, source=str(path))
        where = ".".join(str(p) for p in first["loc"]) or "config"
        message = first["msg"].removeprefix("Value error, ")
        raise ConfigError(f"{where}: {message}", line=_line_of(text, first["loc"]), source=str(path))
    except (JetPlanError, ArithmeticError) as e:
        raise ConfigError(str(e), line=1, source=str(path))


def _run_id(*parts) -> str:
    return hashlib.sha1("|".join(str(p) for p in parts).encode()).hexdigest()[:10]


def _fail(message: str, code: int):
    click.echo(f"Error: {message}", err=True)
    raise click.exceptions.Exit(code)


def _with_output_dir(out: Path, manifest: RunManifest, body: Callable[[RunWriter], None]) -> Path:
    """
    Stage outputs in a sibling temp directory and rename it into place. A
    runtime failure still promotes whatever the body managed to write.
    """
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        _fail(f"output directory {out} already exists and is not empty", EXIT_CONFIG)
    staging = atomic_output_dir(out)
    writer = RunWriter(staging)
    writer.write_json("manifest.json", manifest.model_dump(mode="json"))
    try:
        body(writer)
    except JetPlanError:
        promote_output_dir(staging, out)
        raise
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return promote_output_dir(staging, out)


# ==================== Commands ====================

@click.group()
@click.option("--log-level", type=click.Choice(["error", "warn", "warning", "info", "debug"], case_sensitive=False),
              default=None, help="Override JETPLAN_LOG_LEVEL.")
def cli(log_level: Optional[str]):
    """Joint exploration and tracking planner for simulated robot teams."""
    setup_logging(log_level or get_settings().stdlib_log_level)


@cli.command()
@click.argument("config_path", type=click.Path(path_type=Path))
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--out", type=click.Path(path_type=Path), default=Path("runs/latest"), show_default=True)
def run(config_path: Path, seed: Optional[int], out: Path):
    """Run one scenario and write step logs, plans, summary and heat maps."""
    try:
        config = load_config(config_path)
    except ConfigError as e:
        _fail(str(e), EXIT_CONFIG)
    seed = config.seed if seed is None else seed
    manifest = RunManifest(command="run", config_path=str(config_path), seed=seed, output_dir=str(out),
                           run_id=_run_id("run", config_path, seed, config.model_dump_json()))
    log = MetricsLog()

    def body(writer: RunWriter):
        try:
            run_scenario(config, seed=seed, log=log)
        finally:
            writer.write_run(log, len(config.objects))

    try:
        _with_output_dir(out, manifest, body)
    except JetPlanError as e:
        logger.error("Run aborted", error=str(e), steps=len(log.records))
        _fail(f"{type(e).__name__}: {e} (partial logs in {out})", EXIT_RUNTIME)
    summary = log.summary(len(config.objects))
    click.echo(f"{config.name}: discovered {summary['discovered']}/{summary['objects']} "
               f"in {summary['steps']} steps -> {out}")


@cli.command("cov-study")
@click.option("--p", "probs", type=click.FloatRange(0.0, 1.0, min_open=True), multiple=True,
              default=(0.65, 0.75), show_default=True, help="Detection probability per horizon (repeatable).")
@click.option("--horizons", type=click.IntRange(min=0), default=20, show_default=True)
@click.option("--trials", type=click.IntRange(min=1), default=10000, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(path_type=Path), default=Path("runs/cov_study"), show_default=True)
@click.option("--threshold", "thresholds", type=click.FloatRange(min=0.0, min_open=True), multiple=True,
              help="Norm thresholds for the reported CDF (repeatable).")
@click.option("--dt", type=click.FloatRange(min=0.0, min_open=True), default=0.1, show_default=True)
@click.option("--horizon-length", type=click.FloatRange(min=0.0, min_open=True), default=2.0, show_default=True)
@click.option("--q", type=click.FloatRange(min=0.0, min_open=True), default=0.05, show_default=True)
@click.option("--r", type=click.FloatRange(min=0.0, min_open=True), default=0.01, show_default=True)
def cov_study(probs, horizons, trials, seed, out, thresholds, dt, horizon_length, q, r):
    """Monte-Carlo distribution of track covariance norms under intermittent detection."""
    seed = get_settings().default_seed if seed is None else seed
    steps = horizon_length / dt
    if abs(steps - round(steps)) > 1e-9:
        _fail("--horizon-length must be a whole number of --dt steps", EXIT_CONFIG)
    model = LtiModel.constant_velocity(dt=dt, q=q, r=r)
    thresholds = tuple(thresholds) or DEFAULT_THRESHOLDS
    options = {"p": list(probs), "horizons": horizons, "trials": trials, "thresholds": list(thresholds),
               "dt": dt, "horizon_length": horizon_length, "q": q, "r": r}
    manifest = RunManifest(command="cov-study", seed=seed, output_dir=str(out),
                           run_id=_run_id("cov-study", seed, sorted(options.items())), options=options)
    reports = []

    def body(writer: RunWriter):
        for p in probs:
            report = intermittent_covariance_study(model, p, horizons, trials, int(round(steps)), seed,
                                                   thresholds=thresholds)
            writer.write_study(report, f"p{p:g}")
            reports.append(report)
        writer.write_json("summary.json", {"studies": [rep.summary() for rep in reports]})

    try:
        _with_output_dir(out, manifest, body)
    except JetPlanError as e:
        _fail(f"{type(e).__name__}: {e}", EXIT_RUNTIME)
    for rep in reports:
        click.echo(f"p={rep.detect_prob:g}: mean norm {rep.mean_norm:.4f}, peak bin {rep.pmf_peak_fraction:.3f}")


@cli.command("authority-sweep")
@click.argument("config_path", type=click.Path(path_type=Path))
@click.option("--speeds", "speeds", type=click.FloatRange(min=0.0, min_open=True), multiple=True,
              default=(1.3, 1.8, 3.3), show_default=True, help="Robot top speed per run (repeatable).")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(path_type=Path), default=Path("runs/authority"), show_default=True)
def authority_sweep(config_path: Path, speeds, seed, out):
    """Repeat a one-robot scenario across top speeds; compare path length and deviation."""
    if not speeds:
        _fail("at least one --speeds value is required", EXIT_CONFIG)
    try:
        config = load_config(config_path)
    except ConfigError as e:
        _fail(str(e), EXIT_CONFIG)
    if len(config.robots) != 1:
        _fail(f"{config_path}: authority sweep needs exactly one robot, got {len(config.robots)}", EXIT_CONFIG)
    seed = config.seed if seed is None else seed
    manifest = RunManifest(command="authority-sweep", config_path=str(config_path), seed=seed,
                           output_dir=str(out), options={"speeds": list(speeds)},
                           run_id=_run_id("authority", config_path, seed, speeds))
    rows: List[Dict] = []

    def body(writer: RunWriter):
        for index, speed in enumerate(speeds):
            robot = config.robots[0].model_copy(update={"v_max": speed})
            variant = config.model_copy(update={"robots": [robot]})
            log = MetricsLog()
            try:
                run_scenario(variant, seed=seed, log=log)
            finally:
                path = [{k: row[k] for k in ("step", "time", "x", "y", "theta", "v", "omega")}
                        for row in log.steps if row["robot_id"] == 0]
                writer.write_table(f"path_{index:02d}_v{speed:g}.csv", path,
                                   ["step", "time", "x", "y", "theta", "v", "omega"])
            rows.append({"speed": speed, "excess_authority": speed - config.object_speed,
                         **realized_path_metrics(log, 0)})
        writer.write_table("sweep.csv", rows)
        writer.write_json("summary.json", {"scenario": config.name, "seed": seed, "runs": rows})

    try:
        _with_output_dir(out, manifest, body)
    except JetPlanError as e:
        _fail(f"{type(e).__name__}: {e} (partial logs in {out})", EXIT_RUNTIME)
    for row in rows:
        click.echo(f"v_max={row['speed']:g}: length {row['path_length']:.3f} m, "
                   f"max deviation {row['max_lateral_deviation']:.3f} m")


@cli.command()
@click.argument("config_path", type=click.Path(path_type=Path))
@click.option("--write", "write_path", type=click.Path(path_type=Path), default=None,
              help="Write the normalized config here.")
def validate(config_path: Path, write_path: Optional[Path]):
    """Parse and validate a scenario file."""
    try:
        config = load_config(config_path)
    except ConfigError as e:
        _fail(str(e), EXIT_CONFIG)
    if write_path is not None:
        write_path.parent.mkdir(parents=True, exist_ok=True)
        write_path.write_text(config.model_dump_json(indent=2) + "\n")
    click.echo(f"{config_path}: ok ({len(config.robots)} robots, {len(config.objects)} objects, "
               f"{config.steps} steps)")


def _batch_worker(payload: Tuple[str, int]) -> dict:
    text, seed = payload
    config = ScenarioConfig.model_validate_json(text)
    try:
        log = run_scenario(config, seed=seed)
    except JetPlanError as e:
        return {"seed": seed, "completed": False, "error": f"{type(e).__name__}: {e}"}
    summary = log.summary(len(config.objects))
    return {
        "seed": seed,
        "completed": True,
        "error": None,
        "discovered": summary["discovered"],
        "all_discovered": summary["all_discovered"],
        "last_discovery": max(summary["discovery_times"].values(), default=None),
        "jensen_satisfied_fraction": summary["jensen_satisfied_fraction"],
        "horizon_detection_fraction": summary["horizon_detection_fraction"],
        "warnings": summary["warnings"],
    }


@cli.command()
@click.argument("config_path", type=click.Path(path_type=Path))
@click.option("--seeds", type=click.IntRange(min=1), required=True, help="Number of seeds to run.")
@click.option("--first-seed", type=int, default=None, help="First seed (default: the scenario seed).")
@click.option("--workers", type=click.IntRange(min=1), default=None)
@click.option("--out", type=click.Path(path_type=Path), default=Path("runs/batch"), show_default=True)
def batch(config_path: Path, seeds: int, first_seed, workers, out):
    """Run a scenario over consecutive seeds and report the discovery rate."""
    try:
        config = load_config(config_path)
    except ConfigError as e:
        _fail(str(e), EXIT_CONFIG)
    workers = workers or get_settings().workers
    first_seed = config.seed if first_seed is None else first_seed
    seed_list = [first_seed + i for i in range(seeds)]
    text = config.model_dump_json()
    manifest = RunManifest(command="batch", config_path=str(config_path), seed=first_seed, output_dir=str(out),
                           options={"seeds": seeds, "workers": workers},
                           run_id=_run_id("batch", config_path, first_seed, seeds))
    results: List[dict] = []

    def body(writer: RunWriter):
        payloads = [(text, s) for s in seed_list]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results.extend(pool.map(_batch_worker, payloads))
        else:
            results.extend(_batch_worker(p) for p in payloads)
        df = pd.DataFrame(results)
        writer.write_table("batch.csv", results)
        completed = df[df["completed"]] if len(df) else df
        writer.write_json("summary.json", {
            "scenario": config.name,
            "seeds": seeds,
            "completed": int(len(completed)),
            "discovery_rate": float(completed["all_discovered"].astype(bool).mean()) if len(completed) else None,
            "failures": [r for r in results if not r["completed"]],
        })

    _with_output_dir(out, manifest, body)
    rate = sum(1 for r in results if r.get("all_discovered")) / len(results)
    click.echo(f"{config.name}: all objects discovered in {rate:.0%} of {seeds} seeds -> {out}")
    if any(not r["completed"] for r in results):
        raise click.exceptions.Exit(EXIT_RUNTIME)


if __name__ == "__main__":
    cli()
