import functools
import hashlib
import json
import os
import sys
import warnings
from collections.abc import Callable
from pathlib import Path
from typing import Any, NoReturn, TypeVar

import click
import numpy as np
import pandas as pd
from tabulate import tabulate

from causalbench.__version__ import __version__
from causalbench.balance import (
    DenominatorPolicy,
    balance_frame,
    balance_table,
    compare_arms,
    comparison_frame,
)
from causalbench.benchmark import (
    BenchmarkReport,
    mse_table,
    plot_frame,
    row_frame,
    run_benchmark,
    summarize_verdicts,
    verdict_table,
)
from causalbench.config import (
    PACKAGE_NAME,
    MethodConfig,
    RunConfig,
    atomic_write_json,
    atomic_write_text,
    configure_logging,
    settings_hash,
)
from causalbench.data_model import (
    Arm,
    CovariateSchema,
    Dataset,
    arm_subset,
    dataset_csv_text,
    infer_schema,
    load_csv,
    schema_from_list,
    schema_to_list,
)
from causalbench.effect import Estimand
from causalbench.errors import (
    CausalBenchError,
    ConfigError,
    MethodFailure,
    NumericalWarning,
    SeparationWarning,
)
from causalbench.methods import is_known, run_method
from causalbench.propensity import positivity_report
from causalbench.synthgen import CALIBRATION_N, PRESETS, generate, truth_json

F = TypeVar("F", bound=Callable[..., Any])

ESTIMANDS = click.Choice([e.value for e in Estimand], case_sensitive=False)
POLICIES = click.Choice([p.value for p in DenominatorPolicy])


def fail(error: CausalBenchError) -> NoReturn:
    """Print ``code:<CODE> message`` on stderr and exit with the error's status."""
    click.echo(f"code:{error.code} {error}", err=True)
    sys.exit(error.exit_code)


def guarded(func: F) -> F:
    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except CausalBenchError as e:
            fail(e)
        except (ValueError, np.linalg.LinAlgError) as e:
            fail(MethodFailure(str(e)))

    return wrapper  # type: ignore[return-value]


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_run_meta(
    output: str | Path,
    command: str,
    config: Any,
    seeds: dict[str, Any],
    inputs: dict[str, str],
) -> None:
    """Write ``run_meta.json`` next to ``output``."""
    meta = {
        "command": command,
        "version": __version__,
        "config_hash": settings_hash(config),
        "seeds": seeds,
        "inputs": {name: file_digest(path) for name, path in sorted(inputs.items())},
    }
    atomic_write_json(Path(output).parent / "run_meta.json", meta)


def load_schema(schema_path: str | None, data_path: str) -> tuple[CovariateSchema, ...]:
    if schema_path is None:
        return infer_schema(data_path)
    path = Path(schema_path)
    if not path.is_file():
        raise ConfigError(f"Schema file not found: {path}", "INPUT_NOT_FOUND")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return schema_from_list(data)


def load_dataset(path: str, schema_path: str | None, arm: str | None = None) -> Dataset:
    if not Path(path).is_file():
        raise ConfigError(f"Input file not found: {path}", "INPUT_NOT_FOUND")
    d = load_csv(path, load_schema(schema_path, path))
    return arm_subset(d, arm) if arm else d


def render(frame: pd.DataFrame, fmt: str) -> str:
    if fmt == "csv":
        return str(frame.to_csv(index=False, float_format="%.6g"))
    return tabulate(frame, headers="keys", tablefmt="github", showindex=False, floatfmt=".3f") + "\n"


def emit(text: str, out: str | None) -> None:
    if out:
        atomic_write_text(out, text)
    else:
        click.echo(text, nl=False)


def parse_settings(pairs: tuple[str, ...]) -> dict[str, Any]:
    """``key=value`` pairs; values are read as JSON when they parse, else as strings."""
    settings: dict[str, Any] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"Setting '{pair}' is not of the form key=value")
        try:
            settings[key] = json.loads(value)
        except json.JSONDecodeError:
            settings[key] = value
    return settings


@click.group()
@click.version_option(__version__, prog_name=PACKAGE_NAME)
@click.option("--quiet", is_flag=True, help="Hide progress bars and numerical warnings")
@click.pass_context
def cli(ctx: click.Context, quiet: bool) -> None:
    """Estimate treatment effects and benchmark them against a randomized trial."""
    configure_logging()
    ctx.ensure_object(dict)
    ctx.obj["quiet"] = quiet
    if quiet:
        warnings.simplefilter("ignore", NumericalWarning)
        warnings.simplefilter("ignore", SeparationWarning)


@cli.command()
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default="reflux_like")
@click.option("--seed", type=int, default=0, help="Master seed (default=0)")
@click.option("--n-rct", type=int, default=357, help="RCT arm size (default=357)")
@click.option("--n-nrs", type=int, default=453, help="NRS arm size (default=453)")
@click.option("--u-strength", type=float, default=0.0, help="Unobserved confounder strength")
@click.option("--nonlinear", is_flag=True, help="Add quadratic terms to the outcome surface")
@click.option("--heterogeneous", is_flag=True, help="Let the effect vary with covariates")
@click.option("--calibration-n", type=int, default=CALIBRATION_N, show_default=True)
@click.option("--out-rct", required=True, type=click.Path(dir_okay=False))
@click.option("--out-nrs", required=True, type=click.Path(dir_okay=False))
@click.option("--truth", "truth_path", type=click.Path(dir_okay=False))
@click.option("--schema-out", type=click.Path(dir_okay=False))
@guarded
def gen(
    preset: str,
    seed: int,
    n_rct: int,
    n_nrs: int,
    u_strength: float,
    nonlinear: bool,
    heterogeneous: bool,
    calibration_n: int,
    out_rct: str,
    out_nrs: str,
    truth_path: str | None,
    schema_out: str | None,
) -> None:
    """Generate a synthetic RCT arm and NRS arm with known effects."""
    try:
        cfg = PRESETS[preset](
            seed=seed,
            n_rct=n_rct,
            n_nrs=n_nrs,
            u_strength=u_strength,
            nonlinear=nonlinear,
            heterogeneous=heterogeneous,
            calibration_n=calibration_n,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None
    study = generate(cfg)
    atomic_write_text(out_rct, dataset_csv_text(study.rct))
    atomic_write_text(out_nrs, dataset_csv_text(study.nrs))
    schema_path = schema_out or str(Path(out_rct).parent / "schema.json")
    atomic_write_json(schema_path, schema_to_list(cfg.schema))
    if truth_path:
        atomic_write_json(truth_path, truth_json(study))
    write_run_meta(out_rct, "gen", cfg.to_dict(), {"seed": seed}, {})


@cli.command()
@click.argument("data", type=click.Path(dir_okay=False))
@click.option("--schema", "schema_path", type=click.Path(dir_okay=False))
@click.option("--arm", type=click.Choice([a.value for a in Arm]), help="Keep one arm only")
@click.option("--compare", "compare_path", type=click.Path(dir_okay=False),
              help="NRS file; DATA is then read as the RCT arm")
@click.option("--policy", type=POLICIES, help="Std. diff. denominator")
@click.option("--centers/--no-centers", default=False, help="Include center indicators")
@click.option("--format", "fmt", type=click.Choice(["md", "csv"]), default="md")
@click.option("--out", type=click.Path(dir_okay=False))
@guarded
def balance(
    data: str,
    schema_path: str | None,
    arm: str | None,
    compare_path: str | None,
    policy: str | None,
    centers: bool,
    fmt: str,
    out: str | None,
) -> None:
    """Print covariate balance by treatment group."""
    d = load_dataset(data, schema_path, arm)
    if compare_path:
        nrs = load_dataset(compare_path, schema_path or None)
        rows = compare_arms(
            d, nrs, DenominatorPolicy(policy or DenominatorPolicy.CONTROL_SD), centers
        )
        frame = comparison_frame(rows)
    else:
        frame = balance_frame(
            balance_table(
                d,
                policy=DenominatorPolicy(policy or DenominatorPolicy.POOLED_SD),
                include_centers=centers,
            )
        )
    emit(render(frame, fmt), out)
    if out:
        inputs = {"data": data, **({"compare": compare_path} if compare_path else {})}
        write_run_meta(out, "balance", {"policy": policy, "centers": centers}, {}, inputs)


@cli.command()
@click.argument("data", type=click.Path(dir_okay=False))
@click.option("--method", "method", required=True, help="Method id, e.g. ipw or psmatch+ra")
@click.option("--schema", "schema_path", type=click.Path(dir_okay=False))
@click.option("--arm", type=click.Choice([a.value for a in Arm]), help="Keep one arm only")
@click.option("--outcome", help="Outcome name (default: first outcome)")
@click.option("--estimand", type=ESTIMANDS, default="ATE", show_default=True)
@click.option("--seed", type=int, default=0, help="Seed (default=0)")
@click.option("--setting", "settings", multiple=True, help="Method setting key=value")
@click.option("--learners", help="Super Learner library, e.g. forest,lasso,boost")
@click.option("--folds", type=int, help="Cross-validation folds for sl_tmle")
@click.option("--bootstrap-reps", type=int, help="Bootstrap replicates for regadj")
@click.option("--dump-pscores", type=click.Path(dir_okay=False), help="Write id,z,pscore")
@click.option("--dump-pairs", type=click.Path(dir_okay=False), help="Write matched pairs")
@click.option("--out", type=click.Path(dir_okay=False), help="Write the estimate as JSON")
@click.option("--format", "fmt", type=click.Choice(["md", "csv"]), default="md")
@guarded
def estimate(
    data: str,
    method: str,
    schema_path: str | None,
    arm: str | None,
    outcome: str | None,
    estimand: str,
    seed: int,
    settings: tuple[str, ...],
    learners: str | None,
    folds: int | None,
    bootstrap_reps: int | None,
    dump_pscores: str | None,
    dump_pairs: str | None,
    out: str | None,
    fmt: str,
) -> None:
    """Estimate a treatment effect on one dataset."""
    if not is_known(method):
        raise ConfigError(f"Unknown method '{method}'")
    options = parse_settings(settings)
    for key, value in (("learners", learners), ("folds", folds), ("bootstrap_reps", bootstrap_reps)):
        if value is not None:
            options[key] = value
    d = load_dataset(data, schema_path, arm)
    try:
        result = run_method(method, d, outcome, options, Estimand.parse(estimand), seed)
    except (ValueError, np.linalg.LinAlgError) as e:
        raise MethodFailure(f"{method}: {e}") from None

    emit(render(pd.DataFrame([result.estimate.to_dict()]), fmt), None)
    if dump_pscores:
        if result.pscores is None:
            raise ConfigError(f"{method} does not estimate propensity scores")
        frame = pd.DataFrame({"id": d.ids, "z": d.z.astype(int), "pscore": result.pscores})
        atomic_write_text(dump_pscores, frame.to_csv(index=False, float_format="%.17g"))
    if dump_pairs:
        if result.match is None:
            raise ConfigError(f"{method} is not a matching method")
        atomic_write_text(dump_pairs, result.match.to_frame().to_csv(index=False, float_format="%.17g"))
    if out:
        payload: dict[str, Any] = {"estimate": result.estimate.to_dict()}
        if result.pscores is not None:
            report = positivity_report(result.pscores)
            payload["positivity"] = {
                "violations": report.violations,
                "min": report.min,
                "max": report.max,
                "bounds": list(report.bounds),
            }
        if result.audit is not None:
            payload["audit"] = {
                "rows": [r.to_dict() for r in result.audit.rows],
                "max_abs_std_diff": result.audit.max_abs_std_diff,
                "caliper_ok": result.audit.caliper_ok,
                "constraints_ok": result.audit.constraints_ok,
            }
        atomic_write_json(out, payload)
        config = {"method": method, "settings": options, "estimand": estimand, "outcome": outcome}
        write_run_meta(out, "estimate", config, {"seed": seed}, {"data": data})


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Run configuration JSON")
@click.option("--rct", "rct_path", type=click.Path(dir_okay=False), help="RCT arm CSV")
@click.option("--nrs", "nrs_path", type=click.Path(dir_okay=False), help="NRS arm CSV")
@click.option("--schema", "schema_path", type=click.Path(dir_okay=False))
@click.option("--method", "methods", multiple=True, help="Run only these method ids")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Results JSON")
@click.option("--seed", type=int, help="Master seed (overrides the config)")
@click.option("--jobs", type=int, help="Parallel workers (default: all cores)")
@click.option("--bootstrap-reps", type=int, help="Bootstrap replicates B (>= 100)")
@click.option("--estimand", type=ESTIMANDS, help="Estimand for every method")
@click.pass_context
@guarded
def benchmark(
    ctx: click.Context,
    config_path: str | None,
    rct_path: str | None,
    nrs_path: str | None,
    schema_path: str | None,
    methods: tuple[str, ...],
    out: str,
    seed: int | None,
    jobs: int | None,
    bootstrap_reps: int | None,
    estimand: str | None,
) -> None:
    """Score every configured method against the RCT benchmark."""
    config = RunConfig.from_json(config_path) if config_path else RunConfig.default()
    if methods:
        config = RunConfig(
            methods=tuple(MethodConfig(m) for m in methods),
            bootstrap=config.bootstrap,
            outcomes=config.outcomes,
            denominator_policy=config.denominator_policy,
            jobs=config.jobs,
            plugins=config.plugins,
            plugin_jobs=config.plugin_jobs,
            inputs=config.inputs,
        )
    config = config.with_overrides(
        seed=seed,
        bootstrap_reps=bootstrap_reps,
        jobs=jobs,
        estimand=Estimand.parse(estimand) if estimand else None,
    )
    rct_file = rct_path or config.inputs.get("rct")
    nrs_file = nrs_path or config.inputs.get("nrs")
    if not rct_file or not nrs_file:
        raise ConfigError("Both --rct and --nrs (or config inputs) are required")
    schema_file = schema_path or config.inputs.get("schema")
    rct = load_dataset(rct_file, schema_file)
    nrs = load_dataset(nrs_file, schema_file)

    workers = config.jobs or os.cpu_count() or 1
    quiet = ctx.obj.get("quiet", False)
    report = run_benchmark(config, rct, nrs, jobs=workers, progress=not quiet)
    atomic_write_json(out, report.to_dict())
    write_run_meta(
        out,
        "benchmark",
        config.to_dict(),
        {"seed": config.bootstrap.seed, "B": config.bootstrap.B},
        {"rct": rct_file, "nrs": nrs_file},
    )
    if not quiet:
        click.echo(render(verdict_table(report), "md"), nl=False)
        counts = summarize_verdicts(report.rows)
        click.echo(f"{counts['ok']} ok, {counts['BIASED']} BIASED", err=True)
    failed = [r for r in report.rows if r.error is not None]
    if failed:
        names = ", ".join(sorted({r.method_id for r in failed}))
        raise MethodFailure(f"{len(failed)} of {len(report.rows)} rows failed: {names}")


@cli.command()
@click.option("--in", "in_path", required=True, type=click.Path(dir_okay=False), help="Results JSON")
@click.option("--format", "fmt", type=click.Choice(["md", "csv"]), default="md")
@click.option("--table", type=click.Choice(["plot", "mse", "verdict", "full"]), default="plot",
              help="plot: one line per row; mse/verdict: method x outcome; full: every field")
@click.option("--out", type=click.Path(dir_okay=False))
@guarded
def report(in_path: str, fmt: str, table: str, out: str | None) -> None:
    """Render a results file as a table."""
    path = Path(in_path)
    if not path.is_file():
        raise ConfigError(f"Results file not found: {path}", "INPUT_NOT_FOUND")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    results = BenchmarkReport.from_dict(data)
    builders = {"plot": plot_frame, "mse": mse_table, "verdict": verdict_table, "full": row_frame}
    emit(render(builders[table](results), fmt), out)
    if out:
        write_run_meta(out, "report", {"format": fmt, "table": table}, {}, {"results": in_path})
