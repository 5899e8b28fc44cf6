"""
Benchmark subcommands: validate, mutate, candidates, elicit, score, run, report

Exit codes: 0 success, 1 validation failure, 2 partial (failed nodes or
runs present), 3 hard error.
"""
import json
import logging
import os

import click
from flask import Blueprint, current_app

from config import DEFAULT_BUDGET, DEFAULT_SEED, MAX_WORKERS
from app.services.adversarial import (
    MutationError,
    add_spurious_edge,
    enumerate_candidate_edges,
    save_mutant,
    tweak_units,
)
from app.services.artifacts import load_json
from app.services.dag_model import (
    DagFileNotFoundError,
    DagSpecError,
    DagValidationError,
    dag_to_dict,
    load_dag,
    multi_parent_nodes,
)
from app.services.elicitation import CoefficientSet, elicit_dag, write_elicitation_artifacts
from app.services.llm_backend import (
    BACKEND_KINDS,
    AuditLog,
    BackendConfig,
    BackendError,
    load_backend_config,
)
from app.services.metrics import MetricsError, compute_all
from app.services.reporting import REPORT_FORMATS, ReportError, render_report
from app.services.runner import RunConfigError, load_aggregate, load_run_config, run_benchmark

logger = logging.getLogger(__name__)

bp = Blueprint('benchmark', __name__, cli_group=None)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_PARTIAL = 2
EXIT_HARD_ERROR = 3


def _exit(code):
    click.get_current_context().exit(code)


def _fail(message, code):
    click.echo(f"❌ {message}", err=True)
    _exit(code)


def _load_dag_or_exit(path):
    try:
        return load_dag(path)
    except DagFileNotFoundError as e:
        _fail(str(e), EXIT_HARD_ERROR)
    except DagValidationError as e:
        click.echo(f"❌ {e.source}: {len(e.violations)} violation(s)", err=True)
        for violation in e.violations:
            click.echo(f"  - {violation}", err=True)
        _exit(EXIT_VALIDATION)
    except DagSpecError as e:
        _fail(str(e), EXIT_VALIDATION)


def _resolve_backend(value):
    """A backend config file, or the bare name of a local backend kind"""
    if os.path.exists(value):
        return load_backend_config(value)
    if value in BACKEND_KINDS:
        return BackendConfig(kind=value)
    raise BackendError(f"--backend must be a config file or one of {BACKEND_KINDS}, got {value!r}")


def _parse_pair(value, option):
    parts = [p.strip() for p in value.split(',')]
    if len(parts) != 2 or not all(parts):
        raise MutationError(f"{option}: expected 'parent,child', got {value!r}")
    return parts


def _parse_tweak(value):
    parts = [p.strip() for p in value.split(',')]
    if len(parts) != 3:
        raise MutationError(f"--tweak-units: expected 'from,to,factor', got {value!r}")
    try:
        factor = float(parts[2])
    except ValueError:
        raise MutationError(f"--tweak-units: factor must be a number, got {parts[2]!r}") from None
    return parts[0], parts[1], factor


@bp.cli.command('validate')
@click.argument('dag_path')
def validate(dag_path):
    """Load a DAG spec and report every violation"""
    dag = _load_dag_or_exit(dag_path)
    multi = multi_parent_nodes(dag)
    click.echo(
        f"✅ {dag.name}: {len(dag.variables)} variables, {len(dag.edges)} edges, "
        f"ground truth: {'yes' if dag.ground_truth is not None else 'no'}, "
        f"multi-parent nodes: {len(multi)}"
    )


@bp.cli.command('mutate')
@click.argument('dag_path')
@click.option('--spurious', help="Add a spurious edge 'parent,child'")
@click.option('--tweak-units', 'tweak', help="Rescale units 'from,to,factor'")
@click.option('-o', '--output', help='Write the mutant here (mutation.json goes next to it)')
def mutate(dag_path, spurious, tweak, output):
    """Emit an adversarial mutant of a DAG spec"""
    if bool(spurious) == bool(tweak):
        _fail('Give exactly one of --spurious or --tweak-units', EXIT_VALIDATION)
    dag = _load_dag_or_exit(dag_path)

    try:
        if spurious:
            mutant, record = add_spurious_edge(dag, *_parse_pair(spurious, '--spurious'))
        else:
            mutant, record = tweak_units(dag, *_parse_tweak(tweak))
    except MutationError as e:
        _fail(str(e), EXIT_VALIDATION)

    if output:
        path, sidecar = save_mutant(mutant, record, output)
        click.echo(f"✅ Wrote {path} and {sidecar}")
    else:
        click.echo(json.dumps({'dag': dag_to_dict(mutant), 'mutation': record.to_dict()},
                              indent=2, ensure_ascii=False))


@bp.cli.command('candidates')
@click.argument('dag_path')
@click.option('--strict', is_flag=True, help='Also exclude pairs joined by a directed path')
def candidates(dag_path, strict):
    """List node pairs that can take a spurious edge"""
    dag = _load_dag_or_exit(dag_path)
    pairs = enumerate_candidate_edges(dag, strict=strict)
    for u, v in pairs:
        click.echo(f"{u} -> {v}")
    logger.info(f"🔎 {dag.name}: {len(pairs)} candidate pair(s)")


@bp.cli.command('elicit')
@click.argument('dag_path')
@click.option('--backend', 'backend_value', required=True, help='Backend config file or local kind')
@click.option('--budget', default=DEFAULT_BUDGET, show_default=True, type=click.IntRange(min=1))
@click.option('--seed', default=DEFAULT_SEED, show_default=True, type=int)
@click.option('--output-dir', default=None, help='Run directory (default: <output>/elicit/<dag>)')
@click.option('--parallel', is_flag=True, help='Elicit nodes concurrently')
def elicit(dag_path, backend_value, budget, seed, output_dir, parallel):
    """Single elicitation run; writes coefficients.json and friends"""
    dag = _load_dag_or_exit(dag_path)
    try:
        backend = _resolve_backend(backend_value)
    except BackendError as e:
        _fail(str(e), EXIT_HARD_ERROR)

    run_dir = output_dir or os.path.join(current_app.config['OUTPUT_DIR'], 'elicit', dag.name)
    try:
        os.makedirs(run_dir, exist_ok=True)
        audit_path = os.path.join(run_dir, 'audit.jsonl')
        if os.path.exists(audit_path):
            os.remove(audit_path)
        coefficient_set = elicit_dag(
            dag, backend, budget,
            run_seed=seed,
            parallel=parallel,
            audit_log=AuditLog(audit_path),
            run_id=f"{backend.label}/{dag.name}/seed-{seed}",
        )
        write_elicitation_artifacts(run_dir, coefficient_set)
    except Exception as e:
        logger.exception('❌ Elicitation aborted')
        _fail(f"Elicitation aborted: {e}", EXIT_HARD_ERROR)

    click.echo(os.path.join(run_dir, 'coefficients.json'))
    if not coefficient_set.equations:
        _fail(f"No usable equation for any node of {dag.name}", EXIT_HARD_ERROR)
    if coefficient_set.partial:
        click.echo(f"⚠️ Failed nodes: {', '.join(coefficient_set.failed_nodes)}", err=True)
        _exit(EXIT_PARTIAL)


@bp.cli.command('score')
@click.argument('coefficients_path')
@click.argument('dag_path')
@click.option('--csv', 'as_csv', is_flag=True, help='Per-node CSV instead of JSON')
def score(coefficients_path, dag_path, as_csv):
    """Score a coefficients.json against a DAG's ground truth"""
    dag = _load_dag_or_exit(dag_path)
    try:
        doc = load_json(coefficients_path)
    except ValueError as e:
        _fail(f"{coefficients_path}: invalid JSON ({e})", EXIT_VALIDATION)
    if doc is None:
        _fail(f"Coefficients file not found: {coefficients_path}", EXIT_HARD_ERROR)
    if dag.ground_truth is None:
        _fail(f"DAG {dag.name} has no ground truth to score against", EXIT_VALIDATION)

    try:
        elicited = CoefficientSet.from_dict(doc)
    except (KeyError, TypeError, ValueError) as e:
        _fail(f"{coefficients_path}: not a coefficients document ({e})", EXIT_VALIDATION)
    problems = elicited.check_against(dag)
    if problems:
        click.echo(f"❌ {coefficients_path} does not fit {dag.name}:", err=True)
        for problem in problems:
            click.echo(f"  - {problem}", err=True)
        _exit(EXIT_VALIDATION)

    try:
        report = compute_all(elicited, CoefficientSet.from_ground_truth(dag), dag)
    except MetricsError as e:
        _fail(str(e), EXIT_VALIDATION)

    if as_csv:
        click.echo(report.to_csv(), nl=False)
    else:
        click.echo(json.dumps(report.to_dict(), indent=2))
    if set(dag.variables) - set(elicited.equations):
        _exit(EXIT_PARTIAL)


@bp.cli.command('run')
@click.argument('config_path')
@click.option('--output-dir', default=None, help='Override the config output_dir')
@click.option('--workers', default=None, type=click.IntRange(min=1), help=f"Worker pool size (default {MAX_WORKERS})")
@click.option('--resume', is_flag=True, help='Reuse persisted run.json results')
def run(config_path, output_dir, workers, resume):
    """Run the full benchmark matrix"""
    try:
        config = load_run_config(
            config_path,
            output_dir=os.path.abspath(output_dir) if output_dir else None,
            workers=workers,
        )
    except RunConfigError as e:
        _fail(str(e), EXIT_VALIDATION)

    try:
        report = run_benchmark(config, resume=resume)
    except Exception as e:
        logger.exception('❌ Benchmark aborted')
        _fail(f"Benchmark aborted: {e}", EXIT_HARD_ERROR)

    if not report.cells:
        _fail('No cells were run (no DAG could be loaded)', EXIT_HARD_ERROR)
    click.echo(render_report(report, 'markdown'), nl=False)
    if report.has_failures:
        _exit(EXIT_PARTIAL)


@bp.cli.command('report')
@click.argument('aggregate_path')
@click.option('--format', 'fmt', type=click.Choice(REPORT_FORMATS), default='markdown', show_default=True)
@click.option('-o', '--output', help='Write to a file instead of stdout')
def report(aggregate_path, fmt, output):
    """Render aggregate.json as markdown, csv or json"""
    try:
        aggregate = load_aggregate(aggregate_path)
    except FileNotFoundError as e:
        _fail(str(e), EXIT_HARD_ERROR)
    except (ValueError, KeyError, TypeError) as e:
        _fail(f"{aggregate_path}: not an aggregate report ({e})", EXIT_VALIDATION)

    try:
        text = render_report(aggregate, fmt, output)
    except ReportError as e:
        _fail(str(e), EXIT_VALIDATION)

    if output:
        click.echo(f"✅ Wrote {output}")
    else:
        click.echo(text, nl=False)
