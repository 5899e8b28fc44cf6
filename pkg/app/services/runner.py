"""
Benchmark orchestration over the (backend x DAG x condition) matrix

Every repetition is an independent elicit_dag run with its own backend
instance and run directory. Per-run results are persisted to run.json before
aggregation, so an interrupted matrix can be re-aggregated with resume=True.
"""
import json
import logging
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from config import (
    CI_Z,
    DEFAULT_BUDGET,
    DEFAULT_REPETITIONS,
    DEFAULT_SEED,
    MAX_WORKERS,
    OUTPUT_DIR,
)
from app.services.adversarial import (
    SPURIOUS_EDGE,
    UNIT_TWEAK,
    MutationError,
    add_spurious_edge,
    sample_spurious_edges,
    save_mutant,
    tweak_units,
)
from app.services.artifacts import ensure_dir, load_json, save_json
from app.services.dag_model import DagSpecError, load_dag
from app.services.elicitation import CoefficientSet, elicit_dag, write_elicitation_artifacts
from app.services.llm_backend import AuditLog, BackendConfig, BackendError
from app.services.metrics import METRIC_NAMES, compute_all
from app.services.reporting import render_report

logger = logging.getLogger(__name__)

ORIGINAL = 'original'
CONDITION_KINDS = (ORIGINAL, UNIT_TWEAK, SPURIOUS_EDGE)

# run statuses
RUN_OK = 'ok'
RUN_PARTIAL = 'partial'
RUN_UNPARSABLE = 'unparsable'
RUN_ERROR = 'error'

# cell statuses
CELL_OK = 'ok'
CELL_PARTIAL = 'partial'
CELL_UNPARSABLE = 'unparsable'
CELL_ERROR = 'error'
CELL_NO_GROUND_TRUTH = 'no-ground-truth'

CI_METHOD = f"normal approximation: mean ± {CI_Z}·s/√n (s: sample standard deviation)"

_UNSAFE_PATH_CHARS = re.compile(r'[^A-Za-z0-9_.\-]+')


class RunConfigError(Exception):
    pass


def _slug(text):
    return _UNSAFE_PATH_CHARS.sub('_', text) or '_'


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass(frozen=True)
class Condition:
    """
    One column of the matrix: original, unit-tweak or spurious-edge

    A spurious-edge condition either pins a pair (parent, child) or asks for
    `sample` seeded candidate pairs, each of which becomes its own condition.
    """

    kind: str = ORIGINAL
    label: str = None
    params: dict = field(default_factory=dict)
    sample: int = None
    strict: bool = False
    dags: tuple = None

    def __post_init__(self):
        if self.kind not in CONDITION_KINDS:
            raise RunConfigError(f"Unknown condition kind {self.kind!r} (expected one of {CONDITION_KINDS})")
        if self.kind == UNIT_TWEAK:
            missing = {'from_unit', 'to_unit', 'factor'} - set(self.params)
            if missing:
                raise RunConfigError(f"unit-tweak condition missing {sorted(missing)}")
        if self.kind == SPURIOUS_EDGE and self.sample is None:
            missing = {'parent', 'child'} - set(self.params)
            if missing:
                raise RunConfigError(f"spurious-edge condition needs parent/child or sample (missing {sorted(missing)})")
        if self.sample is not None and (self.kind != SPURIOUS_EDGE or self.sample < 1):
            raise RunConfigError('sample applies to spurious-edge conditions and must be >= 1')

    @property
    def name(self):
        if self.label:
            return self.label
        if self.kind == UNIT_TWEAK:
            return f"{self.params['from_unit']}-to-{self.params['to_unit']}"
        if self.kind == SPURIOUS_EDGE and self.sample is None:
            return f"{self.params['parent']}-{self.params['child']}"
        return self.kind

    def applies_to(self, dag_name):
        return self.dags is None or dag_name in self.dags

    def to_dict(self):
        data = {'kind': self.kind, 'label': self.name, **self.params}
        if self.sample is not None:
            data['sample'] = self.sample
            data['strict'] = self.strict
        if self.dags is not None:
            data['dags'] = list(self.dags)
        return data

    @classmethod
    def from_dict(cls, data):
        if isinstance(data, str):
            data = {'kind': data}
        data = dict(data)
        kind = data.pop('kind', ORIGINAL)
        label = data.pop('label', None)
        sample = data.pop('sample', None)
        strict = bool(data.pop('strict', False))
        dags = data.pop('dags', None)
        return cls(
            kind=kind,
            label=label,
            params=data,
            sample=sample,
            strict=strict,
            dags=tuple(dags) if dags is not None else None,
        )


@dataclass(frozen=True)
class RunConfig:
    dag_paths: tuple
    backends: tuple
    conditions: tuple = (Condition(),)
    repetitions: int = DEFAULT_REPETITIONS
    budget: int = DEFAULT_BUDGET
    seed: int = DEFAULT_SEED
    output_dir: str = OUTPUT_DIR
    parallel_nodes: bool = False
    workers: int = MAX_WORKERS

    def __post_init__(self):
        if not self.dag_paths:
            raise RunConfigError('dag_paths must list at least one DAG file')
        if not self.backends:
            raise RunConfigError('backends must list at least one backend')
        if self.repetitions < 1:
            raise RunConfigError(f"repetitions must be >= 1, got {self.repetitions}")
        if self.budget < 1:
            raise RunConfigError(f"budget must be >= 1, got {self.budget}")
        if self.workers < 1:
            raise RunConfigError(f"workers must be >= 1, got {self.workers}")
        labels = [b.label for b in self.backends]
        if len(set(labels)) != len(labels):
            raise RunConfigError(f"Backend labels must be unique, got {labels}")
        names = [c.name for c in self.conditions]
        if len(set(names)) != len(names):
            raise RunConfigError(f"Condition labels must be unique, got {names}")

    def to_dict(self):
        """Echo written into aggregate.json (output_dir left out so reruns elsewhere compare equal)"""
        return {
            'dag_paths': list(self.dag_paths),
            'backends': [b.to_dict() for b in self.backends],
            'conditions': [c.to_dict() for c in self.conditions],
            'repetitions': self.repetitions,
            'budget': self.budget,
            'seed': self.seed,
            'parallel_nodes': self.parallel_nodes,
        }

    @classmethod
    def from_dict(cls, data, base_dir=None):
        """
        Build from a decoded config file; relative paths resolve against base_dir
        """
        def resolve(path):
            if base_dir and not os.path.isabs(path):
                return os.path.normpath(os.path.join(base_dir, path))
            return path

        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise RunConfigError(f"Unknown run config field(s): {sorted(unknown)}")
        try:
            backends = tuple(BackendConfig.from_dict(b, base_dir=base_dir) for b in data.get('backends', []))
        except BackendError as e:
            raise RunConfigError(str(e)) from e
        except TypeError as e:
            raise RunConfigError(f"Invalid backend entry: {e}") from e

        kwargs = {
            'dag_paths': tuple(resolve(p) for p in data.get('dag_paths', [])),
            'backends': backends,
        }
        if 'conditions' in data:
            kwargs['conditions'] = tuple(Condition.from_dict(c) for c in data['conditions'])
        for key in ('repetitions', 'budget', 'seed', 'workers'):
            if key in data:
                kwargs[key] = int(data[key])
        if 'parallel_nodes' in data:
            kwargs['parallel_nodes'] = bool(data['parallel_nodes'])
        if data.get('output_dir'):
            kwargs['output_dir'] = resolve(data['output_dir'])
        return cls(**kwargs)


def load_run_config(path, **overrides):
    """Read a RunConfig file; keyword overrides (e.g. output_dir) win over the file"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise RunConfigError(f"Run config not found: {path}") from e
    except json.JSONDecodeError as e:
        raise RunConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise RunConfigError(f"{path}: top level must be a JSON object")
    config = RunConfig.from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(config, **overrides) if overrides else config


# ============================================================================
# AGGREGATE REPORT
# ============================================================================

def aggregate_values(values):
    """
    Mean and 95% half-width of per-run metric values

    Returns:
        Tuple of (mean, half_width); half_width is None for a single value
    """
    values = [float(v) for v in values]
    if not values:
        raise ValueError('aggregate_values needs at least one value')
    if len(set(values)) == 1:
        return values[0], (0.0 if len(values) > 1 else None)
    array = np.asarray(values)
    mean = float(np.mean(array))
    half_width = CI_Z * float(np.std(array, ddof=1)) / math.sqrt(len(values))
    return mean, half_width


@dataclass
class CellSummary:
    backend: str
    dag: str
    condition: str
    status: str
    repetitions: int
    run_count: int = 0
    failed_run_count: int = 0
    metrics: dict = field(default_factory=dict)
    provenance: list = field(default_factory=list)
    mutation: dict = None
    note: str = None

    def to_dict(self):
        return {
            'backend': self.backend,
            'dag': self.dag,
            'condition': self.condition,
            'status': self.status,
            'repetitions': self.repetitions,
            'run_count': self.run_count,
            'failed_run_count': self.failed_run_count,
            'metrics': {name: dict(self.metrics[name]) for name in METRIC_NAMES if name in self.metrics},
            'provenance': list(self.provenance),
            'mutation': self.mutation,
            'note': self.note,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(**{key: data.get(key) for key in cls.__dataclass_fields__ if key in data})


@dataclass
class AggregateReport:
    cells: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    load_errors: list = field(default_factory=list)
    ci_method: str = CI_METHOD

    @property
    def has_failures(self):
        return bool(self.load_errors) or any(c.failed_run_count or c.status == CELL_ERROR for c in self.cells)

    def to_dict(self):
        return {
            'ci_method': self.ci_method,
            'config': self.config,
            'load_errors': list(self.load_errors),
            'cells': [cell.to_dict() for cell in self.cells],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            cells=[CellSummary.from_dict(c) for c in data.get('cells', [])],
            config=data.get('config', {}),
            load_errors=data.get('load_errors', []),
            ci_method=data.get('ci_method', CI_METHOD),
        )


def load_aggregate(path):
    data = load_json(path)
    if data is None:
        raise FileNotFoundError(f"Aggregate report not found: {path}")
    return AggregateReport.from_dict(data)


# ============================================================================
# MATRIX PREPARATION
# ============================================================================

@dataclass(frozen=True)
class PreparedCondition:
    label: str
    dag: object = None
    mutation: object = None
    error: str = None


def prepare_conditions(dag, conditions, seed=DEFAULT_SEED):
    """
    Apply each condition that targets this DAG

    Sampled spurious-edge conditions expand to one entry per drawn pair,
    labelled "<label>-<parent>-<child>". Mutation failures are returned as
    entries carrying the error instead of raising.
    """
    prepared = []
    for condition in conditions:
        if not condition.applies_to(dag.name):
            continue
        try:
            if condition.kind == ORIGINAL:
                prepared.append(PreparedCondition(condition.name, dag))
            elif condition.kind == UNIT_TWEAK:
                p = condition.params
                mutant, record = tweak_units(dag, p['from_unit'], p['to_unit'], float(p['factor']))
                prepared.append(PreparedCondition(condition.name, mutant, record))
            elif condition.sample is None:
                mutant, record = add_spurious_edge(dag, condition.params['parent'], condition.params['child'])
                prepared.append(PreparedCondition(condition.name, mutant, record))
            else:
                pairs = sample_spurious_edges(dag, condition.sample, seed=seed, strict=condition.strict)
                for u, v in pairs:
                    mutant, record = add_spurious_edge(dag, u, v)
                    prepared.append(PreparedCondition(f"{condition.name}-{u}-{v}", mutant, record))
        except (MutationError, DagSpecError) as e:
            logger.error(f"❌ {dag.name}/{condition.name}: {e}")
            prepared.append(PreparedCondition(condition.name, error=str(e)))
    return prepared


@dataclass(frozen=True)
class RunTask:
    backend: BackendConfig
    dag: object
    condition: str
    repetition: int
    run_seed: int
    run_dir: str
    budget: int
    parallel_nodes: bool

    @property
    def run_id(self):
        return f"{self.backend.label}/{self.dag.name}/{self.condition}/rep-{self.repetition:03d}"


def cell_dir(output_dir, backend_label, dag_name, condition):
    return os.path.join(output_dir, 'runs', _slug(backend_label), _slug(dag_name), _slug(condition))


# ============================================================================
# SINGLE RUN
# ============================================================================

def _run_status(coefficient_set):
    if coefficient_set.has_backend_error:
        return RUN_ERROR
    if not coefficient_set.equations:
        return RUN_UNPARSABLE
    if coefficient_set.partial:
        return RUN_PARTIAL
    return RUN_OK


def execute_run(task, resume=False):
    """
    One elicit_dag run plus scoring; writes every artifact into task.run_dir

    Returns:
        The run.json record
    """
    run_json = os.path.join(task.run_dir, 'run.json')
    if resume:
        existing = load_json(run_json)
        if existing is not None:
            logger.info(f"⏭️ {task.run_id}: reusing persisted result")
            return existing

    ensure_dir(task.run_dir)
    audit_path = os.path.join(task.run_dir, 'audit.jsonl')
    if os.path.exists(audit_path):
        os.remove(audit_path)

    record = {
        'run_id': task.run_id,
        'backend': task.backend.label,
        'dag': task.dag.name,
        'condition': task.condition,
        'repetition': task.repetition,
        'run_seed': task.run_seed,
        'status': RUN_ERROR,
        'failed': True,
        'parseable_equations': 0,
        'failed_nodes': [],
        'metrics': None,
        'error': None,
    }

    try:
        coefficient_set = elicit_dag(
            task.dag,
            task.backend,
            task.budget,
            run_seed=task.run_seed,
            parallel=task.parallel_nodes,
            audit_log=AuditLog(audit_path),
            run_id=task.run_id,
        )
        write_elicitation_artifacts(task.run_dir, coefficient_set)

        status = _run_status(coefficient_set)
        record.update({
            'status': status,
            'failed': status in (RUN_ERROR, RUN_UNPARSABLE),
            'parseable_equations': len(coefficient_set.equations),
            'failed_nodes': coefficient_set.failed_nodes,
        })
        if not record['failed'] and task.dag.ground_truth is not None:
            report = compute_all(coefficient_set, CoefficientSet.from_ground_truth(task.dag), task.dag)
            save_json(os.path.join(task.run_dir, 'metrics.json'), report.to_dict())
            record['metrics'] = report.values()
    except Exception as e:
        logger.exception(f"❌ {task.run_id}: run aborted")
        record['error'] = f"{type(e).__name__}: {e}"

    save_json(run_json, record)
    return record


# ============================================================================
# AGGREGATION
# ============================================================================

def summarize_cell(backend_label, dag, condition, records, repetitions, output_dir, mutation=None):
    """Fold the run.json records of one cell into a CellSummary"""
    records = sorted(records, key=lambda r: r['repetition'])
    failed = [r for r in records if r['failed']]
    succeeded = [r for r in records if not r['failed']]
    scored = [r for r in succeeded if r.get('metrics')]

    cell = CellSummary(
        backend=backend_label,
        dag=dag.name,
        condition=condition,
        status=CELL_OK,
        repetitions=repetitions,
        run_count=len(succeeded),
        failed_run_count=len(failed),
        provenance=[
            os.path.relpath(os.path.join(cell_dir(output_dir, backend_label, dag.name, condition),
                                         f"rep-{r['repetition']:03d}"), output_dir).replace(os.sep, '/')
            for r in records
        ],
        mutation=mutation.to_dict() if mutation is not None else None,
    )

    if records and not succeeded and all(r['status'] == RUN_UNPARSABLE for r in records):
        cell.status = CELL_UNPARSABLE
        cell.note = 'Model output equations not parsable by the program.'
        return cell
    if dag.ground_truth is None:
        cell.status = CELL_NO_GROUND_TRUTH
        cell.note = 'DAG has no ground truth; runs were elicited but not scored.'
        return cell
    if not scored:
        cell.status = CELL_ERROR
        cell.note = f"All {len(records)} run(s) failed."
        return cell

    for name in METRIC_NAMES:
        mean, half_width = aggregate_values([r['metrics'][name] for r in scored])
        cell.metrics[name] = {'mean': mean, 'ci_half_width': half_width}
    if failed or any(r['status'] == RUN_PARTIAL for r in succeeded):
        cell.status = CELL_PARTIAL
    return cell


def _error_cell(backend_label, dag_name, condition, repetitions, message):
    return CellSummary(
        backend=backend_label,
        dag=dag_name,
        condition=condition,
        status=CELL_ERROR,
        repetitions=repetitions,
        run_count=0,
        failed_run_count=repetitions,
        note=message,
    )


def run_benchmark(config, resume=False):
    """
    Run the whole matrix and write aggregate.json, report.md and report.csv

    Args:
        config: RunConfig
        resume: Reuse persisted run.json results instead of re-eliciting

    Returns:
        AggregateReport
    """
    output_dir = ensure_dir(config.output_dir)
    report = AggregateReport(config=config.to_dict())

    dags = []
    for path in config.dag_paths:
        try:
            dags.append(load_dag(path))
        except DagSpecError as e:
            logger.error(f"❌ Skipping DAG {path}: {e}")
            report.load_errors.append({'path': path, 'error': str(e)})

    # (backend, dag, prepared condition) in report order
    cells = []
    for dag in dags:
        prepared = prepare_conditions(dag, config.conditions, seed=config.seed)
        for condition in prepared:
            if condition.dag is not None and condition.dag is not dag:
                mutant_path = os.path.join(output_dir, 'dags', _slug(dag.name), _slug(condition.label), 'dag.json')
                save_mutant(condition.dag, condition.mutation, mutant_path)
            for backend in config.backends:
                cells.append((backend, dag, condition))

    tasks = []
    for backend, dag, condition in cells:
        if condition.error:
            continue
        base = cell_dir(output_dir, backend.label, dag.name, condition.label)
        for repetition in range(config.repetitions):
            tasks.append(RunTask(
                backend=backend,
                dag=condition.dag,
                condition=condition.label,
                repetition=repetition,
                run_seed=config.seed + repetition,
                run_dir=os.path.join(base, f"rep-{repetition:03d}"),
                budget=config.budget,
                parallel_nodes=config.parallel_nodes,
            ))

    logger.info(f"🚀 {len(cells)} cell(s), {len(tasks)} run(s), {config.workers} worker(s)")
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        results = list(pool.map(lambda task: execute_run(task, resume=resume), tasks))

    by_cell = {}
    for task, record in zip(tasks, results):
        by_cell.setdefault((task.backend.label, task.dag.name, task.condition), []).append(record)

    for backend, dag, condition in cells:
        if condition.error:
            report.cells.append(_error_cell(backend.label, dag.name, condition.label, config.repetitions, condition.error))
            continue
        records = by_cell.get((backend.label, dag.name, condition.label), [])
        report.cells.append(summarize_cell(
            backend.label, condition.dag, condition.label, records,
            config.repetitions, output_dir, mutation=condition.mutation,
        ))

    save_json(os.path.join(output_dir, 'aggregate.json'), report.to_dict())
    if report.cells:
        render_report(report, 'markdown', os.path.join(output_dir, 'report.md'))
        render_report(report, 'csv', os.path.join(output_dir, 'report.csv'))
    logger.info(f"✅ Matrix complete: {len(report.cells)} cell(s) -> {output_dir}")
    return report
