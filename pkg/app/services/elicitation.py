"""
Graph-level elicitation loop and node-level iterative feedback

Nodes are visited in topological order. For every node the backend is asked
for an equation; each proposal is parsed, its value range C1 is propagated
from the parents' bounds and checked against the node's own bounds C2.
Rejected proposals are fed back into the next prompt until the budget runs out.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from config import MAX_WORKERS
from app.services.artifacts import save_json, save_jsonl
from app.services.dag_model import parents, topological_order
from app.services.equation import (
    EquationParseError,
    StructuralEquation,
    contains,
    format_equation,
    parse_equation,
    propagate_interval,
)
from app.services.llm_backend import (
    EQUATION_FIELD,
    Backend,
    BackendConfig,
    BackendError,
    PayloadExtractionError,
    create_backend,
    extract_json_payload,
)
from app.services.prompting import build_feedback_addendum, build_prompt

logger = logging.getLogger(__name__)

ACCEPTED = 'accepted'
RANGE_VIOLATION = 'range-violation'
PARSE_FAILURE = 'parse-failure'

# node flags
FLAG_BUDGET_EXHAUSTED = 'budget-exhausted'
FLAG_PARSE_FAILURE = 'parse-failure'
FLAG_BACKEND_ERROR = 'backend-error'
FLAG_NOISE_OMITTED = 'noise-omitted'
FLAG_OMITTED_PARENTS = 'omitted-parents'

FAILURE_FLAGS = (FLAG_PARSE_FAILURE, FLAG_BACKEND_ERROR)


class ElicitationError(Exception):
    pass


@dataclass
class Attempt:
    index: int
    prompt: object
    raw: object
    parsed: StructuralEquation = None
    parse_error: dict = None
    c1: object = None
    verdict: str = PARSE_FAILURE
    equation_text: str = None
    reasoning: str = None

    def to_dict(self):
        return {
            'index': self.index,
            'prompt_sha256': self.prompt.sha256(),
            'system_text': self.prompt.system_text,
            'user_text': self.prompt.user_text,
            'response_text': self.raw.text,
            'latency_ms': round(self.raw.latency * 1000, 3),
            'reasoning': self.reasoning,
            'equation_text': self.equation_text,
            'parsed': format_equation(self.parsed) if self.parsed is not None else None,
            'parse_error': self.parse_error,
            'c1': self.c1.to_list() if self.c1 is not None else None,
            'verdict': self.verdict,
        }


@dataclass
class NodeElicitation:
    """Full attempt history for one node"""

    target: str
    attempts: list = field(default_factory=list)
    accepted: bool = False
    final_equation: StructuralEquation = None
    backend_error: str = None

    @property
    def iterations_used(self):
        return len(self.attempts)

    @property
    def failed(self):
        return self.final_equation is None or self.backend_error is not None

    @property
    def flags(self):
        flags = []
        if self.backend_error:
            flags.append(FLAG_BACKEND_ERROR)
        if self.final_equation is None:
            if not self.backend_error:
                flags.append(FLAG_PARSE_FAILURE)
            return flags
        if not self.accepted:
            flags.append(FLAG_BUDGET_EXHAUSTED)
        if self.final_equation.noise_omitted:
            flags.append(FLAG_NOISE_OMITTED)
        if self.final_equation.omitted_parents:
            flags.append(FLAG_OMITTED_PARENTS)
        return flags


@dataclass
class CoefficientSet:
    """
    Aggregated equations of one run (failed nodes excluded) plus per-node flags
    """

    dag_name: str
    equations: dict
    flags: dict = field(default_factory=dict)
    elicitations: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def failed_nodes(self):
        return sorted(node for node, flags in self.flags.items() if any(f in FAILURE_FLAGS for f in flags))

    @property
    def partial(self):
        return bool(self.failed_nodes)

    @property
    def has_backend_error(self):
        return any(FLAG_BACKEND_ERROR in flags for flags in self.flags.values())

    @classmethod
    def from_ground_truth(cls, dag):
        if dag.ground_truth is None:
            raise ElicitationError(f"DAG {dag.name} has no ground truth")
        return cls(dag_name=dag.name, equations=dict(dag.ground_truth), flags={})

    def to_dict(self):
        return {
            'dag': self.dag_name,
            'equations': {node: self.equations[node].to_dict() for node in sorted(self.equations)},
        }

    def flags_dict(self):
        return {
            'dag': self.dag_name,
            'partial': self.partial,
            'failed_nodes': self.failed_nodes,
            'nodes': {node: self.flags[node] for node in sorted(self.flags)},
        }

    @classmethod
    def from_dict(cls, doc, flags=None):
        equations = {
            node: StructuralEquation.from_dict(node, record)
            for node, record in doc['equations'].items()
        }
        return cls(dag_name=doc.get('dag', ''), equations=equations, flags=dict(flags or {}))

    def check_against(self, dag):
        """Domain within the DAG's nodes; equations reference declared parents only"""
        problems = []
        for node, eq in self.equations.items():
            if node not in dag.variables:
                problems.append(f"equation for unknown node {node!r}")
                continue
            extra = set(eq.coefficients) - parents(dag, node)
            if extra:
                problems.append(f"{node}: coefficients for non-parents {sorted(extra)}")
        return problems


def _resolve_backend(backend, dag):
    if isinstance(backend, Backend):
        return backend
    if isinstance(backend, BackendConfig):
        return create_backend(backend, dag=dag)
    raise TypeError(f"Expected Backend or BackendConfig, got {type(backend).__name__}")


def elicit_node(dag, target, backend, budget, run_seed=0):
    """
    Iterative feedback refinement for one node

    Args:
        dag: DagSpec
        target: Node id
        backend: Backend instance or BackendConfig
        budget: Maximum number of backend calls (>= 1)
        run_seed: Seed forwarded to the backend

    Returns:
        NodeElicitation
    """
    if budget < 1:
        raise ElicitationError(f"budget must be >= 1, got {budget}")
    backend = _resolve_backend(backend, dag)

    parent_ids = parents(dag, target)
    parent_bounds = {p: dag.bounds(p) for p in parent_ids}
    c2 = dag.bounds(target)
    result = NodeElicitation(target=target)
    last_parsed = None
    feedback = ''

    for index in range(1, budget + 1):
        prompt = build_prompt(dag, target, attempt_index=index, feedback=feedback)
        try:
            raw = backend.complete(prompt, run_seed)
        except BackendError as e:
            logger.error(f"❌ {dag.name}/{target}: backend failure on attempt {index}: {e}")
            result.backend_error = str(e)
            break

        attempt = Attempt(index=index, prompt=prompt, raw=raw)
        result.attempts.append(attempt)

        try:
            payload = extract_json_payload(raw.text)
            attempt.reasoning = payload.get('thoughts') or payload.get('reasoning')
            attempt.equation_text = payload[EQUATION_FIELD]
            parsed = parse_equation(attempt.equation_text, target, parent_ids)
        except (PayloadExtractionError, EquationParseError) as e:
            attempt.verdict = PARSE_FAILURE
            attempt.parse_error = e.to_dict() if isinstance(e, EquationParseError) else {
                'code': type(e).__name__, 'message': str(e), 'span': None, 'fragment': '',
            }
            logger.info(f"⚠️ {dag.name}/{target} attempt {index}: unparsable ({e})")
            feedback = build_feedback_addendum(
                None, None, c2, parse_errors=[e],
                previous_text=attempt.equation_text if isinstance(attempt.equation_text, str) else None,
            )
            continue

        attempt.parsed = last_parsed = parsed
        attempt.c1 = propagate_interval(parsed, parent_bounds)

        if contains(c2, attempt.c1):
            attempt.verdict = ACCEPTED
            result.accepted = True
            logger.info(f"✅ {dag.name}/{target}: accepted at attempt {index}")
            break

        attempt.verdict = RANGE_VIOLATION
        logger.info(f"↩️ {dag.name}/{target} attempt {index}: C1 {attempt.c1} outside C2 {c2}")
        feedback = build_feedback_addendum(parsed, attempt.c1, c2)

    result.final_equation = last_parsed
    if not result.accepted and not result.backend_error:
        if last_parsed is None:
            logger.warning(f"❌ {dag.name}/{target}: no parseable proposal in {budget} attempt(s)")
        else:
            logger.warning(f"⚠️ {dag.name}/{target}: budget {budget} reached, keeping last proposal")
    return result


def elicit_dag(dag, backend, budget, run_seed=0, parallel=False, max_workers=MAX_WORKERS,
               audit_log=None, run_id=None):
    """
    Elicit every node of the DAG in topological order

    Args:
        dag: DagSpec
        backend: BackendConfig (a fresh backend is created for this run) or Backend
        budget: Feedback-loop budget per node
        run_seed: Seed forwarded to the backend
        parallel: Elicit nodes concurrently (they only share static metadata)
        max_workers: Worker count in parallel mode
        audit_log: Optional AuditLog for backend calls
        run_id: Identifier written into audit records

    Returns:
        CoefficientSet with per-node elicitations attached
    """
    if isinstance(backend, BackendConfig):
        backend = create_backend(backend, dag=dag, audit_log=audit_log, run_id=run_id)
    else:
        backend = _resolve_backend(backend, dag)

    order = topological_order(dag)
    if parallel:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = {node: pool.submit(elicit_node, dag, node, backend, budget, run_seed) for node in order}
            elicitations = {node: futures[node].result() for node in order}
    else:
        elicitations = {node: elicit_node(dag, node, backend, budget, run_seed) for node in order}

    coefficient_set = CoefficientSet(
        dag_name=dag.name,
        equations={n: e.final_equation for n, e in elicitations.items() if not e.failed},
        flags={n: e.flags for n, e in elicitations.items()},
        elicitations=elicitations,
    )
    if coefficient_set.partial:
        logger.warning(f"⚠️ {dag.name}: partial run, failed nodes {coefficient_set.failed_nodes}")
    return coefficient_set


def write_elicitation_artifacts(run_dir, coefficient_set):
    """attempts.jsonl, coefficients.json and flags.json for one run"""
    records = []
    for node, elicitation in coefficient_set.elicitations.items():
        for attempt in elicitation.attempts:
            records.append({'target': node, **attempt.to_dict()})
    save_jsonl(os.path.join(run_dir, 'attempts.jsonl'), records)
    save_json(os.path.join(run_dir, 'coefficients.json'), coefficient_set.to_dict())
    save_json(os.path.join(run_dir, 'flags.json'), coefficient_set.flags_dict())
