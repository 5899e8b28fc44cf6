"""
DAG specifications: variables with units and hard bounds, edges, ground truth

Loads and validates DAG-spec JSON files and provides topological traversal and
parent lookup for the elicitation loop.
"""
import json
import logging
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from types import MappingProxyType

import networkx as nx

from app.services.equation import IDENTIFIER_RE, Interval, StructuralEquation

logger = logging.getLogger(__name__)


class DagSpecError(Exception):
    """Base class for DAG-spec errors"""


class DagFileNotFoundError(DagSpecError):
    pass


class MalformedDagError(DagSpecError):
    """The document is not a JSON object"""


class DagValidationError(DagSpecError):
    """One or more invariants are violated; all of them are listed"""

    def __init__(self, violations, source='<memory>'):
        self.violations = list(violations)
        self.source = source
        summary = '; '.join(self.violations)
        super().__init__(f"{source}: {len(self.violations)} violation(s): {summary}")


class UnknownNodeError(DagSpecError, KeyError):
    pass


@dataclass(frozen=True)
class VariableMeta:
    """Metadata for one node, including its hard bounds (C2)"""

    id: str
    display_name: str
    description: str
    unit: str
    bounds: Interval

    def to_dict(self):
        return {
            'display_name': self.display_name,
            'description': self.description,
            'unit': self.unit,
            'bounds': self.bounds.to_list(),
        }


@dataclass(frozen=True, eq=False)
class DagSpec:
    """
    Immutable DAG specification

    Build through load_dag / dag_from_dict so the invariants are checked.
    """

    name: str
    persona: str
    phenomenon_overview: str
    variables: MappingProxyType
    edges: frozenset
    ground_truth: MappingProxyType = None
    source: str = field(default='<memory>', compare=False)

    @cached_property
    def graph(self):
        graph = nx.DiGraph()
        graph.add_nodes_from(sorted(self.variables))
        graph.add_edges_from(sorted(self.edges))
        return graph

    def bounds(self, node):
        return self.variables[node].bounds


# ============================================================================
# VALIDATION
# ============================================================================

def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check_variable(node_id, record, violations):
    if not isinstance(node_id, str) or not node_id:
        violations.append('variable id must be a non-empty string')
        return
    if not IDENTIFIER_RE.match(node_id):
        violations.append(f"variable id {node_id!r} is not an identifier ([A-Za-z_][A-Za-z0-9_]*)")
    if not isinstance(record, dict):
        violations.append(f"variable {node_id!r}: expected an object")
        return
    for key in ('display_name', 'description', 'unit'):
        if not isinstance(record.get(key), str):
            violations.append(f"variable {node_id!r}: missing or non-string {key!r}")
    bounds = record.get('bounds')
    if not (isinstance(bounds, list) and len(bounds) == 2 and all(_is_number(b) for b in bounds)):
        violations.append(f"variable {node_id!r}: bounds must be [lo, hi] numbers")
        return
    lo, hi = bounds
    if not (math.isfinite(lo) and math.isfinite(hi)):
        violations.append(f"variable {node_id!r}: bounds must be finite, got {bounds}")
    elif lo > hi:
        violations.append(f"variable {node_id!r}: bounds lo > hi ({lo} > {hi})")


def _check_edges(edges, variables, violations):
    """Returns the well-formed edge pairs"""
    valid = []
    seen = set()
    for edge in edges:
        if not (isinstance(edge, list) and len(edge) == 2 and all(isinstance(e, str) for e in edge)):
            violations.append(f"edge {edge!r} must be a [parent, child] pair of ids")
            continue
        parent, child = edge
        missing = [e for e in (parent, child) if e not in variables]
        if missing:
            violations.append(f"edge {parent}->{child} references unknown variable(s) {missing}")
            continue
        if parent == child:
            violations.append(f"self-loop {parent}->{child}")
            continue
        if (parent, child) in seen:
            violations.append(f"duplicate edge {parent}->{child}")
            continue
        seen.add((parent, child))
        valid.append((parent, child))
    return valid


def _stuck_nodes(variables, edges):
    """Nodes left after indegree peeling: those on or downstream of a cycle"""
    graph = nx.DiGraph()
    graph.add_nodes_from(variables)
    graph.add_edges_from(edges)
    if nx.is_directed_acyclic_graph(graph):
        return set()
    stuck = set()
    for component in nx.strongly_connected_components(graph):
        if len(component) > 1:
            stuck |= component
    for node in list(stuck):
        stuck |= nx.descendants(graph, node)
    return stuck


def _check_ground_truth(ground_truth, variables, edges, violations):
    if not isinstance(ground_truth, dict):
        violations.append('ground_truth must be an object')
        return
    parent_sets = {node: set() for node in variables}
    for parent, child in edges:
        parent_sets[child].add(parent)

    for node in variables:
        if node not in ground_truth:
            violations.append(f"ground_truth missing node {node!r}")
    for node, record in ground_truth.items():
        if node not in variables:
            violations.append(f"ground_truth for unknown variable {node!r}")
            continue
        if not isinstance(record, dict):
            violations.append(f"ground_truth {node!r}: expected an object")
            continue
        if not _is_number(record.get('intercept')):
            violations.append(f"ground_truth {node!r}: intercept must be a number")
        noise = record.get('noise_variance', 0.0)
        if not _is_number(noise) or not math.isfinite(noise) or noise < 0:
            violations.append(f"ground_truth {node!r}: noise_variance must be a finite number >= 0")
        coefficients = record.get('coefficients')
        if not isinstance(coefficients, dict) or not all(_is_number(v) for v in coefficients.values()):
            violations.append(f"ground_truth {node!r}: coefficients must map parent ids to numbers")
            continue
        if set(coefficients) != parent_sets[node]:
            violations.append(
                f"ground_truth {node!r}: coefficient keys {sorted(coefficients)} "
                f"!= parents {sorted(parent_sets[node])}"
            )


def validate_document(doc):
    """
    Check a decoded DAG-spec document against every invariant

    Returns:
        List of violation strings (empty when valid)
    """
    violations = list(doc.pop('__duplicate_keys__', [])) if isinstance(doc, dict) else []
    if not isinstance(doc, dict):
        return ['document must be a JSON object']

    for key in ('name', 'persona', 'phenomenon_overview'):
        if not isinstance(doc.get(key), str):
            violations.append(f"missing or non-string {key!r}")

    variables = doc.get('variables')
    if not isinstance(variables, dict) or not variables:
        violations.append("'variables' must be a non-empty object")
        variables = {}
    for node_id, record in variables.items():
        _check_variable(node_id, record, violations)

    edges = doc.get('edges')
    if not isinstance(edges, list):
        violations.append("'edges' must be an array of [parent, child] pairs")
        edges = []
    valid_edges = _check_edges(edges, variables, violations)

    stuck = _stuck_nodes(variables, valid_edges)
    if stuck:
        violations.append(f"cycle detected; nodes remaining after peeling: {sorted(stuck)}")

    if doc.get('ground_truth') is not None:
        _check_ground_truth(doc['ground_truth'], variables, valid_edges, violations)

    return violations


# ============================================================================
# CONSTRUCTION / IO
# ============================================================================

def dag_from_dict(doc, source='<memory>'):
    """
    Build a validated DagSpec from a decoded document

    Raises:
        DagValidationError: listing every violation
    """
    violations = validate_document(doc)
    if violations:
        raise DagValidationError(violations, source)

    variables = {
        node_id: VariableMeta(
            id=node_id,
            display_name=record['display_name'],
            description=record['description'],
            unit=record['unit'],
            bounds=Interval(float(record['bounds'][0]), float(record['bounds'][1])),
        )
        for node_id, record in doc['variables'].items()
    }
    ground_truth = None
    if doc.get('ground_truth') is not None:
        ground_truth = MappingProxyType({
            node: StructuralEquation.from_dict(node, record)
            for node, record in doc['ground_truth'].items()
        })

    return DagSpec(
        name=doc['name'],
        persona=doc['persona'],
        phenomenon_overview=doc['phenomenon_overview'],
        variables=MappingProxyType(variables),
        edges=frozenset(tuple(edge) for edge in doc['edges']),
        ground_truth=ground_truth,
        source=source,
    )


def dag_to_dict(dag):
    """Serialize to the DAG-spec document format"""
    doc = {
        'name': dag.name,
        'persona': dag.persona,
        'phenomenon_overview': dag.phenomenon_overview,
        'variables': {node: meta.to_dict() for node, meta in dag.variables.items()},
        'edges': [list(edge) for edge in sorted(dag.edges)],
    }
    if dag.ground_truth is not None:
        doc['ground_truth'] = {node: eq.to_dict() for node, eq in dag.ground_truth.items()}
    return doc


def _pairs_hook(pairs):
    obj = {}
    duplicates = []
    for key, value in pairs:
        if key in obj:
            duplicates.append(f"duplicate key {key!r}")
        obj[key] = value
    if duplicates:
        obj['__duplicate_keys__'] = duplicates
    return obj


def _collect_duplicates(node, found):
    """Lift duplicate-key markers from nested objects to the top level"""
    if isinstance(node, dict):
        found.extend(node.pop('__duplicate_keys__', []))
        for value in node.values():
            _collect_duplicates(value, found)
    elif isinstance(node, list):
        for value in node:
            _collect_duplicates(value, found)


def load_dag(path):
    """
    Load and validate a DAG-spec file

    Args:
        path: Path to a UTF-8 JSON DAG-spec document

    Returns:
        Validated DagSpec

    Raises:
        DagFileNotFoundError, MalformedDagError, DagValidationError
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise DagFileNotFoundError(f"DAG file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            doc = json.load(f, object_pairs_hook=_pairs_hook)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise MalformedDagError(f"{path}: not a valid JSON document ({e})") from e
    if not isinstance(doc, dict):
        raise MalformedDagError(f"{path}: top level must be a JSON object")

    duplicates = []
    _collect_duplicates(doc, duplicates)
    if duplicates:
        doc['__duplicate_keys__'] = duplicates

    dag = dag_from_dict(doc, source=path)
    logger.info(f"📂 Loaded DAG {dag.name}: {len(dag.variables)} variables, {len(dag.edges)} edges")
    return dag


# ============================================================================
# TRAVERSAL
# ============================================================================

def topological_order(dag):
    """Parents before children; ties broken lexicographically by id"""
    return list(nx.lexicographical_topological_sort(dag.graph))


def parents(dag, node):
    if node not in dag.variables:
        raise UnknownNodeError(f"Unknown node {node!r} in DAG {dag.name}")
    return frozenset(dag.graph.predecessors(node))


def multi_parent_nodes(dag):
    """Nodes with more than one parent, in topological order"""
    return [node for node in topological_order(dag) if dag.graph.in_degree(node) > 1]
