"""
Adversarial DAG conditions: unit tweaking and spurious-edge misspecification

Mutations work on the serialized DAG document and rebuild through
dag_from_dict, so every mutant passes the same validation as a loaded file.
"""
import logging
import math
import os
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from app.services.artifacts import load_json, save_json
from app.services.dag_model import dag_from_dict, dag_to_dict

logger = logging.getLogger(__name__)

UNIT_TWEAK = 'unit-tweak'
SPURIOUS_EDGE = 'spurious-edge'
MUTATION_KINDS = (UNIT_TWEAK, SPURIOUS_EDGE)

SIDECAR_NAME = 'mutation.json'


class MutationError(Exception):
    """Base class for mutation errors"""


class NoMatchingUnitError(MutationError):
    pass


class EdgeExistsError(MutationError):
    pass


class CycleError(MutationError):
    pass


class UnknownEndpointError(MutationError):
    pass


@dataclass(frozen=True)
class MutationRecord:
    kind: str
    parameters: dict = field(default_factory=dict)
    provenance: str = ''
    coefficient_invariant: bool = True

    def __post_init__(self):
        if self.kind not in MUTATION_KINDS:
            raise MutationError(f"Unknown mutation kind {self.kind!r}")

    def to_dict(self):
        return {
            'kind': self.kind,
            'parameters': dict(self.parameters),
            'provenance': self.provenance,
            'coefficient_invariant': self.coefficient_invariant,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            kind=data['kind'],
            parameters=dict(data.get('parameters', {})),
            provenance=data.get('provenance', ''),
            coefficient_invariant=bool(data.get('coefficient_invariant', True)),
        )


# ============================================================================
# UNIT TWEAK
# ============================================================================

def tweak_units(dag, from_unit, to_unit, factor):
    """
    Rescale every variable whose unit contains from_unit

    Bounds are multiplied by factor and the unit label rewritten; descriptions
    mentioning from_unit are rewritten too. Ground-truth intercepts of matched
    nodes scale by factor and their noise variances by factor**2. Slope
    coefficients are left as they are; they stay exact only when no edge joins
    a matched and an unmatched variable, which the record reports.

    Args:
        dag: Source DagSpec
        from_unit: Unit substring to replace (e.g. "µM")
        to_unit: Replacement (e.g. "nM")
        factor: Positive multiplier for values in the new unit

    Returns:
        Tuple of (mutant DagSpec, MutationRecord)

    Raises:
        MutationError: factor <= 0 or no variable matches
    """
    if not (isinstance(factor, (int, float)) and math.isfinite(factor) and factor > 0):
        raise MutationError(f"factor must be a finite number > 0, got {factor!r}")
    if not from_unit:
        raise MutationError('from_unit must be a non-empty string')

    matched = sorted(node for node, meta in dag.variables.items() if from_unit in meta.unit)
    if not matched:
        raise NoMatchingUnitError(f"No variable of DAG {dag.name} has a unit containing {from_unit!r}")

    doc = dag_to_dict(dag)
    for node in matched:
        record = doc['variables'][node]
        record['bounds'] = dag.bounds(node).scale(factor).to_list()
        record['unit'] = record['unit'].replace(from_unit, to_unit)
        record['description'] = record['description'].replace(from_unit, to_unit)
        if dag.ground_truth is not None:
            gt = doc['ground_truth'][node]
            gt['intercept'] = gt['intercept'] * factor
            gt['noise_variance'] = gt['noise_variance'] * factor * factor

    matched_set = set(matched)
    mixed_edges = [(u, v) for u, v in dag.edges if (u in matched_set) != (v in matched_set)]
    invariant = factor == 1 or not mixed_edges
    if not invariant:
        logger.warning(
            f"⚠️ Unit tweak on {dag.name} rescales only part of {len(mixed_edges)} edge(s); "
            'ground-truth slopes are no longer exact'
        )

    mutant = dag_from_dict(doc, source=f"{dag.source} [{UNIT_TWEAK}]")
    record = MutationRecord(
        kind=UNIT_TWEAK,
        parameters={'from_unit': from_unit, 'to_unit': to_unit, 'factor': factor, 'variables': matched},
        provenance=dag.name,
        coefficient_invariant=invariant,
    )
    logger.info(f"🔧 {dag.name}: {from_unit} -> {to_unit} x{factor} on {len(matched)} variable(s)")
    return mutant, record


# ============================================================================
# SPURIOUS EDGES
# ============================================================================

def enumerate_candidate_edges(dag, strict=False):
    """
    Ordered pairs (u, v) that can take a spurious edge u -> v

    A pair qualifies when u and v are not adjacent in either direction and v
    does not reach u. With strict=True, pairs joined by a directed path in
    either direction are excluded as well.

    Returns:
        List of (u, v) in lexicographic order
    """
    graph = dag.graph
    reach = {node: nx.descendants(graph, node) for node in graph.nodes}
    candidates = []
    for u in sorted(dag.variables):
        for v in sorted(dag.variables):
            if u == v or graph.has_edge(u, v) or graph.has_edge(v, u):
                continue
            if u in reach[v]:
                continue
            if strict and v in reach[u]:
                continue
            candidates.append((u, v))
    return candidates


def add_spurious_edge(dag, u, v):
    """
    Add the edge u -> v with a ground-truth effect of zero

    Returns:
        Tuple of (mutant DagSpec, MutationRecord)

    Raises:
        UnknownEndpointError, EdgeExistsError, CycleError
    """
    missing = [node for node in (u, v) if node not in dag.variables]
    if missing:
        raise UnknownEndpointError(f"Unknown node(s) {missing} in DAG {dag.name}")
    if u == v:
        raise CycleError(f"Self-loop {u}->{v}")
    if dag.graph.has_edge(u, v):
        raise EdgeExistsError(f"Edge {u}->{v} already exists in DAG {dag.name}")
    if nx.has_path(dag.graph, v, u):
        raise CycleError(f"Adding {u}->{v} would close a cycle ({v} reaches {u})")

    doc = dag_to_dict(dag)
    doc['edges'] = sorted(doc['edges'] + [[u, v]])
    if dag.ground_truth is not None:
        doc['ground_truth'][v]['coefficients'][u] = 0.0

    mutant = dag_from_dict(doc, source=f"{dag.source} [{SPURIOUS_EDGE} {u}->{v}]")
    record = MutationRecord(kind=SPURIOUS_EDGE, parameters={'parent': u, 'child': v}, provenance=dag.name)
    logger.info(f"🔧 {dag.name}: added spurious edge {u} -> {v}")
    return mutant, record


def sample_spurious_edges(dag, k, seed=0, strict=False):
    """
    Draw k distinct candidate pairs with a seeded generator

    Returns:
        List of (u, v) in lexicographic order
    """
    candidates = enumerate_candidate_edges(dag, strict=strict)
    if k < 1 or k > len(candidates):
        raise MutationError(f"Cannot sample {k} spurious edge(s) from {len(candidates)} candidate(s) in {dag.name}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(candidates), size=k, replace=False)
    return [candidates[i] for i in sorted(int(i) for i in picks)]


# ============================================================================
# PERSISTENCE
# ============================================================================

def save_mutant(dag, record, path):
    """Write the mutant DAG spec plus a mutation.json sidecar next to it"""
    save_json(path, dag_to_dict(dag))
    sidecar = os.path.join(os.path.dirname(os.path.abspath(path)), SIDECAR_NAME)
    save_json(sidecar, record.to_dict())
    return path, sidecar


def load_mutation_record(path):
    data = load_json(path)
    if data is None:
        raise MutationError(f"Mutation record not found: {path}")
    return MutationRecord.from_dict(data)
