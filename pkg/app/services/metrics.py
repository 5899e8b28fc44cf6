"""
Coefficient-distance metrics between an elicited coefficient set and ground truth

M1: L2 distance over all edge coefficients
M2: L2 distance after normalizing each node's coefficient vector to unit norm
M3: M2 restricted to nodes with more than one parent
M4: number of multi-parent nodes whose parent-effect ordering matches ground truth

Intercepts and noise variances do not enter any metric. A coefficient missing
from the elicited set (omitted parent or failed node) counts as 0.
"""
import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from app.services.dag_model import parents, topological_order

logger = logging.getLogger(__name__)

METRIC_NAMES = ('m1', 'm2', 'm3', 'm4')


class MetricsError(Exception):
    pass


@dataclass
class NodeBreakdown:
    sq_contribution_m1: float
    sq_contribution_m2: float
    included_in_m3: bool
    m4_match: bool = None  # None: fewer than two parents

    def to_dict(self):
        return {
            'sq_contribution_m1': self.sq_contribution_m1,
            'sq_contribution_m2': self.sq_contribution_m2,
            'included_in_m3': self.included_in_m3,
            'm4_match': self.m4_match if self.m4_match is not None else 'not-applicable',
        }


@dataclass
class MetricsReport:
    m1: float
    m2: float
    m3: float
    m4: int
    per_node: dict = field(default_factory=dict)
    skipped_nodes: list = field(default_factory=list)

    def values(self):
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def to_dict(self):
        return {
            **self.values(),
            'per_node': {node: b.to_dict() for node, b in self.per_node.items()},
            'skipped_nodes': sorted(self.skipped_nodes),
        }

    def to_csv(self):
        """Flattened per-node rows"""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(['node', 'sq_contribution_m1', 'sq_contribution_m2', 'included_in_m3', 'm4_match'])
        for node, b in self.per_node.items():
            row = b.to_dict()
            writer.writerow([node, row['sq_contribution_m1'], row['sq_contribution_m2'],
                             row['included_in_m3'], row['m4_match']])
        return buffer.getvalue()


def _coefficient_vector(equation, parent_ids):
    if equation is None:
        return np.zeros(len(parent_ids))
    return np.array([float(equation.coefficients.get(p, 0.0)) for p in parent_ids])


def _normalized(vector):
    """Unit-norm copy; the zero vector stays zero. Second value: degenerate?"""
    norm = np.linalg.norm(vector)
    if norm == 0:
        return np.zeros_like(vector), True
    return vector / norm, False


def _dense_ranks(vector):
    """Tied ranks: exactly-equal values share a rank"""
    return np.unique(vector, return_inverse=True)[1]


def _breakdown(elicited, gt, dag):
    """
    Per-node contributions in topological order

    Returns:
        Tuple of (per_node dict, skipped node set)
    """
    per_node = {}
    skipped = set()

    for node in topological_order(dag):
        parent_ids = sorted(parents(dag, node))
        failed = node not in elicited.equations
        if failed:
            skipped.add(node)
        if not parent_ids:
            continue
        if node not in gt.equations:
            raise MetricsError(f"Ground truth missing node {node!r} of DAG {dag.name}")

        beta_llm = _coefficient_vector(elicited.equations.get(node), parent_ids)
        beta_gt = _coefficient_vector(gt.equations[node], parent_ids)

        unit_llm, degenerate_llm = _normalized(beta_llm)
        unit_gt, degenerate_gt = _normalized(beta_gt)
        if degenerate_llm or degenerate_gt:
            skipped.add(node)

        m4_match = None
        if len(parent_ids) > 1:
            m4_match = (not failed) and bool(np.array_equal(_dense_ranks(beta_llm), _dense_ranks(beta_gt)))

        per_node[node] = NodeBreakdown(
            sq_contribution_m1=float(np.sum((beta_llm - beta_gt) ** 2)),
            sq_contribution_m2=float(np.sum((unit_llm - unit_gt) ** 2)),
            included_in_m3=len(parent_ids) > 1,
            m4_match=m4_match,
        )
    return per_node, skipped


def _m1(per_node):
    return math.sqrt(sum(b.sq_contribution_m1 for b in per_node.values()))


def _m2(per_node):
    return math.sqrt(sum(b.sq_contribution_m2 for b in per_node.values()))


def _m3(per_node):
    return math.sqrt(sum(b.sq_contribution_m2 for b in per_node.values() if b.included_in_m3))


def _m4(per_node):
    return sum(1 for b in per_node.values() if b.m4_match)


def m1(elicited, gt, dag):
    return _m1(_breakdown(elicited, gt, dag)[0])


def m2(elicited, gt, dag):
    return _m2(_breakdown(elicited, gt, dag)[0])


def m3(elicited, gt, dag):
    return _m3(_breakdown(elicited, gt, dag)[0])


def m4(elicited, gt, dag):
    return _m4(_breakdown(elicited, gt, dag)[0])


def compute_all(elicited, gt, dag):
    """
    All four metrics with per-node breakdowns

    Args:
        elicited: CoefficientSet from a run
        gt: CoefficientSet of ground-truth equations
        dag: DagSpec the run was elicited on

    Returns:
        MetricsReport
    """
    per_node, skipped = _breakdown(elicited, gt, dag)
    report = MetricsReport(
        m1=_m1(per_node),
        m2=_m2(per_node),
        m3=_m3(per_node),
        m4=_m4(per_node),
        per_node=per_node,
        skipped_nodes=sorted(skipped),
    )
    logger.debug(f"📏 {dag.name}: M1={report.m1:.4f} M2={report.m2:.4f} M3={report.m3:.4f} M4={report.m4}")
    return report
