"""
Services package for the linear-SCM elicitation benchmark
"""
from app.services.dag_model import load_dag, parents, topological_order
from app.services.elicitation import elicit_dag, elicit_node
from app.services.metrics import compute_all
from app.services.runner import run_benchmark

__all__ = [
    'load_dag',
    'parents',
    'topological_order',
    'elicit_dag',
    'elicit_node',
    'compute_all',
    'run_benchmark',
]
