import json
import os

import pytest

from app import create_app
from app.services.dag_model import dag_from_dict, load_dag

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
FIXTURES = os.path.join(ROOT, 'fixtures')
CACHEXIA_PATH = os.path.join(FIXTURES, 'dags', 'cachexia_synthetic.json')
EXPENDITURE_PATH = os.path.join(FIXTURES, 'dags', 'expenditure_synthetic.json')
REPLAY_PATH = os.path.join(FIXTURES, 'replay', 'synthetic_replay.jsonl')
MATRIX_PATH = os.path.join(FIXTURES, 'matrix.json')
FIXTURE_DAG_PATHS = (CACHEXIA_PATH, EXPENDITURE_PATH)


@pytest.fixture
def app(tmp_path):
    class TestConfig:
        TESTING = True
        OUTPUT_DIR = str(tmp_path / 'runs')
        LOG_LEVEL = 'WARNING'

    return create_app(TestConfig)


@pytest.fixture
def runner(app):
    return app.test_cli_runner()


@pytest.fixture
def cachexia():
    return load_dag(CACHEXIA_PATH)


@pytest.fixture
def expenditure():
    return load_dag(EXPENDITURE_PATH)


def dag_document(edges, nodes=None, bounds=None, ground_truth=None, name='toy'):
    """Minimal DAG-spec document; every node gets [0, 10] unless bounds says otherwise"""
    nodes = nodes or sorted({n for edge in edges for n in edge})
    bounds = bounds or {}
    doc = {
        'name': name,
        'persona': 'toy systems',
        'phenomenon_overview': 'A small synthetic system.',
        'variables': {
            node: {
                'display_name': f"variable {node.lower()}",
                'description': f"Synthetic variable number {i}.",
                'unit': 'unit',
                'bounds': list(bounds.get(node, [0, 10])),
            }
            for i, node in enumerate(nodes)
        },
        'edges': [list(edge) for edge in edges],
    }
    if ground_truth is not None:
        doc['ground_truth'] = ground_truth
    return doc


@pytest.fixture
def build_dag():
    def build(edges, **kwargs):
        return dag_from_dict(dag_document(edges, **kwargs))
    return build


@pytest.fixture
def write_replay(tmp_path):
    """Write replay records as JSONL and return the file path"""
    def write(records, filename='replay.jsonl'):
        path = tmp_path / filename
        with open(path, 'w', encoding='utf-8') as f:
            for record in records:
                f.write(json.dumps(record) + '\n')
        return str(path)
    return write


def payload(equation, thoughts='reasoning'):
    return json.dumps({'thoughts': thoughts, 'proposed_lin_str_eq': equation})
