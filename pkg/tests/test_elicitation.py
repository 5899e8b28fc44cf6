import json
import math
import os

import pytest

from app.services.dag_model import topological_order
from app.services.elicitation import (
    ACCEPTED,
    FLAG_BACKEND_ERROR,
    FLAG_BUDGET_EXHAUSTED,
    FLAG_NOISE_OMITTED,
    FLAG_OMITTED_PARENTS,
    FLAG_PARSE_FAILURE,
    PARSE_FAILURE,
    RANGE_VIOLATION,
    CoefficientSet,
    ElicitationError,
    elicit_dag,
    elicit_node,
    write_elicitation_artifacts,
)
from app.services.equation import Interval, StructuralEquation
from app.services.llm_backend import AuditLog, BackendConfig, create_backend
from conftest import payload

ECHO = BackendConfig(kind='echo-oracle')


@pytest.fixture
def xy_dag(build_dag):
    """X in [0, 10] drives Y in [0, 5]"""
    return build_dag([('X', 'Y')], bounds={'Y': [0, 5]})


def replay(write_replay, records):
    return BackendConfig(kind='scripted-replay', replay_path=write_replay(records))


def test_immediate_accept(xy_dag, write_replay):
    backend = replay(write_replay, [{'target': 'Y', 'attempt': 1, 'text': payload('Y = 1 + 0.25*X + N(0, 1)')}])
    result = elicit_node(xy_dag, 'Y', backend, budget=5)
    assert result.accepted
    assert result.iterations_used == 1
    assert result.attempts[0].verdict == ACCEPTED
    assert result.attempts[0].c1 == Interval(1, 3.5)
    assert result.final_equation == StructuralEquation('Y', 1.0, {'X': 0.25}, 1.0)
    assert result.flags == []


def test_feedback_loop_two_attempts(xy_dag, write_replay):
    backend = replay(write_replay, [
        {'target': 'Y', 'attempt': 1, 'text': payload('Y = 2 + 0.5*X + N(0, 1)')},
        {'target': 'Y', 'attempt': 2, 'text': payload('Y = 0 + 0.4*X + N(0, 1)')},
    ])
    result = elicit_node(xy_dag, 'Y', backend, budget=5)
    first, second = result.attempts
    assert first.verdict == RANGE_VIOLATION
    assert first.c1 == Interval(2, 7)
    assert second.verdict == ACCEPTED
    assert second.c1 == Interval(0, 4)
    assert 'C1 = [2, 7]' in second.prompt.user_text
    assert 'C2 = [0, 5]' in second.prompt.user_text
    assert result.accepted
    assert result.final_equation.coefficients == {'X': 0.4}


def test_budget_exhausted_keeps_last_proposal(xy_dag, write_replay):
    records = [
        {'target': 'Y', 'attempt': i, 'text': payload(f"Y = {i} + 1*X + N(0, 1)")}
        for i in range(1, 6)
    ]
    result = elicit_node(xy_dag, 'Y', replay(write_replay, records), budget=5)
    assert result.iterations_used == 5
    assert all(a.verdict == RANGE_VIOLATION for a in result.attempts)
    assert not result.accepted
    assert not result.failed
    assert result.final_equation.intercept == 5.0
    assert result.flags == [FLAG_BUDGET_EXHAUSTED]


def test_parse_failure_then_recovery(xy_dag, write_replay):
    backend = replay(write_replay, [
        {'target': 'Y', 'attempt': 1, 'text': payload('Y = 1 + 0.2*CRP')},
        {'target': 'Y', 'attempt': 2, 'text': payload('Y = 1 + 0.2*X + N(0, 1)')},
    ])
    result = elicit_node(xy_dag, 'Y', backend, budget=3)
    assert result.attempts[0].verdict == PARSE_FAILURE
    assert result.attempts[0].parse_error['code'] == 'E1'
    assert 'CRP' in result.attempts[1].prompt.user_text
    assert result.accepted


def test_missing_parent_and_noise_are_flagged(xy_dag, write_replay):
    backend = replay(write_replay, [{'target': 'Y', 'attempt': 1, 'text': payload('Y = 1')}])
    result = elicit_node(xy_dag, 'Y', backend, budget=5)
    assert result.accepted
    assert result.final_equation.coefficients == {}
    assert result.flags == [FLAG_NOISE_OMITTED, FLAG_OMITTED_PARENTS]


def test_budget_must_be_positive(xy_dag):
    with pytest.raises(ElicitationError):
        elicit_node(xy_dag, 'Y', ECHO, budget=0)


def test_constant_garbage_yields_empty_set(cachexia):
    backend = BackendConfig(kind='constant', constant_text='I cannot answer that.')
    result = elicit_dag(cachexia, backend, budget=3)
    assert result.equations == {}
    assert result.failed_nodes == sorted(cachexia.variables)
    assert all(flags == [FLAG_PARSE_FAILURE] for flags in result.flags.values())
    assert all(e.iterations_used == 3 for e in result.elicitations.values())


@pytest.mark.parametrize('budget', [1, 2, 5])
def test_call_count_never_exceeds_budget(tmp_path, expenditure, budget):
    audit = AuditLog(str(tmp_path / 'audit.jsonl'))
    backend = BackendConfig(kind='constant', constant_text=payload('nonsense'))
    elicit_dag(expenditure, backend, budget=budget, audit_log=audit)
    calls = audit.read()
    assert len(calls) == budget * len(expenditure.variables)
    for node in expenditure.variables:
        assert sum(1 for c in calls if c['target'] == node) == budget


def test_echo_oracle_reproduces_ground_truth(cachexia, expenditure):
    for dag in (cachexia, expenditure):
        result = elicit_dag(dag, ECHO, budget=5)
        assert result.equations == dict(dag.ground_truth)
        assert not result.partial
        assert all(e.iterations_used == 1 for e in result.elicitations.values())


def test_audit_order_follows_topological_order(tmp_path, cachexia):
    audit = AuditLog(str(tmp_path / 'audit.jsonl'))
    elicit_dag(cachexia, ECHO, budget=5, audit_log=audit, run_id='seq')
    assert [r['target'] for r in audit.read()] == topological_order(cachexia)
    assert {r['run_id'] for r in audit.read()} == {'seq'}


def test_parallel_matches_sequential(expenditure):
    sequential = elicit_dag(expenditure, ECHO, budget=5)
    parallel = elicit_dag(expenditure, ECHO, budget=5, parallel=True, max_workers=4)
    assert parallel.equations == sequential.equations
    assert parallel.flags == sequential.flags
    assert list(parallel.elicitations) == topological_order(expenditure)


def test_backend_error_fails_only_that_node(xy_dag, write_replay):
    backend = replay(write_replay, [{'target': 'X', 'attempt': 1, 'text': payload('X = 5')}])
    result = elicit_dag(xy_dag, backend, budget=5)
    assert set(result.equations) == {'X'}
    assert result.flags['Y'] == [FLAG_BACKEND_ERROR]
    assert result.failed_nodes == ['Y']
    assert result.has_backend_error
    assert result.elicitations['Y'].iterations_used == 0


def test_overflowing_number_is_a_parse_failure(xy_dag):
    backend = BackendConfig(kind='constant', constant_text=payload('Y = 1 + 1e400*X + N(0, 1)'))
    result = elicit_node(xy_dag, 'Y', backend, budget=2)
    assert not result.accepted
    assert [a.verdict for a in result.attempts] == [PARSE_FAILURE, PARSE_FAILURE]
    assert result.attempts[0].parse_error['code'] == 'E4'
    assert result.attempts[0].parse_error['fragment'] == '1e400'


@pytest.fixture
def fork_dag(build_dag):
    """A and B in [5, 10] drive Y in [0, 10]"""
    return build_dag([('A', 'Y'), ('B', 'Y')], bounds={'A': [5, 10], 'B': [5, 10]})


def test_overflowing_range_is_rejected_with_feedback(fork_dag, write_replay):
    backend = replay(write_replay, [
        {'target': 'A', 'attempt': 1, 'text': payload('A = 7')},
        {'target': 'B', 'attempt': 1, 'text': payload('B = 7')},
        {'target': 'Y', 'attempt': 1, 'text': payload('Y = 1 + 1e308*A - 1e308*B + N(0, 1)')},
        {'target': 'Y', 'attempt': 2, 'text': payload('Y = 1 + 0.2*A + 0.3*B + N(0, 1)')},
    ])
    result = elicit_dag(fork_dag, backend, budget=2)
    first, second = result.elicitations['Y'].attempts
    assert first.verdict == RANGE_VIOLATION
    assert first.c1 == Interval(-math.inf, math.inf)
    assert 'C1 = [-inf, inf]' in second.prompt.user_text
    assert second.verdict == ACCEPTED
    assert not result.partial
    assert result.equations['Y'] == StructuralEquation('Y', 1.0, {'A': 0.2, 'B': 0.3}, 1.0)


def test_deeply_nested_response_fails_only_that_attempt(xy_dag, write_replay):
    backend = replay(write_replay, [
        {'target': 'X', 'attempt': 1, 'text': payload('X = 5')},
        {'target': 'Y', 'attempt': 1, 'text': '{"proposed_lin_str_eq": ' + '[' * 100000},
        {'target': 'Y', 'attempt': 2, 'text': payload('Y = 1 + 0.25*X')},
    ])
    result = elicit_dag(xy_dag, backend, budget=2)
    assert [a.verdict for a in result.elicitations['Y'].attempts] == [PARSE_FAILURE, ACCEPTED]
    assert set(result.equations) == {'X', 'Y'}


def test_shared_backend_instance_is_accepted(cachexia):
    backend = create_backend(ECHO, dag=cachexia)
    assert elicit_dag(cachexia, backend, budget=1).equations == dict(cachexia.ground_truth)


def test_coefficient_set_check_against(cachexia):
    good = CoefficientSet.from_ground_truth(cachexia)
    assert good.check_against(cachexia) == []
    bad = CoefficientSet('cachexia', {
        'GC': StructuralEquation('GC', 0.0, {'MM': 1.0}),
        'CRP': StructuralEquation('CRP', 0.0, {}),
    })
    problems = bad.check_against(cachexia)
    assert len(problems) == 2


def test_coefficient_set_from_ground_truth_requires_it(build_dag):
    with pytest.raises(ElicitationError):
        CoefficientSet.from_ground_truth(build_dag([('A', 'B')]))


def test_artifacts_written(tmp_path, xy_dag, write_replay):
    backend = replay(write_replay, [
        {'target': 'X', 'attempt': 1, 'text': payload('X = 5 + N(0, 1)')},
        {'target': 'Y', 'attempt': 1, 'text': 'not json'},
        {'target': 'Y', 'attempt': 2, 'text': payload('Y = 0.5*X + N(0, 0.1)')},
    ])
    result = elicit_dag(xy_dag, backend, budget=2)
    run_dir = tmp_path / 'run'
    os.makedirs(run_dir)
    write_elicitation_artifacts(str(run_dir), result)

    with open(run_dir / 'coefficients.json', encoding='utf-8') as f:
        coefficients = json.load(f)
    assert coefficients['equations']['Y'] == {'intercept': 0.0, 'coefficients': {'X': 0.5}, 'noise_variance': 0.1}
    with open(run_dir / 'attempts.jsonl', encoding='utf-8') as f:
        attempts = [json.loads(line) for line in f]
    assert [(a['target'], a['index'], a['verdict']) for a in attempts] == [
        ('X', 1, ACCEPTED), ('Y', 1, PARSE_FAILURE), ('Y', 2, ACCEPTED),
    ]
    assert attempts[0]['reasoning'] == 'reasoning'
    with open(run_dir / 'flags.json', encoding='utf-8') as f:
        flags = json.load(f)
    assert flags['partial'] is False
    assert CoefficientSet.from_dict(coefficients).equations == result.equations
