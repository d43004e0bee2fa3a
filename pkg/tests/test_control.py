"""
闭环 / 开环 / 启发式执行循环与已实现目标
"""
import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from modules import control
from modules.baselines import RND, WFL, HeuristicSpec
from modules.control import (
    MeanEventSource, RecordedSource, SimulatorSource,
    closed_loop_run, evaluate_realized_objective, heuristic_run, open_loop_plan, open_loop_run,
    realized_exposures, stage_objective,
)
from modules.exposure import CUMULATIVE, PER_STAGE, ConstraintSet
from modules.hawkes import EventSequence, StageSchedule, state_at
from modules.optimizer import CEM, LES, MEM, NUMERICAL, ObjectiveSpec, SolveReport


def _cem(M, n, level=1.0):
    return ObjectiveSpec(CEM, beta=np.full((M, n), level))


def test_single_stage_closed_loop_equals_open_loop(small_model):
    schedule = StageSchedule(1, 3.0)
    constraints = ConstraintSet(np.ones((1, 3)), [0.2], np.full((1, 3), 0.15))
    objective = _cem(1, 3, 0.6)
    plan = open_loop_plan(small_model, objective, constraints, schedule)
    run = closed_loop_run(small_model, objective, constraints, schedule, MeanEventSource(small_model, schedule))
    assert run.success
    assert_array_equal(run.u[0], plan[0])


def test_first_closed_loop_control_equals_open_loop_plan(small_model, schedule3, constraints3):
    objective = _cem(3, 3, 0.8)
    plan = open_loop_plan(small_model, objective, constraints3, schedule3)
    run = closed_loop_run(small_model, objective, constraints3, schedule3,
                          SimulatorSource(small_model, schedule3, seed=4))
    assert_array_equal(run.u[0], plan[0])


def test_last_stage_plan_and_zero_budget(small_model, schedule3, constraints3):
    objective = _cem(3, 3)
    tail = open_loop_plan(small_model, objective, constraints3, schedule3, l=2, x_l=np.full(3, 0.01))
    assert tail.shape == (1, 3)
    broke = ConstraintSet(np.ones((3, 3)), np.zeros(3), np.full((3, 3), 0.2))
    assert_allclose(open_loop_plan(small_model, objective, broke, schedule3), 0.0)


@pytest.mark.parametrize("mode", [PER_STAGE, CUMULATIVE])
def test_certainty_equivalent_consistency_les(small_model, schedule3, constraints3, mode):
    objective = ObjectiveSpec(LES, gamma=np.full((3, 3), 1.2))
    source = MeanEventSource(small_model, schedule3)
    cll = closed_loop_run(small_model, objective, constraints3, schedule3, source, mode)
    opl = open_loop_run(small_model, objective, constraints3, schedule3, source, mode)
    assert_allclose(cll.u, opl.u, atol=1e-6)
    # 均值来源下预测与实现一致
    assert_allclose(cll.predicted_exposure, cll.realized_exposure, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("kind", [CEM, MEM])
def test_certainty_equivalent_consistency_lp(small_model, schedule3, constraints3, kind):
    objective = _cem(3, 3, 0.7) if kind == CEM else ObjectiveSpec(MEM)
    source = MeanEventSource(small_model, schedule3)
    cll = closed_loop_run(small_model, objective, constraints3, schedule3, source)
    opl = open_loop_run(small_model, objective, constraints3, schedule3, source)
    assert cll.objective_total == pytest.approx(opl.objective_total, abs=1e-8)


def test_closed_loop_respects_budgets(small_model, schedule3, constraints3):
    run = closed_loop_run(small_model, _cem(3, 3, 0.8), constraints3, schedule3,
                          SimulatorSource(small_model, schedule3, seed=1, replication=2), seed=1)
    assert run.success
    assert np.all(run.budget_spent(constraints3) <= constraints3.budgets + 1e-9)
    assert np.all(run.u <= constraints3.caps + 1e-9)
    assert len(run.metadata["solver"]) == 3
    assert_allclose(run.x[0], 0.0)


def test_planning_failure_keeps_partial_results(small_model, schedule3, constraints3, monkeypatch):
    original = control.solve

    def flaky(spec, lem, mu, x_l, carry=None):
        if lem.l == 1:
            return SolveReport(np.zeros(lem.size), 0.0, NUMERICAL, "simplex")
        return original(spec, lem, mu, x_l, carry)

    monkeypatch.setattr(control, "solve", flaky)
    run = closed_loop_run(small_model, _cem(3, 3, 0.8), constraints3, schedule3,
                          MeanEventSource(small_model, schedule3))
    assert not run.success
    assert run.failed_stage == 1
    assert run.u[0].sum() > 0
    assert_allclose(run.u[1:], 0.0)


def test_no_events_objective():
    schedule = StageSchedule(2, 4.0)
    values, total = evaluate_realized_objective(EventSequence.empty(4.0, 3), _cem(2, 3), schedule, np.eye(3))
    assert_allclose(values, 0.0)
    assert total == 0.0


def test_saturated_exposure_objective():
    schedule = StageSchedule(2, 4.0)
    beta = np.array([[0.5, 1.0, 0.2], [1.0, 0.3, 0.4]])
    records = [(t, i) for t in (0.5, 1.0, 1.5, 2.5, 3.0, 3.5) for i in range(3)]
    events = EventSequence.from_records(4.0, 3, records)
    values, _ = evaluate_realized_objective(events, ObjectiveSpec(CEM, beta=beta), schedule, np.eye(3))
    assert_allclose(values, beta.sum(axis=1) / 3)


def test_realized_objective_matches_recomputation(rng):
    n, M, T = 4, 3, 6.0
    schedule = StageSchedule(M, T)
    times = np.sort(rng.uniform(0.0, T, size=40))
    users = rng.integers(0, n, size=40)
    events = EventSequence(T, n, times, users)
    B = (rng.random((n, n)) < 0.4).astype(float)
    np.fill_diagonal(B, 1.0)
    gamma_t = rng.uniform(0.0, 5.0, size=(M, n))
    objective = ObjectiveSpec(LES, gamma=gamma_t)
    values, total = evaluate_realized_objective(events, objective, schedule, B, PER_STAGE)
    for m in range(M):
        mask = (times >= 2.0 * m) & (times < 2.0 * (m + 1))
        counts = np.bincount(users[mask], minlength=n)
        e = B @ counts
        assert values[m] == pytest.approx(-np.sum((e - gamma_t[m]) ** 2) / n)
    assert total == pytest.approx(values.sum())


def test_cumulative_realized_exposure_counts_from_start():
    schedule = StageSchedule(2, 4.0)
    events = EventSequence.from_records(4.0, 2, [(1.0, 0), (3.0, 1), (4.0, 1)])
    assert_allclose(realized_exposures(events, schedule, np.eye(2), CUMULATIVE), [[1.0, 0.0], [1.0, 2.0]])
    assert_allclose(realized_exposures(events, schedule, np.eye(2), PER_STAGE), [[1.0, 0.0], [0.0, 2.0]])


def test_stage_objective_kinds():
    e = np.array([1.0, 3.0])
    assert stage_objective(ObjectiveSpec(CEM, beta=[[2.0, 2.0]]), e, 0) == pytest.approx(1.5)
    assert stage_objective(ObjectiveSpec(MEM), e, 0) == pytest.approx(1.0)
    assert stage_objective(ObjectiveSpec(LES, gamma=[[1.0, 1.0]]), e, 0) == pytest.approx(-2.0)


def test_recorded_source_replays_log(small_model, schedule3):
    events = EventSequence.from_records(6.0, 3, [(0.5, 0), (2.5, 1), (3.0, 2), (6.0, 0)])
    source = RecordedSource(small_model, schedule3, events)
    x = np.zeros(3)
    out = source.stage(2, np.zeros(3), x)
    assert_allclose(out.counts, [1.0, 0.0, 0.0])
    assert len(out.events) == 1
    out1 = source.stage(1, np.zeros(3), x)
    assert_allclose(out1.x_next, state_at(small_model, events, x, 2.0, 4.0))


def test_heuristic_run_is_reproducible(small_model, schedule3, constraints3):
    spec = HeuristicSpec(RND, ObjectiveSpec(MEM))
    runs = [
        heuristic_run(spec, small_model, constraints3, schedule3,
                      SimulatorSource(small_model, schedule3, seed=8, replication=1), seed=8, replication=1)
        for _ in range(2)
    ]
    assert_array_equal(runs[0].u, runs[1].u)
    assert_array_equal(runs[0].events.times, runs[1].events.times)
    assert runs[0].objective_total == runs[1].objective_total


def test_water_filling_uses_previous_stage_exposure(small_model, schedule3, constraints3):
    spec = HeuristicSpec(WFL, ObjectiveSpec(MEM))
    run = heuristic_run(spec, small_model, constraints3, schedule3, MeanEventSource(small_model, schedule3))
    assert run.success
    for m in range(3):
        assert constraints3.feasible(m, run.u[m])


def test_plan_save(small_model, schedule3, constraints3, tmp_path):
    run = open_loop_run(small_model, _cem(3, 3), constraints3, schedule3, MeanEventSource(small_model, schedule3))
    path = tmp_path / "plan.json"
    run.save(str(path))
    data = json.loads(path.read_text(encoding="utf-8"))
    assert data["method"] == "OPL"
    assert len(data["u"]) == 3
    assert data["objective_total"] == pytest.approx(run.objective_total)
