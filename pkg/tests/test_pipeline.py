import numpy as np
import pytest

from conftest import small_experiment
from dnt_bench.pipeline import (
    assignment_rows,
    build_assignment,
    build_vtwins,
    centralized_baseline,
    clone_twins,
    combined_ledger,
    effective_k,
    evaluate_params,
    evaluate_twins,
    maintain_twins,
    prepare_data,
    rolling_evaluator,
)
from twinpress.aggregation import build_rule
from twinpress.errors import SchemaError
from twinpress.fedsync import centralized_maintenance_ledger
from twinpress.metrics import cost_reduction
from twinpress.network import write_traffic_csv


@pytest.fixture
def data(small_config):
    return prepare_data(small_config)


@pytest.fixture
def vtwins(small_config, data):
    assignment, _ = build_assignment(small_config, data, effective_k(small_config))
    return assignment, build_vtwins(small_config, data, assignment, build_rule("mean"))


def persistence_params(window=4):
    params = np.zeros(window + 1)
    params[window - 1] = 1.0
    return params


def test_prepare_data_splits_the_horizon(data):
    assert data.dataset.values.shape == (9, 200)
    assert (data.train_end, data.eval_start, data.n_steps) == (120, 170, 200)
    assert set(data.cells.stats) == set(range(9))


def test_csv_traffic_replaces_the_generator(tmp_path, small_config, data):
    path = str(tmp_path / "traffic.csv")
    write_traffic_csv(data.dataset, path)
    loaded = prepare_data(small_experiment(tmp_path, network={"csv_path": path}))
    np.testing.assert_allclose(loaded.dataset.values, data.dataset.values, rtol=1e-12)
    with pytest.raises(SchemaError):
        prepare_data(small_experiment(tmp_path, network={"csv_path": path, "rows": 2, "cols": 2}))


def test_effective_k(tmp_path, small_config):
    assert effective_k(small_config) == 2
    assert effective_k(small_config, no_cluster=True) == 1
    assert effective_k(small_experiment(tmp_path, clustering={"enabled": False})) == 1


def test_assignment_links_every_cell(small_config, data):
    assignment, linked = build_assignment(small_config, data, 2)
    rows = assignment_rows(assignment, linked)
    assert [r["cell_id"] for r in rows] == list(range(9))
    for r in rows:
        assert assignment.assignment[r["cluster_head"]] == r["cluster"]


def test_persistence_beats_the_zero_model_on_held_out_data(data):
    cells = data.network.cell_ids
    persistence = evaluate_params(data, cells, lambda _: persistence_params())
    zero = evaluate_params(data, cells, lambda _: np.zeros(5))
    assert persistence.mae < zero.mae


def test_rolling_evaluator_is_bounded_by_the_tick(data):
    evaluate = rolling_evaluator(data, [0, 1], window=4, eval_window=8)
    early = evaluate(persistence_params(), 5)
    assert early.mae >= 0.0
    assert evaluate(persistence_params(), 130).mse >= 0.0


def test_vtwins_reach_the_round_count(small_config, data, vtwins):
    assignment, twins = vtwins
    assert sorted(twins) == list(range(assignment.k))
    for j, twin in twins.items():
        assert twin.version == small_config.fedsync.rounds
        assert twin.members == assignment.members(j)
        assert all(e.quality is not None for e in twin.timeline.entries)
    assert evaluate_twins(data, assignment, twins).mae < 100.0


def test_maintenance_moves_every_twin_forward(small_config, data, vtwins):
    assignment, twins = vtwins
    result = maintain_twins(small_config, data, assignment, clone_twins(twins), build_rule("mean"))
    assert data.train_end < result.stop_tick <= data.eval_start
    for j, twin in result.twins.items():
        assert twin.version > small_config.fedsync.rounds
        assert sorted(twin.members) == result.assignment.members(j)
    assert sorted(result.assignment.assignment) == list(range(9))


def test_unbounded_maintenance_streams_to_the_held_out_window(tmp_path, data):
    config = small_experiment(tmp_path, fedsync={"max_events": None})
    assignment, _ = build_assignment(config, data, 2)
    twins = build_vtwins(config, data, assignment, build_rule("median"), evaluate=False)
    result = maintain_twins(config, data, assignment, twins, build_rule("median"), evaluate=False)
    assert result.stop_tick == data.eval_start
    assert result.reclusterings >= 0


def test_single_cluster_never_reclusters(small_config, data):
    assignment, _ = build_assignment(small_config, data, 1)
    twins = build_vtwins(small_config, data, assignment, build_rule("mean"), evaluate=False)
    result = maintain_twins(small_config, data, assignment, twins, build_rule("mean"), evaluate=False)
    assert result.reclusterings == 0
    assert result.assignment.assignment == assignment.assignment
    assert result.twins[0].version == small_config.fedsync.rounds + small_config.fedsync.max_events


def test_clones_start_fresh_ledgers(vtwins):
    _, twins = vtwins
    clones = clone_twins(twins)
    for j in twins:
        assert clones[j].version == twins[j].version
        np.testing.assert_array_equal(clones[j].params, twins[j].params)
        assert clones[j].params is not twins[j].params
        assert clones[j].cost_ledger.events == []
        assert clones[j].timeline.entries == []


def test_maintenance_is_much_cheaper_than_centralized_retraining(small_config, data, vtwins):
    assignment, twins = vtwins
    result = maintain_twins(small_config, data, assignment, clone_twins(twins), build_rule("mean"), evaluate=False)
    start = max(data.train_end, small_config.fedsync.htwin_window - 1)
    baseline = centralized_maintenance_ledger(data.network.cell_ids, data.cells, start, result.stop_tick, small_config.sync_config())
    assert cost_reduction(combined_ledger(result.twins).report(), baseline.report()) >= 30.0


def test_centralized_baseline_uploads_the_training_window(small_config, data):
    model, ledger, quality = centralized_baseline(small_config, data)
    assert model.window == 4
    assert ledger.report().raw_data_units == 9 * 120 * 3
    assert quality.mae < 100.0


@pytest.mark.parametrize("k", [1, 2])
def test_maintenance_keeps_the_twin_accurate(tmp_path, k):
    config = small_experiment(
        tmp_path,
        network={"horizon": 400},
        traffic={"period": 24},
        fedsync={"rounds": 20, "htwin_window": 24, "eval_steps": 60, "max_events": 10},
    )
    data = prepare_data(config)
    assignment, _ = build_assignment(config, data, k)
    twins = build_vtwins(config, data, assignment, build_rule("mean"), evaluate=False)
    vtwin_mae = evaluate_twins(data, assignment, twins).mae
    result = maintain_twins(config, data, assignment, clone_twins(twins), build_rule("mean"), evaluate=False)
    assert evaluate_twins(data, result.assignment, result.twins).mae <= 1.25 * vtwin_mae
