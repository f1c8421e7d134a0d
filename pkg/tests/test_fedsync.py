import numpy as np
import pytest

from twinpress.aggregation import build_rule
from twinpress.errors import ConfigurationError, DomainError, TwinStateError
from twinpress.executor import LocalTrainingExecutor, TrainingJob, run_training_job
from twinpress.fedsync import (
    AsyncSchedule,
    CellData,
    GlobalTwin,
    HTwinSession,
    SyncConfig,
    carry_twins,
    centralized_maintenance_ledger,
    run_centralized,
    run_htwin,
    run_vtwin,
    select_root_cells,
    staleness_weight,
)
from twinpress.forecast import ForecastModel, TrainingConfig, train_local
from twinpress.metrics import QualityReport
from twinpress.network import ClusterAssignment

WINDOW = 4


@pytest.fixture
def cells(grid_traffic):
    return CellData.prepare(grid_traffic, train_end=180)


@pytest.fixture
def sync_cfg():
    return SyncConfig(training=TrainingConfig(learning_rate=0.05, epochs=3), window=WINDOW, htwin_window=12, seed=5)


def initialized_twin(members, rng, version=1):
    return GlobalTwin(cluster_id=0, params=rng.normal(scale=0.1, size=WINDOW + 1), version=version, members=members)


def every_tick(members):
    return AsyncSchedule(periods={c: 1 for c in members}, offsets={c: 0 for c in members})


def test_staleness_weight():
    assert staleness_weight(0, 0.5) == 0.5
    assert staleness_weight(3, 0.5) == 0.125
    with pytest.raises(DomainError):
        staleness_weight(-1, 0.5)
    with pytest.raises(ConfigurationError):
        staleness_weight(0, 0.0)


def test_htwin_window_must_exceed_forecaster_window():
    with pytest.raises(ConfigurationError) as err:
        SyncConfig(window=12, htwin_window=12).validate()
    assert err.value.key == "fedsync.htwin_window"


def test_single_client_vtwin_round_is_its_local_update(cells, sync_cfg):
    twin = run_vtwin([3], cells, rounds=1, rule=build_rule("mean"), cfg=sync_cfg)
    expected, _ = train_local(ForecastModel.zeros(WINDOW), cells.training(3), sync_cfg.training, cells.stats[3])
    np.testing.assert_allclose(twin.params, expected.pack(), rtol=1e-12)
    assert twin.version == 1


def test_vtwin_versions_costs_and_timeline(cells, sync_cfg):
    members = [0, 1, 2, 5]
    seen = []

    def evaluate(params):
        seen.append(params.copy())
        return QualityReport(mae_raw=1.0, mse_raw=1.0, nrmse_raw=0.1)

    twin = run_vtwin(members, cells, rounds=4, rule=build_rule("mean"), cfg=sync_cfg, evaluate=evaluate)
    assert twin.version == 4
    assert len(twin.timeline.entries) == 4
    assert len(seen) == 4
    assert [e.version for e in twin.timeline.entries] == [1, 2, 3, 4]
    report = twin.cost_ledger.report()
    assert report.comm_units == 4 * 2 * len(members) * (WINDOW + 1)
    assert report.compute_units == 4 * 3 * len(members) * (180 - WINDOW)
    assert report.raw_data_units == 0
    costs = twin.timeline.to_frame()["comm_cost"].tolist()
    assert costs == sorted(costs)


def test_vtwin_rejects_zero_rounds(cells, sync_cfg):
    with pytest.raises(ConfigurationError):
        run_vtwin([0, 1], cells, rounds=0, rule=build_rule("mean"), cfg=sync_cfg)


def test_parallel_training_matches_sequential(cells, sync_cfg):
    members = [0, 4, 7, 9]
    sequential = run_vtwin(members, cells, rounds=2, rule=build_rule("median"), cfg=sync_cfg)
    parallel = run_vtwin(
        members, cells, rounds=2, rule=build_rule("median"), cfg=sync_cfg, executor=LocalTrainingExecutor(num_workers=2)
    )
    np.testing.assert_array_equal(sequential.params, parallel.params)


def test_fltrust_vtwin_charges_server_training(cells, sync_cfg):
    twin = run_vtwin([0, 1, 2, 3], cells, rounds=2, rule=build_rule("fltrust"), cfg=sync_cfg)
    phases = {e.phase for e in twin.cost_ledger.events}
    assert phases == {"vtwin"}
    compute_events = [e for e in twin.cost_ledger.events if e.kind == "compute"]
    assert len(compute_events) == 4


def test_htwin_needs_an_initialized_twin(cells, sync_cfg, rng):
    twin = initialized_twin([0, 1], rng, version=0)
    with pytest.raises(TwinStateError):
        run_htwin(twin, cells, 180, 190, build_rule("mean"), sync_cfg)


def test_tid_needs_batches_of_three(cells, sync_cfg, rng):
    with pytest.raises(ConfigurationError) as err:
        HTwinSession(initialized_twin([0, 1, 2], rng), cells, build_rule("tid"), sync_cfg)
    assert err.value.key == "fedsync.batch_size"


def test_htwin_tick_needs_a_full_window(cells, sync_cfg, rng):
    session = HTwinSession(initialized_twin([0], rng), cells, build_rule("mean"), sync_cfg)
    with pytest.raises(DomainError):
        session.step(10)


def test_fresh_update_is_mixed_with_beta(cells, sync_cfg, rng):
    twin = initialized_twin([2], rng)
    start_params = twin.params.copy()
    run_htwin(twin, cells, 200, 201, build_rule("mean"), sync_cfg, schedule=every_tick([2]))
    job = TrainingJob(2, start_params, cells.series(2, 189, 201), cells.stats[2], 1)
    update = run_training_job(job, sync_cfg.training)
    np.testing.assert_allclose(twin.params, start_params + 0.5 * (update.params - start_params), rtol=1e-12)
    assert twin.version == 2


def test_stale_update_is_discounted(cells, sync_cfg, rng):
    twin = initialized_twin([1, 6], rng)
    g = twin.params.copy()
    run_htwin(twin, cells, 200, 201, build_rule("mean"), sync_cfg, schedule=every_tick([1, 6]))

    def update_of(cid):
        job = TrainingJob(cid, g, cells.series(cid, 189, 201), cells.stats[cid], 1)
        return run_training_job(job, sync_cfg.training).params

    first = g + 0.5 * (update_of(1) - g)
    # client 6 trained from version 1 while the twin moved to version 2
    second = first + 0.25 * (update_of(6) - first)
    np.testing.assert_allclose(twin.params, second, rtol=1e-12)
    assert twin.version == 3
    assert [e.tick for e in twin.timeline.entries] == [200, 200]


def test_max_batches_stops_maintenance(cells, sync_cfg, rng):
    twin = initialized_twin([0, 1, 2, 3], rng)
    run_htwin(twin, cells, 180, 260, build_rule("mean"), sync_cfg, max_batches=3)
    assert twin.version == 1 + 3
    ticks = [e.tick for e in twin.timeline.entries]
    assert len(ticks) == 3
    assert ticks[-1] < 190
    assert ticks == sorted(ticks)


def test_max_batches_stops_within_a_tick(cells, sync_cfg, rng):
    twin = initialized_twin([0, 1, 2, 3], rng)
    session = HTwinSession(twin, cells, build_rule("mean"), sync_cfg, schedule=every_tick([0, 1, 2, 3]))
    assert session.advance(200, 210, max_batches=2) == 201
    assert twin.version == 3
    assert session.applied_batches == 2
    assert [e.tick for e in twin.timeline.entries] == [200, 200]


def test_htwin_evaluator_receives_the_tick(cells, sync_cfg, rng):
    ticks = []

    def evaluate(params, tick):
        ticks.append(tick)
        return QualityReport(mae_raw=0.5, mse_raw=0.25)

    twin = initialized_twin([4], rng)
    run_htwin(twin, cells, 190, 193, build_rule("median"), sync_cfg, schedule=every_tick([4]), evaluate=evaluate)
    assert ticks == [190, 191, 192]
    assert twin.timeline.to_frame()["nrmse"].isna().all()


def test_schedule_of_a_client_does_not_depend_on_its_cluster():
    together = AsyncSchedule.from_seed([1, 2, 3], max_period=4, seed=9)
    apart = AsyncSchedule.from_seed([2, 3], max_period=4, seed=9)
    for c in (2, 3):
        assert together.periods[c] == apart.periods[c]
        assert together.offsets[c] == apart.offsets[c]
        assert 1 <= together.periods[c] <= 4
        assert 0 <= together.offsets[c] < together.periods[c]


def test_root_cells_are_a_fixed_subset():
    picked = select_root_cells([8, 3, 5, 1], fraction=0.05, seed=2, cluster_id=0)
    assert len(picked) == 1
    assert picked[0] in {1, 3, 5, 8}
    assert picked == select_root_cells([1, 3, 5, 8], fraction=0.05, seed=2, cluster_id=0)
    assert len(select_root_cells([1, 2, 3, 4], fraction=0.5, seed=2, cluster_id=1)) == 2


def test_carry_twins_mixes_by_member_share():
    previous = ClusterAssignment(k=2, assignment={0: 0, 1: 0, 2: 1, 3: 1}, centroids=np.zeros((2, 4)))
    current = ClusterAssignment(k=1, assignment={0: 0, 1: 0, 2: 0, 3: 0}, centroids=np.zeros((1, 4)))
    twins = {
        0: GlobalTwin(cluster_id=0, params=np.zeros(3), version=3, members=[0, 1]),
        1: GlobalTwin(cluster_id=1, params=np.full(3, 2.0), version=5, members=[2, 3]),
    }
    twins[0].cost_ledger.record_transfers(2, 3)
    carried = carry_twins(previous, current, twins)
    assert list(carried) == [0]
    np.testing.assert_allclose(carried[0].params, [1.0, 1.0, 1.0])
    assert carried[0].version == 5
    assert carried[0].members == [0, 1, 2, 3]
    assert carried[0].cost_ledger is twins[0].cost_ledger


def test_centralized_baseline_uploads_every_record(cells, sync_cfg):
    model, ledger = run_centralized([0, 1, 2], cells, rounds=4, cfg=sync_cfg)
    report = ledger.report()
    assert model.window == WINDOW
    assert report.raw_data_units == 3 * 180 * 3
    assert report.compute_units == 4 * 3 * 3 * (180 - WINDOW)
    assert report.comm_units == 0


def test_centralized_maintenance_cost(sync_cfg):
    report = centralized_maintenance_ledger([0, 1], None, 180, 200, sync_cfg).report()
    assert report.raw_data_units == 2 * 20 * 3
    assert report.compute_units == 3 * 2 * (200 - WINDOW)
