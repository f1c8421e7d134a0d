import numpy as np
import pytest

from conftest import make_updates
from twinpress.aggregation import (
    AggregationContext,
    AggregationRule,
    RuleRegistry,
    aggregate_fltrust,
    aggregate_mean,
    aggregate_median,
    aggregate_tid,
    build_rule,
    fltrust_scores,
)
from twinpress.errors import ConfigurationError, DegenerateServerError, DimensionError, DomainError


def tid_oracle(values, counts, tau):
    n, d = values.shape
    distinct = np.array(sorted({tuple(row) for row in values}))
    outlier = np.zeros((n, d), dtype=bool)
    for j in range(d):
        med = np.median(distinct[:, j])
        mad = np.median(np.abs(distinct[:, j] - med))
        for i in range(n):
            outlier[i, j] = mad > 0 and abs(values[i, j] - med) > tau * 1.4826 * mad
    benign = [counts[i] * (1 - outlier[i].sum() / d) for i in range(n)]
    result = []
    for j in range(d):
        kept = [i for i in range(n) if not outlier[i, j]]
        if not kept:
            result.append(np.median(distinct[:, j]))
            continue
        total = sum(benign[i] for i in kept)
        if total == 0:
            result.append(np.mean([values[i, j] for i in kept]))
        else:
            result.append(sum(benign[i] * values[i, j] for i in kept) / total)
    return np.array(result)


def test_mean_weights_by_sample_count():
    updates = make_updates([[1.0, 0.0], [3.0, 4.0]], counts=[1, 3])
    np.testing.assert_allclose(aggregate_mean(updates), [2.5, 3.0])


def test_mean_with_zero_counts_is_unweighted():
    updates = make_updates([[1.0], [2.0], [6.0]], counts=[0, 0, 0])
    np.testing.assert_allclose(aggregate_mean(updates), [3.0])


def test_single_update_is_returned_by_every_plain_rule():
    updates = make_updates([[1.5, -2.0]], counts=[4])
    np.testing.assert_array_equal(aggregate_mean(updates), [1.5, -2.0])
    np.testing.assert_array_equal(aggregate_median(updates), [1.5, -2.0])


def test_median_is_coordinate_wise_and_ignores_counts():
    updates = make_updates([[1.0, 9.0], [2.0, 8.0], [3.0, 1.0], [10.0, 2.0]], counts=[100, 1, 1, 1])
    np.testing.assert_allclose(aggregate_median(updates), [2.5, 5.0])


def test_empty_and_mismatched_updates_are_rejected():
    with pytest.raises(DomainError):
        aggregate_mean([])
    with pytest.raises(DimensionError):
        aggregate_median(make_updates([[1.0, 2.0]]) + make_updates([[1.0]]))


def test_update_params_must_be_finite():
    with pytest.raises(DomainError):
        make_updates([[np.inf, 1.0]])


def test_fltrust_weighs_clients_by_clipped_cosine():
    updates = make_updates([[3.0, 4.0], [2.0, 0.0], [0.0, 5.0], [-1.0, 0.0]])
    result = aggregate_fltrust(updates, server_update=np.array([1.0, 0.0]), global_params=np.zeros(2))
    # trust 0.6 on (0.6, 0.8), trust 1 on (1, 0); the orthogonal and opposite clients earn nothing
    np.testing.assert_allclose(result, [0.85, 0.3])


def test_fltrust_rescales_clients_to_the_server_norm():
    trust, rescaled, norm = fltrust_scores(make_updates([[10.0, 0.0]]), np.array([2.0, 0.0]), np.zeros(2))
    assert norm == 2.0
    np.testing.assert_allclose(trust, [1.0])
    np.testing.assert_allclose(rescaled, [[2.0, 0.0]])


def test_fltrust_without_trusted_clients_keeps_the_global_model():
    global_params = np.array([1.0, 1.0])
    updates = make_updates([[0.0, 1.0], [1.0, 1.0]])
    result = aggregate_fltrust(updates, server_update=np.array([2.0, 1.0]), global_params=global_params)
    np.testing.assert_array_equal(result, global_params)


def test_fltrust_rejects_a_zero_server_direction():
    with pytest.raises(DegenerateServerError):
        aggregate_fltrust(make_updates([[1.0]]), server_update=np.array([0.5]), global_params=np.array([0.5]))


def test_tid_matches_the_brute_force_oracle(rng):
    values = rng.normal(size=(9, 5))
    values[2] += 40.0
    values[7, 1] = -25.0
    counts = rng.integers(0, 20, size=9)
    updates = make_updates(values, counts=list(counts))
    for tau in (0.5, 1.0, 3.0):
        np.testing.assert_allclose(aggregate_tid(updates, tau), tid_oracle(values, counts, tau), rtol=1e-12)


def test_tid_with_an_even_count_and_tiny_tau_matches_the_oracle(rng):
    values = rng.normal(size=(4, 3))
    counts = [1, 2, 3, 4]
    updates = make_updates(values, counts=counts)
    np.testing.assert_allclose(aggregate_tid(updates, 0.01), tid_oracle(values, np.array(counts), 0.01), rtol=1e-12)


def test_tid_with_huge_tau_reduces_to_the_mean(rng):
    values = rng.normal(size=(6, 4))
    updates = make_updates(values, counts=[1, 2, 3, 1, 2, 3])
    np.testing.assert_allclose(aggregate_tid(updates, 1e9), aggregate_mean(updates), rtol=1e-12)


def test_tid_trims_a_planted_outlier():
    updates = make_updates([[1.0], [1.1], [0.9], [1.05], [100.0]])
    assert aggregate_tid(updates, 3.0)[0] == pytest.approx(1.0125)
    assert aggregate_mean(updates)[0] > 20.0


def test_tid_preconditions():
    with pytest.raises(DomainError):
        aggregate_tid(make_updates([[1.0], [2.0]]), 3.0)
    with pytest.raises(ConfigurationError):
        aggregate_tid(make_updates([[1.0], [2.0], [3.0]]), 0.0)


def mean_oracle(values, counts):
    weights = counts if sum(counts) > 0 else [1] * len(counts)
    total = float(sum(weights))
    return np.array([sum(w * row[j] for w, row in zip(weights, values)) / total for j in range(values.shape[1])])


def median_oracle(values):
    result = []
    for j in range(values.shape[1]):
        col = sorted(values[:, j])
        n = len(col)
        result.append(col[n // 2] if n % 2 else (col[n // 2 - 1] + col[n // 2]) / 2)
    return np.array(result)


def fltrust_oracle(values, server, global_params):
    d_s = server - global_params
    s_norm = np.sqrt(np.sum(d_s ** 2))
    num = np.zeros_like(global_params)
    den = 0.0
    for row in values:
        d_i = row - global_params
        norm = np.sqrt(np.sum(d_i ** 2))
        if norm == 0:
            continue
        trust = max(0.0, float(np.sum(d_i * d_s)) / (norm * s_norm))
        num += trust * d_i * (s_norm / norm)
        den += trust
    return global_params + num / den if den > 0 else global_params.copy()


def random_instance(rng):
    n = int(rng.integers(3, 21))
    d = int(rng.integers(1, 51))
    values = rng.normal(size=(n, d)) * rng.uniform(0.1, 10.0)
    if rng.random() < 0.3:
        values[: n // 2 + 1] = values[0]
    counts = rng.integers(0, 30, size=n)
    return values, counts


def test_every_rule_matches_its_oracle_on_random_instances(rng):
    for _ in range(200):
        values, counts = random_instance(rng)
        updates = make_updates(values, counts=list(counts))
        global_params = rng.normal(size=values.shape[1])
        server = global_params + rng.normal(size=values.shape[1])
        tau = float(rng.uniform(0.5, 5.0))
        np.testing.assert_allclose(aggregate_mean(updates), mean_oracle(values, counts), rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(aggregate_median(updates), median_oracle(values), rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(
            aggregate_fltrust(updates, server, global_params), fltrust_oracle(values, server, global_params), rtol=1e-9, atol=1e-9
        )
        np.testing.assert_allclose(aggregate_tid(updates, tau), tid_oracle(values, counts, tau), rtol=1e-9, atol=1e-9)


def test_rules_ignore_the_order_of_updates(rng):
    values, counts = rng.normal(size=(8, 6)), rng.integers(1, 10, size=8)
    global_params, server = np.zeros(6), rng.normal(size=6)
    order = rng.permutation(8)
    updates = make_updates(values, counts=list(counts))
    shuffled = make_updates(values[order], counts=list(counts[order]))
    np.testing.assert_allclose(aggregate_mean(shuffled), aggregate_mean(updates), rtol=1e-12)
    np.testing.assert_array_equal(aggregate_median(shuffled), aggregate_median(updates))
    np.testing.assert_allclose(aggregate_fltrust(shuffled, server, global_params), aggregate_fltrust(updates, server, global_params), rtol=1e-12)
    np.testing.assert_allclose(aggregate_tid(shuffled, 3.0), aggregate_tid(updates, 3.0), rtol=1e-12)


def test_rules_shift_with_the_updates(rng):
    values, counts = rng.normal(size=(7, 4)), list(rng.integers(1, 10, size=7))
    shift = np.array([5.0, -3.0, 0.5, 100.0])
    updates = make_updates(values, counts=counts)
    moved = make_updates(values + shift, counts=counts)
    np.testing.assert_allclose(aggregate_mean(moved), aggregate_mean(updates) + shift, rtol=1e-9)
    np.testing.assert_allclose(aggregate_median(moved), aggregate_median(updates) + shift, rtol=1e-9)
    np.testing.assert_allclose(aggregate_tid(moved, 3.0), aggregate_tid(updates, 3.0) + shift, rtol=1e-9)
    server, global_params = rng.normal(size=4), rng.normal(size=4)
    np.testing.assert_allclose(
        aggregate_fltrust(moved, server + shift, global_params + shift),
        aggregate_fltrust(updates, server, global_params) + shift,
        rtol=1e-9,
    )


def test_mean_and_median_stay_inside_the_update_range(rng):
    for _ in range(50):
        values, counts = random_instance(rng)
        updates = make_updates(values, counts=list(counts))
        low, high = values.min(axis=0) - 1e-12, values.max(axis=0) + 1e-12
        for result in (aggregate_mean(updates), aggregate_median(updates)):
            assert np.all(result >= low) and np.all(result <= high)


def test_tid_trims_the_far_value_of_a_tied_column():
    updates = make_updates([[0.9], [1.0], [1.1], [1.0], [9.0]])
    assert aggregate_tid(updates, 3.0)[0] == pytest.approx(1.0)


def test_tid_isolates_an_identical_majority_bloc(rng):
    honest = rng.normal(1.0, 0.1, size=(6, 4))
    bloc = np.tile([8.0, -6.0, 5.0, 12.0], (7, 1))
    updates = make_updates(np.vstack([honest, bloc]), counts=[10] * 13)
    np.testing.assert_allclose(aggregate_tid(updates, 3.0), honest.mean(axis=0), atol=0.2)
    assert np.all(np.abs(aggregate_median(updates) - bloc[0]) < 1e-12)


def test_identical_updates_trim_nothing():
    updates = make_updates([[2.0, 3.0]] * 4, counts=[1, 2, 3, 4])
    np.testing.assert_array_equal(aggregate_tid(updates, 3.0), [2.0, 3.0])


def test_registry_builds_rules_by_name():
    assert {"mean", "median", "fltrust", "tid"} <= set(RuleRegistry().names())
    assert RuleRegistry() is RuleRegistry()
    tid = build_rule("TID", tau=2.0)
    assert tid.tau == 2.0
    assert tid.min_updates == 3
    assert build_rule("fltrust").needs_server_update
    assert repr(tid) == "TIDRule(tau=2.0)"


def test_unknown_rule_names_its_key():
    with pytest.raises(ConfigurationError) as err:
        build_rule("krum")
    assert err.value.key == "fedsync.rule"


def test_a_taken_name_cannot_be_rebound():
    class Other(AggregationRule):
        def aggregate(self, updates, context):
            return aggregate_mean(updates)

    with pytest.raises(ConfigurationError):
        RuleRegistry().register_rule("mean", Other)
    assert build_rule("mean").__class__.__name__ == "MeanRule"


def test_fltrust_rule_needs_a_server_update():
    rule = build_rule("fltrust")
    with pytest.raises(DomainError):
        rule.aggregate(make_updates([[1.0]]), AggregationContext(global_params=np.zeros(1)))
