import os
import pytest

import pandas as pd

from dnt_bench.cache_sim import run_cache_sim, write_cache_sim


def test_every_policy_is_reported_in_order(caching_config):
    result = run_cache_sim(caching_config, seed=11)
    frame = result.to_frame()
    assert frame["variant"].tolist() == ["RL", "RL+DNT", "ReliableRL", "ReliableRL+DNT", "LRU", "LFU"]
    assert frame["hit_rate"].between(0.0, 1.0).all()
    unshielded = frame[~frame["variant"].str.startswith("Reliable")]
    assert (unshielded["interventions"] == 0).all()
    assert (frame["interventions"] >= 0).all()


def test_all_policies_see_the_same_load(caching_config):
    frame = run_cache_sim(caching_config, seed=11).to_frame()
    assert frame["load_cv"].nunique() == 1
    assert frame["bs0_load"].nunique() == 1


def test_cache_sim_is_deterministic(caching_config):
    a = run_cache_sim(caching_config, seed=11).to_frame()
    b = run_cache_sim(caching_config, seed=11).to_frame()
    pd.testing.assert_frame_equal(a, b)


def test_traces_are_written_per_policy(tmp_path, caching_config):
    result = run_cache_sim(caching_config, seed=11, trace=True)
    files = write_cache_sim(result, str(tmp_path))
    names = [os.path.basename(f) for f in files]
    assert names == [
        "cache_sim.csv",
        "cache_trace_rl.csv",
        "cache_trace_rl_dnt.csv",
        "cache_trace_reliablerl.csv",
        "cache_trace_reliablerl_dnt.csv",
        "cache_trace_lru.csv",
        "cache_trace_lfu.csv",
    ]
    trace = pd.read_csv(files[1])
    assert list(trace.columns) == ["time", "client", "content", "bs", "hit"]
    assert len(trace) == caching_config.eval_steps * 8


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_shielded_twin_policy_balances_load_no_worse_than_rl(caching_config, seed):
    reports = run_cache_sim(caching_config, seed=seed, progress=False).reports
    assert reports["ReliableRL+DNT"].load_cv <= reports["RL"].load_cv
    assert reports["RL"].interventions == 0
    assert reports["RL+DNT"].interventions == 0
    assert reports["ReliableRL+DNT"].interventions >= 0
