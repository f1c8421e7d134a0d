import numpy as np
import pytest

from dnt_bench.config import parse_config
from twinpress.aggregation import ClientUpdate
from twinpress.caching import CachingConfig
from twinpress.network import NetworkConfig, TrafficProfile, build_physical_network, generate_synthetic_traffic


def small_experiment(tmp_path, **sections):
    """A 3x3-grid experiment small enough to run every subcommand in seconds."""
    document = {
        "seed": 7,
        "output_dir": str(tmp_path / "run"),
        "network": {"rows": 3, "cols": 3, "horizon": 200},
        "traffic": {"base_load": 10.0, "hotspot_gain": 1.0, "base_jitter": 0.2, "phase_jitter": 0.2},
        "clustering": {"k": 2, "recluster_period": 20},
        "forecaster": {"window": 4, "learning_rate": 0.05, "epochs": 3},
        "fedsync": {
            "rounds": 3,
            "htwin_window": 12,
            "eval_window": 8,
            "train_fraction": 0.6,
            "eval_steps": 30,
            "max_events": 5,
            "root_fraction": 0.3,
        },
        "attack": {"batch_size": 3},
        "caching": {
            "slots_per_bs": 10,
            "clients_per_bs": 2,
            "overlaps": [0, 1, 0, 0, 1],
            "catalog_size": 50,
            "drift": 50,
            "load_window": 20,
            "demand_window": 10,
            "lags": 3,
            "episodes": 2,
            "episode_steps": 50,
            "eval_steps": 100,
            "history_steps": 100,
            "twin_epochs": 20,
        },
    }
    for name, values in sections.items():
        if isinstance(values, dict):
            document.setdefault(name, {}).update(values)
        else:
            document[name] = values
    return parse_config(document)


@pytest.fixture
def small_config(tmp_path):
    return small_experiment(tmp_path)


@pytest.fixture
def grid_network():
    return build_physical_network(NetworkConfig(rows=3, cols=4))


@pytest.fixture
def grid_traffic(grid_network):
    profile = TrafficProfile(base_load=10.0, hotspot_gain=1.0, base_jitter=0.2, phase_jitter=0.2)
    return generate_synthetic_traffic(grid_network, seed=3, horizon=300, profile=profile)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_updates(values, counts=None):
    values = np.asarray(values, dtype=float)
    counts = counts if counts is not None else [1] * len(values)
    return [ClientUpdate(client_id=i, params=v, sample_count=c) for i, (v, c) in enumerate(zip(values, counts))]


@pytest.fixture
def caching_config():
    return CachingConfig(
        slots_per_bs=10,
        clients_per_bs=2,
        overlaps=(0, 1, 0, 0, 1),
        catalog_size=50,
        drift=50,
        load_window=20,
        demand_window=10,
        lags=3,
        episodes=2,
        episode_steps=50,
        eval_steps=100,
        history_steps=100,
        twin_epochs=20,
    )
