"""
Edge-caching experiment: four RL variants and the LRU/LFU baselines on one
shared evaluation stream.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List

import pandas as pd
from tqdm import tqdm

from twinpress.caching.environment import CachingConfig, CachingReport, build_environment, window_counts
from twinpress.caching.policies import BASELINES, VARIANTS, LFUPolicy, LRUPolicy, evaluate_caching, train_policy, variant_flags
from twinpress.caching.shield import SafetyShield
from twinpress.caching.twin_generator import DemandTwin
from twinpress.forecast import TrainingConfig


@dataclass
class CacheSimResult:
    reports: Dict[str, CachingReport]
    traces: Dict[str, pd.DataFrame] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([self.reports[name].row(name) for name in self.reports])


def run_cache_sim(config: CachingConfig, seed: int, trace: bool = False, progress: bool = True) -> CacheSimResult:
    """
    Train and evaluate every caching policy.

    The demand twin is fitted on a history stream that precedes every training
    and evaluation stream; its window counts also seed the demand trackers.

    Args:
        config: Caching settings
        seed: Root seed of all streams
        trace: Keep the per-request trace of every evaluation run
        progress: Show a tqdm bar over the RL variants

    Returns:
        CacheSimResult in VARIANTS then BASELINES order
    """
    env = build_environment(config, seed)
    history = window_counts(env.stream(config.history_steps, "history"), config.catalog_size, config.demand_window)
    env = env.with_demand(env.demand_model, history)
    twin = DemandTwin(config.catalog_size, config.lags).fit(
        history, TrainingConfig(learning_rate=config.twin_learning_rate, epochs=config.twin_epochs)
    )

    result = CacheSimResult(reports={})
    for variant in tqdm(VARIANTS, desc="Caching variants", disable=not progress):
        reliable, uses_twin = variant_flags(variant)
        policy = train_policy(env, variant, config.episodes, seed, twin=twin)
        eval_env = env.with_demand(twin, history) if uses_twin else env
        shield = SafetyShield(theta=config.theta, rho=config.rho, enabled=True) if reliable else None
        result.reports[variant] = evaluate_caching(policy, eval_env, config.eval_steps, shield=shield, record_trace=trace)
        if trace:
            result.traces[variant] = eval_env.trace_frame()

    for name, policy in zip(BASELINES, (LRUPolicy(), LFUPolicy())):
        result.reports[name] = evaluate_caching(policy, env, config.eval_steps, record_trace=trace)
        if trace:
            result.traces[name] = env.trace_frame()
    return result


def write_cache_sim(result: CacheSimResult, output_dir: str) -> List[str]:
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, "cache_sim.csv")
    result.to_frame().to_csv(path, index=False, lineterminator="\n", float_format="%.10g")
    files = [path]
    for name, frame in result.traces.items():
        trace_path = os.path.join(output_dir, f"cache_trace_{name.replace('+', '_').lower()}.csv")
        frame.to_csv(trace_path, index=False, lineterminator="\n")
        files.append(trace_path)
    logging.info(f"Saved caching results for {len(result.reports)} policies to {path}")
    return files
