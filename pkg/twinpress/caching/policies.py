"""
Cache replacement policies and tabular Q-learning over eviction decisions.

Every policy answers the same question at a miss on a full cache: which
entry of the eviction menu to take (LRU candidate, LFU candidate, or the
entry with the lowest forecast demand). LRU and LFU always pick their own
entry; the learned policy picks by Q-value.
"""

import logging
from typing import Dict, Optional, Tuple

import numpy as np

from twinpress.caching.environment import (
    N_ACTIONS,
    N_STATES,
    CacheEnvironment,
    CachingReport,
    Decider,
)
from twinpress.caching.shield import SafetyShield
from twinpress.caching.twin_generator import DemandTwin, twin_generate
from twinpress.errors import ConfigurationError, TwinStateError
from twinpress.seeding import derive_rng

VARIANTS = ("RL", "RL+DNT", "ReliableRL", "ReliableRL+DNT")
BASELINES = ("LRU", "LFU")


def variant_flags(variant: str) -> Tuple[bool, bool]:
    """(reliable, uses_twin) for a variant name.

    Raises:
        ConfigurationError: If the variant is unknown
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"variant must be one of {VARIANTS}, got '{variant}'", key="caching.variant")
    return variant.startswith("Reliable"), variant.endswith("+DNT")


def _greedy(row: np.ndarray, rng: np.random.Generator) -> int:
    best = np.flatnonzero(row == row.max())
    return int(best[0]) if len(best) == 1 else int(rng.choice(best))


class LRUPolicy(Decider):
    name = "LRU"

    def select(self, state_index: int, bs: int) -> int:
        return 0


class LFUPolicy(Decider):
    name = "LFU"

    def select(self, state_index: int, bs: int) -> int:
        return 1


class QPolicy(Decider):
    """Greedy policy over a Q-table; ties are broken uniformly at random,
    so an all-equal table acts as the uniform-random policy.

    Attributes:
        q_table (np.ndarray): (states, actions) action values
        name (str): Variant that produced the table
    """

    def __init__(self, q_table: np.ndarray, name: str, seed: int = 0):
        self.q_table = np.asarray(q_table, dtype=float)
        self.name = name
        self.seed = seed
        self.reset()

    def reset(self) -> None:
        self._rng = derive_rng(self.seed, "policy", self.name)

    def select(self, state_index: int, bs: int) -> int:
        return _greedy(self.q_table[state_index], self._rng)

    def action_probabilities(self, state_index: int) -> np.ndarray:
        row = self.q_table[state_index]
        best = row == row.max()
        return best / best.sum()


class QLearner(Decider):
    """Epsilon-greedy Q-learning over the eviction decisions of each BS.

    A decision's reward is everything its BS earns until the BS's next
    decision, which bootstraps the update (a semi-MDP per BS).
    """

    def __init__(self, alpha: float, gamma: float, epsilon: float, rng: np.random.Generator):
        self.alpha = alpha
        self.gamma = gamma
        self.epsilon = epsilon
        self.rng = rng
        self.q = np.zeros((N_STATES, N_ACTIONS))
        self.pending: Dict[int, Tuple[int, int, float]] = {}
        self.updates = 0

    def select(self, state_index: int, bs: int) -> int:
        if bs in self.pending:
            s, a, acc = self.pending[bs]
            self._update(s, a, acc + self.gamma * self.q[state_index].max())
        if self.rng.random() < self.epsilon:
            action = int(self.rng.integers(N_ACTIONS))
        else:
            action = _greedy(self.q[state_index], self.rng)
        self.pending[bs] = (state_index, action, 0.0)
        return action

    def reward(self, bs: int, amount: float) -> None:
        if bs in self.pending:
            s, a, acc = self.pending[bs]
            self.pending[bs] = (s, a, acc + amount)

    def end_episode(self) -> None:
        for s, a, acc in self.pending.values():
            self._update(s, a, acc)
        self.pending = {}

    def _update(self, s: int, a: int, target: float) -> None:
        self.q[s, a] += self.alpha * (target - self.q[s, a])
        self.updates += 1


def _episode_seed(seed: int, *name) -> int:
    return int(derive_rng(seed, *name).integers(2 ** 31))


def train_policy(
    env: CacheEnvironment,
    variant: str,
    episodes: int,
    seed: int,
    twin: Optional[DemandTwin] = None,
) -> QPolicy:
    """Train one RL variant with tabular Q-learning.

    Args:
        env: Caching world (topology, config, demand history)
        variant: RL, RL+DNT, ReliableRL or ReliableRL+DNT
        episodes: Real training episodes
        seed: Root seed of exploration and episode streams
        twin: Fitted demand twin, required by +DNT variants

    Returns:
        Greedy QPolicy over the learned table

    Notes:
        - Reliable variants train with the shield enabled: the step reward
          carries the imbalance penalty and an overridden proposal costs rho
        - +DNT variants forecast demand with the twin and add synthetic
          episodes generated by it, interleaved with the real ones at the
          configured mix
    """
    reliable, uses_twin = variant_flags(variant)
    if episodes < 0:
        raise ConfigurationError(f"episodes must be >= 0, got {episodes}", key="caching.episodes")
    cfg = env.config
    if uses_twin:
        if twin is None or not twin.trained:
            raise TwinStateError(f"{variant} needs a trained demand twin")
        env = env.with_demand(twin, env.demand_history)

    learner = QLearner(cfg.q_alpha, cfg.gamma, cfg.epsilon, derive_rng(seed, "q-learning", variant))
    shield = SafetyShield(theta=cfg.theta, rho=cfg.rho, enabled=True) if reliable else None
    n_synthetic = int(round(episodes * cfg.dnt_mix / (1.0 - cfg.dnt_mix))) if uses_twin else 0
    n_events = cfg.episode_steps * env.topology.n_clients

    for e in range(max(episodes, n_synthetic)):
        streams = []
        if e < episodes:
            streams.append(env.stream(cfg.episode_steps, "training", e))
        if e < n_synthetic:
            events, _ = twin_generate(
                twin,
                env.demand_history,
                n_events,
                cfg.rare_rate,
                _episode_seed(seed, "synthetic-episode", e),
                env.topology.n_clients,
                cfg.demand_window,
            )
            streams.append(events)
        for events in streams:
            env.run(events, learner, shield, penalize_overrides=reliable)
            learner.end_episode()

    logging.info(
        f"Trained {variant}: {episodes} real + {n_synthetic} synthetic episodes, {learner.updates} Q updates"
        + (f", {shield.intervention_count} training interventions" if shield else "")
    )
    return QPolicy(learner.q.copy(), variant, seed)


def evaluate_caching(
    policy: Decider,
    env: CacheEnvironment,
    horizon: int,
    shield: Optional[SafetyShield] = None,
    record_trace: bool = False,
) -> CachingReport:
    """Run a policy on the shared evaluation stream.

    Args:
        policy: Learned or baseline policy
        env: Caching world; its demand model is the one the policy acts with
        horizon: Evaluation steps
        shield: Shield active during evaluation, if any
        record_trace: Keep the event trace on env.trace

    Returns:
        CachingReport with hit rate, interventions and load balance
    """
    if isinstance(policy, QPolicy):
        policy.reset()
    events = env.stream(horizon, "evaluation")
    report = env.run(events, policy, shield, record_trace=record_trace)
    logging.info(
        f"Evaluated {getattr(policy, 'name', type(policy).__name__)}: hit_rate={report.hit_rate:.4f}, "
        f"interventions={report.interventions}, load_cv={report.load_cv:.4f}"
    )
    return report
