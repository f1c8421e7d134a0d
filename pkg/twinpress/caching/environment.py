"""
Multi-BS edge-caching environment.

This module provides the caching sandbox the policies run in:
- CacheTopology: base stations, their cache slots and the client service map
- simulate_request_stream: Zipf requests whose popularity ranking drifts
- CacheState / step_env: per-BS LRU-ordered caches, window load counters and
  hit accounting, advanced one request at a time
- CacheEnvironment: runs a request stream under a policy, an optional safety
  shield and an optional learner, and reports hit rate and load balance
"""

import logging
import math
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from itertools import islice
from typing import Callable, Dict, Hashable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from twinpress.caching.shield import SafetyShield, safety_shield
from twinpress.errors import ActionError, ConfigurationError, DomainError
from twinpress.seeding import derive_rng

HOT_FRACTION = 0.05
WARM_FRACTION = 0.20
DRIFT_SWAP_FRACTION = 0.05
N_TIERS = 3
N_STATES = N_TIERS ** 3
N_ACTIONS = 3
ACTION_NAMES = ("evict-lru", "evict-lfu", "evict-lowest-forecast")
TRACE_COLUMNS = ["time", "client", "content", "bs", "hit"]


@dataclass(frozen=True)
class CachingConfig:
    """Caching experiment settings.

    Attributes:
        n_bs (int): Base stations on the ring
        slots_per_bs (int): Cache slots per BS
        clients_per_bs (int): Clients listed by every BS
        overlaps (Tuple[int, ...]): Shared clients per ring edge (i, i+1)
        catalog_size (int): Number of distinct contents
        zipf_alpha (float): Popularity skew, >= 0
        drift (int): Steps between popularity-ranking drifts
        theta (float): Load-ratio threshold of the safety shield, > 1
        rho (float): Imbalance penalty weight
        load_window (int): Sliding window of the BS load counters, in steps
        demand_window (int): Steps per demand-forecast window
        lags (int): Demand windows the twin forecaster looks back
        episodes (int): Real training episodes per RL variant
        episode_steps (int): Steps per training episode
        eval_steps (int): Steps of the shared evaluation stream
        history_steps (int): Steps of historical data the twin learns from
        dnt_mix (float): Share of synthetic episodes in +DNT training
        rare_rate (float): Per-window probability of a spiked cold content
        q_alpha (float): Q-learning step size
        gamma (float): Discount between consecutive decisions of one BS
        epsilon (float): Exploration rate during training
        twin_epochs (int): Full-batch epochs when fitting the demand twin
        twin_learning_rate (float): Step size when fitting the demand twin
    """
    n_bs: int = 5
    slots_per_bs: int = 150
    clients_per_bs: int = 8
    overlaps: Tuple[int, ...] = (0, 8, 0, 0, 8)
    catalog_size: int = 1000
    zipf_alpha: float = 0.8
    drift: int = 500
    theta: float = 1.5
    rho: float = 0.5
    load_window: int = 200
    demand_window: int = 50
    lags: int = 12
    episodes: int = 8
    episode_steps: int = 300
    eval_steps: int = 2000
    history_steps: int = 2000
    dnt_mix: float = 0.5
    rare_rate: float = 0.3
    q_alpha: float = 0.1
    gamma: float = 0.9
    epsilon: float = 0.1
    twin_epochs: int = 200
    twin_learning_rate: float = 0.05

    def validate(self) -> None:
        if self.catalog_size < 1:
            raise ConfigurationError(f"catalog_size must be >= 1, got {self.catalog_size}", key="caching.catalog_size")
        if not (self.zipf_alpha >= 0 and math.isfinite(self.zipf_alpha)):
            raise ConfigurationError(f"zipf_alpha must be a finite value >= 0, got {self.zipf_alpha}", key="caching.zipf_alpha")
        if self.drift < 1:
            raise ConfigurationError(f"drift must be >= 1, got {self.drift}", key="caching.drift")
        if not self.theta > 1:
            raise ConfigurationError(f"theta must be > 1, got {self.theta}", key="caching.theta")
        if self.rho < 0:
            raise ConfigurationError(f"rho must be >= 0, got {self.rho}", key="caching.rho")
        if self.load_window < 1 or self.demand_window < 1 or self.lags < 1:
            raise ConfigurationError("load_window, demand_window and lags must be >= 1", key="caching.load_window")
        if self.episodes < 0 or self.episode_steps < 1 or self.eval_steps < 1:
            raise ConfigurationError("episodes must be >= 0 and step counts >= 1", key="caching.episodes")
        if self.history_steps < (self.lags + 2) * self.demand_window:
            raise ConfigurationError(
                f"history_steps must cover at least {self.lags + 2} demand windows", key="caching.history_steps"
            )
        if not 0 <= self.dnt_mix < 1:
            raise ConfigurationError(f"dnt_mix must be in [0, 1), got {self.dnt_mix}", key="caching.dnt_mix")
        if not 0 <= self.rare_rate <= 1:
            raise ConfigurationError(f"rare_rate must be in [0, 1], got {self.rare_rate}", key="caching.rare_rate")
        if not (0 < self.q_alpha <= 1 and 0 <= self.gamma < 1 and 0 <= self.epsilon <= 1):
            raise ConfigurationError("q_alpha must be in (0, 1], gamma in [0, 1), epsilon in [0, 1]", key="caching.q_alpha")


@dataclass(frozen=True)
class CacheTopology:
    """Base stations and the clients each one serves.

    Attributes:
        n_bs (int): Number of base stations
        slots_per_bs (int): Cache capacity of every BS
        clients_per_bs (int): Clients listed by every BS
        max_bs_per_client (int): Largest service set of a client
        service (Tuple[Tuple[int, ...], ...]): client id -> sorted BS ids serving it
    """
    n_bs: int
    slots_per_bs: int
    clients_per_bs: int
    service: Tuple[Tuple[int, ...], ...]
    max_bs_per_client: int = 2

    @classmethod
    def ring(
        cls,
        n_bs: int = 5,
        slots_per_bs: int = 150,
        clients_per_bs: int = 8,
        overlaps: Optional[Sequence[int]] = None,
    ) -> "CacheTopology":
        """BSs on a ring; edge (i, i+1) shares overlaps[i] clients.

        Raises:
            ConfigurationError: If a BS would list more than clients_per_bs clients
        """
        if n_bs < 1 or slots_per_bs < 1 or clients_per_bs < 1:
            raise ConfigurationError("n_bs, slots_per_bs and clients_per_bs must be >= 1", key="caching.n_bs")
        overlaps = tuple(overlaps) if overlaps is not None else (0,) * n_bs
        if len(overlaps) != n_bs or any(o < 0 for o in overlaps):
            raise ConfigurationError(f"overlaps must list {n_bs} non-negative counts", key="caching.overlaps")
        if n_bs < 3 and any(overlaps):
            raise ConfigurationError("shared clients need a ring of at least 3 BSs", key="caching.overlaps")
        service: List[Tuple[int, ...]] = []
        for i in range(n_bs):
            exclusive = clients_per_bs - overlaps[i - 1] - overlaps[i]
            if exclusive < 0:
                raise ConfigurationError(
                    f"BS {i} would list {overlaps[i - 1] + overlaps[i]} shared clients but serves only {clients_per_bs}",
                    key="caching.overlaps",
                )
            service.extend([(i,)] * exclusive)
            pair = tuple(sorted((i, (i + 1) % n_bs)))
            service.extend([pair] * overlaps[i])
        topology = cls(n_bs=n_bs, slots_per_bs=slots_per_bs, clients_per_bs=clients_per_bs, service=tuple(service))
        topology.validate()
        return topology

    @property
    def n_clients(self) -> int:
        return len(self.service)

    def clients_of(self, bs: int) -> List[int]:
        return [c for c, members in enumerate(self.service) if bs in members]

    def validate(self) -> None:
        for c, members in enumerate(self.service):
            if not 1 <= len(members) <= self.max_bs_per_client:
                raise ConfigurationError(f"client {c} is served by {len(members)} BSs", key="caching.overlaps")
        for bs in range(self.n_bs):
            listed = len(self.clients_of(bs))
            if listed != self.clients_per_bs:
                raise ConfigurationError(f"BS {bs} lists {listed} clients, expected {self.clients_per_bs}", key="caching.overlaps")


class RequestEvent(NamedTuple):
    time: int
    client_id: int
    content_id: int
    serving_bs: Optional[int] = None


class LoadTracker:
    """Requests served per BS over a sliding window of steps."""

    def __init__(self, n_bs: int, window: int):
        self.window = window
        self.loads = np.zeros(n_bs, dtype=np.int64)
        self._events: deque = deque()

    def advance(self, time: int) -> None:
        while self._events and self._events[0][0] <= time - self.window:
            _, bs = self._events.popleft()
            self.loads[bs] -= 1

    def record(self, time: int, bs: int) -> None:
        self.advance(time)
        self._events.append((time, bs))
        self.loads[bs] += 1

    def route(self, service_set: Sequence[int], time: int) -> int:
        """Least-loaded member of the service set; ties go to the lower BS id."""
        self.advance(time)
        return min(service_set, key=lambda b: (self.loads[b], b))

    def ratio(self, bs: int) -> float:
        mean = self.loads.mean()
        return float(self.loads[bs] / mean) if mean > 0 else 0.0

    def projected_ratio(self, bs: int, time: int) -> float:
        """Load ratio of `bs` once a request at `time` is counted."""
        self.advance(time)
        loads = self.loads.astype(float)
        loads[bs] += 1
        return float(loads[bs] / loads.mean())


def zipf_probabilities(catalog_size: int, alpha: float) -> np.ndarray:
    ranks = np.arange(1, catalog_size + 1, dtype=float)
    weights = ranks ** (-alpha)
    return weights / weights.sum()


def _drift_ranking(ranking: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # Swap each of the hottest ranks with a random rank so cold contents rise.
    ranking = ranking.copy()
    n_hot = max(1, int(len(ranking) * DRIFT_SWAP_FRACTION))
    for r in range(n_hot):
        other = int(rng.integers(len(ranking)))
        ranking[r], ranking[other] = ranking[other], ranking[r]
    return ranking


def simulate_request_stream(
    topology: CacheTopology,
    catalog_size: int,
    zipf_alpha: float,
    drift: int,
    seed: int,
    horizon: int,
    load_window: int = 200,
    stream: Tuple[Hashable, ...] = ("requests",),
) -> List[RequestEvent]:
    """One request per client per step from a drifting Zipf popularity.

    Dual-served clients go to the less-loaded of their BSs. The served-load
    counters are the only input of that choice, so routing here gives the same
    serving BSs as leaving it to CacheEnvironment.run, and every policy played
    on one stream sees the same per-BS loads.

    Args:
        topology: Clients and service sets
        catalog_size: Contents 0..catalog_size-1
        zipf_alpha: Skew; 0 gives uniform requests
        drift: Steps between ranking drifts
        seed: Root seed
        horizon: Number of steps
        load_window: Window of the load counters used for routing
        stream: Seed sub-stream name, so training and evaluation streams differ

    Returns:
        Events ordered by (time, client_id) with serving_bs resolved

    Raises:
        ConfigurationError: If alpha is negative or not finite, or a size is < 1
    """
    if not (zipf_alpha >= 0 and math.isfinite(zipf_alpha)):
        raise ConfigurationError(f"zipf_alpha must be a finite value >= 0, got {zipf_alpha}", key="caching.zipf_alpha")
    if catalog_size < 1 or horizon < 1 or drift < 1:
        raise ConfigurationError("catalog_size, horizon and drift must be >= 1", key="caching.catalog_size")
    rng = derive_rng(seed, *stream)
    probs = zipf_probabilities(catalog_size, zipf_alpha)
    ranking = rng.permutation(catalog_size)
    tracker = LoadTracker(topology.n_bs, load_window)
    n_clients = topology.n_clients

    events: List[RequestEvent] = []
    for block_start in range(0, horizon, drift):
        if block_start > 0:
            ranking = _drift_ranking(ranking, rng)
        steps = min(drift, horizon - block_start)
        contents = ranking[rng.choice(catalog_size, size=(steps, n_clients), p=probs)]
        for i in range(steps):
            t = block_start + i
            for c in range(n_clients):
                bs = tracker.route(topology.service[c], t)
                tracker.record(t, bs)
                events.append(RequestEvent(t, c, int(contents[i, c]), int(bs)))
    return events


def window_counts(events: Sequence[RequestEvent], catalog_size: int, demand_window: int) -> np.ndarray:
    """Per-content request counts per demand window, shape (windows, catalog)."""
    if not events:
        return np.zeros((0, catalog_size))
    times = np.array([e.time for e in events])
    contents = np.array([e.content_id for e in events])
    start = times.min()
    idx = (times - start) // demand_window
    counts = np.zeros((int(idx.max()) + 1, catalog_size))
    np.add.at(counts, (idx, contents), 1.0)
    return counts


DemandModel = Callable[[np.ndarray], np.ndarray]


def persistence_demand(recent: np.ndarray) -> np.ndarray:
    return recent[-1].astype(float)


class DemandTracker:
    """Windowed per-content demand with a one-step forecast for the next window.

    Attributes:
        forecast (np.ndarray): Predicted demand of every content
        ranks (np.ndarray): Rank of every content by forecast, 0 = hottest
    """

    def __init__(self, catalog_size: int, demand_window: int, lags: int, model: DemandModel = persistence_demand,
                 history: Optional[np.ndarray] = None):
        self.catalog_size = catalog_size
        self.demand_window = demand_window
        self.lags = lags
        self.model = model
        self.recent = np.zeros((lags, catalog_size))
        if history is not None and len(history):
            tail = history[-lags:]
            self.recent[lags - len(tail):] = tail
        self.current = np.zeros(catalog_size)
        self.window_index: Optional[int] = None
        self._refresh()

    def _refresh(self) -> None:
        self.forecast = np.maximum(self.model(self.recent), 0.0)
        order = np.argsort(-self.forecast, kind="stable")
        self.ranks = np.empty(self.catalog_size, dtype=np.int64)
        self.ranks[order] = np.arange(self.catalog_size)

    def advance(self, time: int) -> None:
        index = time // self.demand_window
        if self.window_index is None:
            self.window_index = index
            return
        while self.window_index < index:
            self.recent = np.vstack([self.recent[1:], self.current])
            self.current = np.zeros(self.catalog_size)
            self.window_index += 1
            self._refresh()

    def observe(self, content: int) -> None:
        self.current[content] += 1

    def tier(self, content: int) -> int:
        rank = self.ranks[content]
        if rank < max(1, int(self.catalog_size * HOT_FRACTION)):
            return 0
        if rank < max(1, int(self.catalog_size * WARM_FRACTION)):
            return 1
        return 2


@dataclass
class CacheState:
    """Caches, load counters and request accounting of every BS.

    Attributes:
        caches (List[OrderedDict]): Cached content ids per BS, least recently used first
        frequency (List[Dict[int, int]]): Requests per content seen by each BS
        loads (LoadTracker): Sliding-window load counters
        served (np.ndarray): Requests served per BS since reset
        hits (int): Requests served from the serving BS's cache
        misses (int): Requests that were not
    """
    slots: int
    caches: List[OrderedDict]
    frequency: List[Dict[int, int]]
    loads: LoadTracker
    served: np.ndarray
    hits: int = 0
    misses: int = 0

    @classmethod
    def empty(cls, topology: CacheTopology, load_window: int) -> "CacheState":
        return cls(
            slots=topology.slots_per_bs,
            caches=[OrderedDict() for _ in range(topology.n_bs)],
            frequency=[{} for _ in range(topology.n_bs)],
            loads=LoadTracker(topology.n_bs, load_window),
            served=np.zeros(topology.n_bs, dtype=np.int64),
        )

    @property
    def requests(self) -> int:
        return self.hits + self.misses

    def is_full(self, bs: int) -> bool:
        return len(self.caches[bs]) >= self.slots

    def occupancy_tier(self, bs: int) -> int:
        fill = len(self.caches[bs]) / self.slots
        if fill < 0.5:
            return 0
        return 1 if fill < 1.0 else 2


def step_env(
    state: CacheState,
    event: RequestEvent,
    action: Optional[int],
    theta: float = 1.5,
    rho: float = 0.0,
    penalize: bool = False,
) -> Tuple[CacheState, bool, float]:
    """Serve one request at its serving BS.

    Args:
        state: Mutable environment state, updated in place
        event: Request with serving_bs resolved
        action: None for no eviction, or the LRU-order index of the victim
        theta: Load-ratio threshold of the imbalance penalty
        rho: Penalty weight
        penalize: Subtract rho * max(0, ratio - theta) from the reward

    Returns:
        Tuple of (state, hit, reward)

    Raises:
        ActionError: If a miss on a full cache has no victim, or the victim
            index is out of range
    """
    bs = event.serving_bs
    cache = state.caches[bs]
    content = event.content_id
    hit = content in cache

    if hit:
        cache.move_to_end(content)
    else:
        if len(cache) >= state.slots:
            if action is None:
                raise ActionError(f"BS {bs} cache is full; a miss needs an eviction victim")
            if not 0 <= action < len(cache):
                raise ActionError(f"victim index {action} out of range for {len(cache)} cached entries")
            victim = next(islice(cache, action, None))
            del cache[victim]
        cache[content] = None

    state.loads.record(event.time, bs)
    state.served[bs] += 1
    freq = state.frequency[bs]
    freq[content] = freq.get(content, 0) + 1
    if hit:
        state.hits += 1
    else:
        state.misses += 1

    reward = 1.0 if hit else 0.0
    if penalize:
        reward -= rho * max(0.0, state.loads.ratio(bs) - theta)
    return state, hit, reward


def candidate_index(state: CacheState, bs: int, action: int, demand: DemandTracker) -> int:
    """Victim index proposed by a menu action; ties go to the least recently used."""
    if action == 0:
        return 0
    cached = list(state.caches[bs])
    if action == 1:
        freq = state.frequency[bs]
        scores = [freq.get(c, 0) for c in cached]
    elif action == 2:
        scores = [demand.forecast[c] for c in cached]
    else:
        raise ActionError(f"unknown menu action {action}")
    return int(np.argmin(scores))


def encode_state(popularity_tier: int, occupancy_tier: int, load_tier: int) -> int:
    return (popularity_tier * N_TIERS + occupancy_tier) * N_TIERS + load_tier


def load_tier(ratio: float, theta: float) -> int:
    if ratio < 1.0:
        return 0
    return 1 if ratio < theta else 2


@dataclass(frozen=True)
class CachingReport:
    """Outcome of one caching run.

    Attributes:
        hit_rate (float): hits / requests
        hits (int): Requests served from the local cache
        requests (int): Total requests
        interventions (int): Shield overrides during the run
        bs_loads (Tuple[float, ...]): Mean requests served per load window, per BS
        load_cv (float): Coefficient of variation of bs_loads
    """
    hit_rate: float
    hits: int
    requests: int
    interventions: int
    bs_loads: Tuple[float, ...]
    load_cv: float

    def row(self, variant: str) -> Dict[str, object]:
        row = {"variant": variant, "hit_rate": self.hit_rate, "interventions": self.interventions}
        row.update({f"bs{i}_load": load for i, load in enumerate(self.bs_loads)})
        row["load_cv"] = self.load_cv
        return row


class Decider:
    """What the environment asks at every eviction decision.

    `select` returns a menu action for an encoded state at a BS; `reward`
    receives the reward of every request the BS serves afterwards.
    """

    def select(self, state_index: int, bs: int) -> int:
        raise NotImplementedError

    def reward(self, bs: int, amount: float) -> None:
        pass


@dataclass
class CacheEnvironment:
    """Caching world shared by training and evaluation.

    Attributes:
        topology (CacheTopology): BSs and clients
        config (CachingConfig): Experiment settings
        seed (int): Root seed of every stream
        demand_model (DemandModel): Forecaster used for tiers and action 2
        demand_history (np.ndarray, optional): Window counts preceding the run
    """
    topology: CacheTopology
    config: CachingConfig
    seed: int = 0
    demand_model: DemandModel = persistence_demand
    demand_history: Optional[np.ndarray] = None
    trace: List[Tuple[int, int, int, int, int]] = field(default_factory=list)

    def stream(self, horizon: int, *name: Hashable) -> List[RequestEvent]:
        return simulate_request_stream(
            self.topology,
            self.config.catalog_size,
            self.config.zipf_alpha,
            self.config.drift,
            self.seed,
            horizon,
            load_window=self.config.load_window,
            stream=name,
        )

    def with_demand(self, model: DemandModel, history: Optional[np.ndarray] = None) -> "CacheEnvironment":
        return CacheEnvironment(self.topology, self.config, self.seed, model, history)

    def run(
        self,
        events: Sequence[RequestEvent],
        decider: Decider,
        shield: Optional[SafetyShield] = None,
        penalize_overrides: bool = False,
        record_trace: bool = False,
    ) -> CachingReport:
        """Play a request stream from empty caches.

        Args:
            events: Requests in time order; unresolved serving_bs is routed here
            decider: Chooses menu actions at eviction decisions and collects rewards
            shield: Optional SafetyShield; when enabled it may override victims
                and the step reward carries the imbalance penalty
            penalize_overrides: Charge rho to the decider when the shield
                takes a decision over
            record_trace: Keep (time, client, content, bs, hit) rows in self.trace

        Returns:
            CachingReport of the run
        """
        cfg = self.config
        state = CacheState.empty(self.topology, cfg.load_window)
        demand = DemandTracker(cfg.catalog_size, cfg.demand_window, cfg.lags, self.demand_model, self.demand_history)
        shielded = shield is not None and shield.enabled
        start_interventions = shield.intervention_count if shield is not None else 0
        self.trace = []

        for event in events:
            service = self.topology.service[event.client_id]
            if event.serving_bs is None:
                event = event._replace(serving_bs=state.loads.route(service, event.time))
            elif event.serving_bs not in service:
                raise DomainError(f"BS {event.serving_bs} does not serve client {event.client_id}")
            bs = event.serving_bs
            demand.advance(event.time)

            action = None
            if event.content_id not in state.caches[bs] and state.is_full(bs):
                ratio = state.loads.projected_ratio(bs, event.time)
                s = encode_state(demand.tier(event.content_id), state.occupancy_tier(bs), load_tier(ratio, cfg.theta))
                action = candidate_index(state, bs, decider.select(s, bs), demand)
                if shield is not None:
                    action, intervened = safety_shield(state, bs, action, shield, event.time)
                    if intervened and penalize_overrides:
                        decider.reward(bs, -cfg.rho)

            state, hit, reward = step_env(state, event, action, cfg.theta, cfg.rho, penalize=shielded)
            demand.observe(event.content_id)
            decider.reward(bs, reward)
            if record_trace:
                self.trace.append((event.time, event.client_id, event.content_id, bs, int(hit)))

        return self._report(state, events, shield.intervention_count - start_interventions if shield is not None else 0)

    def _report(self, state: CacheState, events: Sequence[RequestEvent], interventions: int) -> CachingReport:
        n_steps = (events[-1].time - events[0].time + 1) if events else 1
        loads = state.served * self.config.load_window / n_steps
        mean = loads.mean()
        cv = float(loads.std() / mean) if mean > 0 else 0.0
        return CachingReport(
            hit_rate=state.hits / state.requests if state.requests else 0.0,
            hits=state.hits,
            requests=state.requests,
            interventions=int(interventions),
            bs_loads=tuple(float(x) for x in loads),
            load_cv=cv,
        )

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.trace, columns=TRACE_COLUMNS)


def build_environment(config: CachingConfig, seed: int) -> CacheEnvironment:
    config.validate()
    topology = CacheTopology.ring(config.n_bs, config.slots_per_bs, config.clients_per_bs, config.overlaps)
    logging.info(
        f"Caching topology: {topology.n_bs} BSs x {topology.slots_per_bs} slots, {topology.n_clients} clients, "
        f"overlaps={config.overlaps}"
    )
    return CacheEnvironment(topology=topology, config=config, seed=seed)
