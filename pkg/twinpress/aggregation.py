"""
Aggregation rules for federated twin synchronization.

This module defines the update wire type and the four aggregation rules:
- aggregate_mean: sample-count-weighted mean
- aggregate_median: coordinate-wise median
- aggregate_fltrust: server-rooted trust scoring by clipped cosine similarity
- aggregate_tid: dimension-wise outlier trimming with benign re-weighting

Rules are also exposed as AggregationRule classes registered by name through
the `aggregation_rule` decorator, so the engine can build them from config.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Type

import numpy as np

from twinpress.errors import (
    ConfigurationError,
    DegenerateServerError,
    DimensionError,
    DomainError,
)
from twinpress.forecast import ParameterVector

MAD_CONSISTENCY = 1.4826


@dataclass(frozen=True)
class ClientUpdate:
    """A participant's full updated local model.

    Attributes:
        client_id (int): Cell id for authentic clients, negative for fabricated ones
        params (ParameterVector): Updated model parameters
        sample_count (int): Training windows behind the update, >= 0
        base_version (int): Global version the client trained from
        authentic (bool): False for attacker-fabricated clients; never read by rules
    """
    client_id: int
    params: ParameterVector
    sample_count: int
    base_version: int = 0
    authentic: bool = True

    def __post_init__(self):
        params = np.asarray(self.params, dtype=float)
        if params.ndim != 1:
            raise DimensionError(f"update params must be 1-D, got shape {params.shape}")
        if not np.all(np.isfinite(params)):
            raise DomainError(f"update from client {self.client_id} has non-finite params")
        if self.sample_count < 0:
            raise DomainError(f"sample_count must be >= 0, got {self.sample_count}")
        object.__setattr__(self, "params", params)


def _stack(updates: Sequence[ClientUpdate]) -> Tuple[np.ndarray, np.ndarray]:
    if len(updates) == 0:
        raise DomainError("cannot aggregate an empty update list")
    sizes = {len(u.params) for u in updates}
    if len(sizes) != 1:
        raise DimensionError(f"updates have mismatched dimensions {sorted(sizes)}")
    values = np.stack([u.params for u in updates])
    counts = np.array([u.sample_count for u in updates], dtype=float)
    return values, counts


def _masked_weighted_mean(values: np.ndarray, weights: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-dimension weighted mean over masked-in entries.

    A dimension whose kept weights sum to 0 falls back to the unweighted
    mean of its kept entries. Every dimension must keep at least one entry.
    """
    w = weights[:, None] * mask
    total = w.sum(axis=0)
    empty = total == 0
    if np.any(empty):
        w[:, empty] = mask[:, empty].astype(float)
        total = w.sum(axis=0)
    return np.sum(w * values, axis=0) / total


def aggregate_mean(updates: Sequence[ClientUpdate]) -> ParameterVector:
    """Sample-count-weighted mean; unweighted when every count is 0.

    Raises:
        DomainError: If updates is empty
    """
    values, counts = _stack(updates)
    if counts.sum() == 0:
        counts = np.ones_like(counts)
    return _masked_weighted_mean(values, counts, np.ones_like(values, dtype=bool))


def aggregate_median(updates: Sequence[ClientUpdate]) -> ParameterVector:
    """Coordinate-wise median; sample counts are ignored.

    Raises:
        DomainError: If updates is empty
    """
    values, _ = _stack(updates)
    return np.median(values, axis=0)


def fltrust_scores(
    updates: Sequence[ClientUpdate],
    server_update: ParameterVector,
    global_params: ParameterVector,
) -> Tuple[np.ndarray, np.ndarray, float]:
    """Trust scores and rescaled client directions.

    Returns:
        Tuple of (trust per client, rescaled directions, server direction norm)

    Raises:
        DegenerateServerError: If the server direction has zero norm
    """
    values, _ = _stack(updates)
    global_params = np.asarray(global_params, dtype=float)
    server_dir = np.asarray(server_update, dtype=float) - global_params
    if server_dir.shape != global_params.shape or values.shape[1] != len(global_params):
        raise DimensionError("server update, global model and client updates must share one dimension")
    server_norm = float(np.linalg.norm(server_dir))
    if server_norm == 0:
        raise DegenerateServerError("FLTrust server direction has zero norm")

    directions = values - global_params
    norms = np.linalg.norm(directions, axis=1)
    trust = np.zeros(len(updates))
    rescaled = np.zeros_like(directions)
    nonzero = norms > 0
    # A zero client direction has no defined cosine and earns no trust.
    trust[nonzero] = np.maximum(0.0, directions[nonzero] @ server_dir / (norms[nonzero] * server_norm))
    rescaled[nonzero] = directions[nonzero] * (server_norm / norms[nonzero])[:, None]
    return trust, rescaled, server_norm


def aggregate_fltrust(
    updates: Sequence[ClientUpdate],
    server_update: ParameterVector,
    global_params: ParameterVector,
) -> ParameterVector:
    """FLTrust aggregation around the current global model.

    Args:
        updates: Client updates (full models)
        server_update: Model trained by the server on its root data from global_params
        global_params: Current global model

    Returns:
        global + sum(trust_i * rescaled_i) / sum(trust_i), or global when no
        client earns trust

    Raises:
        DegenerateServerError: If server_update equals global_params
    """
    trust, rescaled, _ = fltrust_scores(updates, server_update, global_params)
    global_params = np.asarray(global_params, dtype=float)
    total = trust.sum()
    if total == 0:
        return global_params.copy()
    return global_params + trust @ rescaled / total


def tid_outlier_mask(values: np.ndarray, tau: float) -> np.ndarray:
    """Boolean (clients, dims) mask, True where a value is a robust-z outlier.

    The median and MAD come from the distinct update vectors, so a bloc of
    identical updates counts once. A dimension with zero MAD trims nothing.
    """
    distinct = np.unique(values, axis=0)
    med = np.median(distinct, axis=0)
    mad = np.median(np.abs(distinct - med), axis=0)
    deviation = np.abs(values - med)
    return (deviation > tau * MAD_CONSISTENCY * mad) & (mad > 0)


def aggregate_tid(updates: Sequence[ClientUpdate], tau: float) -> ParameterVector:
    """Twin inconsistency defense.

    Trims per-dimension outliers (|v - median| > tau * 1.4826 * MAD, both taken
    over the distinct update vectors), weights each client by
    sample_count * (1 - its outlier fraction), and averages the kept values per
    dimension with those weights. A dimension where every value is trimmed
    falls back to its median.

    Raises:
        ConfigurationError: If tau <= 0
        DomainError: If fewer than 3 updates are given
    """
    if not tau > 0:
        raise ConfigurationError(f"tau must be > 0, got {tau}", key="fedsync.tau")
    if len(updates) < 3:
        raise DomainError(f"TID needs at least 3 updates, got {len(updates)}")
    values, counts = _stack(updates)
    outliers = tid_outlier_mask(values, tau)
    keep = ~outliers
    benign = counts * (1.0 - outliers.mean(axis=1))

    all_trimmed = ~keep.any(axis=0)
    if np.any(all_trimmed):
        keep[:, all_trimmed] = True
    result = _masked_weighted_mean(values, benign, keep)
    if np.any(all_trimmed):
        result[all_trimmed] = np.median(np.unique(values, axis=0)[:, all_trimmed], axis=0)
    trimmed = int(outliers.sum())
    if trimmed:
        logging.debug(f"TID trimmed {trimmed} of {outliers.size} values across {len(updates)} updates")
    return result


@dataclass
class AggregationContext:
    """What a rule may see besides the updates: the public global model and,
    for server-rooted rules, the server's own update."""
    global_params: ParameterVector
    server_update: Optional[ParameterVector] = None


class AggregationRule(ABC):
    """Base class for named aggregation rules.

    Attributes:
        name (str): Registry name
        needs_server_update (bool): True when the engine must train a root-data
            server update before calling aggregate
    """

    name: str = ""
    needs_server_update: bool = False
    min_updates: int = 1

    @abstractmethod
    def aggregate(self, updates: Sequence[ClientUpdate], context: AggregationContext) -> ParameterVector:
        pass

    def describe(self) -> Dict[str, Any]:
        return {"rule": self.name}

    def __repr__(self) -> str:
        params = ", ".join(f"{k}={v}" for k, v in self.describe().items() if k != "rule")
        return f"{type(self).__name__}({params})"


class RuleRegistry:
    """Registry mapping rule names to AggregationRule classes.

    Singleton, populated at import time by the `aggregation_rule` decorator.
    """

    _instance = None

    def __new__(cls):
        """Create or return singleton instance."""
        if cls._instance is None:
            cls._instance = super().__new__(cls)
            cls._instance.rules = {}
        return cls._instance

    def register_rule(self, name: str, rule_class: Type[AggregationRule]) -> None:
        key = name.lower()
        if key in self.rules and self.rules[key] is not rule_class:
            raise ConfigurationError(f"rule '{name}' is already registered", key="fedsync.rule")
        self.rules[key] = rule_class
        logging.debug(f"Registered aggregation rule {key} -> {rule_class.__name__}")

    def names(self) -> List[str]:
        return list(self.rules)

    def create(self, name: str, **kwargs) -> AggregationRule:
        """Instantiate a registered rule.

        Raises:
            ConfigurationError: If the name is unknown
        """
        rule_class = self.rules.get(str(name).lower())
        if rule_class is None:
            raise ConfigurationError(f"unknown rule '{name}', expected one of {self.names()}", key="fedsync.rule")
        return rule_class(**kwargs)


def aggregation_rule(name: str) -> Callable[[Type[AggregationRule]], Type[AggregationRule]]:
    """Class decorator registering an AggregationRule under `name`."""
    def decorator(cls):
        cls.name = name
        RuleRegistry().register_rule(name, cls)
        return cls
    return decorator


@aggregation_rule("mean")
class MeanRule(AggregationRule):
    def aggregate(self, updates, context):
        return aggregate_mean(updates)


@aggregation_rule("median")
class MedianRule(AggregationRule):
    def aggregate(self, updates, context):
        return aggregate_median(updates)


@aggregation_rule("fltrust")
class FLTrustRule(AggregationRule):
    needs_server_update = True

    def aggregate(self, updates, context):
        if context.server_update is None:
            raise DomainError("FLTrust requires a server update")
        return aggregate_fltrust(updates, context.server_update, context.global_params)


@aggregation_rule("tid")
class TIDRule(AggregationRule):
    min_updates = 3

    def __init__(self, tau: float = 3.0):
        if not tau > 0:
            raise ConfigurationError(f"tau must be > 0, got {tau}", key="fedsync.tau")
        self.tau = tau

    def aggregate(self, updates, context):
        return aggregate_tid(updates, self.tau)

    def describe(self) -> Dict[str, Any]:
        return {"rule": self.name, "tau": self.tau}


def build_rule(name: str, tau: float = 3.0) -> AggregationRule:
    """Build a rule from config values, passing only the parameters it takes."""
    kwargs = {"tau": tau} if str(name).lower() == "tid" else {}
    return RuleRegistry().create(name, **kwargs)
