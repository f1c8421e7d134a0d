"""
Safety shield for load balance across base stations.

The shield watches the window load ratio of the serving BS (its load over the
mean BS load) at every eviction decision. Above the threshold it takes the
decision over and evicts the least-recently-used entry; every such override
counts as one intervention, also when the policy proposed that entry itself.
"""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Tuple

from twinpress.errors import ConfigurationError

if TYPE_CHECKING:
    from twinpress.caching.environment import CacheState

LRU_VICTIM = 0


@dataclass
class SafetyShield:
    """Load-imbalance shield.

    Attributes:
        theta (float): Maximum allowed load ratio, > 1
        rho (float): Reward penalty weight applied while the shield is enabled
        enabled (bool): When False the shield passes every action through
        intervention_count (int): Overrides so far, never decreases
    """
    theta: float = 1.5
    rho: float = 0.5
    enabled: bool = True
    intervention_count: int = 0

    def __post_init__(self):
        if not self.theta > 1:
            raise ConfigurationError(f"theta must be > 1, got {self.theta}", key="caching.theta")
        if self.rho < 0:
            raise ConfigurationError(f"rho must be >= 0, got {self.rho}", key="caching.rho")


def safety_shield(
    state: "CacheState",
    bs: int,
    proposed_action: Optional[int],
    shield: SafetyShield,
    time: Optional[int] = None,
) -> Tuple[Optional[int], bool]:
    """Pass an eviction through or override it with the LRU victim.

    Args:
        state: Environment state; its load counters give the ratio
        bs: Serving BS of the request being decided
        proposed_action: Victim index proposed by the policy, None for no eviction
        shield: Shield settings and counter, updated in place
        time: Step of the request; counted in the ratio when given

    Returns:
        Tuple of (action to execute, intervened)
    """
    if not shield.enabled or proposed_action is None:
        return proposed_action, False
    ratio = state.loads.projected_ratio(bs, time) if time is not None else state.loads.ratio(bs)
    if ratio <= shield.theta:
        return proposed_action, False
    shield.intervention_count += 1
    logging.debug(f"Shield override at BS {bs}: ratio {ratio:.3f} > {shield.theta}, victim {proposed_action} -> LRU")
    return LRU_VICTIM, True
