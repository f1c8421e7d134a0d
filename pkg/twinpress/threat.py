"""
Model-poisoning attacks on twin aggregation.

Two fabricated-client attacks are provided for robustness evaluation:
- MPAF: fake clients push the global model toward an attacker-chosen base model
- TPI: fake clients crafted only from the attacker's initial model and the
  public global model, clipped per dimension to stay inside a plausible range

Craft functions receive the public global model and attacker-local state only;
they never see authentic clients' data or parameters.
"""

import logging
import math
from dataclasses import dataclass
from typing import Hashable, List, Optional, Sequence, Tuple

import numpy as np

from twinpress.aggregation import ClientUpdate
from twinpress.errors import ConfigurationError, DegenerateAttackError, DimensionError
from twinpress.forecast import ParameterVector
from twinpress.seeding import derive_rng

ATTACK_KINDS = ("none", "mpaf", "tpi")


@dataclass(frozen=True)
class AttackConfig:
    """Attack settings.

    Attributes:
        kind (str): none, mpaf or tpi
        n_fake (int, optional): Fabricated clients per aggregation; derived from
            the authentic count when None (MPAF: ceil(fake_fraction * n),
            TPI: n + 1)
        fake_fraction (float): MPAF share of fakes relative to authentic clients
        lam (float): Push scale lambda, > 0
        clip_c (float): TPI clip multiplier, > 0
        base_scale (float): Std of the random MPAF base model
        init_scale (float): Std of the random TPI initial model
        base_model (ParameterVector, optional): Fixed MPAF base, overrides the random draw
        attacker_init (ParameterVector, optional): Fixed TPI initial model
    """
    kind: str = "none"
    n_fake: Optional[int] = None
    fake_fraction: float = 0.2
    lam: float = 10.0
    clip_c: float = 1.0
    base_scale: float = 10.0
    init_scale: float = 10.0
    base_model: Optional[Tuple[float, ...]] = None
    attacker_init: Optional[Tuple[float, ...]] = None

    def validate(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ConfigurationError(f"kind must be one of {ATTACK_KINDS}, got '{self.kind}'", key="attack.kind")
        if self.n_fake is not None and self.n_fake < 0:
            raise ConfigurationError(f"n_fake must be >= 0, got {self.n_fake}", key="attack.n_fake")
        if not self.lam > 0:
            raise ConfigurationError(f"lam must be > 0, got {self.lam}", key="attack.lam")
        if not self.clip_c > 0:
            raise ConfigurationError(f"clip_c must be > 0, got {self.clip_c}", key="attack.clip_c")
        if not 0 <= self.fake_fraction:
            raise ConfigurationError(f"fake_fraction must be >= 0, got {self.fake_fraction}", key="attack.fake_fraction")
        if self.base_scale <= 0 or self.init_scale <= 0:
            raise ConfigurationError("base_scale and init_scale must be > 0", key="attack.base_scale")

    def fakes_for(self, n_authentic: int) -> int:
        if self.kind == "none":
            return 0
        if self.n_fake is not None:
            return self.n_fake
        if self.kind == "mpaf":
            return math.ceil(self.fake_fraction * n_authentic)
        return n_authentic + 1


def _fake_updates(params: ParameterVector, n_fake: int, sample_count: int, base_version: int) -> List[ClientUpdate]:
    return [
        ClientUpdate(client_id=-(i + 1), params=params.copy(), sample_count=sample_count, base_version=base_version, authentic=False)
        for i in range(n_fake)
    ]


def craft_mpaf(
    global_params: ParameterVector,
    cfg: AttackConfig,
    n_fake: int,
    base_model: Optional[ParameterVector] = None,
    sample_count: int = 1,
    base_version: int = 0,
) -> List[ClientUpdate]:
    """Fake updates global + lam * (base_model - global).

    Args:
        global_params: Public global model
        cfg: Attack settings (lam, and base_model when none is passed)
        n_fake: Number of fakes; 0 yields an empty list
        base_model: Attacker-chosen target
        sample_count: Count reported by every fake
        base_version: Version reported by every fake

    Returns:
        List of identical non-authentic ClientUpdates
    """
    if n_fake == 0:
        return []
    if cfg.base_model is None and base_model is None:
        raise ConfigurationError("MPAF needs a base model", key="attack.base_model")
    g = np.asarray(global_params, dtype=float)
    base = np.asarray(base_model if base_model is not None else cfg.base_model, dtype=float)
    if base.shape != g.shape:
        raise DimensionError(f"base model shape {base.shape} does not match global {g.shape}")
    return _fake_updates(g + cfg.lam * (base - g), n_fake, sample_count, base_version)


def tpi_spread_estimate(attacker_init: ParameterVector, global_params: ParameterVector) -> np.ndarray:
    """Per-dimension scale the attacker can build from its own information."""
    return np.abs(np.asarray(attacker_init, dtype=float) - np.asarray(global_params, dtype=float))


def craft_tpi(
    attacker_init: ParameterVector,
    global_params: ParameterVector,
    cfg: AttackConfig,
    spread_estimate: ParameterVector,
    n_fake: int,
    sample_count: int = 1,
    base_version: int = 0,
) -> List[ClientUpdate]:
    """Fake updates global + clip(lam * (init - global), +/- clip_c * spread).

    Raises:
        DegenerateAttackError: If attacker_init equals the global model
    """
    if n_fake == 0:
        return []
    g = np.asarray(global_params, dtype=float)
    direction = np.asarray(attacker_init, dtype=float) - g
    spread = np.asarray(spread_estimate, dtype=float)
    if direction.shape != g.shape or spread.shape != g.shape:
        raise DimensionError("attacker_init, global and spread_estimate must share one shape")
    if not np.any(direction):
        raise DegenerateAttackError("attacker initial model equals the global model")
    bound = np.where(spread > 0, cfg.clip_c * spread, 0.0)
    params = g + np.clip(cfg.lam * direction, -bound, bound)
    return _fake_updates(params, n_fake, sample_count, base_version)


def inject(
    round_updates: Sequence[ClientUpdate],
    attack_updates: Sequence[ClientUpdate],
    seed: int = 0,
    round_key: Tuple[Hashable, ...] = (),
) -> List[ClientUpdate]:
    """Mix fabricated updates into a round, shuffled by the round's seed stream.

    An empty attack list returns the round unchanged.
    """
    if not attack_updates:
        return list(round_updates)
    combined = list(round_updates) + list(attack_updates)
    order = derive_rng(seed, "attack-shuffle", *round_key).permutation(len(combined))
    return [combined[i] for i in order]


class Adversary:
    """Attacker state across aggregations.

    Holds the attack config, the attacker's random base (MPAF) or initial
    model (TPI), and the sample count it mimics: the median of the counts
    published with the previous aggregation (1 before any).

    Attributes:
        cfg (AttackConfig): Attack settings
        target (ParameterVector): MPAF base model or TPI initial model
        mimic_count (int): Sample count reported by fakes
        fabricated (int): Total fakes produced so far
    """

    def __init__(self, cfg: AttackConfig, dim: int, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.mimic_count = 1
        self.fabricated = 0
        self.target = self._draw_target(dim, seed)

    def _draw_target(self, dim: int, seed: int) -> Optional[ParameterVector]:
        if self.cfg.kind == "mpaf":
            if self.cfg.base_model is not None:
                return np.asarray(self.cfg.base_model, dtype=float)
            return derive_rng(seed, "mpaf-base").normal(0.0, self.cfg.base_scale, size=dim)
        if self.cfg.kind == "tpi":
            if self.cfg.attacker_init is not None:
                return np.asarray(self.cfg.attacker_init, dtype=float)
            return derive_rng(seed, "tpi-init").normal(0.0, self.cfg.init_scale, size=dim)
        return None

    @property
    def active(self) -> bool:
        return self.cfg.kind != "none"

    def fabricate(self, global_params: ParameterVector, n_authentic: int, version: int) -> List[ClientUpdate]:
        """Fakes for one aggregation over `n_authentic` real updates."""
        n_fake = self.cfg.fakes_for(n_authentic)
        if n_fake == 0:
            return []
        if self.cfg.kind == "mpaf":
            fakes = craft_mpaf(global_params, self.cfg, n_fake, self.target, self.mimic_count, version)
        else:
            spread = tpi_spread_estimate(self.target, global_params)
            fakes = craft_tpi(self.target, global_params, self.cfg, spread, n_fake, self.mimic_count, version)
        self.fabricated += len(fakes)
        return fakes

    def observe(self, sample_counts: Sequence[int]) -> None:
        """Record the sample counts published with an aggregation."""
        if len(sample_counts):
            self.mimic_count = int(np.median(sample_counts))

    def __repr__(self) -> str:
        return f"Adversary(kind={self.cfg.kind}, lam={self.cfg.lam}, fabricated={self.fabricated})"


def build_adversary(cfg: Optional[AttackConfig], dim: int, seed: int) -> Optional[Adversary]:
    if cfg is None or cfg.kind == "none":
        return None
    adversary = Adversary(cfg, dim, seed)
    logging.info(f"Attack enabled: {adversary!r}")
    return adversary
