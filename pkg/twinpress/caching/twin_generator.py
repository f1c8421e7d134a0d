"""
Demand twin: a pooled autoregressive forecaster over per-content window
counts, used as the caching environment's one-step demand forecaster and as
a generator of synthetic (and rare-event) request streams.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from twinpress.caching.environment import WARM_FRACTION, RequestEvent
from twinpress.errors import ConfigurationError, DomainError, TwinStateError
from twinpress.forecast import ForecastModel, MinMaxStats, TrainingConfig, fit_samples, make_samples
from twinpress.seeding import derive_rng


class WindowForecast(NamedTuple):
    window: int
    top_content: int
    spiked_content: int = -1


@dataclass
class DemandTwin:
    """AR model shared by all contents of a catalog.

    Attributes:
        catalog_size (int): Contents 0..catalog_size-1
        lags (int): Windows of history per prediction
        model (ForecastModel, optional): Fitted model, None until fit
        stats (MinMaxStats, optional): Pooled normalization of window counts
    """
    catalog_size: int
    lags: int
    model: Optional[ForecastModel] = None
    stats: Optional[MinMaxStats] = None

    @property
    def trained(self) -> bool:
        return self.model is not None

    def fit(self, history: np.ndarray, cfg: TrainingConfig) -> "DemandTwin":
        """Fit on a (windows, catalog) count matrix.

        Raises:
            DomainError: If the history does not exceed `lags` windows
        """
        history = np.asarray(history, dtype=float)
        if history.ndim != 2 or history.shape[1] != self.catalog_size:
            raise DomainError(f"history must have shape (windows, {self.catalog_size}), got {history.shape}")
        if history.shape[0] <= self.lags:
            raise DomainError(f"history of {history.shape[0]} windows is too short for {self.lags} lags")
        self.stats = MinMaxStats.from_series(history)
        normalized = self.stats.normalize(history)
        inputs, targets = [], []
        for c in range(self.catalog_size):
            x, y = make_samples(normalized[:, c], self.lags)
            inputs.append(x)
            targets.append(y)
        # starts from the moving average, so a rolled-forward forecast keeps its level
        start = ForecastModel(window=self.lags, weights=np.full(self.lags, 1.0 / self.lags), bias=0.0)
        self.model = fit_samples(start, np.concatenate(inputs), np.concatenate(targets), cfg)
        logging.info(f"Fitted demand twin on {history.shape[0]} windows x {self.catalog_size} contents")
        return self

    def __call__(self, recent: np.ndarray) -> np.ndarray:
        """One-step demand forecast from the last `lags` windows, shape (catalog,)."""
        if not self.trained:
            raise TwinStateError("demand twin has not been trained")
        recent = np.asarray(recent, dtype=float)[-self.lags:]
        x = self.stats.normalize(recent.T)
        return np.maximum(self.stats.denormalize(x @ self.model.weights + self.model.bias), 0.0)


def _cold_contents(demand: np.ndarray) -> np.ndarray:
    order = np.argsort(-demand, kind="stable")
    cold = order[max(1, int(len(demand) * WARM_FRACTION)):]
    if len(cold) == 0:
        cold = order[1:] if len(demand) > 1 else order
    return cold


def twin_generate(
    trained_twin: DemandTwin,
    history: np.ndarray,
    n_events: int,
    rare_rate: float,
    seed: int,
    n_clients: int,
    demand_window: int = 50,
    start_time: int = 0,
) -> Tuple[List[RequestEvent], List[WindowForecast]]:
    """Sample a synthetic request stream from the twin's demand forecasts.

    The stream rolls forward one window at a time: each window is drawn from
    the forecast of the last `lags` windows, and its counts are appended to
    that history before the next forecast. Every step each client requests one
    content drawn in proportion to the forecast demand. Per window, with
    probability `rare_rate` a cold content is spiked above the hottest demand.

    Args:
        trained_twin: Fitted demand twin
        history: (windows, catalog) counts the forecast starts from
        n_events: Number of events to generate
        rare_rate: Per-window spike probability in [0, 1]
        seed: Root seed of the "twin-generate" stream
        n_clients: Clients requesting every step
        demand_window: Steps per window
        start_time: Time of the first synthetic step

    Returns:
        Tuple of (events with serving_bs unresolved, one forecast per window
        naming its argmax content and the spiked content or -1)

    Raises:
        TwinStateError: If the twin is untrained
        ConfigurationError: If rare_rate is outside [0, 1]
    """
    if not trained_twin.trained:
        raise TwinStateError("demand twin has not been trained")
    if not 0 <= rare_rate <= 1:
        raise ConfigurationError(f"rare_rate must be in [0, 1], got {rare_rate}", key="caching.rare_rate")
    if n_events < 0 or n_clients < 1:
        raise DomainError("n_events must be >= 0 and n_clients >= 1")
    rng = derive_rng(seed, "twin-generate")
    catalog = trained_twin.catalog_size
    recent = np.asarray(history, dtype=float)[-trained_twin.lags:]

    steps = math.ceil(n_events / n_clients)
    events: List[RequestEvent] = []
    forecasts: List[WindowForecast] = []
    for w, first in enumerate(range(0, steps, demand_window)):
        demand = trained_twin(recent)
        spiked = -1
        if rng.random() < rare_rate:
            cold = _cold_contents(demand)
            spiked = int(cold[int(rng.integers(len(cold)))])
            demand[spiked] = 1.5 * demand.max() if demand.max() > 0 else 1.0
        total = demand.sum()
        probs = demand / total if total > 0 else np.full(catalog, 1.0 / catalog)
        forecasts.append(WindowForecast(window=w, top_content=int(np.argmax(demand)), spiked_content=spiked))

        n_steps = min(demand_window, steps - first)
        draws = rng.choice(catalog, size=(n_steps, n_clients), p=probs)
        for i in range(n_steps):
            t = start_time + first + i
            events.extend(RequestEvent(t, c, int(draws[i, c])) for c in range(n_clients))
        recent = np.vstack([recent, np.bincount(draws.ravel(), minlength=catalog)])[-trained_twin.lags:]
    return events[:n_events], forecasts
