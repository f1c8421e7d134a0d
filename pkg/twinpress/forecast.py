"""
Linear autoregressive forecaster used as every participant's local twin model.

The model predicts the next traffic value from the W most recent values:
    y_hat = dot(weights, window) + bias
Windows run oldest to newest, so weights[-1] multiplies the newest value.
Parameters pack into a single ParameterVector [w_1..w_W, bias].
"""

import logging
import struct
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from twinpress.errors import ConfigurationError, DimensionError, DomainError, ParseError

# 1-D float64 array of length W + 1
ParameterVector = np.ndarray

Samples = Sequence[Tuple[Sequence[float], float]]


@dataclass(frozen=True)
class TrainingConfig:
    """Local training settings.

    Attributes:
        learning_rate (float): Gradient-descent step size, > 0
        epochs (int): Full-batch steps per local training call, >= 0
    """
    learning_rate: float = 0.05
    epochs: int = 5

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}", key="forecaster.learning_rate")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}", key="forecaster.epochs")


@dataclass(frozen=True)
class MinMaxStats:
    """Per-cell min-max normalization statistics."""
    low: float
    high: float

    @classmethod
    def from_series(cls, series: np.ndarray) -> "MinMaxStats":
        series = np.asarray(series, dtype=float)
        return cls(low=float(series.min()), high=float(series.max()))

    @property
    def scale(self) -> float:
        span = self.high - self.low
        return span if span > 0 else 1.0

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.low) / self.scale

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=float) * self.scale + self.low


@dataclass(frozen=True)
class ForecastModel:
    window: int
    weights: np.ndarray
    bias: float

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        if self.window < 1:
            raise ConfigurationError(f"window must be >= 1, got {self.window}", key="forecaster.window")
        if weights.shape != (self.window,):
            raise DimensionError(f"expected {self.window} weights, got shape {weights.shape}")
        if not (np.all(np.isfinite(weights)) and np.isfinite(self.bias)):
            raise DomainError("model parameters must be finite")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", float(self.bias))

    @classmethod
    def zeros(cls, window: int) -> "ForecastModel":
        return cls(window=window, weights=np.zeros(window), bias=0.0)

    @classmethod
    def unpack(cls, params: ParameterVector, window: Optional[int] = None) -> "ForecastModel":
        params = np.asarray(params, dtype=float)
        if params.ndim != 1 or len(params) < 2:
            raise DimensionError(f"parameter vector must be 1-D with length >= 2, got shape {params.shape}")
        if window is not None and len(params) != window + 1:
            raise DimensionError(f"expected {window + 1} parameters, got {len(params)}")
        return cls(window=len(params) - 1, weights=params[:-1].copy(), bias=float(params[-1]))

    @property
    def size(self) -> int:
        return self.window + 1

    def pack(self) -> ParameterVector:
        return np.append(self.weights, self.bias)


def make_samples(series: np.ndarray, window: int) -> Tuple[np.ndarray, np.ndarray]:
    """Sliding (window, next value) samples over a series.

    Returns:
        inputs of shape (n, window) and targets of shape (n,), n = len(series) - window
    """
    series = np.asarray(series, dtype=float)
    if len(series) <= window:
        raise DomainError(f"series of length {len(series)} is too short for window {window}")
    inputs = sliding_window_view(series[:-1], window)
    targets = series[window:]
    return inputs, targets


def _as_arrays(model: ForecastModel, samples: Samples) -> Tuple[np.ndarray, np.ndarray]:
    if len(samples) == 0:
        raise DomainError("samples must be non-empty")
    inputs = np.array([np.asarray(w, dtype=float) for w, _ in samples])
    targets = np.array([float(t) for _, t in samples])
    if inputs.ndim != 2 or inputs.shape[1] != model.window:
        raise DimensionError(f"sample windows must have length {model.window}")
    return inputs, targets


def batch_loss(model: ForecastModel, inputs: np.ndarray, targets: np.ndarray) -> float:
    residual = inputs @ model.weights + model.bias - targets
    return float(np.mean(residual ** 2))


def batch_gradient(model: ForecastModel, inputs: np.ndarray, targets: np.ndarray) -> ParameterVector:
    residual = inputs @ model.weights + model.bias - targets
    n = len(targets)
    return (2.0 / n) * np.append(inputs.T @ residual, residual.sum())


def predict(model: ForecastModel, window_values: Sequence[float]) -> float:
    """One-step prediction from the W most recent values.

    Raises:
        DimensionError: If the window length is not W
        DomainError: If any window value is not finite
    """
    x = np.asarray(window_values, dtype=float)
    if x.shape != (model.window,):
        raise DimensionError(f"window must have length {model.window}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DomainError("window values must be finite")
    return float(np.dot(model.weights, x) + model.bias)


def mse_loss(model: ForecastModel, samples: Samples) -> float:
    inputs, targets = _as_arrays(model, samples)
    return batch_loss(model, inputs, targets)


def gradient(model: ForecastModel, samples: Samples) -> ParameterVector:
    """Exact gradient of mse_loss w.r.t. the packed parameters.

    Returns:
        (2/n) * sum(residual * [window; 1])
    """
    inputs, targets = _as_arrays(model, samples)
    return batch_gradient(model, inputs, targets)


def fit_samples(model: ForecastModel, inputs: np.ndarray, targets: np.ndarray, cfg: TrainingConfig) -> ForecastModel:
    """Full-batch gradient descent on prepared samples for cfg.epochs steps."""
    params = model.pack()
    for _ in range(cfg.epochs):
        current = ForecastModel.unpack(params, model.window)
        params = params - cfg.learning_rate * batch_gradient(current, inputs, targets)
    if not np.all(np.isfinite(params)):
        raise DomainError(f"training diverged at learning_rate={cfg.learning_rate}")
    return ForecastModel.unpack(params, model.window)


def train_local(
    model: ForecastModel,
    series: np.ndarray,
    cfg: TrainingConfig,
    stats: Optional[MinMaxStats] = None,
) -> Tuple[ForecastModel, int]:
    """Train a local copy of the model on one cell's traffic.

    Args:
        model: Starting (global) model
        series: Raw traffic values of the cell
        cfg: Learning rate and epoch count
        stats: Frozen normalization statistics; derived from `series` when omitted

    Returns:
        Tuple of (updated model, number of training windows)

    Raises:
        DomainError: If the series is not longer than the window
    """
    series = np.asarray(series, dtype=float)
    if len(series) <= model.window:
        raise DomainError(f"series of length {len(series)} is too short for window {model.window}")
    stats = stats or MinMaxStats.from_series(series)
    inputs, targets = make_samples(stats.normalize(series), model.window)
    return fit_samples(model, inputs, targets, cfg), len(targets)


def one_step_predictions(model: ForecastModel, series: np.ndarray, start: int, stats: MinMaxStats) -> np.ndarray:
    """One-step predictions from observed windows for positions start..len(series) inclusive.

    Position p is predicted from the true values series[p-W:p]; position
    len(series) is the step just past the observed series.
    """
    series = np.asarray(series, dtype=float)
    if start < model.window or start > len(series):
        raise DomainError(f"start must be in [{model.window}, {len(series)}], got {start}")
    normalized = stats.normalize(series)
    windows = sliding_window_view(normalized, model.window)[start - model.window:]
    return stats.denormalize(windows @ model.weights + model.bias)


def rolling_forecast(
    model: ForecastModel,
    series: np.ndarray,
    horizon: int,
    stats: Optional[MinMaxStats] = None,
) -> np.ndarray:
    """One-step-ahead forecasts over the last `horizon` steps, ending one past the series.

    Every prediction is teacher-forced from W true values, so the earliest one
    needs W observed steps before it: the series must hold at least
    W + horizon - 1 values, not just W. With exactly W values only horizon 1
    is possible.

    Args:
        model: Trained model
        series: Observed history, length >= W + horizon - 1
        horizon: Number of predictions
        stats: Normalization statistics; derived from `series` when omitted

    Returns:
        Array of `horizon` predictions in traffic units

    Raises:
        DomainError: If horizon < 1 or the history is too short
    """
    series = np.asarray(series, dtype=float)
    if horizon < 1:
        raise DomainError(f"horizon must be >= 1, got {horizon}")
    if len(series) < model.window + horizon - 1:
        raise DomainError(f"series of length {len(series)} is too short for window {model.window} and horizon {horizon}")
    stats = stats or MinMaxStats.from_series(series)
    return one_step_predictions(model, series, len(series) - horizon + 1, stats)


def encode_parameters(params: ParameterVector) -> bytes:
    """Little-endian u64 length prefix followed by f64 values."""
    params = np.asarray(params, dtype=float)
    return struct.pack("<Q", len(params)) + params.astype("<f8").tobytes()


def decode_parameters(payload: bytes) -> Tuple[ParameterVector, int]:
    """Inverse of encode_parameters.

    Returns:
        Tuple of (parameters, number of bytes consumed)
    """
    if len(payload) < 8:
        raise ParseError("parameter payload shorter than its length prefix")
    (length,) = struct.unpack_from("<Q", payload, 0)
    end = 8 + 8 * length
    if len(payload) < end:
        raise ParseError(f"parameter payload truncated: expected {length} values")
    params = np.frombuffer(payload[8:end], dtype="<f8").astype(float)
    return params, end


def warn_if_unstable(cfg: TrainingConfig, window: int) -> None:
    # Normalized inputs lie in [0, 1], so the Hessian's largest eigenvalue is
    # bounded by 2 * (window + 1).
    bound = 2.0 / (2.0 * (window + 1))
    if cfg.learning_rate > bound:
        logging.warning(
            f"learning_rate={cfg.learning_rate} exceeds the stability bound {bound:.4f} for window {window}; "
            f"local training may diverge"
        )
