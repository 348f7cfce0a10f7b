"""Reference forecasters for the comparison tables."""

import logging

import numpy as np
from scipy import linalg

from pynexus.tensor import Array, ConfigurationError


logger = logging.getLogger("pynexus.baselines")


def persistence_forecast(x: Array, n_targets: int = 3) -> Array:
    """Repeat the last observed pollutant values: ``N×L×T×D`` to ``N×L×K``."""
    return x[..., -1, :n_targets].copy()


class LinearBaseline:
    """Ridge regression from the last input step of every site to all targets."""

    def __init__(self, alpha: float = 1.0) -> None:
        if alpha < 0:
            raise ConfigurationError(f"Ridge penalty should be >= 0, got {alpha}")
        self.alpha = alpha
        self.coef: Array | None = None
        self.intercept: Array | None = None
        self.target_shape: tuple[int, ...] = ()

    @staticmethod
    def _features(x: Array) -> Array:
        return x[..., -1, :].reshape(len(x), -1)

    def fit(self, x: Array, y: Array) -> "LinearBaseline":
        features = self._features(x)
        targets = y.reshape(len(y), -1)
        self.target_shape = y.shape[1:]
        f_mean, t_mean = features.mean(axis=0), targets.mean(axis=0)
        fc, tc = features - f_mean, targets - t_mean
        gram = fc.T @ fc + self.alpha * np.eye(fc.shape[1])
        self.coef = linalg.solve(gram, fc.T @ tc, assume_a="sym")
        self.intercept = t_mean - f_mean @ self.coef
        logger.debug(f"Fitted ridge baseline on {len(x)} windows")
        return self

    def predict(self, x: Array) -> Array:
        if self.coef is None or self.intercept is None:
            raise ConfigurationError("LinearBaseline is not fitted")
        flat = self._features(x) @ self.coef + self.intercept
        return flat.reshape(len(x), *self.target_shape)
