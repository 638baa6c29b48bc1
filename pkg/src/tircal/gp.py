"""Gaussian process regression over 2-D cell centers, squared exponential kernel.

Fills the bias field at cells the sparse solve could not reach.  The kernel
is k(p, q) = signal_variance * exp(-||p - q||^2 / (2 * length_scale^2)); the
prior mean is zero, so predictions revert to zero far from observed cells.
Hyperparameters stay fixed (no marginal-likelihood optimization) to keep the
pipeline deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from .errors import ConfigError, DataError, SolverFailureError
from .spatial import SpatialField

__all__ = ["GpConfig", "SquaredExpGP", "fill_field_with_gp"]


@dataclass(frozen=True)
class GpConfig:
    """Kernel hyperparameters; ``length_scale`` is in pixels.

    ``signal_variance`` and ``noise_variance`` are variances (intensity
    squared).  ``max_training_points`` caps the cubic-cost factorization; a
    larger training set is subsampled uniformly with a fixed seed.
    """

    length_scale: float
    signal_variance: float = 0.05**2
    noise_variance: float = 0.005**2
    max_training_points: int = 1024
    subsample_seed: int = 0

    def __post_init__(self):
        for name in ("length_scale", "signal_variance", "noise_variance"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be strictly positive")
        if self.max_training_points < 1:
            raise ConfigError("max_training_points must be >= 1")

    @staticmethod
    def for_image_width(width: int, **overrides) -> "GpConfig":
        """Default hyperparameters: length scale at 25% of the image width."""
        overrides.setdefault("length_scale", 0.25 * width)
        return GpConfig(**overrides)


class SquaredExpGP(BaseEstimator, RegressorMixin):
    """GP regressor with a squared exponential kernel and zero prior mean.

    Parameters mirror :class:`GpConfig`.  ``fit`` factorizes
    K + noise_variance * I by Cholesky; an ill-conditioned kernel triggers one
    retry with the noise variance raised tenfold before failing.
    """

    def __init__(
        self,
        length_scale: float = 1.0,
        signal_variance: float = 0.05**2,
        noise_variance: float = 0.005**2,
        max_training_points: int = 1024,
        subsample_seed: int = 0,
    ):
        self.length_scale = length_scale
        self.signal_variance = signal_variance
        self.noise_variance = noise_variance
        self.max_training_points = max_training_points
        self.subsample_seed = subsample_seed

    @classmethod
    def from_config(cls, cfg: GpConfig) -> "SquaredExpGP":
        return cls(
            length_scale=cfg.length_scale,
            signal_variance=cfg.signal_variance,
            noise_variance=cfg.noise_variance,
            max_training_points=cfg.max_training_points,
            subsample_seed=cfg.subsample_seed,
        )

    def _kernel(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        sq = (
            np.sum(A**2, axis=1)[:, None]
            + np.sum(B**2, axis=1)[None, :]
            - 2.0 * A @ B.T
        )
        np.maximum(sq, 0.0, out=sq)
        return self.signal_variance * np.exp(-sq / (2.0 * self.length_scale**2))

    def fit(self, X, y) -> "SquaredExpGP":
        GpConfig(
            self.length_scale,
            self.signal_variance,
            self.noise_variance,
            self.max_training_points,
            self.subsample_seed,
        )
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != 2:
            raise DataError("training inputs must be (n, 2) coordinates")
        if y.shape != (X.shape[0],):
            raise DataError("target shape does not match inputs")
        if X.shape[0] < 1:
            raise DataError("need at least one training point")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError("non-finite training data")

        if X.shape[0] > self.max_training_points:
            rng = np.random.default_rng(self.subsample_seed)
            keep = np.sort(
                rng.choice(X.shape[0], size=self.max_training_points, replace=False)
            )
            X = X[keep]
            y = y[keep]

        noise = self.noise_variance
        K = self._kernel(X, X)
        for attempt in range(2):
            try:
                L = cholesky(K + noise * np.eye(X.shape[0]), lower=True)
                break
            except LinAlgError:
                if attempt == 1:
                    raise SolverFailureError(
                        "kernel matrix ill-conditioned even after raising noise"
                    ) from None
                noise *= 10.0
        self.X_train_ = X
        self.y_train_ = y
        self.L_ = L
        self.noise_variance_ = noise
        tmp = solve_triangular(L, y, lower=True)
        self.alpha_ = solve_triangular(L.T, tmp, lower=False)
        return self

    def _check_fitted(self):
        if not hasattr(self, "alpha_"):
            raise NotFittedError("fit must be called before predict")

    def predict(self, X, return_var: bool = False):
        """Posterior mean (and variance) at query coordinates.

        Variance is clamped at zero against roundoff; it never exceeds the
        signal variance.
        """
        self._check_fitted()
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        k_star = self._kernel(X, self.X_train_)
        mean = k_star @ self.alpha_
        if not return_var:
            return mean
        v = solve_triangular(self.L_, k_star.T, lower=True)
        var = self.signal_variance - np.sum(v**2, axis=0)
        return mean, np.maximum(var, 0.0)


def fill_field_with_gp(field: SpatialField, gp: SquaredExpGP) -> SpatialField:
    """Predict bias at every unsolved cell from the solved ones.

    Returns a new field whose previously unsolved cells carry the GP mean,
    marked with source code 2.  A field without solved cells is returned
    unchanged.
    """
    solved = field.solved_mask
    if not solved.any():
        return field
    centers = field.grid.cell_centers()
    gp.fit(centers[solved], field.r[solved])
    missing = ~solved
    r = field.r.copy()
    source = field.source.copy()
    if missing.any():
        r[missing] = gp.predict(centers[missing])
        source[missing] = 2
    return SpatialField(
        grid=field.grid,
        r=r,
        source=source,
        component_labels=field.component_labels,
        residual_rms=field.residual_rms,
    )
