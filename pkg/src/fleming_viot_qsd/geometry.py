"""Torus arithmetic and the metrics used throughout the package.

Points of the flat torus T^d are stored as float64 arrays whose last axis has
length d and whose coordinates lie in [0, 1). A single point has shape (d,),
a batch of points (for instance a particle configuration) has shape (n, d).
"""

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
import numpy.typing as npt

from .errors import DimensionMismatchError, InvalidInputError

if TYPE_CHECKING:
    from .particles import ParticleConfiguration

TorusPoint = npt.NDArray[np.float64]


def wrap(raw: npt.ArrayLike) -> TorusPoint:
    """Reduce coordinates mod 1 into [0, 1).

    Accepts a scalar, a (d,) point or an (n, d) batch. Scalars are promoted to
    a one-dimensional point.

    Raises:
        InvalidInputError: if any coordinate is not finite.
    """
    arr = np.atleast_1d(np.asarray(raw, dtype=np.float64))
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("torus coordinates must be finite")
    out = np.mod(arr, 1.0)
    # x mod 1 can round up to exactly 1.0 for tiny negative x
    out[out >= 1.0] = 0.0
    return out


def minimal_image(diff: npt.ArrayLike) -> np.ndarray:
    """Coordinatewise representative of a displacement in [-1/2, 1/2)."""
    arr = np.asarray(diff, dtype=np.float64)
    return arr - np.floor(arr + 0.5)


def _check_same_dimension(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape[-1] != y.shape[-1]:
        raise DimensionMismatchError(
            f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}"
        )


def torus_dist(x: npt.ArrayLike, y: npt.ArrayLike) -> np.ndarray | float:
    """Euclidean length of the minimal-image difference between x and y.

    Broadcasts over leading axes; returns a float for two single points.
    The result never exceeds sqrt(d)/2.
    """
    xa = np.atleast_1d(np.asarray(x, dtype=np.float64))
    ya = np.atleast_1d(np.asarray(y, dtype=np.float64))
    _check_same_dimension(xa, ya)
    dist = np.sqrt(np.sum(minimal_image(xa - ya) ** 2, axis=-1))
    if np.ndim(dist) == 0:
        return float(dist)
    return dist


def pairwise_torus_dist(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Matrix of torus distances between rows of x (n, d) and rows of y (m, d)."""
    _check_same_dimension(x, y)
    diff = minimal_image(x[:, None, :] - y[None, :, :])
    return np.sqrt(np.sum(diff ** 2, axis=-1))


@dataclass(frozen=True)
class RhoMetric:
    """Concave reshaping rho(x, y) = (1 - exp(-a |x - y|)) / a of the torus distance.

    beta is the equivalence constant: beta |x-y| <= rho(x, y) <= |x-y|, using
    that the diameter of T^d is sqrt(d)/2.
    """

    a: float = 1.0
    dimension: int = 1
    beta: float = field(init=False)

    def __post_init__(self) -> None:
        if not (self.a > 0 and math.isfinite(self.a)):
            raise InvalidInputError(f"concavity parameter a must be positive, got {self.a}")
        if self.dimension < 1:
            raise InvalidInputError(f"dimension must be >= 1, got {self.dimension}")
        diam_term = self.a * math.sqrt(self.dimension)
        beta = 2.0 * (-math.expm1(-diam_term / 2.0)) / diam_term
        object.__setattr__(self, "beta", beta)

    def of_distance(self, dist: npt.ArrayLike) -> np.ndarray:
        """Apply r -> (1 - exp(-a r)) / a to torus distances."""
        return -np.expm1(-self.a * np.asarray(dist, dtype=np.float64)) / self.a

    def cost_matrix(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.of_distance(pairwise_torus_dist(x, y))


def rho(metric: RhoMetric, x: npt.ArrayLike, y: npt.ArrayLike) -> np.ndarray | float:
    """rho distance between points (broadcasts like torus_dist). Bounded by 1/a."""
    value = metric.of_distance(torus_dist(x, y))
    if np.ndim(value) == 0:
        return float(value)
    return value


def rho_n(
    metric: RhoMetric,
    x: "ParticleConfiguration | np.ndarray",
    y: "ParticleConfiguration | np.ndarray",
) -> float:
    """Sum over slots of rho(x_i, y_i). Bounded by N/a.

    Raises:
        DimensionMismatchError: if the particle counts or dimensions differ.
    """
    xp = np.asarray(getattr(x, "points", x), dtype=np.float64)
    yp = np.asarray(getattr(y, "points", y), dtype=np.float64)
    if xp.shape != yp.shape:
        raise DimensionMismatchError(
            f"configuration shapes differ: {xp.shape} vs {yp.shape}"
        )
    return float(np.sum(metric.of_distance(torus_dist(xp, yp))))
