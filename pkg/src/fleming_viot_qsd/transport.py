"""Wasserstein distances on the torus.

w1_circle is the exact circular W1 for discrete measures on T^1, computed by
POT's level-median solver. lp_oracle solves the transport LP exactly (POT
network simplex) and is the independent ground truth for everything else here.
"""

import importlib
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import ot
from scipy.optimize import linear_sum_assignment

from .errors import DimensionMismatchError, InvalidInputError, TransportSizeError
from .geometry import RhoMetric, pairwise_torus_dist, wrap

logger = logging.getLogger(__name__)

NORMALIZATION_TOL = 1e-12
LP_MAX_ATOMS = 200
ASSIGNMENT_MAX_ATOMS = 2000


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted atoms on T^d; weights are positive and sum to one."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        points = wrap(self.points)
        if points.ndim == 1:
            points = points[:, None]
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if points.shape[0] == 0:
            raise InvalidInputError("a measure needs at least one atom")
        if points.shape[0] != weights.shape[0]:
            raise DimensionMismatchError(
                f"{points.shape[0]} atoms but {weights.shape[0]} weights"
            )
        if np.any(weights <= 0):
            raise InvalidInputError("atom weights must be positive")
        if abs(weights.sum() - 1.0) > NORMALIZATION_TOL:
            raise InvalidInputError(f"weights sum to {weights.sum()!r}, not 1")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def empirical(cls, points: np.ndarray) -> "DiscreteMeasure":
        """pi(x) = (1/N) sum_i delta_{x_i}."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        n = pts.shape[0]
        return cls(pts, np.full(n, 1.0 / n))

    @classmethod
    def from_weights(cls, points: np.ndarray, weights: np.ndarray) -> "DiscreteMeasure":
        """Normalize nonnegative weights and drop empty atoms."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if np.any(w < 0):
            raise InvalidInputError("weights must be nonnegative")
        keep = w > 0
        w = w[keep]
        return cls(pts[keep], w / w.sum())

    @property
    def n_atoms(self) -> int:
        return self.points.shape[0]

    @property
    def dimension(self) -> int:
        return self.points.shape[1]

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def cumulative_weights(self) -> Optional[np.ndarray]:
        """Cumulative weights for index sampling; None for uniform weights."""
        if self.is_uniform:
            return None
        cum = np.cumsum(self.weights)
        cum[-1] = 1.0
        return cum


def _require_circle(mu: DiscreteMeasure, nu: DiscreteMeasure) -> None:
    if mu.dimension != 1 or nu.dimension != 1:
        raise DimensionMismatchError("circular W1 needs d = 1 measures")


def _load_circle_solver():
    """POT's exact level-median circular W1; its module moved between releases."""
    for module in ("ot.lp", "ot.lp.solver_1d", "ot.lp._solver_1d", "ot.lp.solver_circle"):
        try:
            return getattr(importlib.import_module(module), "wasserstein1_circle")
        except (ImportError, AttributeError):
            continue
    raise ImportError("POT >= 0.9 with wasserstein1_circle is required")


_wasserstein1_circle = _load_circle_solver()


def _circle_w1(
    u_values: np.ndarray,
    v_values: np.ndarray,
    u_weights: np.ndarray,
    v_weights: np.ndarray,
) -> float:
    """POT circular W1 after rotating the lowest atom onto 0.

    The solver integrates the CDF gap from the first atom up to 1, so the
    arc before the first atom must have length zero.
    """
    anchor = min(float(u_values.min()), float(v_values.min()))
    u = np.mod(u_values - anchor, 1.0)
    v = np.mod(v_values - anchor, 1.0)
    cost = _wasserstein1_circle(
        u, v, np.asarray(u_weights, dtype=np.float64), np.asarray(v_weights, dtype=np.float64)
    )
    return float(np.asarray(cost).reshape(-1)[0])


def w1_circle(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """Exact W1 between two discrete measures on the unit circle.

    With F, G the CDFs on [0, 1), W1 = int_0^1 |F(t) - G(t) - s*| dt where s*
    is the level median of F - G.
    """
    _require_circle(mu, nu)
    return _circle_w1(mu.points[:, 0], nu.points[:, 0], mu.weights, nu.weights)


def w1_circle_weights(first: np.ndarray, second: np.ndarray) -> float:
    """Circular W1 between two weight vectors on one uniform grid.

    Atoms sit at the cell centers. Weights may be signed (extrapolation
    estimates) as long as both vectors carry the same total.
    """
    a = np.asarray(first, dtype=np.float64)
    b = np.asarray(second, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"grid sizes differ: {a.shape} vs {b.shape}")
    centers = (np.arange(a.shape[0]) + 0.5) / a.shape[0]
    return _circle_w1(centers, centers, a, b)


def _check_pair(mu: DiscreteMeasure, nu: DiscreteMeasure, max_atoms: int) -> None:
    if mu.dimension != nu.dimension:
        raise DimensionMismatchError(f"dimension mismatch: {mu.dimension} vs {nu.dimension}")
    total = mu.n_atoms + nu.n_atoms
    if total > max_atoms:
        raise TransportSizeError(f"{total} atoms exceed the exact-solver guard of {max_atoms}")


def lp_oracle(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    metric: Optional[RhoMetric] = None,
    max_atoms: int = LP_MAX_ATOMS,
) -> float:
    """Exact optimal transport cost with torus (or rho) ground cost.

    Raises:
        TransportSizeError: if the total atom count exceeds max_atoms.
    """
    _check_pair(mu, nu, max_atoms)
    if metric is None:
        cost = pairwise_torus_dist(mu.points, nu.points)
    else:
        cost = metric.cost_matrix(mu.points, nu.points)
    return float(ot.emd2(mu.weights, nu.weights, cost, numItermax=1_000_000))


def w1_assignment(x: np.ndarray, y: np.ndarray, max_atoms: int = ASSIGNMENT_MAX_ATOMS) -> float:
    """W1 between two equal-size empirical measures via an assignment solve."""
    xa = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ya = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if xa.shape != ya.shape:
        raise DimensionMismatchError(f"supports differ: {xa.shape} vs {ya.shape}")
    if 2 * xa.shape[0] > max_atoms:
        raise TransportSizeError(f"{2 * xa.shape[0]} atoms exceed the assignment guard of {max_atoms}")
    cost = pairwise_torus_dist(xa, ya)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def w1(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """W1 with the torus ground metric: exact circular formula for d = 1, LP otherwise."""
    if mu.dimension == 1 and nu.dimension == 1:
        return w1_circle(mu, nu)
    return lp_oracle(mu, nu)


@dataclass(frozen=True)
class RhoEstimate:
    """W_rho as an exact value (lower == upper) or a certified interval."""

    lower: float
    upper: float
    exact: bool

    @property
    def value(self) -> float:
        return 0.5 * (self.lower + self.upper)


def w_rho(
    metric: RhoMetric,
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    max_atoms: int = LP_MAX_ATOMS,
) -> RhoEstimate:
    """W_rho exactly for small supports, otherwise the d = 1 sandwich [beta W1, W1].

    Raises:
        TransportSizeError: supports too large and d > 1.
    """
    if mu.n_atoms + nu.n_atoms <= max_atoms:
        value = lp_oracle(mu, nu, metric=metric, max_atoms=max_atoms)
        return RhoEstimate(lower=value, upper=value, exact=True)
    if mu.dimension == 1 and nu.dimension == 1:
        dist = w1_circle(mu, nu)
        return RhoEstimate(lower=metric.beta * dist, upper=dist, exact=False)
    raise TransportSizeError(
        f"exact W_rho needs at most {max_atoms} atoms in d > 1 "
        f"(got {mu.n_atoms + nu.n_atoms})"
    )


def alpha(n_particles: int, dimension: int) -> float:
    """Empirical-measure rate: N^-1/2 (d=1), N^-1/2 ln(1+N) (d=2), N^-1/d (d>2)."""
    if n_particles < 1:
        raise InvalidInputError(f"N must be >= 1, got {n_particles}")
    if dimension < 1:
        raise InvalidInputError(f"dimension must be >= 1, got {dimension}")
    if dimension == 1:
        return n_particles ** -0.5
    if dimension == 2:
        return n_particles ** -0.5 * math.log1p(n_particles)
    return n_particles ** (-1.0 / dimension)
