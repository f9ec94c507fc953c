"""Deterministic d = 1 reference solutions on a uniform grid of the circle.

The Euler kernel is discretized cell-center to cell (wrapped Gaussian masses
via ndtr), the conditioned law eta_n follows the normalized recursion
eta <- (eta K)(1 - p) / mass, nu_gamma is its fixed point, and nu_* is
approximated by extrapolating nu_gamma along a geometric gamma ladder.
"""

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence, Union

import numpy as np
from scipy.special import ndtr

from .errors import DimensionMismatchError, GridError
from .model import ModelSpec
from .transport import DiscreteMeasure, w1_circle_weights

if TYPE_CHECKING:
    from .kernel_cache import KernelCache

logger = logging.getLogger(__name__)

MIN_CELLS = 64
DEFAULT_CELLS = 512
SIGMA_CELLS = 2.0
IMAGE_SIGMAS = 6.0
MASS_FLOOR = 1e-300
DENSITY_TOL = 1e-12


def cell_centers(n_cells: int) -> np.ndarray:
    return (np.arange(n_cells) + 0.5) / n_cells


@dataclass(frozen=True)
class GridDensity:
    """Cell masses of a probability law on [0, 1) over n equal cells."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if w.shape[0] < 1:
            raise GridError("a grid density needs at least one cell")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise GridError("grid weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > DENSITY_TOL:
            raise GridError(f"grid weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, n_cells: int) -> "GridDensity":
        return cls(np.full(n_cells, 1.0 / n_cells))

    @classmethod
    def normalized(cls, mass: np.ndarray) -> "GridDensity":
        mass = np.asarray(mass, dtype=np.float64)
        return cls(mass / mass.sum())

    @classmethod
    def from_points(cls, points: np.ndarray, n_cells: int) -> "GridDensity":
        """Histogram of points on [0, 1) (each point counted in its cell)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1)
        cells = np.minimum((pts * n_cells).astype(np.int64), n_cells - 1)
        return cls.normalized(np.bincount(cells, minlength=n_cells).astype(np.float64))

    @property
    def n_cells(self) -> int:
        return self.weights.shape[0]

    @property
    def centers(self) -> np.ndarray:
        return cell_centers(self.n_cells)

    def to_measure(self) -> DiscreteMeasure:
        """Atoms at the cell centers (empty cells dropped)."""
        return DiscreteMeasure.from_weights(self.centers, self.weights)

    def sample(self, n: int, gen: np.random.Generator) -> np.ndarray:
        """n points: a cell by weight, then uniform inside the cell. Shape (n, 1)."""
        cum = np.cumsum(self.weights)
        cum[-1] = 1.0
        cells = np.minimum(np.searchsorted(cum, gen.random(n), side="right"), self.n_cells - 1)
        return ((cells + gen.random(n)) / self.n_cells)[:, None]

    def l1(self, other: "GridDensity") -> float:
        _check_cells(self.n_cells, other.n_cells)
        return float(np.abs(self.weights - other.weights).sum())

    def w1(self, other: "GridDensity") -> float:
        """Circular W1 with both laws placed at the cell centers."""
        _check_cells(self.n_cells, other.n_cells)
        return w1_circle_weights(self.weights, other.weights)


def _check_cells(first: int, second: int) -> None:
    if first != second:
        raise DimensionMismatchError(f"grid sizes differ: {first} vs {second}")


@dataclass(frozen=True)
class GridKernel:
    """Row-stochastic discretization of the Euler kernel K."""

    matrix: np.ndarray
    gamma: float
    model: ModelSpec
    image_radius: int

    @property
    def n_cells(self) -> int:
        return self.matrix.shape[0]

    def transition_from(self, points: np.ndarray) -> np.ndarray:
        """Rows of K started from arbitrary points instead of cell centers."""
        return transition_masses(self.model, self.gamma, np.asarray(points, dtype=np.float64).reshape(-1), self.n_cells)


def image_radius(sigma: float) -> int:
    return max(1, math.ceil(IMAGE_SIGMAS * sigma))


def transition_masses(model: ModelSpec, gamma: float, points: np.ndarray, n_cells: int) -> np.ndarray:
    """Wrapped-Gaussian mass of every cell under N(x + gamma b(x), gamma), one row per point.

    Images within IMAGE_SIGMAS standard deviations are summed (at least one
    on each side); rows are renormalized to 1.
    """
    sigma = math.sqrt(gamma)
    means = np.mod(points + gamma * model.drift_at(points[:, None]).reshape(-1), 1.0)
    edges = np.arange(n_cells + 1) / n_cells
    radius = image_radius(sigma)
    rows = np.zeros((points.shape[0], n_cells))
    for k in range(-radius, radius + 1):
        cdf = ndtr((edges[None, :] + k - means[:, None]) / sigma)
        rows += np.diff(cdf, axis=1)
    np.maximum(rows, 0.0, out=rows)
    rows /= rows.sum(axis=1, keepdims=True)
    return rows


def build_grid_kernel(
    model: ModelSpec,
    gamma: float,
    n_cells: int = DEFAULT_CELLS,
    cache: Optional["KernelCache"] = None,
) -> GridKernel:
    """Discretize K on n_cells equal cells of the circle.

    Raises:
        GridError: d != 1, fewer than MIN_CELLS cells, or sqrt(gamma) below
            two cell widths.
    """
    if model.dimension != 1:
        raise GridError(f"the grid oracle needs d = 1, got d = {model.dimension}")
    if n_cells < MIN_CELLS:
        raise GridError(f"n_cells must be >= {MIN_CELLS}, got {n_cells}")
    sigma = math.sqrt(gamma)
    if sigma < SIGMA_CELLS / n_cells:
        raise GridError(
            f"sqrt(gamma)={sigma:.4g} is below {SIGMA_CELLS:g} cell widths; "
            f"refine the grid or increase gamma"
        )
    radius = image_radius(sigma)
    if cache is not None:
        matrix = cache.load(model, gamma, n_cells)
        if matrix is not None:
            return GridKernel(matrix=matrix, gamma=gamma, model=model, image_radius=radius)
    matrix = transition_masses(model, gamma, cell_centers(n_cells), n_cells)
    logger.debug("built %dx%d grid kernel for gamma=%g", n_cells, n_cells, gamma)
    if cache is not None:
        cache.store(model, gamma, n_cells, matrix)
    return GridKernel(matrix=matrix, gamma=gamma, model=model, image_radius=radius)


def _survival(kern: GridKernel, model: ModelSpec, gamma: float) -> np.ndarray:
    return np.exp(-gamma * model.kill_rate_at(cell_centers(kern.n_cells)[:, None]))


def _advance(weights: np.ndarray, kern: GridKernel, survive: np.ndarray) -> tuple[np.ndarray, float]:
    mass = (weights @ kern.matrix) * survive
    total = float(mass.sum())
    if not total >= MASS_FLOOR:
        raise GridError(f"surviving mass {total!r} underflowed")
    return mass / total, total


def nonlinear_step(eta: GridDensity, kern: GridKernel, model: ModelSpec, gamma: float) -> GridDensity:
    """eta -> (eta K)(1 - p), renormalized to a probability."""
    _check_cells(eta.n_cells, kern.n_cells)
    weights, _ = _advance(eta.weights, kern, _survival(kern, model, gamma))
    return GridDensity(weights)


def grid_flow(
    initial: Union[GridDensity, DiscreteMeasure],
    kern: GridKernel,
    model: ModelSpec,
    gamma: float,
    steps: int,
) -> list[GridDensity]:
    """eta_0, ..., eta_steps.

    A DiscreteMeasure start takes its first step with exact transition rows
    from its atoms; eta_0 is then the histogram of the atoms.
    """
    survive = _survival(kern, model, gamma)
    if isinstance(initial, GridDensity):
        _check_cells(initial.n_cells, kern.n_cells)
        flow = [initial]
    else:
        if initial.dimension != 1:
            raise GridError("the grid oracle needs d = 1")
        atoms = initial.points[:, 0]
        flow = [GridDensity.from_points(atoms, kern.n_cells)]
        if steps > 0:
            first = (initial.weights @ kern.transition_from(atoms)) * survive
            flow.append(GridDensity.normalized(first))
    while len(flow) <= steps:
        weights, _ = _advance(flow[-1].weights, kern, survive)
        flow.append(GridDensity(weights))
    return flow


@dataclass(frozen=True)
class QsdResult:
    """Fixed point of the nonlinear step and the per-step survival factor."""

    density: GridDensity
    survival_factor: float
    converged: bool
    iterations: int
    residual: float


def qsd_power_iteration(
    kern: GridKernel,
    model: ModelSpec,
    gamma: float,
    tol: float = 1e-12,
    max_iter: int = 100_000,
    initial: Optional[GridDensity] = None,
) -> QsdResult:
    """Iterate nonlinear_step until the L1 change drops below tol.

    The survival factor is the normalizing mass at the last iterate, i.e. the
    principal eigenvalue of the sub-Markov operator K(1 - p). Exceeding
    max_iter returns the last iterate flagged as not converged.
    """
    if not tol > 0:
        raise GridError(f"tol must be positive, got {tol}")
    survive = _survival(kern, model, gamma)
    weights = (initial or GridDensity.uniform(kern.n_cells)).weights
    _check_cells(weights.shape[0], kern.n_cells)
    factor = 1.0
    residual = math.inf
    for iteration in range(1, max_iter + 1):
        new, factor = _advance(weights, kern, survive)
        residual = float(np.abs(new - weights).sum())
        weights = new
        if residual < tol:
            logger.debug("power iteration converged after %d steps (gamma=%g)", iteration, gamma)
            return QsdResult(GridDensity(weights), factor, True, iteration, residual)
    logger.warning("power iteration did not reach tol=%g in %d steps (residual %.3g)", tol, max_iter, residual)
    return QsdResult(GridDensity(weights), factor, False, max_iter, residual)


@dataclass(frozen=True)
class Extrapolation:
    """gamma -> 0 extrapolant of nu_gamma with its error bar.

    levels holds the top-order estimate obtained with each prefix of the
    ladder; error_bar is the circular W1 between the last two of them.
    """

    density: GridDensity
    error_bar: float
    gammas: tuple[float, ...]
    order: int
    levels: tuple[np.ndarray, ...]


def _check_geometric(gammas: Sequence[float], rel_tol: float = 1e-9) -> float:
    ratios = [gammas[k] / gammas[k + 1] for k in range(len(gammas) - 1)]
    if any(r <= 1 for r in ratios):
        raise GridError(f"gamma values must be distinct, got {list(gammas)}")
    if any(abs(r - ratios[0]) > rel_tol * ratios[0] for r in ratios):
        raise GridError(f"gamma ladder {list(gammas)} is not geometric")
    return ratios[0]


def extrapolate_qsd(
    levels: Sequence[tuple[float, GridDensity]],
    max_order: Optional[int] = 3,
) -> Extrapolation:
    """Richardson extrapolation of cellwise masses in h = sqrt(gamma).

    The Neville table removes the h, h^2, ... error terms in turn. Negative
    cells produced by the extrapolation are clipped before renormalizing.

    Raises:
        GridError: fewer than three gamma values, or a non-geometric ladder.
    """
    ordered = sorted(levels, key=lambda item: item[0], reverse=True)
    gammas = [g for g, _ in ordered]
    if len(set(gammas)) < 3:
        raise GridError("extrapolation needs at least three distinct gamma values")
    ratio = math.sqrt(_check_geometric(gammas))
    n_cells = ordered[0][1].n_cells
    for _, density in ordered:
        _check_cells(density.n_cells, n_cells)
    top = len(ordered) - 1 if max_order is None else min(max_order, len(ordered) - 1)

    # table[i][j]: estimate from levels i-j..i with error terms h^1..h^j removed
    table: list[list[np.ndarray]] = []
    estimates: list[np.ndarray] = []
    for i, (_, density) in enumerate(ordered):
        row = [density.weights]
        for j in range(1, min(i, top) + 1):
            factor = ratio ** j
            row.append(row[j - 1] + (row[j - 1] - table[i - 1][j - 1]) / (factor - 1.0))
        table.append(row)
        estimates.append(row[-1])

    best = estimates[-1]
    error_bar = w1_circle_weights(best, estimates[-2])
    clipped = np.clip(best, 0.0, None)
    if clipped.sum() != best.sum():
        logger.debug("extrapolant had %d negative cells; clipped", int(np.sum(best < 0)))
    return Extrapolation(
        density=GridDensity.normalized(clipped),
        error_bar=error_bar,
        gammas=tuple(gammas),
        order=top,
        levels=tuple(estimates),
    )


def halving_ladder(gammas: Sequence[float], extra_levels: int) -> list[float]:
    """The ladder extended by extra_levels further divisions by its ratio."""
    ordered = sorted(gammas, reverse=True)
    if len(ordered) < 2:
        ratio = 2.0
    else:
        ratio = _check_geometric(ordered)
    out = list(ordered)
    for _ in range(extra_levels):
        out.append(out[-1] / ratio)
    return out
