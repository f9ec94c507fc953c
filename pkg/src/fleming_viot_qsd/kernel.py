"""Single-particle building blocks: Euler kernel K, kill probability p, rebirth kernel Q_mu."""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionMismatchError, InvalidInputError, RebirthLoopError
from .geometry import TorusPoint, wrap
from .model import ModelSpec
from .rng import RngStream, draw_pending, draw_round
from .transport import DiscreteMeasure

logger = logging.getLogger(__name__)

GAMMA_MAX = 0.25
MAX_REBIRTH_ROUNDS = 1_000_000
MAX_KILL_PROB = 0.5


@dataclass(frozen=True)
class StepParams:
    """Timestep gamma and model of one Euler/kill step."""

    gamma: float
    model: ModelSpec
    gamma_max: float = GAMMA_MAX

    def __post_init__(self) -> None:
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise InvalidInputError(f"gamma must be positive, got {self.gamma}")
        if self.gamma > self.gamma_max:
            raise InvalidInputError(f"gamma={self.gamma} exceeds gamma_max={self.gamma_max}")
        worst = -math.expm1(-self.gamma * self.model.sup_lambda)
        if worst > MAX_KILL_PROB:
            raise InvalidInputError(
                f"kill probability reaches {worst:.3f} at gamma={self.gamma}; "
                f"survival per step must stay at least {1 - MAX_KILL_PROB:g}"
            )

    @property
    def sqrt_gamma(self) -> float:
        return math.sqrt(self.gamma)

    def drift_mean(self, points: np.ndarray) -> np.ndarray:
        """x + gamma b(x), not wrapped."""
        return points + self.gamma * self.model.drift_at(points)


@dataclass(frozen=True)
class RebirthResult:
    """Output of the rebirth kernel for a batch of slots.

    resurrections[i] counts how many times slot i was resurrected before a
    proposal survived; uniforms[i] is the kill-test uniform that accepted it.
    """

    points: np.ndarray
    resurrections: np.ndarray
    uniforms: np.ndarray


def _as_batch(x: TorusPoint) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


def kill_prob(z: TorusPoint, params: StepParams) -> np.ndarray | float:
    """p(z) = 1 - exp(-gamma lambda(z)); strictly below 1 for bounded lambda."""
    batch, single = _as_batch(z)
    p = -np.expm1(-params.gamma * params.model.kill_rate_at(batch))
    return float(p[0]) if single else p


def euler_step(
    x: TorusPoint,
    params: StepParams,
    rng: RngStream,
    step: int = 0,
    noise: Optional[np.ndarray] = None,
) -> TorusPoint:
    """wrap(x + gamma b(x) + sqrt(gamma) g) for a point or a batch of points.

    The increments are the round-0 gaussians of draw_round, so for lambda = 0
    this coincides draw for draw with sample_Q. noise overrides the draws
    (test hook).
    """
    batch, single = _as_batch(x)
    if noise is None:
        noise = draw_round(rng, step, 0, batch.shape[0], batch.shape[1], 1).gaussians
    out = wrap(params.drift_mean(batch) + params.sqrt_gamma * np.asarray(noise).reshape(batch.shape))
    return out[0] if single else out


def rebirth_loop(
    sources: np.ndarray,
    atoms: np.ndarray,
    cum_weights: Optional[np.ndarray],
    params: StepParams,
    rng: RngStream,
    step: int,
    max_rounds: int = MAX_REBIRTH_ROUNDS,
) -> RebirthResult:
    """Run the rebirth algorithm for every row of sources.

    Round 0 proposes from K(source, .); a killed slot redraws an atom of the
    rebirth measure and an Euler step from it in every later round, until a
    proposal survives its kill test. Only the slots still dead are redrawn.
    """
    n, d = sources.shape
    out = np.empty_like(sources)
    counts = np.zeros(n, dtype=np.int64)
    accepted = np.empty(n)
    pending = np.ones(n, dtype=bool)
    retry = 0
    while True:
        idx = np.flatnonzero(pending)
        draws = draw_pending(rng, step, retry, idx, n, d, atoms.shape[0], cum_weights)
        origin = sources[idx] if retry == 0 else atoms[draws.indices]
        proposal = wrap(params.drift_mean(origin) + params.sqrt_gamma * draws.gaussians)
        u = draws.uniforms
        survived = u >= kill_prob(proposal, params)
        done = idx[survived]
        out[done] = proposal[survived]
        accepted[done] = u[survived]
        pending[done] = False
        if not pending.any():
            break
        counts[pending] += 1
        retry += 1
        if retry > max_rounds:
            raise RebirthLoopError(
                f"{int(pending.sum())} slot(s) still dead after {max_rounds} resurrections "
                f"at step {step}"
            )
    if retry > 0:
        logger.debug("step %d: %d rebirth rounds, %d resurrections", step, retry, int(counts.sum()))
    return RebirthResult(points=out, resurrections=counts, uniforms=accepted)


def sample_Q(
    x: TorusPoint,
    mu: DiscreteMeasure,
    params: StepParams,
    rng: RngStream,
    step: int = 0,
    max_rounds: int = MAX_REBIRTH_ROUNDS,
) -> RebirthResult:
    """Draw from Q_mu(x, .) for a point or for every row of a batch.

    For a single point the result arrays keep a leading axis of length 1.
    """
    batch, _ = _as_batch(wrap(x))
    if batch.shape[1] != mu.dimension:
        raise DimensionMismatchError(
            f"point dimension {batch.shape[1]} does not match measure dimension {mu.dimension}"
        )
    return rebirth_loop(batch, mu.points, mu.cumulative_weights(), params, rng, step, max_rounds)
