"""The interacting N-particle kernel, chain evolution and coupled systems.

A configuration is an (N, d) array of torus points together with the index
of the step that produced it. One step of the particle kernel runs the
rebirth loop for every slot against the frozen empirical measure of the
previous configuration, so a killed particle is always resurrected on a
position from step k-1, possibly its own.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy import stats

from .errors import DimensionMismatchError, InvalidInputError, RebirthLoopError
from .geometry import RhoMetric, minimal_image, rho_n, wrap
from .kernel import MAX_REBIRTH_ROUNDS, StepParams, kill_prob, rebirth_loop
from .rng import INIT_SLOT, RngStream, draw_pending, draw_round
from .transport import DiscreteMeasure, w1

if TYPE_CHECKING:
    from .gridref import GridDensity

logger = logging.getLogger(__name__)

# Reflection falls back to shared increments below this standardized offset.
COINCIDENCE_TOL = 1e-12


@dataclass(frozen=True)
class ParticleConfiguration:
    """N particle positions after step_index steps.

    resurrections[i] is the number of resurrections slot i needed in the
    step that produced this configuration (None for an initial one).
    """

    points: np.ndarray
    step_index: int = 0
    resurrections: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        pts = wrap(self.points)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise InvalidInputError(f"a configuration needs shape (N, d) with N >= 1, got {pts.shape}")
        if self.step_index < 0:
            raise InvalidInputError(f"step_index must be >= 0, got {self.step_index}")
        object.__setattr__(self, "points", pts)

    @property
    def n_particles(self) -> int:
        return self.points.shape[0]

    @property
    def dimension(self) -> int:
        return self.points.shape[1]

    def empirical(self) -> DiscreteMeasure:
        return DiscreteMeasure.empirical(self.points)


def _check_model_dimension(cfg: ParticleConfiguration, params: StepParams) -> None:
    if cfg.dimension != params.model.dimension:
        raise DimensionMismatchError(
            f"configuration has d={cfg.dimension}, model has d={params.model.dimension}"
        )


def particle_step(
    cfg: ParticleConfiguration,
    params: StepParams,
    rng: RngStream,
    max_rounds: int = MAX_REBIRTH_ROUNDS,
) -> ParticleConfiguration:
    """One transition of the particle kernel R_{N,gamma}.

    Every slot runs the rebirth loop; resurrection indices are uniform over
    all N slots of the frozen input configuration, the slot's own included.
    """
    _check_model_dimension(cfg, params)
    result = rebirth_loop(cfg.points, cfg.points, None, params, rng, cfg.step_index, max_rounds)
    return ParticleConfiguration(
        points=result.points,
        step_index=cfg.step_index + 1,
        resurrections=result.resurrections,
    )


@dataclass(frozen=True)
class Observation:
    """One trajectory row: (step, time, observable, value)."""

    step: int
    time: float
    observable: str
    value: float


Observer = Callable[[ParticleConfiguration, float], Iterable[Observation]]


class DistanceObserver:
    """W1 between the empirical measure and a reference.

    The reference is either one fixed measure or a sequence indexed by step
    (for a time-dependent flow); steps past the end of the sequence, or not
    listed in steps, are skipped.
    """

    def __init__(
        self,
        reference: Union[DiscreteMeasure, Sequence[DiscreteMeasure]],
        name: str = "w1_reference",
        steps: Optional[Iterable[int]] = None,
    ):
        self._reference = reference
        self._name = name
        self._steps = None if steps is None else frozenset(steps)

    def _reference_at(self, step: int) -> Optional[DiscreteMeasure]:
        if isinstance(self._reference, DiscreteMeasure):
            return self._reference
        if step < len(self._reference):
            return self._reference[step]
        return None

    def __call__(self, cfg: ParticleConfiguration, time: float) -> list[Observation]:
        if self._steps is not None and cfg.step_index not in self._steps:
            return []
        ref = self._reference_at(cfg.step_index)
        if ref is None:
            return []
        return [Observation(cfg.step_index, time, self._name, w1(cfg.empirical(), ref))]


class ResurrectionObserver:
    """Mean resurrections per particle and fraction of slots killed at least once."""

    def __call__(self, cfg: ParticleConfiguration, time: float) -> list[Observation]:
        if cfg.resurrections is None:
            return []
        counts = cfg.resurrections
        return [
            Observation(cfg.step_index, time, "resurrections", float(counts.mean())),
            Observation(cfg.step_index, time, "killed_fraction", float(np.mean(counts > 0))),
        ]


class KillProbabilityObserver:
    """Mean of p over the current configuration."""

    def __init__(self, params: StepParams):
        self._params = params

    def __call__(self, cfg: ParticleConfiguration, time: float) -> list[Observation]:
        value = float(np.mean(kill_prob(cfg.points, self._params)))
        return [Observation(cfg.step_index, time, "mean_kill_prob", value)]


class SnapshotObserver:
    """Keeps copies of the configurations at the requested steps (all if None)."""

    def __init__(self, steps: Optional[Iterable[int]] = None):
        self._steps = None if steps is None else frozenset(steps)
        self.snapshots: dict[int, np.ndarray] = {}

    def __call__(self, cfg: ParticleConfiguration, time: float) -> list[Observation]:
        if self._steps is None or cfg.step_index in self._steps:
            self.snapshots[cfg.step_index] = cfg.points.copy()
        return []


@dataclass
class TrajectorySummary:
    """Final configuration plus everything the observers reported."""

    initial: ParticleConfiguration
    final: ParticleConfiguration
    steps: int
    rows: list[Observation] = field(default_factory=list)
    total_resurrections: int = 0

    def values(self, observable: str) -> np.ndarray:
        return np.array([row.value for row in self.rows if row.observable == observable])


def run_chain(
    initial: ParticleConfiguration,
    params: StepParams,
    steps: int,
    rng: RngStream,
    observers: Sequence[Observer] = (),
) -> TrajectorySummary:
    """Apply particle_step `steps` times, feeding every configuration to the observers.

    Observers see the initial configuration too, so a zero-step run still
    produces its t=0 rows.
    """
    if steps < 0:
        raise InvalidInputError(f"number of steps must be >= 0, got {steps}")
    _check_model_dimension(initial, params)
    summary = TrajectorySummary(initial=initial, final=initial, steps=steps)

    def observe(cfg: ParticleConfiguration) -> None:
        time = cfg.step_index * params.gamma
        for observer in observers:
            summary.rows.extend(observer(cfg, time))

    observe(initial)
    cfg = initial
    for _ in range(steps):
        cfg = particle_step(cfg, params, rng)
        summary.total_resurrections += int(cfg.resurrections.sum())
        observe(cfg)
    summary.final = cfg
    logger.debug(
        "chain of %d particles ran %d steps with %d resurrections",
        initial.n_particles,
        steps,
        summary.total_resurrections,
    )
    return summary


class CouplingMode(str, Enum):
    SYNCHRONOUS = "synchronous"
    REFLECTION = "reflection"


@dataclass(frozen=True)
class CoupledPair:
    """Two particle systems driven by shared randomness.

    Both sides read the same draws for every (step, retry, slot): the
    kill uniforms U and resurrection indices J are shared outright, the
    Gaussian increments either shared (synchronous) or coupled by maximal
    reflection (reflection).
    """

    first: ParticleConfiguration
    second: ParticleConfiguration
    rng: RngStream
    mode: CouplingMode = CouplingMode.SYNCHRONOUS

    def __post_init__(self) -> None:
        if self.first.points.shape != self.second.points.shape:
            raise DimensionMismatchError(
                f"coupled systems differ in shape: {self.first.points.shape} vs {self.second.points.shape}"
            )
        if self.first.step_index != self.second.step_index:
            raise InvalidInputError("coupled systems must be at the same step")
        object.__setattr__(self, "mode", CouplingMode(self.mode))

    @property
    def step_index(self) -> int:
        return self.first.step_index


def coupled_noise(
    gaussians: np.ndarray,
    coupling_uniforms: np.ndarray,
    mean_first: np.ndarray,
    mean_second: np.ndarray,
    sqrt_gamma: float,
    mode: CouplingMode,
) -> tuple[np.ndarray, np.ndarray]:
    """Standardized increments for the second system given those of the first.

    Reflection mode is the maximal reflection coupling of N(mean_first, gamma)
    and N(mean_second, gamma) on the torus: with z the minimal-image offset of
    the means over sqrt(gamma), the second increment is g + z (both
    proposals land on the same point) when V phi(g) <= phi(g + z), and the
    reflection of g across the hyperplane orthogonal to z otherwise.

    Returns the increments and the mask of slots whose proposals coalesce.
    """
    coalesced = np.zeros(gaussians.shape[0], dtype=bool)
    if mode is CouplingMode.SYNCHRONOUS:
        return gaussians, coalesced
    z = minimal_image(mean_first - mean_second) / sqrt_gamma
    norm = np.linalg.norm(z, axis=-1)
    out = gaussians.copy()
    active = norm >= COINCIDENCE_TOL
    if not active.any():
        return out, coalesced
    g = gaussians[active]
    za = z[active]
    dot = np.sum(g * za, axis=-1)
    # log(phi(g + z) / phi(g)) = -(g.z + |z|^2 / 2)
    log_ratio = -(dot + 0.5 * norm[active] ** 2)
    with np.errstate(divide="ignore"):
        coalesce = np.log(coupling_uniforms[active]) <= log_ratio
    e = za / norm[active][:, None]
    reflected = g - 2.0 * np.sum(g * e, axis=-1)[:, None] * e
    out[active] = np.where(coalesce[:, None], g + za, reflected)
    coalesced[active] = coalesce
    return out, coalesced


def coupled_proposals(
    origin_first: np.ndarray,
    origin_second: np.ndarray,
    gaussians: np.ndarray,
    coupling_uniforms: np.ndarray,
    params: StepParams,
    mode: CouplingMode,
) -> tuple[np.ndarray, np.ndarray]:
    """Coupled Euler proposals from paired origins; coalesced slots share one point."""
    mean_first = params.drift_mean(origin_first)
    mean_second = params.drift_mean(origin_second)
    noise, coalesced = coupled_noise(
        gaussians, coupling_uniforms, mean_first, mean_second, params.sqrt_gamma, mode
    )
    x_prop = wrap(mean_first + params.sqrt_gamma * gaussians)
    y_prop = wrap(mean_second + params.sqrt_gamma * noise)
    # g + z lands on the first proposal up to rounding
    y_prop[coalesced] = x_prop[coalesced]
    return x_prop, y_prop


def coupled_step(
    pair: CoupledPair,
    params: StepParams,
    max_rounds: int = MAX_REBIRTH_ROUNDS,
) -> CoupledPair:
    """Advance both systems of a pair by one particle-kernel step.

    The first system reads exactly the draws particle_step would read, so its
    marginal trajectory is the uncoupled one. In a round where only one side
    of a slot is still pending, that side uses the plain increments.
    """
    _check_model_dimension(pair.first, params)
    x_atoms = pair.first.points
    y_atoms = pair.second.points
    n, d = x_atoms.shape
    step = pair.step_index
    x_out = np.empty_like(x_atoms)
    y_out = np.empty_like(y_atoms)
    x_counts = np.zeros(n, dtype=np.int64)
    y_counts = np.zeros(n, dtype=np.int64)
    x_pending = np.ones(n, dtype=bool)
    y_pending = np.ones(n, dtype=bool)
    retry = 0
    while True:
        idx = np.flatnonzero(x_pending | y_pending)
        draws = draw_pending(pair.rng, step, retry, idx, n, d, n)
        if retry == 0:
            x_origin, y_origin = x_atoms[idx], y_atoms[idx]
        else:
            x_origin, y_origin = x_atoms[draws.indices], y_atoms[draws.indices]
        x_live = x_pending[idx]
        y_live = y_pending[idx]
        both = x_live & y_live
        x_prop = np.empty_like(x_origin)
        y_prop = np.empty_like(y_origin)
        if both.any():
            x_prop[both], y_prop[both] = coupled_proposals(
                x_origin[both],
                y_origin[both],
                draws.gaussians[both],
                draws.coupling_uniforms[both],
                params,
                pair.mode,
            )
        only_x = x_live & ~y_live
        only_y = y_live & ~x_live
        if only_x.any():
            x_prop[only_x] = wrap(params.drift_mean(x_origin[only_x]) + params.sqrt_gamma * draws.gaussians[only_x])
        if only_y.any():
            y_prop[only_y] = wrap(params.drift_mean(y_origin[only_y]) + params.sqrt_gamma * draws.gaussians[only_y])

        for pending, live, prop, out in ((x_pending, x_live, x_prop, x_out), (y_pending, y_live, y_prop, y_out)):
            rows = np.flatnonzero(live)
            if rows.size == 0:
                continue
            rows = rows[draws.uniforms[rows] >= kill_prob(prop[rows], params)]
            out[idx[rows]] = prop[rows]
            pending[idx[rows]] = False

        if not (x_pending.any() or y_pending.any()):
            break
        x_counts[x_pending] += 1
        y_counts[y_pending] += 1
        retry += 1
        if retry > max_rounds:
            raise RebirthLoopError(f"coupled step {step} still has dead slots after {max_rounds} rounds")

    return CoupledPair(
        first=ParticleConfiguration(x_out, step + 1, x_counts),
        second=ParticleConfiguration(y_out, step + 1, y_counts),
        rng=pair.rng,
        mode=pair.mode,
    )


@dataclass(frozen=True)
class KilledChainSample:
    """Outcome of independent killed Euler chains after a number of steps."""

    survivors: np.ndarray
    alive: np.ndarray
    steps: int

    @property
    def survival_fraction(self) -> float:
        return float(self.alive.mean())


def simulate_killed_chains(
    points: np.ndarray,
    params: StepParams,
    steps: int,
    rng: RngStream,
) -> KilledChainSample:
    """Run one independent killed chain from every row of points.

    A chain dies at step k when its kill uniform falls below p at the point
    it just reached; dead chains stay dead. The survivors at the last step
    sample the conditional law of the chain given survival.
    """
    if steps < 0:
        raise InvalidInputError(f"number of steps must be >= 0, got {steps}")
    x = wrap(points)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    alive = np.ones(n, dtype=bool)
    for k in range(steps):
        draws = draw_round(rng, k, 0, n, d, 1)
        x = wrap(params.drift_mean(x) + params.sqrt_gamma * draws.gaussians)
        alive &= draws.uniforms >= kill_prob(x, params)
    logger.debug("%d of %d killed chains survive %d steps", int(alive.sum()), n, steps)
    return KilledChainSample(survivors=x[alive], alive=alive, steps=steps)


InitialLaw = Union[str, "GridDensity"]


def initial_configuration(
    law: InitialLaw,
    n_particles: int,
    dimension: int,
    rng: RngStream,
) -> ParticleConfiguration:
    """Sample N i.i.d. positions from an initial law.

    law is "uniform", "point:<x>" (every coordinate at x) or
    "point:<x1>,<x2>,..." (one value per coordinate), or a GridDensity on
    the circle.
    """
    if n_particles < 1:
        raise InvalidInputError(f"N must be >= 1, got {n_particles}")
    gen = rng.generator(step=0, retry=0, slot=INIT_SLOT)
    if not isinstance(law, str):
        if dimension != 1:
            raise DimensionMismatchError("grid densities only describe d = 1 laws")
        return ParticleConfiguration(law.sample(n_particles, gen))
    if law == "uniform":
        return ParticleConfiguration(gen.random((n_particles, dimension)))
    if law.startswith("point:"):
        try:
            coords = [float(v) for v in law[len("point:"):].split(",")]
        except ValueError as exc:
            raise InvalidInputError(f"cannot parse initial point in {law!r}") from exc
        if len(coords) == 1:
            coords = coords * dimension
        if len(coords) != dimension:
            raise DimensionMismatchError(f"{law!r} has {len(coords)} coordinates, expected {dimension}")
        return ParticleConfiguration(np.tile(np.asarray(coords), (n_particles, 1)))
    raise InvalidInputError(f"unknown initial law {law!r}; use 'uniform', 'point:<x>' or a grid density")


@dataclass(frozen=True)
class SlotMarginalReport:
    """Two-sample KS of each slot against the pooled other slots."""

    statistics: np.ndarray
    pvalues: np.ndarray
    level: float

    @property
    def min_pvalue(self) -> float:
        return float(self.pvalues.min())

    @property
    def passed(self) -> bool:
        # Bonferroni over slots
        return self.min_pvalue * len(self.pvalues) >= self.level


def slot_marginal_ks(samples: np.ndarray, level: float = 0.01) -> SlotMarginalReport:
    """Check that every slot has the same marginal law.

    samples has shape (replicates, N) or (replicates, N, d); only the first
    coordinate is compared.
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., 0]
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise InvalidInputError("need samples of shape (replicates, N) with N >= 2")
    n_slots = arr.shape[1]
    statistics = np.empty(n_slots)
    pvalues = np.empty(n_slots)
    for i in range(n_slots):
        others = np.delete(arr, i, axis=1).ravel()
        result = stats.ks_2samp(arr[:, i], others)
        statistics[i] = result.statistic
        pvalues[i] = result.pvalue
    return SlotMarginalReport(statistics=statistics, pvalues=pvalues, level=level)


def mean_rho_per_particle(pair: CoupledPair, metric: RhoMetric) -> float:
    """rho_N(first, second) / N."""
    return rho_n(metric, pair.first, pair.second) / pair.first.n_particles
