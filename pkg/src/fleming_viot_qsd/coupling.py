"""Empirical contraction rate of the particle kernel from coupled systems.

estimate_kappa runs replicate pairs of particle systems started from two
different initial laws, records the mean per-particle rho distance after
every step and fits a geometric decay rate per unit time to the replicate
mean. The rate is an estimate with a bootstrap interval, never a certified
constant.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .errors import FitError, InvalidInputError
from .geometry import RhoMetric
from .kernel import StepParams, kill_prob
from .model import ModelSpec, make_builtin, perturbation_report
from .particles import (
    CoupledPair,
    CouplingMode,
    coupled_proposals,
    coupled_step,
    initial_configuration,
    mean_rho_per_particle,
)
from .pool import ReplicatePool
from .rng import RngStream, draw_round

logger = logging.getLogger(__name__)

BURN_IN_FRACTION = 0.1
NOISE_FLOOR_SE = 10.0
MIN_FIT_POINTS = 3
BOOTSTRAP_RESAMPLES = 1000
DEFAULT_HORIZON = 1.0


@dataclass(frozen=True)
class RateFit:
    """Least-squares fit of log(mean distance) against time over a window.

    times and values are the whole recorded curve; the fit used indices
    window_start:window_stop. rate is minus the fitted slope.
    """

    times: np.ndarray
    values: np.ndarray
    standard_errors: np.ndarray
    rate: float
    intercept: float
    r_squared: float
    ci_half_width: float
    window_start: int
    window_stop: int
    replicates: int

    @property
    def window_points(self) -> int:
        return self.window_stop - self.window_start


def fit_window(
    times: np.ndarray,
    means: np.ndarray,
    ses: np.ndarray,
    burn_in: float = BURN_IN_FRACTION,
) -> tuple[int, int]:
    """[start, stop) indices of the fit window.

    stop is the first index after 0 whose mean is nonpositive or below
    NOISE_FLOOR_SE standard errors. start is the first time past burn_in of
    the horizon, moved back towards index 1 when that would leave fewer than
    MIN_FIT_POINTS points before the floor (fast decay on a long horizon).
    """
    horizon = float(times[-1])
    stop = 1
    while stop < len(times):
        m = means[stop]
        s = ses[stop] if np.isfinite(ses[stop]) else 0.0
        if m <= 0 or m < NOISE_FLOOR_SE * s:
            break
        stop += 1
    start = int(np.searchsorted(times, burn_in * horizon - 1e-12, side="left"))
    if stop - start < MIN_FIT_POINTS:
        start = max(min(start, 1), stop - MIN_FIT_POINTS)
    return start, stop


def fit_rate(
    times: np.ndarray,
    distances: np.ndarray,
    gen: Optional[np.random.Generator] = None,
    resamples: int = BOOTSTRAP_RESAMPLES,
    burn_in: float = BURN_IN_FRACTION,
) -> RateFit:
    """Fit the decay rate of the replicate mean of distances (replicates x times).

    A one-row distances array gives standard errors of zero and no interval.

    Raises:
        FitError: the initial distance is zero, or fewer than MIN_FIT_POINTS
            points fall in the window.
    """
    curves = np.atleast_2d(np.asarray(distances, dtype=np.float64))
    times = np.asarray(times, dtype=np.float64)
    n_rep = curves.shape[0]
    means = curves.mean(axis=0)
    if n_rep > 1:
        ses = curves.std(axis=0, ddof=1) / math.sqrt(n_rep)
    else:
        ses = np.zeros_like(means)
    if not means[0] > 0:
        raise FitError("the coupled systems start at distance zero; nothing to fit")
    start, stop = fit_window(times, means, ses, burn_in)
    if stop - start < MIN_FIT_POINTS:
        raise FitError(
            f"only {stop - start} point(s) between burn-in and the noise floor; "
            f"lengthen the horizon or add replicates"
        )
    window = slice(start, stop)
    reg = stats.linregress(times[window], np.log(means[window]))
    half_width = math.nan
    if gen is not None and n_rep > 1 and resamples > 0:
        half_width = _bootstrap_half_width(times[window], curves[:, window], gen, resamples)
    logger.debug(
        "rate fit over t in [%g, %g]: %d points, rate %.4g, R^2 %.3f",
        times[start], times[stop - 1], stop - start, -reg.slope, reg.rvalue ** 2,
    )
    return RateFit(
        times=times,
        values=means,
        standard_errors=ses,
        rate=float(-reg.slope),
        intercept=float(reg.intercept),
        r_squared=float(reg.rvalue ** 2),
        ci_half_width=half_width,
        window_start=start,
        window_stop=stop,
        replicates=n_rep,
    )


def _bootstrap_half_width(
    times: np.ndarray,
    curves: np.ndarray,
    gen: np.random.Generator,
    resamples: int,
    ci_lo: float = 0.025,
    ci_hi: float = 0.975,
) -> float:
    """Half width of the percentile interval of the rate over replicate resamples."""
    n_rep = curves.shape[0]
    idx = gen.integers(0, n_rep, size=(int(resamples), n_rep))
    counts = np.stack([np.bincount(row, minlength=n_rep) for row in idx])
    means = counts @ curves / n_rep
    usable = np.all(means > 0, axis=1)
    if usable.sum() < 10:
        return math.nan
    rates = -np.polyfit(times, np.log(means[usable]).T, 1)[0]
    lo = float(np.quantile(rates, ci_lo))
    hi = float(np.quantile(rates, ci_hi))
    return 0.5 * (hi - lo)


def coupled_distance_curve(
    model: ModelSpec,
    gamma: float,
    n_particles: int,
    steps: int,
    stream: RngStream,
    initial: Sequence[str] = ("point:0", "uniform"),
    mode: CouplingMode = CouplingMode.REFLECTION,
    metric: Optional[RhoMetric] = None,
) -> np.ndarray:
    """rho_N / N after every step (steps + 1 values) for one coupled pair."""
    params = StepParams(gamma, model)
    metric = metric or RhoMetric(dimension=model.dimension)
    first = initial_configuration(initial[0], n_particles, model.dimension, stream.derive("first"))
    second = initial_configuration(initial[1], n_particles, model.dimension, stream.derive("second"))
    pair = CoupledPair(first, second, stream.derive("pair"), mode)
    out = np.empty(steps + 1)
    out[0] = mean_rho_per_particle(pair, metric)
    for k in range(steps):
        pair = coupled_step(pair, params)
        out[k + 1] = mean_rho_per_particle(pair, metric)
    return out


def estimate_kappa(
    model: ModelSpec,
    gamma: float,
    n_particles: int,
    rng: RngStream,
    replicates: int = 200,
    horizon: float = DEFAULT_HORIZON,
    initial: Sequence[str] = ("point:0", "uniform"),
    mode: CouplingMode | str = CouplingMode.REFLECTION,
    metric: Optional[RhoMetric] = None,
    pool: Optional[ReplicatePool] = None,
    resamples: int = BOOTSTRAP_RESAMPLES,
) -> RateFit:
    """Contraction rate per unit time of E[rho_N]/N between two coupled systems.

    Replicate r uses the stream rng.derive("kappa", r); the bootstrap draws
    come from rng.derive("bootstrap").

    Raises:
        FitError: identical starting laws or too short a fit window.
    """
    if replicates < 1:
        raise InvalidInputError(f"replicates must be >= 1, got {replicates}")
    if len(initial) != 2:
        raise InvalidInputError("estimate_kappa needs exactly two initial laws")
    if initial[0] == initial[1] and initial[0] != "uniform":
        raise FitError(f"both systems start from {initial[0]!r}; the distance is zero")
    mode = CouplingMode(mode)
    steps = max(1, int(round(horizon / gamma)))
    pool = pool or ReplicatePool()

    def replicate(r: int) -> np.ndarray:
        return coupled_distance_curve(
            model, gamma, n_particles, steps, rng.derive("kappa", r), initial, mode, metric
        )

    curves = np.array(pool.map(replicate, range(replicates)))
    times = gamma * np.arange(steps + 1)
    gen = rng.derive("bootstrap").generator(step=0)
    return fit_rate(times, curves, gen=gen, resamples=resamples)


@dataclass(frozen=True)
class KappaRow:
    """One cell of a kappa sweep; (seed, stream) reproduces it through estimate_kappa.

    perturbation and status come from perturbation_report for the cell's model.
    """

    n_particles: int
    epsilon: float
    gamma: float
    kappa: float
    ci_half_width: float
    r_squared: float
    replicates: int
    seed: int
    stream: int
    perturbation: float = math.nan
    status: str = ""

    HEADER = (
        "N", "epsilon", "gamma", "kappa", "ci", "r2", "replicates", "seed", "stream", "perturbation", "status",
    )

    def as_row(self) -> tuple:
        return (
            self.n_particles,
            self.epsilon,
            self.gamma,
            self.kappa,
            self.ci_half_width,
            self.r_squared,
            self.replicates,
            self.seed,
            self.stream,
            self.perturbation,
            self.status,
        )


def kappa_trend(rows: Sequence[KappaRow]) -> dict[int, bool]:
    """Per N, whether kappa does not increase with epsilon.

    Consecutive epsilon values pass when kappa(eps_next) <= kappa(eps) plus
    both interval half widths; NaN cells and NaN intervals are skipped or
    treated as zero width.
    """
    trend: dict[int, bool] = {}
    for n in sorted({row.n_particles for row in rows}):
        cells = sorted(
            (row for row in rows if row.n_particles == n and math.isfinite(row.kappa)),
            key=lambda row: row.epsilon,
        )
        ok = True
        for prev, nxt in zip(cells, cells[1:]):
            slack = np.nan_to_num(prev.ci_half_width) + np.nan_to_num(nxt.ci_half_width)
            if nxt.kappa > prev.kappa + slack:
                logger.warning(
                    "kappa rises with epsilon at N=%d: %.4g at epsilon=%g, %.4g at epsilon=%g",
                    n, prev.kappa, prev.epsilon, nxt.kappa, nxt.epsilon,
                )
                ok = False
        trend[n] = ok
    return trend


def sweep_kappa(
    gamma: float,
    n_list: Sequence[int],
    epsilon_list: Sequence[float],
    rng: RngStream,
    replicates: int = 200,
    horizon: float = DEFAULT_HORIZON,
    family: str = "cosine",
    dimension: int = 1,
    model_params: Optional[dict[str, float]] = None,
    initial: Sequence[str] = ("point:0", "uniform"),
    mode: CouplingMode | str = CouplingMode.REFLECTION,
    pool: Optional[ReplicatePool] = None,
    resamples: int = BOOTSTRAP_RESAMPLES,
) -> list[KappaRow]:
    """kappa estimates over N and the killing-variation amplitude epsilon.

    A refused fit is logged and reported as a NaN row rather than aborting
    the sweep.
    """
    params = {k: v for k, v in (model_params or {}).items() if k != "epsilon"}
    rows = []
    for epsilon in epsilon_list:
        model = make_builtin(family, dimension, epsilon=epsilon, **params)
        report = perturbation_report(model, gamma)
        for n in n_list:
            stream = rng.derive("sweep", int(n), float(epsilon))
            try:
                fit = estimate_kappa(
                    model, gamma, n, stream, replicates, horizon, initial, mode, pool=pool, resamples=resamples
                )
                kappa, ci, r2 = fit.rate, fit.ci_half_width, fit.r_squared
            except FitError as exc:
                logger.warning("kappa fit refused for N=%d epsilon=%g: %s", n, epsilon, exc)
                kappa = ci = r2 = math.nan
            logger.info("N=%d epsilon=%g: kappa=%.4g (r2 %.3f)", n, epsilon, kappa, r2)
            rows.append(
                KappaRow(
                    int(n), float(epsilon), gamma, kappa, ci, r2, replicates, stream.seed, stream.stream,
                    report.term, report.status,
                )
            )
    return rows


@dataclass(frozen=True)
class CouplingConstants:
    """Monte Carlo estimates of the one-step basic-coupling quantities.

    q[i] = P(U < min(p(X_i'), p(Y_i'))) for the coupled Euler proposals from
    slot i; q_star is their mean; h = exp(-gamma inf lambda)
    + gamma L_lambda / (a beta); factor = h / (1 - q_star).
    """

    q: np.ndarray
    q_star: float
    h: float
    factor: float


def basic_coupling_constants(
    model: ModelSpec,
    gamma: float,
    metric: RhoMetric,
    pair: CoupledPair,
    samples: int = 2000,
) -> CouplingConstants:
    """Estimate q_i, q_* and the perturbation factor h / (1 - q_*) for a pair.

    Diagnostic only: the factor is a Monte Carlo estimate, not a bound.
    """
    if samples < 1:
        raise InvalidInputError(f"samples must be >= 1, got {samples}")
    params = StepParams(gamma, model)
    x = pair.first.points
    y = pair.second.points
    n, d = x.shape
    stream = pair.rng.derive("basic-coupling")
    total = np.zeros(n)
    for s in range(samples):
        draws = draw_round(stream, s, 0, n, d, 1)
        xp, yp = coupled_proposals(x, y, draws.gaussians, draws.coupling_uniforms, params, pair.mode)
        total += np.minimum(kill_prob(xp, params), kill_prob(yp, params))
    q = total / samples
    q_star = float(q.mean())
    h = math.exp(-gamma * model.inf_lambda) + gamma * model.lip_lambda / (metric.a * metric.beta)
    factor = h / (1.0 - q_star) if q_star < 1 else math.inf
    return CouplingConstants(q=q, q_star=q_star, h=h, factor=factor)
