"""Problem instances: drift b, killing rate lambda and their bounds."""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional

import numpy as np

from .errors import InvalidInputError, ModelError
from .geometry import torus_dist, wrap

logger = logging.getLogger(__name__)

# Both callables take an (n, d) batch of torus points.
DriftFn = Callable[[np.ndarray], np.ndarray]
KillRateFn = Callable[[np.ndarray], np.ndarray]

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class ModelSpec:
    """Drift, killing rate and their declared bounds.

    Bounds are declared, not certified: sup_lambda is ||lambda||_inf,
    lip_lambda its Lipschitz constant for the torus distance, sup_b and lip_b
    the sup norm and Lipschitz constant of the drift, inf_lambda a lower
    bound for lambda (0 when unknown).
    """

    dimension: int
    drift: DriftFn
    kill_rate: KillRateFn
    sup_lambda: float
    lip_lambda: float
    sup_b: float
    lip_b: float
    inf_lambda: float = 0.0
    family: Optional[str] = None
    params: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.dimension < 1:
            raise ModelError(f"dimension must be >= 1, got {self.dimension}")
        for name in ("sup_lambda", "lip_lambda", "sup_b", "lip_b", "inf_lambda"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ModelError(f"{name} must be a finite nonnegative number, got {value}")
        if self.inf_lambda > self.sup_lambda:
            raise ModelError("inf_lambda exceeds sup_lambda")

    @property
    def key(self) -> Optional[str]:
        """Stable identifier for builtin models; None for user-supplied ones."""
        if self.family is None:
            return None
        args = ",".join(f"{k}={self.params[k]!r}" for k in sorted(self.params))
        return f"{self.family}(d={self.dimension},{args})"

    def drift_at(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(self.drift(np.atleast_2d(points)), dtype=np.float64).reshape(
            np.atleast_2d(points).shape
        )

    def kill_rate_at(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(self.kill_rate(np.atleast_2d(points)), dtype=np.float64).reshape(-1)


def _sine_drift(c: float) -> DriftFn:
    def drift(x: np.ndarray) -> np.ndarray:
        return -c * np.sin(TWO_PI * x)
    return drift


def _cosine_kill(lambda0: float, epsilon: float) -> KillRateFn:
    def kill_rate(x: np.ndarray) -> np.ndarray:
        return lambda0 + epsilon * np.mean(np.cos(TWO_PI * x), axis=-1)
    return kill_rate


def _cosine_family(dimension: int, c: float, lambda0: float, epsilon: float) -> dict[str, Any]:
    if c < 0:
        raise ModelError(f"drift amplitude c must be >= 0, got {c}")
    if lambda0 < 0:
        raise ModelError(f"lambda0 must be >= 0, got {lambda0}")
    if epsilon < 0:
        raise ModelError(f"epsilon must be >= 0, got {epsilon}")
    if epsilon > lambda0:
        raise ModelError(f"epsilon={epsilon} > lambda0={lambda0} makes the killing rate negative")
    # lambda(x) = lambda0 + eps/d * sum_j cos(2 pi x_j): |grad| <= 2 pi eps / sqrt(d)
    return dict(
        drift=_sine_drift(c),
        kill_rate=_cosine_kill(lambda0, epsilon),
        sup_lambda=lambda0 + epsilon,
        inf_lambda=lambda0 - epsilon,
        lip_lambda=TWO_PI * epsilon / math.sqrt(dimension),
        sup_b=c * math.sqrt(dimension),
        lip_b=TWO_PI * c,
    )


# family name -> (default parameters, forced parameters)
_FAMILIES: dict[str, tuple[dict[str, float], dict[str, float]]] = {
    "cosine": ({"c": TWO_PI * 0.3, "lambda0": 2.0, "epsilon": 0.25}, {}),
    "demo": ({}, {"c": TWO_PI * 0.3, "lambda0": 2.0, "epsilon": 0.25}),
    "constant": ({"c": TWO_PI * 0.3, "lambda0": 2.0}, {"epsilon": 0.0}),
    "zero": ({"c": TWO_PI * 0.3}, {"lambda0": 0.0, "epsilon": 0.0}),
    "free": ({"lambda0": 2.0}, {"c": 0.0, "epsilon": 0.0}),
    "stress": ({"c": TWO_PI * 0.3, "lambda0": 2.75}, {"epsilon": 0.0}),
}


def available_families() -> list[str]:
    return list(_FAMILIES.keys())


def make_builtin(family: str, dimension: int = 1, **params: float) -> ModelSpec:
    """Build one of the analytic test families with exact bounds attached.

    Families (drift b_j(x) = -c sin(2 pi x_j),
    lambda(x) = lambda0 + epsilon/d * sum_j cos(2 pi x_j)):
        cosine    all of c, lambda0, epsilon free
        demo      c = 2 pi 0.3, lambda0 = 2, epsilon = 0.25
        constant  epsilon = 0
        zero      lambda = 0
        free      b = 0, constant lambda
        stress    constant lambda near the largest a gamma_max step allows (p close to 1/2)

    Raises:
        ModelError: unknown family, unknown or forced parameter, negative
            lambda0 or epsilon, or epsilon > lambda0.
    """
    if family not in _FAMILIES:
        raise ModelError(f"unknown model family {family!r}; choose from {available_families()}")
    defaults, forced = _FAMILIES[family]
    for name, value in params.items():
        if name in forced and value != forced[name]:
            raise ModelError(f"family {family!r} fixes {name}={forced[name]}")
        if name not in defaults and name not in forced:
            raise ModelError(f"family {family!r} has no parameter {name!r}")
    resolved = {**defaults, **forced, **{k: float(v) for k, v in params.items()}}
    pieces = _cosine_family(dimension, resolved["c"], resolved["lambda0"], resolved["epsilon"])
    return ModelSpec(dimension=dimension, family=family, params=resolved, **pieces)


@dataclass(frozen=True)
class PerturbationReport:
    """The computable half of kappa = c1 - c2 L_lambda exp(gamma ||lambda||_inf)."""

    gamma: float
    lip_lambda: float
    sup_lambda: float
    term: float
    status: str


def perturbation_report(model: ModelSpec, gamma: float) -> PerturbationReport:
    """Evaluate L_lambda * exp(gamma * ||lambda||_inf) and classify it.

    The sign of kappa needs c1, c2, which are not computed here, so any model
    with a varying killing rate is reported as "empirical-only".
    """
    if not gamma > 0:
        raise InvalidInputError(f"gamma must be positive, got {gamma}")
    term = model.lip_lambda * math.exp(gamma * model.sup_lambda)
    if model.sup_lambda == 0:
        status = "contraction expected (pure diffusion)"
    elif model.lip_lambda == 0:
        status = "contraction expected (constant killing)"
    else:
        status = "empirical-only"
    return PerturbationReport(
        gamma=gamma,
        lip_lambda=model.lip_lambda,
        sup_lambda=model.sup_lambda,
        term=term,
        status=status,
    )


@dataclass(frozen=True)
class BoundCheck:
    """Sampled estimates of the declared model bounds."""

    sampled_sup_lambda: float
    sampled_inf_lambda: float
    sampled_lip_lambda: float
    sampled_sup_b: float
    sampled_lip_b: float
    ok: bool


def verify_bounds(
    model: ModelSpec,
    rng: np.random.Generator,
    samples: int = 10_000,
    slack: float = 1e-9,
) -> BoundCheck:
    """Spot-check declared bounds on random points and random close pairs.

    Lipschitz ratios are sampled on pairs at small random separations, where
    difference quotients approach the gradient norm.
    """
    d = model.dimension
    x = rng.random((samples, d))
    lam = model.kill_rate_at(x)
    b = model.drift_at(x)
    step = rng.normal(size=(samples, d)) * rng.uniform(1e-4, 0.05, size=(samples, 1))
    y = wrap(x + step)
    dist = np.asarray(torus_dist(x, y))
    keep = dist > 0
    lam_ratio = np.abs(model.kill_rate_at(y) - lam)[keep] / dist[keep]
    b_ratio = np.linalg.norm(model.drift_at(y) - b, axis=-1)[keep] / dist[keep]
    check = BoundCheck(
        sampled_sup_lambda=float(lam.max()),
        sampled_inf_lambda=float(lam.min()),
        sampled_lip_lambda=float(lam_ratio.max(initial=0.0)),
        sampled_sup_b=float(np.linalg.norm(b, axis=-1).max()),
        sampled_lip_b=float(b_ratio.max(initial=0.0)),
        ok=True,
    )
    ok = (
        check.sampled_inf_lambda >= -slack
        and check.sampled_inf_lambda >= model.inf_lambda - slack
        and check.sampled_sup_lambda <= model.sup_lambda + slack
        and check.sampled_lip_lambda <= model.lip_lambda * (1 + 1e-6) + slack
        and check.sampled_sup_b <= model.sup_b + slack
        and check.sampled_lip_b <= model.lip_b * (1 + 1e-6) + slack
    )
    if not ok:
        logger.warning("sampled bounds exceed declared bounds for model %s: %s", model.key, check)
    return replace(check, ok=ok)
