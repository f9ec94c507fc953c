"""Property suite behind `fvqsd validate`.

Each check is small enough that the whole suite runs in seconds; a check
that raises counts as failed with the exception text as detail.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import RhoMetric, rho, torus_dist
from .gridref import GridDensity, build_grid_kernel, grid_flow, qsd_power_iteration
from .kernel import StepParams, kill_prob, sample_Q
from .model import available_families, make_builtin, verify_bounds
from .particles import initial_configuration, run_chain
from .pool import ReplicatePool
from .rng import RngStream
from .transport import DiscreteMeasure, alpha, lp_oracle, w1_circle, w_rho

logger = logging.getLogger(__name__)

VALIDATION_CELLS = 128


def _expect(condition: object, message: str = "property violated") -> None:
    if not condition:
        raise AssertionError(message)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _random_measure(gen: np.random.Generator, n_atoms: int, dimension: int = 1) -> DiscreteMeasure:
    return DiscreteMeasure.from_weights(gen.random((n_atoms, dimension)), gen.random(n_atoms) + 0.05)


def check_rho_axioms(gen: np.random.Generator) -> str:
    for d in (1, 2, 3):
        metric = RhoMetric(a=1.0, dimension=d)
        x, y, z = gen.random((3, 200, d))
        rxy, ryz, rxz = rho(metric, x, y), rho(metric, y, z), rho(metric, x, z)
        dist = torus_dist(x, y)
        _expect(np.all(rxz <= rxy + ryz + 1e-12), "triangle inequality")
        _expect(np.allclose(rxy, rho(metric, y, x)), "symmetry")
        _expect(np.all(metric.beta * dist <= rxy + 1e-12) and np.all(rxy <= dist + 1e-12), "beta sandwich")
        _expect(np.all(np.asarray(rho(metric, x, x)) == 0), "identity")
    return "rho is a metric within beta|x-y| <= rho <= |x-y| for d = 1, 2, 3"


def check_w1_matches_lp(gen: np.random.Generator) -> str:
    worst = 0.0
    for _ in range(60):
        mu = _random_measure(gen, int(gen.integers(1, 41)))
        nu = _random_measure(gen, int(gen.integers(1, 41)))
        worst = max(worst, abs(w1_circle(mu, nu) - lp_oracle(mu, nu)))
    _expect(worst < 1e-9, f"max deviation {worst:.3g}")
    return f"60 random pairs, max deviation {worst:.2g}"


def check_rho_sandwich(gen: np.random.Generator) -> str:
    metric = RhoMetric(a=2.0, dimension=1)
    for _ in range(30):
        mu, nu = _random_measure(gen, 8), _random_measure(gen, 8)
        exact = w_rho(metric, mu, nu).value
        dist = w1_circle(mu, nu)
        _expect(metric.beta * dist - 1e-12 <= exact <= dist + 1e-12)
    return "beta W1 <= W_rho <= W1 on 30 pairs of 8-atom measures"


def check_alpha_table(gen: np.random.Generator) -> str:
    _expect(math.isclose(alpha(10_000, 1), 0.01))
    _expect(math.isclose(alpha(1, 2), math.log(2)))
    _expect(math.isclose(alpha(1000, 3), 0.1))
    return "alpha(N) table values"


def check_kill_prob(gen: np.random.Generator) -> str:
    model = make_builtin("constant", lambda0=2.0)
    p = kill_prob(np.array([0.3]), StepParams(0.1, model))
    _expect(math.isclose(p, 1 - math.exp(-0.2), rel_tol=1e-12))
    _expect(kill_prob(np.array([0.3]), StepParams(0.1, make_builtin("zero"))) == 0.0)
    return f"p = {p:.6f} for lambda = 2, gamma = 0.1"


def check_model_bounds(gen: np.random.Generator) -> str:
    for family in available_families():
        for d in (1, 2):
            check = verify_bounds(make_builtin(family, d), gen, samples=5000)
            _expect(check.ok, f"{family} d={d}: {check}")
    return "declared bounds hold for every builtin family"


def check_constant_kill_grid(gen: np.random.Generator) -> str:
    gamma = 0.05
    zero = make_builtin("zero")
    constant = make_builtin("constant", lambda0=3.0)
    start = GridDensity.normalized(gen.random(VALIDATION_CELLS))
    a = grid_flow(start, build_grid_kernel(zero, gamma, VALIDATION_CELLS), zero, gamma, 20)[-1]
    b = grid_flow(start, build_grid_kernel(constant, gamma, VALIDATION_CELLS), constant, gamma, 20)[-1]
    diff = a.l1(b)
    _expect(diff <= 1e-12, f"L1 gap {diff:.3g}")
    return f"constant killing leaves eta_20 unchanged (L1 {diff:.2g})"


def check_uniform_qsd(gen: np.random.Generator) -> str:
    gamma = 0.05
    model = make_builtin("free", lambda0=2.0)
    result = qsd_power_iteration(build_grid_kernel(model, gamma, VALIDATION_CELLS), model, gamma)
    gap = result.density.l1(GridDensity.uniform(VALIDATION_CELLS))
    _expect(result.converged and gap <= 1e-10, f"L1 gap to uniform {gap:.3g}")
    _expect(math.isclose(result.survival_factor, math.exp(-gamma * 2.0), rel_tol=1e-10))
    return f"nu_gamma uniform (L1 {gap:.2g}), survival factor {result.survival_factor:.6f}"


def check_sample_q(gen: np.random.Generator) -> str:
    params = StepParams(0.05, make_builtin("demo"))
    mu = _random_measure(gen, 16)
    x = gen.random((50, 1))
    rng = RngStream(seed=int(gen.integers(0, 2**63)))
    first = sample_Q(x, mu, params, rng, step=3)
    second = sample_Q(x, mu, params, rng, step=3)
    _expect(np.array_equal(first.points, second.points), "not reproducible")
    _expect(np.all(first.uniforms >= kill_prob(first.points, params)), "returned a killed state")
    return "sample_Q reproducible and never returns a killed state"


def check_worker_independence(gen: np.random.Generator) -> str:
    params = StepParams(0.05, make_builtin("demo"))
    root = RngStream(seed=int(gen.integers(0, 2**63)))

    def replicate(r: int) -> np.ndarray:
        stream = root.derive("validate", r)
        start = initial_configuration("uniform", 200, 1, stream.derive("initial"))
        return run_chain(start, params, 10, stream).final.points

    serial = ReplicatePool(1).map(replicate, range(6))
    threaded = ReplicatePool(3).map(replicate, range(6))
    _expect(all(np.array_equal(a, b) for a, b in zip(serial, threaded)), "results depend on worker count")
    return "particle chains identical with 1 and 3 workers"


CHECKS: dict[str, Callable[[np.random.Generator], str]] = {
    "rho_metric_axioms": check_rho_axioms,
    "w1_circle_equals_lp": check_w1_matches_lp,
    "w_rho_sandwich": check_rho_sandwich,
    "alpha_table": check_alpha_table,
    "kill_probability": check_kill_prob,
    "model_bounds": check_model_bounds,
    "constant_kill_grid_flow": check_constant_kill_grid,
    "uniform_qsd": check_uniform_qsd,
    "sample_q_determinism": check_sample_q,
    "worker_independence": check_worker_independence,
}


def run_validation(seed: int = 0) -> list[CheckResult]:
    """Run every check with its own generator derived from seed."""
    results = []
    for index, (name, check) in enumerate(CHECKS.items()):
        gen = RngStream(seed).derive("validate", name).generator(step=index)
        try:
            detail = check(gen)
            results.append(CheckResult(name, True, detail))
        except Exception as exc:  # a broken check is a failed check
            logger.debug("check %s failed", name, exc_info=True)
            results.append(CheckResult(name, False, f"{type(exc).__name__}: {exc}"))
    return results
