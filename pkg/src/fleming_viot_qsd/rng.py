"""Counter-based random streams keyed by (seed, stream, step, retry, slot).

Every draw used by the simulator comes from a Philox generator whose key is
the run seed (plus a stream id for replicates) and whose counter encodes the
step index, the retry round of the resurrection loop and the slot. Two calls
with the same key see the same numbers whatever thread executes them and in
whatever order, which is what makes trajectories bit-reproducible across
worker counts.
"""

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidInputError

# Slot word used when a whole configuration is drawn at once; row i of each
# array then belongs to slot i.
ALL_SLOTS = 2 ** 63
# Slot word reserved for sampling initial configurations.
INIT_SLOT = ALL_SLOTS + 1
# Retry rounds from this one on draw only the slots that are still dead.
SLOT_ROUND = 4

_U64 = 2 ** 64


@dataclass(frozen=True)
class RngStream:
    """A keyed family of Philox generators."""

    seed: int
    stream: int = 0

    def __post_init__(self) -> None:
        if not (0 <= self.seed < _U64):
            raise InvalidInputError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if not (0 <= self.stream < _U64):
            raise InvalidInputError(f"stream id must be a 64-bit unsigned integer, got {self.stream}")

    @property
    def key(self) -> int:
        return self.seed | (self.stream << 64)

    def generator(self, step: int, retry: int = 0, slot: int = ALL_SLOTS) -> np.random.Generator:
        """Generator for one (step, retry, slot) key.

        The low counter word is left at zero so that draws inside one key
        never run into the counter range of another key.
        """
        counter = np.array([0, retry, step, slot], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=self.key, counter=counter))

    def spawn(self, stream: int) -> "RngStream":
        """Same seed, different stream id (one per replicate or purpose)."""
        return RngStream(seed=self.seed, stream=stream)

    def derive(self, *labels: object) -> "RngStream":
        """Child stream whose id is a hash of this stream id and the labels.

        Used to give every replicate, initial law and system of a pair its own
        key without coordinating integer ranges.
        """
        digest = hashlib.sha256(repr((self.stream, *labels)).encode("utf-8")).digest()
        return RngStream(seed=self.seed, stream=int.from_bytes(digest[:8], "big"))


@dataclass(frozen=True)
class RoundDraws:
    """Randomness consumed by one round of the rebirth loop for n slots.

    gaussians: (n, d) Euler increments
    uniforms: (n,) kill-test uniforms
    indices: (n,) resurrection atom indices
    coupling_uniforms: (n,) uniforms for the maximal-coupling accept test
    """

    gaussians: np.ndarray
    uniforms: np.ndarray
    indices: np.ndarray
    coupling_uniforms: np.ndarray


def draw_round(
    rng: RngStream,
    step: int,
    retry: int,
    n: int,
    d: int,
    n_atoms: int,
    cum_weights: Optional[np.ndarray] = None,
) -> RoundDraws:
    """Draw the full round of randomness for n slots in a fixed order.

    The order (gaussians, uniforms, indices, coupling uniforms) never changes
    and all four arrays are drawn even when a caller ignores some of them, so
    a slot's numbers depend only on (seed, stream, step, retry, slot).

    Args:
        cum_weights: normalized cumulative weights of the rebirth measure;
            None means uniform weights over n_atoms.
    """
    gen = rng.generator(step, retry)
    gaussians = gen.standard_normal((n, d))
    uniforms = gen.random(n)
    if cum_weights is None:
        indices = gen.integers(0, n_atoms, size=n)
    else:
        indices = np.searchsorted(cum_weights, gen.random(n), side="right")
        np.minimum(indices, n_atoms - 1, out=indices)
    coupling_uniforms = gen.random(n)
    return RoundDraws(gaussians, uniforms, indices, coupling_uniforms)


def draw_slots(
    rng: RngStream,
    step: int,
    retry: int,
    slots: np.ndarray,
    d: int,
    n_atoms: int,
    cum_weights: Optional[np.ndarray] = None,
) -> RoundDraws:
    """One round of draws for the listed slots only, each from its own key.

    Row j belongs to slots[j]; the per-slot order is the same as in
    draw_round.
    """
    k = len(slots)
    gaussians = np.empty((k, d))
    uniforms = np.empty(k)
    indices = np.empty(k, dtype=np.int64)
    coupling_uniforms = np.empty(k)
    for j, slot in enumerate(slots):
        gen = rng.generator(step, retry, int(slot))
        gaussians[j] = gen.standard_normal(d)
        uniforms[j] = gen.random()
        if cum_weights is None:
            indices[j] = gen.integers(0, n_atoms)
        else:
            indices[j] = min(int(np.searchsorted(cum_weights, gen.random(), side="right")), n_atoms - 1)
        coupling_uniforms[j] = gen.random()
    return RoundDraws(gaussians, uniforms, indices, coupling_uniforms)


def draw_pending(
    rng: RngStream,
    step: int,
    retry: int,
    slots: np.ndarray,
    n: int,
    d: int,
    n_atoms: int,
    cum_weights: Optional[np.ndarray] = None,
) -> RoundDraws:
    """Draws for the still-dead slots of an n-slot configuration.

    Rounds below SLOT_ROUND draw the whole configuration and keep the listed
    rows; later rounds draw per slot. Either way a slot's numbers depend only
    on (seed, stream, step, retry, slot), never on which other slots are
    still pending.
    """
    slots = np.asarray(slots, dtype=np.int64)
    if retry >= SLOT_ROUND:
        return draw_slots(rng, step, retry, slots, d, n_atoms, cum_weights)
    full = draw_round(rng, step, retry, n, d, n_atoms, cum_weights)
    return RoundDraws(
        full.gaussians[slots],
        full.uniforms[slots],
        full.indices[slots],
        full.coupling_uniforms[slots],
    )
