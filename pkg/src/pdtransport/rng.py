"""Counter-based random streams.

Every uniform is a pure function of (seed, particle, event, draw), so results
do not depend on how particles are split across workers or in which order
events are processed.  The mixer is the SplitMix64 finaliser.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31, _S11 = (np.uint64(k) for k in (30, 27, 31, 11))


def _mix(z):
    z = z ^ (z >> _S30)
    z = z * _M1
    z = z ^ (z >> _S27)
    z = z * _M2
    return z ^ (z >> _S31)


def _u64(a):
    return np.asarray(a).astype(np.int64).astype(np.uint64)


def hash64(seed, particle, event, draw):
    with np.errstate(over="ignore"):
        k = _mix(_u64(seed) + _GOLDEN)
        k = _mix(k ^ (_u64(particle) * _GOLDEN))
        k = _mix(k ^ (_u64(event) * _M1 + _GOLDEN))
        return _mix(k ^ (_u64(draw) * _M2 + _GOLDEN))


def uniforms(seed, particle, event, draw):
    """Uniforms in the open interval (0, 1), broadcast over the key arrays."""
    k = hash64(seed, particle, event, draw)
    return ((k >> _S11).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


class EventStream:
    """Uniforms for one event of many particles; ``draw(j)`` is the j-th number."""

    def __init__(self, seed, particles, events):
        self.seed = int(seed)
        self.particles = np.asarray(particles)
        self.events = np.asarray(events)

    def draw(self, j):
        return uniforms(self.seed, self.particles, self.events, j)

    def block(self, start, count):
        return np.stack([self.draw(start + k) for k in range(count)], axis=-1)

    def subset(self, mask):
        ev = self.events if self.events.ndim == 0 else self.events[mask]
        return EventStream(self.seed, self.particles[mask], ev)
