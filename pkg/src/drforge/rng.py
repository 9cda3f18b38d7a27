"""Counter-based deterministic random streams.

Every value is a pure function of the integer words that key it (seed, stream
tag, indices), so any element of any stream can be computed independently on
any worker with no sequential generator state.  This is what makes parallel
shard generation byte-reproducible regardless of scheduling, crash or resume
order.

The mixer is the SplitMix64 finalizer chained over the key words.  All
arithmetic is modulo 2**64; the wraparound is intentional, so numpy's
overflow warnings are suppressed locally around the mixing steps.
"""

from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)

# Stream tags.  Each call site that draws from a keyed stream uses its own tag
# so no two sites can collide on the same key tuple.  Keep this list the single
# registry.
CLASS_PICK = 0x01
PIXEL_NOISE = 0x02
CAPTION_NOISE = 0x03
IMAGE_PROTO = 0x04
CAPTION_PROTO = 0x05
AUG_AREA = 0x10
AUG_RATIO = 0x11
AUG_POS_X = 0x12
AUG_POS_Y = 0x13
AUG_FLIP = 0x14
AUG_BRIGHT = 0x15
TEACHER_TARGET = 0x20
STUDENT_INIT = 0x21
SYN_CAPTION_NOISE = 0x22
TEACHER_CONE = 0x23
AUG_SEED = 0x30
PLAIN_AUG_SEED = 0x31
SHARD_ORDER = 0x40
WORKER_PICK = 0x41

_U1 = 0xA5A5A5A5A5A5A5A5
_U2 = 0xC3C3C3C3C3C3C3C3


def _finalize(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = x ^ (x >> np.uint64(30))
        x = x * _MIX_A
        x = x ^ (x >> np.uint64(27))
        x = x * _MIX_B
        x = x ^ (x >> np.uint64(31))
    return x


def hash64(*words):
    """Mix non-negative integer words (scalars or arrays) into uint64 hashes.

    Array words broadcast against each other; the result has the broadcast
    shape (or is a 0-d uint64 for all-scalar input).
    """
    h = np.uint64(0)
    with np.errstate(over="ignore"):
        for w in words:
            w = np.asarray(w, dtype=np.uint64)
            h = _finalize((h + _GOLDEN) ^ (w * _MIX_B + _GOLDEN))
    return h


def str_seed(text: str) -> int:
    """Stable 64-bit seed for a string identifier."""
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def uniform01(*words):
    """Uniform float64 in [0, 1), one per broadcast element of the key words."""
    h = hash64(*words)
    return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53


def _unit_open(h: np.ndarray) -> np.ndarray:
    # (0, 1]; safe as a log argument.
    return ((h >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * 2.0**-53


def gaussian(*words):
    """Standard normal draws keyed by the words (Box-Muller, two sub-streams)."""
    h = hash64(*words)
    u1 = _unit_open(_finalize(h ^ np.uint64(_U1)))
    u2 = (_finalize(h ^ np.uint64(_U2)) >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def randint_below(n: int, *words) -> int:
    """Deterministic integer in [0, n) keyed by the words."""
    if n <= 0:
        raise ValueError(f"randint_below needs n >= 1, got {n}")
    u = float(uniform01(*words))
    k = int(u * n)
    return min(k, n - 1)
