"""Deterministic random primitives shared by the encoder/decoder pipeline.

Everything in this module is a pure function of explicit integer state, so
identical seeds reproduce identical draw sequences on any platform.  The
generator is PCG-XSH-RR 64/32 (64-bit LCG state, 32-bit permuted output),
which is the variant all cache files assume; its identity is covered by the
``pipeline_version`` stamped into every cache header.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_M64 = (1 << 64) - 1
_M32 = (1 << 32) - 1

# Multiplier of the 64-bit LCG state transition (the canonical PCG constant).
PCG_MULTIPLIER = 6364136223846793005

# Domain-separation tags so the seed streams for augmentation records,
# epoch shuffles and parameter init never collide.
ENCODE_TAG = 0xA0761D6478BD642F
SHUFFLE_TAG = 0x8BB84B93962EACC9
INIT_TAG = 0xE7037ED1A0B428DB


@dataclass(frozen=True, slots=True)
class PcgState:
    """Immutable generator state: 64-bit accumulator plus odd stream selector."""

    state: int
    increment: int

    def __post_init__(self) -> None:
        if self.increment % 2 == 0:
            raise ValueError("increment must be odd")


def pcg_seed(seed: int, stream: int | None = None) -> PcgState:
    """Initialize a PcgState per the reference seeding procedure.

    ``stream`` defaults to ``seed`` so distinct seeds land on distinct
    sequences even when their low state bits coincide.
    """
    if stream is None:
        stream = seed
    inc = ((stream << 1) | 1) & _M64
    s = PcgState(0, inc)
    s, _ = pcg_next_u32(s)
    s = PcgState((s.state + seed) & _M64, inc)
    s, _ = pcg_next_u32(s)
    return s


def pcg_next_u32(s: PcgState) -> tuple[PcgState, int]:
    """Advance the LCG and emit one 32-bit output (XSH-RR permutation)."""
    old = s.state
    new = (old * PCG_MULTIPLIER + s.increment) & _M64
    xorshifted = (((old >> 18) ^ old) >> 27) & _M32
    rot = old >> 59
    out = ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & _M32
    return PcgState(new, s.increment), out


def uniform(s: PcgState, lo: float, hi: float) -> tuple[PcgState, float]:
    """One draw in [lo, hi) via fixed-point scaling of a single u32.

    The mapping is ``lo + (hi - lo) * u * 2**-32`` evaluated in float64; this
    is reproducible bit-for-bit across conforming IEEE-754 implementations.
    """
    if not lo < hi:
        raise ValueError("uniform requires lo < hi")
    s, u = pcg_next_u32(s)
    return s, lo + (hi - lo) * (u * 2.0**-32)


def choice(s: PcgState, n: int) -> tuple[PcgState, int]:
    """One index in [0, n) via the rejection-free multiply-shift mapping."""
    if n < 1:
        raise ValueError("choice requires n >= 1")
    s, u = pcg_next_u32(s)
    return s, (u * n) >> 32


def mix64(x: int) -> int:
    """SplitMix64 finalizer: a fixed 64-bit avalanche bijection."""
    x &= _M64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _M64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _M64
    x ^= x >> 31
    return x


def encode(run_seed: int, epoch: int, sample_id: int) -> int:
    """Derive the 4-byte augmentation seed d0 for one (sample, epoch) record.

    Pure avalanche mix of the inputs; collisions between distinct records are
    tolerated (only determinism matters), and land at the birthday rate
    expected of a 32-bit hash.
    """
    h = mix64((run_seed & _M64) ^ ENCODE_TAG)
    h = mix64((h + epoch) & _M64)
    h = mix64((h + sample_id) & _M64)
    return h & _M32


def encode_array(run_seed: int, epoch: int, sample_ids: np.ndarray) -> np.ndarray:
    """Vectorized :func:`encode` over many sample ids (uint32 output)."""
    h0 = mix64((run_seed & _M64) ^ ENCODE_TAG)
    h0 = mix64((h0 + epoch) & _M64)
    x = (np.uint64(h0) + sample_ids.astype(np.uint64)) & np.uint64(_M64)
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return (x & np.uint64(_M32)).astype(np.uint32)


def shuffle_seed(run_seed: int, epoch: int) -> int:
    """64-bit seed of the epoch permutation, recorded in each cache header."""
    return mix64((mix64((run_seed & _M64) ^ SHUFFLE_TAG) + epoch) & _M64)
