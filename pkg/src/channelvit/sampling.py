"""Channel-combination sampling.

Hierarchical channel sampling (HCS) draws the number of channels m uniformly
from {1..C} and then a uniform m-subset, so every sequence length is equally
likely during training. Independent channel dropout keeps each channel with
probability 1-p (resampling the all-dropped outcome), which concentrates mass
near m = C(1-p). Both run on an explicit xoshiro256** generator so draw
sequences are bit-reproducible across platforms.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError

_MASK = (1 << 64) - 1


def _splitmix64(state):
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK


class Xoshiro256StarStar:
    """xoshiro256** with a 64-bit seed and a 2^128 jump for worker streams."""

    _JUMP = (0x180EC6D33CFD0ABA, 0xD5A61266F0C9392C,
             0xA9582618E03FC9AA, 0x39ABDC4529B1661C)

    def __init__(self, seed):
        state = int(seed) & _MASK
        self._s = []
        for _ in range(4):
            state, out = _splitmix64(state)
            self._s.append(out)

    def next_u64(self):
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self):
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def below(self, n):
        """Unbiased uniform integer in [0, n)."""
        if n <= 0:
            raise InputError(f"below({n}): n must be positive")
        span = _MASK + 1
        limit = span - span % n
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def subset(self, n, m):
        """Uniform m-subset of {0..n-1}, returned sorted (partial Fisher-Yates)."""
        pool = list(range(n))
        for i in range(m):
            j = i + self.below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return tuple(sorted(pool[:m]))

    def split(self):
        """Return a generator at the current stream, then jump self past it."""
        child = Xoshiro256StarStar.__new__(Xoshiro256StarStar)
        child._s = list(self._s)
        self.jump()
        return child

    def jump(self):
        s = [0, 0, 0, 0]
        for word in self._JUMP:
            for bit in range(64):
                if word & (1 << bit):
                    for i in range(4):
                        s[i] ^= self._s[i]
                self.next_u64()
        self._s = s


@dataclass(frozen=True)
class ChannelCombination:
    """An ordered (strictly increasing) nonempty subset of channel indices."""

    indices: tuple
    source_channels: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if not idx:
            raise InputError("channel combination must be nonempty")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise InputError(f"indices must be strictly increasing, got {idx}")
        if idx[0] < 0 or idx[-1] >= self.source_channels:
            raise InputError(
                f"indices {idx} out of range for {self.source_channels} channels")

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def is_full(self):
        return len(self.indices) == self.source_channels


def full_combination(channels):
    return ChannelCombination(tuple(range(channels)), channels)


def hcs_sample(channels, rng):
    """Two-step draw: m ~ Uniform{1..C}, then a uniform m-subset."""
    if channels < 1:
        raise InputError("hcs_sample: channel count must be >= 1")
    m = 1 + rng.below(channels)
    return ChannelCombination(rng.subset(channels, m), channels)


def hcs_sample_from(available, channels, rng):
    """HCS restricted to an available subset (mixed-availability training)."""
    avail = tuple(sorted(available))
    if not avail:
        raise InputError("hcs_sample_from: no available channels")
    m = 1 + rng.below(len(avail))
    picked = rng.subset(len(avail), m)
    return ChannelCombination(tuple(avail[i] for i in picked), channels)


def dropout_sample(channels, p, rng):
    """Keep each channel independently with probability 1-p; never empty."""
    return dropout_sample_from(range(channels), channels, p, rng)


def dropout_sample_from(available, channels, p, rng):
    avail = tuple(sorted(available))
    if not avail:
        raise InputError("dropout_sample_from: no available channels")
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {p}")
    while True:
        kept = tuple(c for c in avail if rng.random() >= p)
        if kept:
            return ChannelCombination(kept, channels)


@dataclass
class SamplerConfig:
    mode: str = "hcs"          # hcs | dropout | none
    dropout_rate: float = 0.5  # dropout mode only
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("hcs", "dropout", "none"):
            raise ConfigurationError(f"unknown sampler mode {self.mode!r}")
        if self.mode == "dropout" and not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(
                f"dropout rate must be in [0, 1), got {self.dropout_rate}")


class ChannelSampler:
    """Stateful sampler owning its PRNG. Not shareable across threads."""

    def __init__(self, config, channels):
        if channels < 1:
            raise InputError("sampler needs at least one channel")
        self.config = config
        self.channels = channels
        self.rng = Xoshiro256StarStar(config.seed)

    def draw(self, available=None):
        avail = tuple(range(self.channels)) if available is None else tuple(sorted(available))
        if self.config.mode == "none":
            return ChannelCombination(avail, self.channels)
        if self.config.mode == "hcs":
            return hcs_sample_from(avail, self.channels, self.rng)
        return dropout_sample_from(avail, self.channels, self.config.dropout_rate, self.rng)


def exact_size_distribution(config, channels):
    """Analytic P(|S| = m) for m = 1..C (index m-1). Sums to 1."""
    if channels < 1:
        raise InputError("channel count must be >= 1")
    if config.mode == "hcs":
        return np.full(channels, 1.0 / channels)
    if config.mode == "dropout":
        p = config.dropout_rate
        probs = np.array([
            math.comb(channels, m) * (1.0 - p) ** m * p ** (channels - m)
            for m in range(1, channels + 1)
        ])
        return probs / (1.0 - p ** channels)
    if config.mode == "none":
        out = np.zeros(channels)
        out[-1] = 1.0
        return out
    raise ConfigurationError(f"unknown sampler mode {config.mode!r}")


def enumerate_combinations(channels, m):
    """All C-choose-m combinations in lexicographic order."""
    if not 1 <= m <= channels:
        raise InputError(f"m={m} out of range [1, {channels}]")
    return [ChannelCombination(c, channels)
            for c in itertools.combinations(range(channels), m)]


def all_combinations(channels):
    """Every nonempty combination, sizes ascending, lexicographic within size."""
    out = []
    for m in range(1, channels + 1):
        out.extend(enumerate_combinations(channels, m))
    return out
