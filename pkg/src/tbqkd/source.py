"""Transmitter model: weak coherent time-bin pulses with signal/decoy/vacuum intensities.

Every per-pulse quantity (state, intensity class, photon number, preparation
flip) is a pure function of ``(rng_seed, pulse index)`` via a counter-based
hash.  A pulse train is therefore never materialised: any slice can be
evaluated independently, which makes chunked or parallel generation identical
to sequential generation by construction.
"""
from __future__ import annotations

import enum
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import TimeBinState, check_probability

PS_PER_S = 10**12


class Intensity(enum.IntEnum):
    SIGNAL = 0
    DECOY = 1
    VACUUM = 2


@dataclass(frozen=True)
class IntensityClass:
    kind: Intensity
    mean_photons: float

    def __post_init__(self):
        if self.mean_photons < 0:
            raise ValueError("mean photon number must be non-negative")
        if self.kind is Intensity.VACUUM and self.mean_photons != 0:
            raise ValueError("vacuum class must have zero mean photon number")


@dataclass
class SourceConfig:
    repetition_rate: float = 1.5e8  # Hz
    pulse_width: float = 300.0  # ps FWHM
    bin_separation: int = 2000  # ps
    mu_signal: float = 0.488
    mu_decoy: float = 0.082
    class_proportions: tuple[float, float, float] = (0.80, 0.14, 0.06)
    intrinsic_error: float = 0.02
    rng_seed: int = 1

    def __post_init__(self):
        self.class_proportions = tuple(float(p) for p in self.class_proportions)
        self.validate()

    def validate(self) -> None:
        if self.repetition_rate <= 0:
            raise ValueError("repetition_rate must be positive")
        if len(self.class_proportions) != 3:
            raise ValueError("class_proportions needs (signal, decoy, vacuum)")
        for p in self.class_proportions:
            check_probability(p, "class proportion")
        if abs(sum(self.class_proportions) - 1.0) > 1e-9:
            raise ValueError(f"class_proportions sum to {sum(self.class_proportions)}, not 1")
        if not self.mu_signal > self.mu_decoy > 0:
            raise ValueError("need mu_signal > mu_decoy > 0")
        if self.bin_separation <= self.pulse_width:
            raise ValueError("bin_separation must exceed the pulse width")
        # early, central and late arrival slots of one pulse must fit in a period
        if self.period_ps <= 2 * self.bin_separation + self.pulse_width:
            raise ValueError("repetition period too short for three arrival slots")
        check_probability(self.intrinsic_error, "intrinsic_error")

    @property
    def period(self) -> Fraction:
        """Exact pulse period in ps."""
        return Fraction(PS_PER_S) / Fraction(self.repetition_rate)

    @property
    def period_ps(self) -> float:
        return float(self.period)

    def intensity(self, kind: Intensity) -> IntensityClass:
        mu = {Intensity.SIGNAL: self.mu_signal, Intensity.DECOY: self.mu_decoy,
              Intensity.VACUUM: 0.0}[Intensity(kind)]
        return IntensityClass(Intensity(kind), mu)

    @property
    def mean_photons(self) -> np.ndarray:
        """Mean photon number indexed by Intensity value."""
        return np.array([self.mu_signal, self.mu_decoy, 0.0])


@dataclass(frozen=True)
class PulseRecord:
    index: int
    emission_time: int  # ps
    state: TimeBinState
    intensity: IntensityClass
    photon_count: int
    # ground truth: the prepared state came out orthogonal to the intended one
    flipped: bool = False


# --- counter-based hashing -------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

STREAM_STATE = 1
STREAM_CLASS = 2
STREAM_PHOTON = 3
STREAM_FLIP = 4


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _stream_key(seed: int, stream: int) -> np.uint64:
    base = np.array([(seed * 0x100000001B3 + stream) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return _mix(base + _GOLDEN)[0]


def hash_uniform(seed: int, stream: int, index) -> np.ndarray:
    """Uniform [0, 1) doubles that depend only on (seed, stream, index)."""
    idx = np.atleast_1d(np.asarray(index)).astype(np.uint64)
    with np.errstate(over="ignore"):
        z = _mix(idx * _GOLDEN + _stream_key(seed, stream))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def _poisson_inverse(u: np.ndarray, mean: np.ndarray, kmax: int = 40) -> np.ndarray:
    """Poisson draws by CDF inversion of given uniforms."""
    u = np.asarray(u, dtype=float)
    mean = np.broadcast_to(np.asarray(mean, dtype=float), u.shape)
    out = np.zeros(u.shape, dtype=np.int64)
    term = np.exp(-mean)
    cdf = term.copy()
    active = u >= cdf
    for k in range(1, kmax):
        if not active.any():
            break
        out[active] = k
        term = term * mean / k
        cdf = cdf + term
        active &= u >= cdf
    return out


# --- pulse train -------------------------------------------------------------

class PulseTrain(Sequence):
    """Lazily evaluated, index-addressable sequence of PulseRecord."""

    def __init__(self, config: SourceConfig, n_pulses: int, start: int = 0):
        config.validate()
        self.config = config
        self.n_pulses = int(n_pulses)
        self.start = int(start)
        period = config.period
        self._num = period.numerator
        self._den = period.denominator

    def __len__(self) -> int:
        return self.n_pulses

    def __getitem__(self, i):
        if isinstance(i, slice):
            lo, hi, step = i.indices(self.n_pulses)
            if step != 1:
                raise ValueError("PulseTrain slices must be contiguous")
            return PulseTrain(self.config, hi - lo, self.start + lo)
        if i < 0:
            i += self.n_pulses
        if not 0 <= i < self.n_pulses:
            raise IndexError(i)
        idx = self.start + i
        kind = Intensity(int(self.intensities(idx)[0]))
        return PulseRecord(
            index=idx,
            emission_time=int(self.times(idx)[0]),
            state=TimeBinState(int(self.states(idx)[0])),
            intensity=self.config.intensity(kind),
            photon_count=int(self.photons(idx)[0]),
            flipped=bool(self.flips(idx)[0]),
        )

    def __iter__(self) -> Iterator[PulseRecord]:
        for lo, arr in self.chunks():
            for k in range(len(arr["index"])):
                kind = Intensity(int(arr["intensity"][k]))
                yield PulseRecord(
                    index=int(arr["index"][k]),
                    emission_time=int(arr["time"][k]),
                    state=TimeBinState(int(arr["state"][k])),
                    intensity=self.config.intensity(kind),
                    photon_count=int(arr["photons"][k]),
                    flipped=bool(arr["flipped"][k]),
                )

    # Vectorised per-index accessors.  ``idx`` are absolute pulse indices.

    def times(self, idx) -> np.ndarray:
        """Emission time round(idx * period) in integer ps."""
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        return (2 * idx * self._num + self._den) // (2 * self._den)

    def states(self, idx) -> np.ndarray:
        u = hash_uniform(self.config.rng_seed, STREAM_STATE, idx)
        return np.minimum((u * 4).astype(np.int8), 3)

    def intensities(self, idx) -> np.ndarray:
        u = hash_uniform(self.config.rng_seed, STREAM_CLASS, idx)
        p_sig, p_dec, _ = self.config.class_proportions
        out = np.full(u.shape, Intensity.VACUUM, dtype=np.int8)
        out[u < p_sig + p_dec] = Intensity.DECOY
        out[u < p_sig] = Intensity.SIGNAL
        return out

    def photons(self, idx) -> np.ndarray:
        kinds = self.intensities(idx)
        u = hash_uniform(self.config.rng_seed, STREAM_PHOTON, idx)
        return _poisson_inverse(u, self.config.mean_photons[kinds])

    def flips(self, idx) -> np.ndarray:
        u = hash_uniform(self.config.rng_seed, STREAM_FLIP, idx)
        return u < self.config.intrinsic_error

    def nearest_index(self, t_ps) -> np.ndarray:
        """Index of the pulse whose emission time is closest to ``t_ps``."""
        t = np.atleast_1d(np.asarray(t_ps, dtype=np.int64))
        return (2 * t * self._den + self._num) // (2 * self._num)

    def arrays(self, lo: int = 0, hi: int | None = None) -> dict[str, np.ndarray]:
        hi = self.n_pulses if hi is None else min(hi, self.n_pulses)
        idx = np.arange(self.start + lo, self.start + hi, dtype=np.int64)
        kinds = self.intensities(idx)
        u = hash_uniform(self.config.rng_seed, STREAM_PHOTON, idx)
        return {
            "index": idx,
            "time": self.times(idx),
            "state": self.states(idx),
            "intensity": kinds,
            "photons": _poisson_inverse(u, self.config.mean_photons[kinds]),
            "flipped": self.flips(idx),
        }

    def chunks(self, size: int = 1 << 20) -> Iterator[tuple[int, dict[str, np.ndarray]]]:
        for lo in range(0, self.n_pulses, size):
            yield lo, self.arrays(lo, lo + size)


def generate_pulse_train(config: SourceConfig, duration: float) -> PulseTrain:
    """Pulse train covering ``duration`` seconds: floor(duration * rate) pulses."""
    if duration < 0:
        raise ValueError("duration must be non-negative")
    config.validate()
    # round first so that e.g. 0.3 s * 1.5e8 Hz is not floored to 44999999
    n = math.floor(round(duration * config.repetition_rate, 6))
    return PulseTrain(config, n)


def sample_photon_number(intensity: IntensityClass, rng: np.random.Generator) -> int:
    if intensity.mean_photons == 0:
        return 0
    return int(rng.poisson(intensity.mean_photons))
