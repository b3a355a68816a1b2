"""Multi-mode time-bin decoder (unbalanced interferometer) and detectors.

A photon passing the decoder lands in one of three arrival slots.  With input
amplitudes (a, b) over (|E>, |L>):

* early slot (short path, early bin): |a|^2 / 2, split evenly over both ports
* late slot (long path, late bin): |b|^2 / 2, split evenly
* central slot: the two remaining paths overlap and interfere,
  Plus port (|a|^2 + |b|^2 + 2 V Re(a e^{i phi} b*)) / 4, Minus port with the
  cross term negated.

Arrival offsets are 0, +bin_separation and +2 bin_separation after
emission + time of flight (early slot first).
"""
from __future__ import annotations

import enum
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import TimeBinState
from .source import PulseRecord

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


class Slot(enum.IntEnum):
    EARLY = -1
    CENTRAL = 0
    LATE = 1


class Port(enum.IntEnum):
    PLUS = 0
    MINUS = 1


class MeasurementOutcome(NamedTuple):
    slot: Slot
    port: Port


OUTCOMES = tuple(MeasurementOutcome(s, p) for s in Slot for p in Port)


@dataclass
class DecoderConfig:
    visibility: float = 0.97
    throughput: float = 0.81
    phase_B: float = 0.0  # rad
    phase_drift_rms: float = 0.05  # rad / sqrt(s)
    bin_separation: int = 2000  # ps
    # the operator re-optimises the compensation phase this often (s)
    rezero_interval: float = 10.0

    def __post_init__(self):
        if not 0 <= self.visibility <= 1:
            raise ValueError("visibility must be in [0, 1]")
        if not 0 <= self.throughput <= 1:
            raise ValueError("throughput must be in [0, 1]")
        if self.phase_drift_rms < 0:
            raise ValueError("phase_drift_rms must be >= 0")


@dataclass
class DetectorConfig:
    jitter_fwhm: float = 500.0  # ps
    background_per_pulse: float = 3.65e-7
    num_channels: int = 2

    def __post_init__(self):
        if self.jitter_fwhm <= 0:
            raise ValueError("jitter_fwhm must be positive")
        if not 0 <= self.background_per_pulse < 1:
            raise ValueError("background_per_pulse must be in [0, 1)")
        if self.num_channels not in (1, 2):
            raise ValueError("num_channels must be 1 or 2")

    @property
    def jitter_sigma(self) -> float:
        return self.jitter_fwhm / FWHM_PER_SIGMA


@dataclass(frozen=True)
class DetectionEvent:
    timestamp: int  # ps
    channel: int
    is_background: bool = False


def measurement_probabilities(state: TimeBinState, delta_phase: float,
                              visibility: float) -> dict[MeasurementOutcome, float]:
    if abs(visibility) > 1:
        raise ValueError(f"visibility {visibility} outside [-1, 1]")
    a, b = TimeBinState(state).amplitudes
    pa, pb = abs(a) ** 2, abs(b) ** 2
    cross = 2.0 * visibility * (a * complex(math.cos(delta_phase), math.sin(delta_phase))
                                * b.conjugate()).real
    return {
        MeasurementOutcome(Slot.EARLY, Port.PLUS): pa / 4,
        MeasurementOutcome(Slot.EARLY, Port.MINUS): pa / 4,
        MeasurementOutcome(Slot.CENTRAL, Port.PLUS): (pa + pb + cross) / 4,
        MeasurementOutcome(Slot.CENTRAL, Port.MINUS): (pa + pb - cross) / 4,
        MeasurementOutcome(Slot.LATE, Port.PLUS): pb / 4,
        MeasurementOutcome(Slot.LATE, Port.MINUS): pb / 4,
    }


_AMP = np.array([TimeBinState(s).amplitudes for s in range(4)])


def outcome_table(states: np.ndarray, delta_phase, visibility: float) -> np.ndarray:
    """Vectorised measurement_probabilities: (N, 6) in OUTCOMES order."""
    amp = _AMP[np.asarray(states, dtype=int)]
    a, b = amp[:, 0], amp[:, 1]
    pa, pb = np.abs(a) ** 2, np.abs(b) ** 2
    cross = 2.0 * visibility * (a * np.exp(1j * np.asarray(delta_phase)) * b.conj()).real
    return np.stack([pa / 4, pa / 4, (pa + pb + cross) / 4, (pa + pb - cross) / 4,
                     pb / 4, pb / 4], axis=1)


def sample_outcomes(table: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw one outcome per row; returns (slot, port) arrays."""
    cdf = np.cumsum(table, axis=1)
    u = rng.random(table.shape[0]) * cdf[:, -1]
    k = (u[:, None] >= cdf).sum(axis=1)
    k = np.minimum(k, 5)
    return k // 2 - 1, k % 2


def detect_pulse(pulse: PulseRecord, surviving_photons: int, decoder: DecoderConfig,
                 detector: DetectorConfig, rng: np.random.Generator, *,
                 period_ps: float = 1e12 / 1.5e8, time_of_flight: int = 0,
                 phase: float | None = None) -> list[DetectionEvent]:
    """Detection events produced by one pulse.

    ``phase`` is the instantaneous interferometer phase mismatch; it defaults to
    ``decoder.phase_B`` (no drift).  Photons leaving on a port without a
    detector (num_channels=1) are lost.
    """
    if phase is None:
        phase = decoder.phase_B
    events = []
    n = int(rng.binomial(surviving_photons, decoder.throughput)) if surviving_photons else 0
    if n:
        state = pulse.state.flipped() if pulse.flipped else pulse.state
        table = outcome_table(np.full(n, int(state)), phase, decoder.visibility)
        slots, ports = sample_outcomes(table, rng)
        jitter = rng.normal(0.0, detector.jitter_sigma, n)
        base = pulse.emission_time + time_of_flight + decoder.bin_separation
        for s, p, j in zip(slots, ports, jitter):
            if p >= detector.num_channels:
                continue
            t = int(round(base + s * decoder.bin_separation + j))
            events.append(DetectionEvent(max(t, 0), int(p)))
    if detector.background_per_pulse and rng.random() < detector.background_per_pulse:
        t = pulse.emission_time + time_of_flight + int(rng.random() * period_ps)
        events.append(DetectionEvent(t, int(rng.integers(detector.num_channels)), True))
    events.sort(key=lambda e: e.timestamp)
    return events


def optimize_phase(qber_estimator: Callable[[float], float], search_grid: Sequence[float]) -> float:
    """Grid phase with the lowest estimated QBER; ties go to the smallest phase."""
    grid = sorted(float(g) for g in search_grid)
    if not grid:
        raise ValueError("empty phase search grid")
    best, best_q = grid[0], qber_estimator(grid[0])
    for phi in grid[1:]:
        q = qber_estimator(phi)
        if q < best_q:
            best, best_q = phi, q
    return best


def phase_grid(step: float = 0.05) -> np.ndarray:
    """Symmetric grid over (-pi, pi] that contains 0."""
    k = int(math.pi // step)
    return step * np.arange(-k, k + 1)


class PhaseDrift:
    """Wiener-process phase drift between encoder and decoder interferometers.

    Every ``rezero_interval`` seconds the compensation plate is re-optimised
    with :func:`optimize_phase` against the expected phase-basis QBER, leaving a
    residual no larger than half the grid step.
    """

    DT = 0.1  # s, sampling step of the drift

    def __init__(self, decoder: DecoderConfig, duration: float, seed: int, grid_step: float = 0.05):
        n = int(math.ceil(max(duration, self.DT) / self.DT)) + 1
        rng = np.random.default_rng([seed, 0xD21F7])
        steps = rng.normal(0.0, decoder.phase_drift_rms * math.sqrt(self.DT), n)
        steps[0] = 0.0
        walk = np.cumsum(steps) + decoder.phase_B
        self.phase = np.empty(n)
        per = max(int(round(decoder.rezero_interval / self.DT)), 1)
        grid = phase_grid(grid_step)
        v = decoder.visibility
        for lo in range(0, n, per):
            off = walk[lo]
            comp = optimize_phase(lambda p: (1 - v * math.cos(off + p)) / 2, grid)
            self.phase[lo:lo + per] = walk[lo:lo + per] + comp

    def at(self, t_s) -> np.ndarray:
        k = np.clip((np.asarray(t_s, dtype=float) / self.DT).astype(np.int64), 0, self.phase.size - 1)
        return self.phase[k]
