"""Free-space channel: loss, scintillation, beam wander and beacon polarization drift."""
from __future__ import annotations

import enum
import math
from collections.abc import Iterable, Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .source import PS_PER_S, PulseRecord

# Tilt-variance coefficient for the two-axis centroid jitter of a beam of
# diameter D: sigma^2 = 0.364 (D lambda / r0^2)^(5/3).
TILT_COEFF = 0.364


@dataclass
class ChannelConfig:
    loss_db: float = 38.4
    distance: float = 1200.0  # m
    r0: float = 0.0783  # m
    beam_diameter: float = 0.12  # m
    wavelength_beacon: float = 850e-9  # m
    wavelength_signal: float = 785e-9  # m
    turbulence_corr_time: float = 10.0  # ms
    scintillation_index: float = 0.0
    rng_seed: int = 2

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.loss_db < 0:
            raise ValueError("loss_db must be >= 0")
        if self.r0 <= 0 or self.distance <= 0 or self.beam_diameter <= 0:
            raise ValueError("r0, distance and beam_diameter must be positive")
        if self.scintillation_index < 0:
            raise ValueError("scintillation_index must be >= 0")
        if self.turbulence_corr_time <= 0:
            raise ValueError("turbulence_corr_time must be positive")

    @property
    def mean_transmittance(self) -> float:
        return transmittance(self.loss_db)


def transmittance(loss_db: float) -> float:
    """Power transmittance 10^(-loss/10) of a channel with ``loss_db`` attenuation."""
    if loss_db < 0:
        raise ValueError(f"loss_db={loss_db} is negative")
    return 10.0 ** (-loss_db / 10.0)


class Scintillation:
    """Unit-mean lognormal transmittance factor s(t) with AR(1) log-correlation.

    The log-amplitude is sampled on a grid of ``corr_time / 4`` and held
    piecewise constant in between.  ``scintillation_index`` is Var[s].
    """

    STEPS_PER_CORR = 4

    def __init__(self, scintillation_index: float, corr_time_ms: float, seed: int):
        self.index = float(scintillation_index)
        self.dt_ps = max(1, int(corr_time_ms * 1e9 / self.STEPS_PER_CORR))
        self.rho = math.exp(-1.0 / self.STEPS_PER_CORR)
        self.sigma2 = math.log1p(self.index)
        self._rng = np.random.default_rng([seed, 0x5C1])
        self._log = np.empty(0)
        self._state = None

    def _extend(self, n_steps: int) -> None:
        have = self._log.size
        if n_steps <= have:
            return
        k = max(n_steps - have, 1024)
        sd = math.sqrt(self.sigma2)
        innov = self._rng.standard_normal(k) * sd * math.sqrt(1 - self.rho**2)
        if self._state is None:
            innov[0] = self._rng.standard_normal() * sd
            zi = np.zeros(1)
        else:
            zi = np.array([self.rho * self._state])
        x, _ = lfilter([1.0], [1.0, -self.rho], innov, zi=zi)
        self._state = x[-1]
        self._log = np.concatenate([self._log, x])

    def values(self, t_ps) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t_ps, dtype=np.int64))
        if self.index == 0:
            return np.ones(t.shape)
        step = t // self.dt_ps
        if step.size:
            self._extend(int(step.max()) + 1)
        return np.exp(self._log[step] - self.sigma2 / 2)


def apply_channel(pulses: Iterable[PulseRecord], config: ChannelConfig,
                  blocked: Iterable[tuple[float, float]] = ()) -> Iterator[tuple[PulseRecord, int]]:
    """Thin each pulse's photons by eta(t) = eta_bar * s(t).

    ``blocked`` lists (start_s, end_s) intervals during which the beam is
    intentionally interrupted (transmittance 0).
    """
    config.validate()
    eta_bar = config.mean_transmittance
    scint = Scintillation(config.scintillation_index, config.turbulence_corr_time, config.rng_seed)
    rng = np.random.default_rng([config.rng_seed, 0xC4A])
    blocked = [(a * PS_PER_S, b * PS_PER_S) for a, b in blocked]
    for pulse in pulses:
        if pulse.photon_count == 0:
            yield pulse, 0
            continue
        t = pulse.emission_time
        if any(a <= t < b for a, b in blocked):
            yield pulse, 0
            continue
        eta = min(1.0, eta_bar * float(scint.values(t)[0]))
        yield pulse, int(rng.binomial(pulse.photon_count, eta))


# --- beam wander ---------------------------------------------------------------

@dataclass(frozen=True)
class CentroidSample:
    t: float  # s
    theta_x: float  # rad
    theta_y: float  # rad


def two_axis_tilt_variance(r0: float, D: float, wavelength: float) -> float:
    return TILT_COEFF * (D * wavelength / r0**2) ** (5.0 / 3.0)


def synth_centroid_series(r0, D: float, wavelength: float, frame_rate: float,
                          duration: float, corr_time: float = 10.0,
                          seed: int = 0) -> list[CentroidSample]:
    """Gaussian AR(1) beam-wander series whose stationary 2-axis variance follows r0.

    ``r0`` may be a scalar or an array with one value per second, giving a
    slowly varying turbulence strength.  ``corr_time`` is in ms.
    """
    n = int(round(frame_rate * duration))
    if n < 2:
        raise ValueError("centroid series needs at least two frames")
    if D <= 0 or wavelength <= 0 or frame_rate <= 0 or corr_time < 0:
        raise ValueError("D, wavelength and frame_rate must be positive")
    t = np.arange(n) / frame_rate
    r0_arr = np.asarray(r0, dtype=float)
    if r0_arr.ndim == 0:
        r0_t = np.full(n, float(r0_arr))
    else:
        r0_t = r0_arr[np.minimum(t.astype(int), r0_arr.size - 1)]
    if np.any(r0_t <= 0):
        raise ValueError("r0 must be positive")
    axis_sd = np.sqrt(two_axis_tilt_variance(r0_t, D, wavelength) / 2)
    rho = math.exp(-1.0 / (frame_rate * corr_time * 1e-3)) if corr_time > 0 else 0.0
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((2, n))
    z[:, 1:] *= math.sqrt(1 - rho**2)
    unit = lfilter([1.0], [1.0, -rho], z, axis=1)
    xy = unit * axis_sd
    return [CentroidSample(float(ti), float(x), float(y)) for ti, x, y in zip(t, xy[0], xy[1])]


def r0_trajectory(mean: float, relative_std: float, duration: int, corr_time: float = 5.0,
                  seed: int = 0) -> np.ndarray:
    """Per-second lognormal r0 path with given mean and relative standard deviation.

    ``corr_time`` (s) sets the AR(1) memory of the log.
    """
    n = max(int(duration), 1)
    s2 = math.log1p(relative_std**2)
    rho = math.exp(-1.0 / corr_time) if corr_time > 0 else 0.0
    rng = np.random.default_rng([seed, 0x20])
    z = rng.standard_normal(n)
    z[1:] *= math.sqrt(1 - rho**2)
    x = lfilter([1.0], [1.0, -rho], z) * math.sqrt(s2)
    return mean * np.exp(x - s2 / 2)


def write_centroids(path, samples: Iterable[CentroidSample]) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for s in samples:
            fh.write(f"{s.t!r},{s.theta_x!r},{s.theta_y!r}\n")


def read_centroids(path) -> list[CentroidSample]:
    out = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        line = line.strip()
        if not line or line.startswith("#") or line[0].isalpha():
            continue
        t, x, y = (float(v) for v in line.split(","))
        out.append(CentroidSample(t, x, y))
    return out


# --- polarization drift --------------------------------------------------------

class DriftMode(enum.Enum):
    STATIC = "static"
    RANDOM_WALK = "random_walk"


@dataclass
class PolarizationDriftConfig:
    mode: DriftMode = DriftMode.STATIC
    step_angle_rms: float = 0.3  # rad per step
    step_rate: float = 50.0  # Hz
    rng_seed: int = 3
    # Hand manipulation is intermittent: the walk only moves while "active".
    # active_fraction = 1 keeps it moving all the time.
    active_fraction: float = 1.0
    dwell_time: float = 5.0  # s, mean length of an active spell

    def __post_init__(self):
        self.mode = DriftMode(self.mode)
        if self.step_angle_rms < 0:
            raise ValueError("step_angle_rms must be >= 0")
        if not 0 < self.active_fraction <= 1:
            raise ValueError("active_fraction must be in (0, 1]")


_PAULI = np.array([[[0, 1], [1, 0]], [[0, -1j], [1j, 0]], [[1, 0], [0, -1]]], dtype=complex)


def rotation(angles: np.ndarray) -> np.ndarray:
    """exp(-i (a sx + b sy + c sz) / 2) for a stack of angle triples (..., 3)."""
    angles = np.asarray(angles, dtype=float)
    theta = np.linalg.norm(angles, axis=-1)
    safe = np.where(theta > 0, theta, 1.0)
    n = angles / safe[..., None]
    gen = np.einsum("...k,kij->...ij", n, _PAULI)
    c = np.cos(theta / 2)[..., None, None]
    s = np.sin(theta / 2)[..., None, None]
    return c * np.eye(2) - 1j * s * gen


def _reunitarize(u: np.ndarray) -> np.ndarray:
    w, _, vh = np.linalg.svd(u)
    return w @ vh


def polarization_trajectory(config: PolarizationDriftConfig, duration: float) -> np.ndarray:
    """Stack (K, 2, 2) of cumulative channel unitaries, one per drift step."""
    k = max(int(round(duration * config.step_rate)), 1)
    out = np.empty((k, 2, 2), dtype=complex)
    out[:] = np.eye(2)
    if config.mode is DriftMode.STATIC or config.step_angle_rms == 0:
        return out
    rng = np.random.default_rng(config.rng_seed)
    angles = rng.normal(0.0, config.step_angle_rms, size=(k, 3))
    if config.active_fraction < 1:
        angles *= _activity(k, config, rng)[:, None]
    steps = rotation(angles)
    u = np.eye(2, dtype=complex)
    for i in range(1, k):
        u = steps[i] @ u
        if i % 64 == 0:
            u = _reunitarize(u)
        out[i] = u
    return out


def _activity(k: int, config: PolarizationDriftConfig, rng) -> np.ndarray:
    """Two-state (idle/active) Markov gate sampled per drift step."""
    f = config.active_fraction
    p_off = 1.0 / (config.dwell_time * config.step_rate)
    p_on = p_off * f / (1 - f)
    u = rng.random(k)
    gate = np.empty(k)
    state = rng.random() < f
    for i in range(k):
        gate[i] = state
        state = (u[i] >= p_off) if state else (u[i] < p_on)
    return gate
