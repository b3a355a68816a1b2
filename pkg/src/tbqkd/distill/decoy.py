"""Vacuum + weak decoy bounds on single-photon yield/error and the asymptotic key rate."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..core import binary_entropy

E0 = 0.5  # error rate of background clicks


@dataclass(frozen=True)
class DecoyObservables:
    Q_mu: float
    Q_nu: float
    E_mu: float
    E_nu: float
    Y0: float
    mu: float
    nu: float

    def __post_init__(self):
        if not 0 < self.nu < self.mu:
            raise ValueError("need 0 < nu < mu")
        for name in ("Q_mu", "Q_nu", "E_mu", "E_nu", "Y0"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass(frozen=True)
class DecoyBounds:
    Y1_lower: float
    e1_upper: float
    Q1_lower: float

    @property
    def valid(self) -> bool:
        """False when the yield bound collapsed to 0 (no key can be extracted)."""
        return self.Y1_lower > 0


def decoy_bounds(obs: DecoyObservables) -> DecoyBounds:
    mu, nu = obs.mu, obs.nu
    den = mu * nu - nu * nu
    if den <= 0:
        raise ValueError("mu*nu - nu^2 must be positive")
    y1 = (mu / den) * (obs.Q_nu * math.exp(nu) - obs.Q_mu * math.exp(mu) * nu**2 / mu**2
                       - (mu**2 - nu**2) / mu**2 * obs.Y0)
    y1 = min(max(y1, 0.0), 1.0)
    if y1 > 0:
        e1 = (obs.E_nu * obs.Q_nu * math.exp(nu) - E0 * obs.Y0) / (y1 * nu)
        e1 = min(max(e1, 0.0), 0.5)
    else:
        e1 = 0.5
    return DecoyBounds(y1, e1, y1 * mu * math.exp(-mu))


@dataclass
class KeyRateReport:
    rate_per_pulse: float
    rate_per_second: float
    ec_cost: float  # Q_mu f H2(E_mu), bits per pulse before the q factor
    single_photon_term: float  # Q1 (1 - H2(e1))
    q: float
    f_EC: float
    repetition: float
    signal_fraction: float

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in asdict(self).items())


def asymptotic_key_rate(obs: DecoyObservables, bounds: DecoyBounds, f_EC: float = 1.17,
                        q: float = 0.5, repetition: float = 1.5e8,
                        signal_fraction: float = 0.8) -> KeyRateReport:
    ec = obs.Q_mu * f_EC * binary_entropy(obs.E_mu)
    sp = bounds.Q1_lower * (1 - binary_entropy(bounds.e1_upper)) if bounds.valid else 0.0
    r = max(0.0, q * (sp - ec))
    return KeyRateReport(r, r * repetition * signal_fraction, ec, sp, q, f_EC, repetition,
                         signal_fraction)


def poisson_observables(eta: float, mu: float, nu: float, Y0: float, e_d: float,
                        E_mu: float | None = None) -> DecoyObservables:
    """Expected gains and error rates of a Poissonian source over a channel of
    total transmittance ``eta`` with misalignment error ``e_d``.

    ``E_mu`` overrides the modelled signal error rate (e.g. with a measured QBER).
    """
    def gain(x):
        return Y0 + 1 - math.exp(-eta * x)

    def eq(x):
        return e_d * (1 - math.exp(-eta * x)) + E0 * Y0

    q_mu, q_nu = gain(mu), gain(nu)
    e_mu = eq(mu) / q_mu if E_mu is None else E_mu
    return DecoyObservables(q_mu, q_nu, e_mu, eq(nu) / q_nu, Y0, mu, nu)


def true_single_photon(eta: float, Y0: float, e_d: float) -> tuple[float, float]:
    """Actual (Y1, e1) of the Poissonian channel model."""
    y1 = Y0 + eta - Y0 * eta
    e1 = (E0 * Y0 + e_d * eta * (1 - Y0)) / y1
    return y1, e1


def sample_observables(eta: float, mu: float, nu: float, Y0: float, e_d: float, n_mu: int,
                       n_nu: int, n_0: int, rng: np.random.Generator) -> DecoyObservables:
    """Count-level draw of the observables: per-pulse photon numbers, Bernoulli
    channel and detector, independent background, and misalignment/background errors."""
    def one(x, n):
        # clicks from signal photons: Binomial(n, 1 - e^{-eta x}); background on top
        n_sig = rng.binomial(n, 1 - math.exp(-eta * x))
        n_bg = rng.binomial(n - n_sig, Y0)
        errs = rng.binomial(n_sig, e_d) + rng.binomial(n_bg, E0)
        return (n_sig + n_bg) / n, errs / max(n_sig + n_bg, 1)

    q_mu, e_mu = one(mu, n_mu)
    q_nu, e_nu = one(nu, n_nu)
    y0 = rng.binomial(n_0, Y0) / n_0
    return DecoyObservables(q_mu, q_nu, e_mu, e_nu, y0, mu, nu)


def pa_length(n: int, bounds: DecoyBounds, Q_mu: float, leak_ec: int) -> int:
    """Secure output length for ``n`` reconciled bits.

    Only the single-photon fraction phi = Q1/Q_mu of the bits is credited:
    floor(n phi (1 - H2(e1)) - leak_ec), clamped to [0, n - leak_ec].
    """
    if n <= 0 or not bounds.valid or Q_mu <= 0:
        return 0
    phi = min(bounds.Q1_lower / Q_mu, 1.0)
    m = math.floor(n * phi * (1 - binary_entropy(bounds.e1_upper)) - leak_ec)
    return int(max(0, min(m, n - leak_ec)))
