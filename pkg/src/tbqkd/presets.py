"""Reference link configurations and the analytic QBER budget used to calibrate them."""
from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
from scipy.optimize import brentq
from scipy.special import erf

from .channel import DriftMode, PolarizationDriftConfig
from .config import RunConfig
from .receiver import PhaseDrift

FULL_RATE = 1.5e8

# Measured link parameters: (mu, nu, Y0, loss incl. decoder, QBER, key rate bits/s)
LINK_PRESETS = {
    "turbulent": dict(mu=0.488, nu=0.082, Y0=3.65e-7, loss_db=38.4, qber=0.0532, rate=154.2),
    "depolarizing": dict(mu=0.520, nu=0.094, Y0=3.45e-7, loss_db=38.8, qber=0.0508, rate=138.8),
}


def _mean_cos_drift(cfg: RunConfig, grid_step: float = 0.05) -> float:
    """E[cos(phase)] of the re-zeroed Wiener drift, averaged over a re-zero interval."""
    d = cfg.decoder
    h = grid_step / 2
    residual = math.sin(h) / h  # E cos r, r ~ U(-h, h)
    k = np.arange(max(int(round(d.rezero_interval / PhaseDrift.DT)), 1))
    decay = np.exp(-0.5 * d.phase_drift_rms**2 * PhaseDrift.DT * k).mean()
    return residual * float(decay) * math.cos(d.phase_B) if d.phase_drift_rms else residual


def qber_budget(cfg: RunConfig) -> dict[str, float]:
    """Expected sifted QBER over all intensity classes, and its ingredients.

    Time basis: only preparation flips err.  Phase basis: visibility and phase
    error e_x, XOR-combined with flips.  Background clicks in the coincidence
    windows are sifted at rate 1/2 and err at rate 1/2.
    """
    src, ch, dec, det, co = cfg.source, cfg.channel, cfg.decoder, cfg.detector, cfg.coincidence
    eps = src.intrinsic_error
    e_x = (1 - dec.visibility * _mean_cos_drift(cfg)) / 2
    e_sig = 0.5 * eps + 0.5 * (e_x + eps * (1 - 2 * e_x))
    eta = ch.mean_transmittance * dec.throughput
    capture = erf(co.window / 2 / (det.jitter_sigma * math.sqrt(2)))
    props = np.asarray(src.class_proportions)
    clicks = props * -np.expm1(-src.mean_photons * eta)
    S = 0.5 * capture * clicks.sum()
    B = 0.5 * det.background_per_pulse * min(3 * co.window / src.period_ps, 1.0)
    return {"qber": (S * e_sig + 0.5 * B) / (S + B), "e_x": e_x, "signal": S, "background": B,
            "qber_signal": e_sig}


def calibrate_intrinsic_error(cfg: RunConfig, target: float) -> float:
    """Source preparation error that makes :func:`qber_budget` hit ``target``."""
    def f(eps):
        return qber_budget(replace_source(cfg, intrinsic_error=eps))["qber"] - target

    if f(0.0) > 0:
        raise ValueError(f"target QBER {target} below the floor {f(0.0) + target:.4f}")
    return brentq(f, 0.0, 0.5, xtol=1e-12)


def replace_source(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, source=replace(cfg.source, **kw))


def link_preset(kind: str = "turbulent", rate_scale: float = 1.0, calibrate: bool = True) -> RunConfig:
    """Link configured to one of the reference operating points (turbulent or depolarizing).

    ``loss_db`` there includes the decoder throughput, so the channel carries
    the remainder.  At a reduced repetition rate the per-pulse background is
    scaled up so the background rate in Hz, and hence the background inside
    the coincidence windows, is unchanged; the SNR threshold scales with the
    signal rate.
    """
    p = LINK_PRESETS[kind]
    cfg = RunConfig()
    rate = FULL_RATE * rate_scale
    cfg.source = replace(cfg.source, repetition_rate=rate, mu_signal=p["mu"], mu_decoy=p["nu"])
    cfg.decoder = replace(cfg.decoder)
    cfg.channel = replace(cfg.channel, loss_db=p["loss_db"] + 10 * math.log10(cfg.decoder.throughput))
    cfg.detector = replace(cfg.detector, background_per_pulse=p["Y0"] / rate_scale)
    cfg.coincidence = replace(cfg.coincidence, snr_threshold=500.0 * rate_scale)
    cfg.decoy = replace(cfg.decoy, loss_db=p["loss_db"], qber=p["qber"], background=p["Y0"])
    cfg.simulation = replace(cfg.simulation, duration=600.0)
    if kind == "depolarizing":
        cfg.drift = PolarizationDriftConfig(DriftMode.RANDOM_WALK, step_angle_rms=0.6, step_rate=50.0,
                                            rng_seed=3, active_fraction=0.5, dwell_time=5.0)
    if calibrate:
        cfg = replace_source(cfg, intrinsic_error=calibrate_intrinsic_error(cfg, p["qber"]))
    return cfg
