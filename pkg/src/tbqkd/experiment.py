"""Whole-experiment simulation and analysis built from the module pieces."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .atmos import fluctuation_stats, r0_series
from .channel import (CentroidSample, polarization_trajectory, r0_trajectory,
                      synth_centroid_series)
from .config import RunConfig
from .link import LinkRun, simulate_link
from .timetag import FLAG_BACKGROUND, INTENSITY_SHIFT, TimeTags
from .timing import AnalysisResult, EmissionLog, analyze, build_histogram
from .tomography import (SixStateCounts, mixed_state, mle_reconstruct, project_counts,
                         purity, qber_pol_from_purity)


@dataclass
class Simulation:
    config: RunConfig
    link: LinkRun
    r0_truth: np.ndarray  # per second
    centroids: list[CentroidSample]
    tomography: list[tuple[int, SixStateCounts]]
    purity_truth: np.ndarray  # per second


def simulate(cfg: RunConfig, duration: float | None = None) -> Simulation:
    sim = cfg.simulation
    duration = sim.duration if duration is None else duration
    link = simulate_link(cfg.source, cfg.channel, cfg.decoder, cfg.detector, duration,
                         time_of_flight=sim.time_of_flight, blocked=sim.blocked_intervals(),
                         seed=sim.seed)
    n_sec = int(math.ceil(duration)) if duration > 0 else 0
    r0 = r0_trajectory(cfg.channel.r0, sim.r0_relative_std, max(n_sec, 1), sim.r0_corr_time,
                       seed=sim.seed)[:n_sec]
    centroids = []
    if duration * sim.frame_rate >= 2:
        centroids = synth_centroid_series(r0, cfg.channel.beam_diameter, cfg.channel.wavelength_beacon,
                                          sim.frame_rate, duration, cfg.channel.turbulence_corr_time,
                                          seed=sim.seed + 1)
    tomo, pur = [], []
    if n_sec:
        traj = polarization_trajectory(cfg.drift, n_sec)
        per = max(int(round(cfg.drift.step_rate)), 1)
        rng = np.random.default_rng([sim.seed, 0x7030])
        for s in range(n_sec):
            rho = mixed_state(traj[s * per:(s + 1) * per])
            pur.append(purity(rho))
            tomo.append((s, project_counts(rho, int(sim.tomography_rate), rng)))
    return Simulation(cfg, link, r0, centroids, tomo, np.array(pur))


# --- tag-file views -----------------------------------------------------------------

def transmitter_tags(s: Simulation) -> TimeTags:
    """Transmitter log.  Short runs list every pulse; longer ones keep only the
    pulses within ``tx_window`` of a detection (minus the time of flight), which
    is exact for any correlation offset inside that window."""
    train = s.link.train
    sim = s.config.simulation
    n = len(train)
    if n <= sim.tx_full_limit:
        idx = np.arange(n, dtype=np.int64)
    else:
        t = s.link.times - s.link.time_of_flight
        lo = train.nearest_index(t - sim.tx_window) - 1
        hi = train.nearest_index(t + sim.tx_window) + 2
        lo = np.clip(lo, 0, n)
        hi = np.clip(hi, 0, n)
        # merge overlapping index ranges
        order = np.argsort(lo, kind="stable")
        lo, hi = lo[order], hi[order]
        run_hi = np.maximum.accumulate(hi) if hi.size else hi
        starts = np.r_[True, lo[1:] > run_hi[:-1]] if lo.size else np.zeros(0, bool)
        seg_lo = lo[starts]
        seg_hi = np.maximum.reduceat(hi, np.flatnonzero(starts)) if lo.size else hi
        idx = np.concatenate([np.arange(a, b, dtype=np.int64) for a, b in zip(seg_lo, seg_hi)]) \
            if seg_lo.size else np.empty(0, np.int64)
    states = train.states(idx) if idx.size else np.empty(0, np.int8)
    inten = train.intensities(idx) if idx.size else np.empty(0, np.int8)
    flags = (inten.astype(np.uint8) << INTENSITY_SHIFT).astype(np.uint8)
    return TimeTags(train.times(idx) if idx.size else idx, states.astype(np.uint8), flags)


def receiver_tags(s: Simulation, blind: bool = False) -> TimeTags:
    flags = np.where(s.link.background, FLAG_BACKGROUND, 0).astype(np.uint8)
    tags = TimeTags(s.link.times, s.link.channels, flags)
    return tags.blind() if blind else tags


def emission_log(tags: TimeTags) -> EmissionLog:
    return EmissionLog(tags.timestamps, tags.channels.astype(np.int8), tags.intensities)


# --- analysis ------------------------------------------------------------------------

@dataclass
class SeriesRow:
    second: int
    r0: float | None
    qber_time: float | None
    qber_pol: float | None
    retained: bool


@dataclass
class Analysis:
    timing: AnalysisResult
    series: list[SeriesRow]
    purity: dict = field(default_factory=dict)

    def series_text(self) -> str:
        lines = ["second,r0,qber_time,qber_pol,retained"]
        f = (lambda v: "" if v is None else f"{v:.6g}")
        for r in self.series:
            lines.append(f"{r.second},{f(r.r0)},{f(r.qber_time)},{f(r.qber_pol)},{int(r.retained)}")
        return "\n".join(lines) + "\n"


def analyze_experiment(cfg: RunConfig, emissions, det_times, det_channels, duration: float,
                       centroids=None, tomography=None) -> Analysis:
    timing = analyze(emissions, det_times, det_channels, cfg.coincidence, duration=duration)
    r0 = {}
    if centroids:
        fps = max(int(round(cfg.simulation.frame_rate)), 2)
        for e in r0_series(centroids, fps, cfg.channel.beam_diameter, cfg.channel.wavelength_beacon,
                           skip_degenerate=True):
            r0[e.second_index] = e.r0
    pur = {}
    for sec, counts in tomography or []:
        pur[sec] = purity(mle_reconstruct(counts).rho)
    series = []
    for st in timing.stats:
        p = pur.get(st.second_index)
        qp = qber_pol_from_purity(min(max(p, 0.5), 1.0)) if p is not None else None
        series.append(SeriesRow(st.second_index, r0.get(st.second_index), st.qber, qp, st.retained))
    return Analysis(timing, series, pur)


def histogram_for(emission_times, det_times, delay: int, period_ps: float, seconds: float = 1.0,
                  n_periods: int = 3, bin_width: int = 50):
    """Correlation histogram over the first ``seconds`` of data, central slot at 0."""
    e = np.asarray(emission_times, np.int64)
    d = np.asarray(det_times, np.int64)
    t_end = (e[0] if e.size else 0) + int(seconds * 1e12)
    e = e[e < t_end]
    d = d[d < t_end + delay + 10 * int(period_ps)]
    half = int(math.ceil(n_periods * period_ps / bin_width)) * bin_width
    return build_histogram(e, d, (-half, half), bin_width, time_of_flight=delay)


def summary(values) -> tuple[float, float] | None:
    v = [x for x in values if x is not None]
    return fluctuation_stats(v) if len(v) >= 2 else None
