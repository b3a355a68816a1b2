"""Time-correlation analysis: histograms, delay search, slot classification, sifting.

Offsets are ``detection - emission - time_of_flight`` in integer ps.  The
decoder's three arrival slots sit at delay - slot_offset (early), delay
(central, superposition basis) and delay + slot_offset (late).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Basis
from .source import PS_PER_S, Intensity, PulseTrain


@dataclass
class CoincidenceConfig:
    window: int = 1000  # ps
    slot_offset: int = 2000  # ps
    time_of_flight: int = 4_000_000  # ps
    aggregation: float = 1.0  # s
    snr_threshold: float = 500.0  # Hz
    bin_width: int = 100  # ps, coarse delay scan step
    refine_step: int = 10  # ps
    scan_halfwidth: int = 100_000  # ps, acquisition range around time_of_flight
    track_halfwidth: int = 1000  # ps, per-window search around the acquired delay

    def __post_init__(self):
        if self.window <= 0:
            raise ValueError("coincidence window must be positive")
        if self.slot_offset <= self.window / 2:
            raise ValueError("slot_offset must exceed half the window")
        if self.aggregation <= 0 or self.bin_width <= 0 or self.refine_step <= 0:
            raise ValueError("aggregation, bin_width and refine_step must be positive")

    @property
    def half_window(self) -> int:
        return self.window // 2


class EmissionLog:
    """Explicit, time-sorted list of transmitter pulses (e.g. read from a tag file).

    Shares the index-based accessor interface of :class:`PulseTrain`; indices are
    positions in the arrays.
    """

    def __init__(self, times, states, intensities=None):
        self._times = np.asarray(times, dtype=np.int64)
        if self._times.size and np.any(np.diff(self._times) < 0):
            raise ValueError("emission times must be sorted")
        self._states = np.asarray(states, dtype=np.int8)
        if intensities is None:
            intensities = np.zeros(self._times.size, np.int8)
        self._intensities = np.asarray(intensities, dtype=np.int8)
        self.start = 0
        self.n_pulses = self._times.size

    def __len__(self) -> int:
        return self.n_pulses

    def times(self, idx):
        return self._times[np.asarray(idx, dtype=np.int64)]

    def states(self, idx):
        return self._states[np.asarray(idx, dtype=np.int64)]

    def intensities(self, idx):
        return self._intensities[np.asarray(idx, dtype=np.int64)]

    def nearest_index(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if self.n_pulses == 0:
            return np.full(t.shape, -1, np.int64)
        j = np.searchsorted(self._times, t)
        lo = np.clip(j - 1, 0, self.n_pulses - 1)
        hi = np.clip(j, 0, self.n_pulses - 1)
        pick_hi = np.abs(self._times[hi] - t) < np.abs(t - self._times[lo])
        return np.where(pick_hi, hi, lo).astype(np.int64)

    def pairs_in(self, t_lo, t_hi):
        """(query row, emission index) for every emission with t_lo <= time < t_hi."""
        a = np.searchsorted(self._times, t_lo, side="left")
        b = np.searchsorted(self._times, t_hi, side="left")
        cnt = b - a
        rows = np.repeat(np.arange(len(a)), cnt)
        idx = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt) + np.repeat(a, cnt)
        return rows, idx.astype(np.int64)


class PulseClock(PulseTrain):
    """Emission timing only, as seen by the receiver: pulse k leaves at
    round(k * period).  States and intensity classes are unknown, so every
    pulse counts as non-vacuum for delay search."""

    def __init__(self, source, n_pulses: int, start: int = 0):
        super().__init__(source, n_pulses, start)

    def intensities(self, idx) -> np.ndarray:
        return np.zeros(np.atleast_1d(idx).shape, np.int8)

    def states(self, idx):
        raise AttributeError("prepared states are not known to the receiver")

    photons = flips = states


def _train_pairs_in(train: PulseTrain, t_lo, t_hi):
    a = train.nearest_index(t_lo) - 1
    b = train.nearest_index(t_hi) + 2
    a = np.maximum(a, train.start)
    b = np.minimum(b, train.start + train.n_pulses)
    cnt = np.maximum(b - a, 0)
    rows = np.repeat(np.arange(len(a)), cnt)
    idx = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt) + np.repeat(a, cnt)
    t = train.times(idx)
    ok = (t >= np.asarray(t_lo)[rows]) & (t < np.asarray(t_hi)[rows])
    return rows[ok], idx[ok]


def _pairs(emissions, t_lo, t_hi):
    if isinstance(emissions, PulseTrain):
        return _train_pairs_in(emissions, t_lo, t_hi)
    return emissions.pairs_in(t_lo, t_hi)


def _valid(emissions, idx) -> np.ndarray:
    return (idx >= emissions.start) & (idx < emissions.start + emissions.n_pulses)


# --- histogram -------------------------------------------------------------------

@dataclass
class TimingHistogram:
    bin_width: int
    offsets: np.ndarray  # left bin edges, ps
    counts: np.ndarray

    def __post_init__(self):
        if len(self.offsets) != len(self.counts):
            raise ValueError("offsets and counts differ in length")

    @property
    def centers(self) -> np.ndarray:
        return self.offsets + self.bin_width / 2

    def to_text(self) -> str:
        lines = ["offset_ps,count"]
        lines += [f"{int(o)},{int(c)}" for o, c in zip(self.offsets, self.counts)]
        return "\n".join(lines) + "\n"


def _check_sorted(a: np.ndarray, name: str) -> None:
    if a.size > 1 and np.any(np.diff(a) < 0):
        raise ValueError(f"{name} timestamps are not sorted")


def build_histogram(emissions, detections, offset_range: tuple[int, int], bin_width: int,
                    time_of_flight: int = 0) -> TimingHistogram:
    """Coincidence counts versus ``detection - emission - time_of_flight``.

    Both inputs are sorted timestamp arrays; for each detection the matching
    emission range is found with binary search, so the work is linear in the
    number of (emission, detection) pairs inside ``offset_range``.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    e = np.asarray(emissions, dtype=np.int64)
    d = np.asarray(detections, dtype=np.int64)
    _check_sorted(e, "emission")
    _check_sorted(d, "detection")
    lo, hi = int(offset_range[0]), int(offset_range[1])
    nbins = int(math.ceil((hi - lo) / bin_width))
    edges = lo + bin_width * np.arange(nbins, dtype=np.int64)
    log = EmissionLog(e, np.zeros(e.size, np.int8))
    rows, idx = log.pairs_in(d - time_of_flight - hi + 1, d - time_of_flight - lo + 1)
    off = d[rows] - e[idx] - time_of_flight
    off = off[(off >= lo) & (off < hi)]
    counts = np.bincount((off - lo) // bin_width, minlength=nbins)[:nbins]
    return TimingHistogram(bin_width, edges, counts.astype(np.int64))


# --- delay search ------------------------------------------------------------------

@dataclass
class DelayResult:
    delay: int | None
    coincidences: int

    @property
    def found(self) -> bool:
        return self.delay is not None


def optimize_delay(emissions, detections, config: CoincidenceConfig,
                   center: int | None = None, halfwidth: int | None = None) -> DelayResult:
    """Delay maximising central-window coincidences with non-vacuum emissions.

    Coarse scan on a ``bin_width`` grid over center +/- halfwidth (ties go to the
    smallest delay).  A 1 ns window count is flat-topped over the jitter-limited
    peak, so the refinement takes the centroid of the offsets inside the best
    window and its two side-slot windows, snapped to the ``refine_step`` grid.
    """
    d = np.asarray(detections, dtype=np.int64)
    if d.size == 0:
        return DelayResult(None, 0)
    center = config.time_of_flight if center is None else int(center)
    halfwidth = config.scan_halfwidth if halfwidth is None else int(halfwidth)
    hw = config.half_window
    grid = np.arange(center - halfwidth, center + halfwidth + 1, config.bin_width, dtype=np.int64)
    reach = hw + config.slot_offset
    rows, idx = _pairs(emissions, d - grid[-1] - reach, d - grid[0] + reach + 1)
    keep = emissions.intensities(idx) != Intensity.VACUUM
    off = np.sort(d[rows[keep]] - emissions.times(idx[keep]))
    if off.size == 0:
        return DelayResult(None, 0)
    counts = np.searchsorted(off, grid + hw, side="left") - np.searchsorted(off, grid - hw, side="left")
    k = int(np.argmax(counts))
    if counts[k] == 0:
        return DelayResult(None, 0)
    # early and late slots sit at known offsets, so they sharpen the centroid
    c, so = grid[k], config.slot_offset
    res = [off[(off >= c + s - hw) & (off < c + s + hw)] - s for s in (-so, 0, so)]
    inside = np.concatenate(res)
    step = config.refine_step
    delay = int(round(float(inside.mean()) / step) * step)
    n = int(np.searchsorted(off, delay + hw) - np.searchsorted(off, delay - hw))
    return DelayResult(delay, n)


# --- classification ---------------------------------------------------------------

@dataclass
class Coincidences:
    """Detections matched to an emission and an arrival slot."""

    detection: np.ndarray  # index into the detection arrays
    emission: np.ndarray  # emission index
    slot: np.ndarray  # -1 early, 0 central, +1 late
    port: np.ndarray
    residual: np.ndarray  # ps from the slot centre
    n_unmatched: int = 0

    def __len__(self) -> int:
        return int(self.detection.size)


def classify_events(emissions, det_times, det_channels, delay: int,
                    config: CoincidenceConfig) -> Coincidences:
    """Tag detections as early/central/late coincidences of their nearest emission.

    Window membership is half-open, [centre - w/2, centre + w/2).  A detection
    that fits more than one (emission, slot) pair keeps the closest one.
    """
    t = np.asarray(det_times, dtype=np.int64)
    ch = np.asarray(det_channels)
    hw = config.half_window
    best_res = np.full(t.size, np.iinfo(np.int64).max, dtype=np.int64)
    best_idx = np.full(t.size, -1, dtype=np.int64)
    best_slot = np.zeros(t.size, dtype=np.int8)
    for s in (0, -1, 1):
        shift = delay + s * config.slot_offset
        idx = emissions.nearest_index(t - shift)
        ok = _valid(emissions, idx)
        res = np.full(t.size, np.iinfo(np.int64).max, dtype=np.int64)
        res[ok] = t[ok] - emissions.times(idx[ok]) - shift
        inside = ok & (res >= -hw) & (res < hw)
        better = inside & (np.abs(res) < np.abs(best_res))
        best_res[better] = res[better]
        best_idx[better] = idx[better]
        best_slot[better] = s
    m = best_idx >= 0
    det = np.flatnonzero(m)
    return Coincidences(det, best_idx[m], best_slot[m], ch[m].astype(np.int8), best_res[m],
                        int(t.size - det.size))


# --- SNR filter / sifting ----------------------------------------------------------

@dataclass
class PerSecondStats:
    second_index: int
    delay: int | None
    counts_total: float  # Hz
    sifted_z: int = 0
    errors_z: int = 0
    sifted_x: int = 0
    errors_x: int = 0
    retained: bool = True

    @property
    def sifted(self) -> int:
        return self.sifted_z + self.sifted_x

    @property
    def errors(self) -> int:
        return self.errors_z + self.errors_x

    @property
    def qber(self) -> float | None:
        return self.errors / self.sifted if self.sifted else None


def snr_filter(stats: list[PerSecondStats], threshold: float) -> list[PerSecondStats]:
    """Mark windows whose total count rate is below ``threshold`` Hz as not retained."""
    for s in stats:
        s.retained = bool(s.counts_total >= threshold)
    return stats


@dataclass
class SiftedKeyPair:
    transmitter_bits: np.ndarray
    receiver_bits: np.ndarray
    basis: np.ndarray
    intensity: np.ndarray
    emission: np.ndarray
    second: np.ndarray

    def __post_init__(self):
        if len(self.transmitter_bits) != len(self.receiver_bits):
            raise ValueError("sifted keys differ in length")

    def __len__(self) -> int:
        return int(self.transmitter_bits.size)

    @property
    def qber(self) -> float | None:
        n = len(self)
        return float(np.count_nonzero(self.transmitter_bits != self.receiver_bits)) / n if n else None

    def select(self, mask) -> "SiftedKeyPair":
        return SiftedKeyPair(*(getattr(self, f)[mask] for f in
                               ("transmitter_bits", "receiver_bits", "basis", "intensity",
                                "emission", "second")))

    @classmethod
    def concat(cls, parts) -> "SiftedKeyPair":
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("transmitter_bits", "receiver_bits", "basis", "intensity", "emission", "second")))

    @classmethod
    def empty(cls) -> "SiftedKeyPair":
        z = np.empty(0, np.uint8)
        return cls(z, z, z, np.empty(0, np.int8), np.empty(0, np.int64), np.empty(0, np.int64))


def first_per_emission(emission: np.ndarray, residual: np.ndarray,
                       candidates: np.ndarray | None = None) -> np.ndarray:
    """Positions (sorted by emission) keeping the smallest-residual entry per emission."""
    pos = np.arange(emission.size) if candidates is None else np.flatnonzero(candidates)
    em = emission[pos]
    order = np.lexsort((np.abs(residual[pos]), em))
    em_sorted = em[order]
    first = np.ones(em_sorted.size, bool)
    first[1:] = em_sorted[1:] != em_sorted[:-1]
    return pos[order[first]]


def measured_basis(slot: np.ndarray) -> np.ndarray:
    """Central slot measures the phase basis, early/late the time basis."""
    return np.where(np.asarray(slot) == 0, Basis.PHASE, Basis.TIME).astype(np.uint8)


def measured_bit(slot: np.ndarray, port: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(slot) == 0, port, np.asarray(slot) > 0).astype(np.uint8)


def sift_coincidences(coinc: Coincidences, emissions, second: int = 0) -> SiftedKeyPair:
    """Basis sifting: time-basis pulses in the early/late slots, phase-basis pulses in
    the central slot.  One entry per emission (the smallest-residual detection wins
    when a pulse produced several clicks)."""
    if len(coinc) == 0:
        return SiftedKeyPair.empty()
    states = emissions.states(coinc.emission).astype(np.int64)
    z_sent = states < 2
    keep = (z_sent & (coinc.slot != 0)) | (~z_sent & (coinc.slot == 0))
    pick = first_per_emission(coinc.emission, coinc.residual, keep)
    st = emissions.states(coinc.emission[pick]).astype(np.int64)
    tx = (st & 1).astype(np.uint8)
    rx = measured_bit(coinc.slot[pick], coinc.port[pick])
    basis = measured_basis(coinc.slot[pick])
    inten = emissions.intensities(coinc.emission[pick]).astype(np.int8)
    return SiftedKeyPair(tx, rx, basis, inten, coinc.emission[pick],
                         np.full(pick.size, second, np.int64))


def tally(stats: PerSecondStats, key: SiftedKeyPair) -> PerSecondStats:
    z = key.basis == Basis.TIME
    err = key.transmitter_bits != key.receiver_bits
    stats.sifted_z = int(z.sum())
    stats.errors_z = int((err & z).sum())
    stats.sifted_x = int((~z).sum())
    stats.errors_x = int((err & ~z).sum())
    return stats


def sift_and_qber(per_second: list[tuple[PerSecondStats, SiftedKeyPair]]):
    """Combine per-window sifted keys.

    Returns the retained sifted key, the per-window QBER list (None where a
    window had no sifted bits) and the mean over retained windows.
    """
    keys = []
    qbers = []
    for st, key in per_second:
        tally(st, key)
        qbers.append(st.qber)
        if st.retained:
            keys.append(key)
    vals = [st.qber for st, _ in per_second if st.retained and st.qber is not None]
    mean = float(np.mean(vals)) if vals else None
    return SiftedKeyPair.concat(keys), qbers, mean


@dataclass
class AnalysisResult:
    stats: list[PerSecondStats]
    sifted: SiftedKeyPair  # retained windows only
    mean_qber: float | None
    acquisition_delay: int | None
    coincidences_by_window: dict = field(default_factory=dict)

    @property
    def retained(self) -> list[PerSecondStats]:
        return [s for s in self.stats if s.retained]

    def stats_text(self) -> str:
        lines = ["second,delay_ps,rate_hz,qber,retained"]
        for s in self.stats:
            q = "" if s.qber is None else f"{s.qber:.6f}"
            d = "" if s.delay is None else str(s.delay)
            lines.append(f"{s.second_index},{d},{s.counts_total:.3f},{q},{int(s.retained)}")
        return "\n".join(lines) + "\n"


def analyze(emissions, det_times, det_channels, config: CoincidenceConfig,
            duration: float | None = None, keep_coincidences: bool = False) -> AnalysisResult:
    """Full per-window chain: acquisition, per-window delay, classification,
    SNR filter, sifting and QBER.

    The delay is first acquired over the whole record, which separates the true
    alignment from its period aliases through the vacuum-pulse gaps, then tracked
    per window within ``track_halfwidth``.
    """
    t = np.asarray(det_times, dtype=np.int64)
    ch = np.asarray(det_channels)
    agg_ps = int(round(config.aggregation * PS_PER_S))
    if duration is None:
        n_win = int((t.max() - config.time_of_flight) // agg_ps) + 1 if t.size else 0
    else:
        n_win = int(math.ceil(duration / config.aggregation))
    acq = optimize_delay(emissions, t, config)
    win = np.clip((t - config.time_of_flight) // agg_ps, 0, max(n_win - 1, 0))
    bounds = np.searchsorted(win, np.arange(n_win + 1))
    per = []
    coinc_store = {}
    for w in range(n_win):
        a, b = bounds[w], bounds[w + 1]
        tw, cw = t[a:b], ch[a:b]
        st = PerSecondStats(w, None, (b - a) / config.aggregation)
        key = SiftedKeyPair.empty()
        if acq.found and b > a:
            res = optimize_delay(emissions, tw, config, center=acq.delay,
                                 halfwidth=config.track_halfwidth)
            if res.found:
                st.delay = res.delay
                co = classify_events(emissions, tw, cw, res.delay, config)
                co.detection = co.detection + a
                key = sift_coincidences(co, emissions, w)
                if keep_coincidences:
                    coinc_store[w] = co
        per.append((st, key))
    snr_filter([p[0] for p in per], config.snr_threshold)
    sifted, _, mean = sift_and_qber(per)
    return AnalysisResult([p[0] for p in per], sifted, mean, acq.delay, coinc_store)
