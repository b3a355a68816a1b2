import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tbqkd.channel import ChannelConfig
from tbqkd.link import simulate_link
from tbqkd.receiver import DecoderConfig, DetectorConfig
from tbqkd.source import SourceConfig, generate_pulse_train
from tbqkd.timing import (CoincidenceConfig, EmissionLog, PerSecondStats, PulseClock, SiftedKeyPair,
                          analyze, build_histogram, classify_events, optimize_delay, snr_filter)

CFG = CoincidenceConfig()


def _log(times, states=None, inten=None):
    times = np.asarray(times, np.int64)
    states = np.zeros(times.size, np.int8) if states is None else np.asarray(states, np.int8)
    return EmissionLog(times, states, inten)


def test_histogram_single_pair():
    h = build_histogram([0], [4_000_000], (-1000, 1000), 100, time_of_flight=4_000_000)
    assert h.counts.sum() == 1
    assert h.offsets[np.argmax(h.counts)] == 0


def test_histogram_translation():
    rng = np.random.default_rng(0)
    e = np.sort(rng.integers(0, 10**9, 2000))
    d = np.sort(e[rng.integers(0, e.size, 500)] + 4_000_000 + rng.integers(-300, 300, 500))
    h0 = build_histogram(e, d, (-20000, 20000), 100, 4_000_000)
    h1 = build_histogram(e, d + 500, (-20000, 20000), 100, 4_000_000)
    np.testing.assert_array_equal(h0.counts[:-5], h1.counts[5:])


def test_histogram_rejects_unsorted():
    with pytest.raises(ValueError):
        build_histogram([5, 1], [10], (0, 100), 10)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 10**6), max_size=60), st.lists(st.integers(0, 10**6), max_size=60))
def test_histogram_total_equals_pairs(e, d):
    e, d = np.sort(e), np.sort(d)
    h = build_histogram(e, d, (-5000, 5000), 250)
    brute = sum(1 for x in e for y in d if -5000 <= y - x < 5000)
    assert h.counts.sum() == brute


def test_histogram_text_roundtrip():
    h = build_histogram([0, 10], [5, 20], (-10, 20), 5)
    lines = h.to_text().strip().splitlines()
    assert lines[0] == "offset_ps,count"
    assert [int(x.split(",")[1]) for x in lines[1:]] == h.counts.tolist()


def test_classify_windows():
    log = _log([0, 10**6])
    delay = 4_002_000
    det = np.array([delay, delay - 2000, delay + 2000, delay + 1400, 10**6 + delay + 499, 10**6 + delay + 500])
    co = classify_events(log, det, np.zeros(det.size, np.int8), delay, CFG)
    slot = dict(zip(co.detection.tolist(), co.slot.tolist()))
    assert slot[0] == 0
    assert slot[1] == -1  # early slot arrives first
    assert slot[2] == 1
    assert 3 not in slot
    assert slot[4] == 0 and 5 not in slot  # half-open window
    assert co.n_unmatched == 2
    assert len(co) + co.n_unmatched == det.size


def test_classify_nearest_emission_wins():
    log = _log([0, 4300])
    co = classify_events(log, [4_002_000 + 4300 - 100], [0], 4_002_000, CFG)
    assert co.emission.tolist() == [1] and co.slot.tolist() == [0]


def _synthetic(delay, rate_hz=800, seconds=1.0, seed=0):
    src = SourceConfig(repetition_rate=1.5e7)
    clock = PulseClock(src, int(seconds * src.repetition_rate))
    rng = np.random.default_rng(seed)
    n = int(rate_hz * seconds)
    idx = np.sort(rng.integers(0, len(clock), n))
    slot = rng.choice([-1, 0, 0, 1], n)
    t = clock.times(idx) + delay + slot * 2000 + np.round(rng.normal(0, 212.3, n)).astype(np.int64)
    return clock, np.sort(t)


def test_optimize_delay_recovers_4us():
    clock, det = _synthetic(4_000_000)
    r = optimize_delay(clock, det, CFG, center=4_000_000, halfwidth=20_000)
    assert abs(r.delay - 4_000_000) <= 10


@settings(max_examples=15, deadline=None)
@given(st.integers(3_900_000, 4_100_000), st.integers(0, 1000))
def test_delay_recovery_property(delay, seed):
    # 500 Hz for 40 s: the jitter-limited centroid error is ~1.3 ps, and the
    # 10 ps refinement grid adds at most 5 ps
    clock, det = _synthetic(delay, rate_hz=500, seconds=40, seed=seed)
    r = optimize_delay(clock, det, CFG, center=delay - 1500, halfwidth=3000)
    assert abs(r.delay - delay) <= 10


@settings(max_examples=10, deadline=None)
@given(st.integers(3_900_000, 4_100_000), st.integers(0, 1000))
def test_delay_recovery_one_second(delay, seed):
    # a single 1 s window at 500 Hz is limited by jitter to ~10 ps (1 sigma)
    clock, det = _synthetic(delay, rate_hz=500, seed=seed)
    r = optimize_delay(clock, det, CFG, center=delay - 1500, halfwidth=3000)
    assert abs(r.delay - delay) <= 40


def test_optimize_delay_empty_and_ties():
    assert not optimize_delay(_log([0]), [], CFG).found
    # two equal clusters 3000 ps apart: the smaller delay wins
    log = _log([0])
    det = np.array([4_000_000] * 5 + [4_003_000] * 5)
    r = optimize_delay(log, det, CFG, center=4_001_500, halfwidth=3000)
    assert r.delay == 4_000_000


def test_snr_filter_boundary_and_idempotence():
    stats = [PerSecondStats(0, 1, 499.0), PerSecondStats(1, 1, 500.0)]
    snr_filter(stats, 500)
    assert [s.retained for s in stats] == [False, True]
    again = snr_filter(stats, 500)
    assert [s.retained for s in again] == [False, True]


@given(st.lists(st.floats(0, 2000), max_size=20), st.floats(0, 2000))
def test_snr_filter_idempotent_property(rates, thr):
    a = snr_filter([PerSecondStats(i, 0, r) for i, r in enumerate(rates)], thr)
    b = snr_filter(a, thr)
    assert [s.retained for s in a] == [s.retained for s in b] == [r >= thr for r in rates]


def test_sifted_pair_invariants():
    k = SiftedKeyPair(np.array([0, 1, 1, 0], np.uint8), np.array([0, 1, 0, 0], np.uint8),
                      np.zeros(4, np.uint8), np.zeros(4, np.int8), np.arange(4), np.zeros(4, np.int64))
    assert k.qber == 0.25
    with pytest.raises(ValueError):
        SiftedKeyPair(np.zeros(3, np.uint8), np.zeros(4, np.uint8), np.zeros(4, np.uint8),
                      np.zeros(4, np.int8), np.arange(4), np.zeros(4, np.int64))


def _fast_link(seconds, **kw):
    src = SourceConfig(repetition_rate=1.5e7, intrinsic_error=kw.pop("eps", 0.0), rng_seed=kw.pop("seed", 1))
    dec = DecoderConfig(visibility=kw.pop("v", 1.0), phase_drift_rms=0.0)
    det = DetectorConfig(background_per_pulse=kw.pop("bg", 0.0))
    ch = ChannelConfig(loss_db=kw.pop("loss", 22.0))
    return src, simulate_link(src, ch, dec, det, seconds, seed=3, **kw)


def test_noiseless_link_has_zero_qber():
    src, run = _fast_link(3)
    res = analyze(run.train, run.times, run.channels, CoincidenceConfig(snr_threshold=50), duration=3)
    assert res.acquisition_delay == 4_002_000
    assert len(res.retained) == 3
    assert res.mean_qber == 0.0
    # every signal click was classified: histogram total = matched pairs
    assert res.sifted.transmitter_bits.size > 0


def test_qber_converges_to_composite_error():
    eps, v = 0.03, 0.94
    src, run = _fast_link(4, eps=eps, v=v, loss=20.0)
    res = analyze(run.train, run.times, run.channels, CoincidenceConfig(snr_threshold=50), duration=4)
    key = res.sifted
    assert len(key) >= 10_000
    z = key.basis == 0
    e_z, e_x = eps, eps + (1 - v) / 2 - 2 * eps * (1 - v) / 2
    expect = (z.sum() * e_z + (~z).sum() * e_x) / len(key)
    sigma = math.sqrt(expect * (1 - expect) / len(key))
    assert abs(key.qber - expect) < 3 * sigma


def test_blocked_seconds_are_discarded():
    src, run = _fast_link(8, blocked=[(2.0, 5.0)], bg=5e-6)
    res = analyze(run.train, run.times, run.channels, CoincidenceConfig(snr_threshold=200), duration=8)
    kept = [s.second_index for s in res.retained]
    assert kept == [0, 1, 5, 6, 7]
    blocked_q = [s.qber for s in res.stats if 2 <= s.second_index < 5 and s.qber is not None]
    assert all(q > 0.2 for q in blocked_q)
    assert res.mean_qber < 0.01


def test_uniform_detections_not_retained():
    rng = np.random.default_rng(4)
    src = SourceConfig(repetition_rate=1.5e7)
    train = generate_pulse_train(src, 2.0)
    det = np.sort(rng.integers(4_000_000, 4_000_000 + 2 * 10**12, 400))
    res = analyze(train, det, np.zeros(det.size, np.int8), CFG, duration=2)
    assert not res.retained


def test_empty_detections():
    clock = PulseClock(SourceConfig(), 1000)
    res = analyze(clock, np.empty(0, np.int64), np.empty(0, np.int8), CFG, duration=3)
    assert res.mean_qber is None and not res.retained and len(res.stats) == 3
