import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tbqkd.source import (Intensity, IntensityClass, SourceConfig, generate_pulse_train,
                          sample_photon_number)


def test_record_count_at_150mhz():
    assert len(generate_pulse_train(SourceConfig(), 1.0)) == 150_000_000


def test_all_vacuum_has_no_photons():
    train = generate_pulse_train(SourceConfig(class_proportions=(0, 0, 1)), 1e-3)
    a = train.arrays()
    assert np.all(a["photons"] == 0)
    assert np.all(a["intensity"] == Intensity.VACUUM)


def test_mean_photon_number_signal():
    cfg = SourceConfig(class_proportions=(1, 0, 0), rng_seed=42)
    train = generate_pulse_train(cfg, 1e6 / cfg.repetition_rate)
    n = train.arrays()["photons"]
    assert n.size == 1_000_000
    assert abs(n.mean() - 0.488) < 3 * math.sqrt(0.488 / 1e6)


def test_class_and_state_frequencies():
    train = generate_pulse_train(SourceConfig(rng_seed=5), 2e6 / 1.5e8)
    a = train.arrays()
    N = a["state"].size
    for k, p in enumerate((0.80, 0.14, 0.06)):
        assert abs(np.mean(a["intensity"] == k) - p) < 3 * math.sqrt(p * (1 - p) / N)
    for s in range(4):
        assert abs(np.mean(a["state"] == s) - 0.25) < 3 * math.sqrt(0.1875 / N)


def test_emission_times_and_records():
    cfg = SourceConfig()
    train = generate_pulse_train(cfg, 1e-4)
    t = train.times(np.arange(len(train)))
    assert np.all(np.diff(t) > 0)
    assert set(np.unique(np.diff(t))) <= {6666, 6667}
    assert abs(int(t[-1]) - (len(train) - 1) * 20000 / 3) < 1
    rec = train[123]
    assert rec.index == 123 and rec.emission_time == round(123 * 20000 / 3)
    if rec.intensity.kind is Intensity.VACUUM:
        assert rec.photon_count == 0


def test_determinism_and_chunking():
    cfg = SourceConfig(rng_seed=9)
    a = generate_pulse_train(cfg, 1e-3).arrays()
    b = generate_pulse_train(cfg, 1e-3).arrays()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    parts = [chunk for _, chunk in generate_pulse_train(cfg, 1e-3).chunks(1000)]
    np.testing.assert_array_equal(np.concatenate([c["state"] for c in parts]), a["state"])
    c = generate_pulse_train(SourceConfig(rng_seed=10), 1e-3).arrays()
    assert not np.array_equal(a["state"], c["state"])


def test_sample_photon_number():
    rng = np.random.default_rng(0)
    assert all(sample_photon_number(IntensityClass(Intensity.VACUUM, 0.0), rng) == 0
               for _ in range(100))
    sig = IntensityClass(Intensity.SIGNAL, 0.488)
    draws = np.array([sample_photon_number(sig, rng) for _ in range(20000)])
    p0 = math.exp(-0.488)
    assert p0 == pytest.approx(0.6139, abs=5e-5)
    assert abs(np.mean(draws == 0) - p0) < 4 * math.sqrt(p0 * (1 - p0) / draws.size)
    # closed form; the tabulated 0.00326 does not match 1 - e^-mu (1 + mu)
    assert 1 - math.exp(-0.082) * 1.082 == pytest.approx(0.0031837, abs=1e-7)


def test_invalid_configs():
    with pytest.raises(ValueError):
        SourceConfig(class_proportions=(0.5, 0.3, 0.3))
    with pytest.raises(ValueError):
        SourceConfig(mu_signal=0.05, mu_decoy=0.1)
    with pytest.raises(ValueError):
        SourceConfig(bin_separation=200)
    with pytest.raises(ValueError):
        IntensityClass(Intensity.VACUUM, 0.1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 10**9))
def test_random_access_matches_stream(seed, start):
    cfg = SourceConfig(rng_seed=seed)
    train = generate_pulse_train(cfg, 10.0)
    idx = np.arange(start, start + 64)
    a = train.arrays(start, start + 64)
    np.testing.assert_array_equal(a["state"], train.states(idx))
    np.testing.assert_array_equal(a["photons"], train.photons(idx))
