import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tbqkd.channel import DriftMode
from tbqkd.config import ConfigError, RunConfig, load_config, parse_config
from tbqkd.timetag import (FLAG_BACKGROUND, HEADER, MAGIC, TimeTags, from_bytes, read_tags,
                           to_bytes, write_tags)


def test_config_defaults_round_trip():
    cfg = RunConfig()
    assert parse_config(cfg.echo()) == cfg


def test_config_overrides_round_trip(tmp_path):
    text = """
    # link
    source.mu_signal = 0.5
    channel.loss_db = 30   # dB
    drift.mode = random_walk
    simulation.blocked = 10-20, 30.5-31
    decoy.misalignment = 0.02
    """
    cfg = parse_config(text)
    assert cfg.source.mu_signal == 0.5 and cfg.channel.loss_db == 30.0
    assert cfg.drift.mode is DriftMode.RANDOM_WALK
    assert cfg.simulation.blocked_intervals() == [(10.0, 20.0), (30.5, 31.0)]
    (tmp_path / "run.cfg").write_text(cfg.echo())
    assert load_config(tmp_path / "run.cfg") == cfg


@pytest.mark.parametrize("text", [
    "source.nonsense = 1",
    "nosection.mu = 1",
    "source.mu_signal",
    "simulation.seed = 1.5",
    "simulation.seed = abc",
    "drift.mode = sideways",
])
def test_config_rejects(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_config_bad_blocked_interval():
    with pytest.raises(ConfigError):
        parse_config("simulation.blocked = 5-3").simulation.blocked_intervals()


def _tags(n, rng):
    t = np.sort(rng.integers(0, 2**50, n))
    return TimeTags(t, rng.integers(0, 4, n), rng.integers(0, 8, n))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 200), st.integers(0, 2**31))
def test_ttag_round_trip(n, seed):
    tags = _tags(n, np.random.default_rng(seed))
    back = from_bytes(to_bytes(tags))
    assert np.array_equal(back.timestamps, tags.timestamps)
    assert np.array_equal(back.channels, tags.channels)
    assert np.array_equal(back.flags, tags.flags)
    assert len(to_bytes(tags)) == HEADER.size + 16 * n


def test_ttag_file_and_blind(tmp_path):
    tags = _tags(50, np.random.default_rng(0))
    write_tags(tmp_path / "a.ttag", tags)
    back = read_tags(tmp_path / "a.ttag")
    assert np.array_equal(back.flags, tags.flags)
    blind = back.blind()
    assert not np.any(blind.flags & FLAG_BACKGROUND)
    assert np.array_equal(blind.intensities, tags.intensities)


def test_ttag_validation():
    good = to_bytes(_tags(3, np.random.default_rng(1)))
    with pytest.raises(ValueError, match="magic"):
        from_bytes(b"XXXX" + good[4:])
    with pytest.raises(ValueError, match="version"):
        from_bytes(MAGIC + (2).to_bytes(2, "little") + good[6:])
    with pytest.raises(ValueError, match="reserved"):
        from_bytes(good[:10] + b"\x01" + good[11:])
    with pytest.raises(ValueError, match="16-byte"):
        from_bytes(good[:-1])
    with pytest.raises(ValueError, match="truncated"):
        from_bytes(good[:5])
    bad_pad = bytearray(good)
    bad_pad[HEADER.size + 12] = 1
    with pytest.raises(ValueError, match="padding"):
        from_bytes(bytes(bad_pad))
    with pytest.raises(ValueError, match="non-decreasing"):
        TimeTags([5, 3], [0, 0], [0, 0])
    with pytest.raises(ValueError):
        TimeTags([1, 2], [0], [0, 0])


def test_ttag_empty():
    tags = from_bytes(to_bytes(TimeTags([], [], [])))
    assert len(tags) == 0
