import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tbqkd.core import (Basis, TimeBinState, binary_entropy, qber_from_visibility,
                        visibility_from_purity)


def test_states_and_bases():
    assert len(TimeBinState) == 4
    assert TimeBinState.EARLY.basis is Basis.TIME
    assert TimeBinState.LATE.basis is Basis.TIME
    assert TimeBinState.PLUS.basis is Basis.PHASE
    assert TimeBinState.MINUS.basis is Basis.PHASE
    a, b = TimeBinState.MINUS.amplitudes
    assert a == pytest.approx(1 / math.sqrt(2)) and b == pytest.approx(-1 / math.sqrt(2))
    for s in TimeBinState:
        assert s.flipped().basis is s.basis and s.flipped() != s
        amp = np.array(s.amplitudes)
        assert abs(np.vdot(amp, np.array(s.flipped().amplitudes))) < 1e-15


def test_binary_entropy_values():
    assert binary_entropy(0.5) == 1.0
    assert binary_entropy(0.0) == 0.0
    assert binary_entropy(1.0) == 0.0
    assert binary_entropy(0.0532) == pytest.approx(0.29984, abs=1e-5)
    with pytest.raises(ValueError):
        binary_entropy(1.2)
    with pytest.raises(ValueError):
        binary_entropy(float("nan"))


def test_visibility_and_purity():
    assert qber_from_visibility(1.0) == 0.0
    assert qber_from_visibility(0.16) == pytest.approx(0.42, abs=1e-15)
    assert qber_from_visibility(0.97) == pytest.approx(0.015)
    with pytest.raises(ValueError):
        qber_from_visibility(1.01)
    assert visibility_from_purity(1.0) == 1.0
    assert visibility_from_purity(0.5) == 0.0
    assert visibility_from_purity(0.845) == pytest.approx(0.8307, abs=5e-5)
    with pytest.raises(ValueError):
        visibility_from_purity(0.49)


@given(st.floats(0.0, 1.0))
def test_entropy_symmetric(p):
    assert binary_entropy(p) == pytest.approx(binary_entropy(1.0 - p), abs=1e-12)


@given(st.floats(0.0, 0.5))
def test_visibility_qber_identity(q):
    assert qber_from_visibility(1.0 - 2.0 * q) == pytest.approx(q, abs=1e-15)


@given(st.floats(0.5, 1.0), st.floats(0.5, 1.0))
def test_qber_pol_monotone(p1, p2):
    f = lambda p: qber_from_visibility(visibility_from_purity(p))
    lo, hi = sorted((p1, p2))
    assert f(lo) >= f(hi)
