"""Shared two-level primitives: time-bin states, bases and entropy helpers."""
from __future__ import annotations

import enum
import math


class Basis(enum.IntEnum):
    TIME = 0
    PHASE = 1


class TimeBinState(enum.IntEnum):
    """The four BB84 time-bin states.

    PLUS and MINUS are (|E> +/- |L>)/sqrt(2).  The integer value doubles as the
    transmitter channel id in time-tag files.
    """

    EARLY = 0
    LATE = 1
    PLUS = 2
    MINUS = 3

    @property
    def basis(self) -> Basis:
        return Basis.TIME if self.value < 2 else Basis.PHASE

    @property
    def bit(self) -> int:
        return self.value & 1

    @property
    def amplitudes(self) -> tuple[complex, complex]:
        return _AMPLITUDES[self]

    def flipped(self) -> "TimeBinState":
        """Orthogonal partner within the same basis."""
        return TimeBinState(self.value ^ 1)


_S = 1.0 / math.sqrt(2.0)
_AMPLITUDES = {
    TimeBinState.EARLY: (1.0 + 0j, 0j),
    TimeBinState.LATE: (0j, 1.0 + 0j),
    TimeBinState.PLUS: (_S + 0j, _S + 0j),
    TimeBinState.MINUS: (_S + 0j, -_S + 0j),
}


def check_probability(p: float, name: str = "p") -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0 or math.isnan(p):
        raise ValueError(f"{name}={p!r} outside [0, 1]")
    return p


def binary_entropy(p: float) -> float:
    """H2(p) in bits; H2(0) = H2(1) = 0."""
    p = check_probability(p)
    if p == 0.0 or p == 1.0:
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


def qber_from_visibility(visibility: float) -> float:
    """Lowest QBER an analyzer of interference visibility V can reach: (1-V)/2."""
    visibility = float(visibility)
    if not -1.0 <= visibility <= 1.0:
        raise ValueError(f"visibility {visibility!r} outside [-1, 1]")
    return (1.0 - visibility) / 2.0


def visibility_from_purity(purity: float) -> float:
    """V = sqrt(2P - 1) for a qubit with rotationally symmetric noise."""
    purity = float(purity)
    if not 0.5 <= purity <= 1.0:
        raise ValueError(f"qubit purity {purity!r} outside [0.5, 1]")
    return math.sqrt(2.0 * purity - 1.0)
