"""Turbulence characterisation from beacon images: centroids, Fried parameter, Cn^2."""
from __future__ import annotations

import math
import struct
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .channel import TILT_COEFF, CentroidSample, two_axis_tilt_variance

# Plane-wave Kolmogorov constant in r0 = (K k^2 Cn^2 L)^(-3/5).
PLANE_WAVE_CONST = 0.423

FRAME_MAGIC = b"FRAM"


class DegenerateBlock(ValueError):
    """A block of centroids has zero variance, so r0 would be infinite."""


@dataclass
class FrameGrid:
    width: int
    height: int
    intensity: np.ndarray  # (height, width)
    plate_scale: float  # rad / pixel

    def __post_init__(self):
        self.intensity = np.asarray(self.intensity, dtype=float)
        if self.intensity.shape != (self.height, self.width):
            raise ValueError(f"intensity shape {self.intensity.shape} != ({self.height}, {self.width})")
        if np.any(self.intensity < 0):
            raise ValueError("pixel intensities must be non-negative")
        if self.plate_scale <= 0:
            raise ValueError("plate_scale must be positive")

    @classmethod
    def from_array(cls, arr, plate_scale: float) -> "FrameGrid":
        arr = np.asarray(arr, dtype=float)
        return cls(arr.shape[1], arr.shape[0], arr, plate_scale)


@dataclass(frozen=True)
class FriedEstimate:
    second_index: int
    r0: float  # m
    n_frames: int
    sigma2_2axis: float  # rad^2


def write_frame(path, frame: FrameGrid) -> None:
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC + struct.pack("<II", frame.width, frame.height))
        fh.write(frame.intensity.astype("<f4").tobytes())


def read_frame(path, plate_scale: float) -> FrameGrid:
    data = Path(path).read_bytes()
    if data[:4] != FRAME_MAGIC or len(data) < 12:
        raise ValueError("not a FRAM file")
    w, h = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != 4 * w * h:
        raise ValueError(f"FRAM payload has {len(body)} bytes, expected {4 * w * h}")
    arr = np.frombuffer(body, dtype="<f4").reshape(h, w).astype(float)
    return FrameGrid(w, h, arr, plate_scale)


def centroid_from_frame(frame: FrameGrid, background=0.0) -> tuple[float, float]:
    """Background-subtracted centre of mass as (theta_x, theta_y) from the frame centre."""
    bg = background.intensity if isinstance(background, FrameGrid) else background
    img = np.clip(frame.intensity - bg, 0.0, None)
    total = img.sum()
    if not total > 0:
        raise ValueError("frame is empty after background subtraction")
    ys, xs = np.indices(img.shape)
    cx = (frame.width - 1) / 2
    cy = (frame.height - 1) / 2
    mx = float((img * xs).sum() / total)
    my = float((img * ys).sum() / total)
    return (mx - cx) * frame.plate_scale, (my - cy) * frame.plate_scale


def _positive(**kw) -> None:
    for k, v in kw.items():
        if not np.all(np.asarray(v) > 0):
            raise ValueError(f"{k} must be positive, got {v}")


def tilt_variance_from_r0(r0: float, D: float, wavelength: float) -> float:
    """Two-axis angle-of-arrival variance, 0.364 (D lambda / r0^2)^(5/3) rad^2."""
    _positive(r0=r0, D=D, wavelength=wavelength)
    return two_axis_tilt_variance(r0, D, wavelength)


def r0_from_tilt_variance(sigma2: float, D: float, wavelength: float) -> float:
    _positive(sigma2=sigma2, D=D, wavelength=wavelength)
    return math.sqrt(D * wavelength * (TILT_COEFF / sigma2) ** 0.6)


def r0_series(centroids: Sequence[CentroidSample], frames_per_estimate: int, D: float,
              wavelength: float, skip_degenerate: bool = False) -> list[FriedEstimate]:
    """One Fried estimate per block of ``frames_per_estimate`` consecutive frames.

    Per-axis sample variances (n-1) are summed.  A trailing partial block is
    dropped.  Zero-variance blocks raise :class:`DegenerateBlock` unless
    ``skip_degenerate`` is set, in which case they are left out.
    """
    if frames_per_estimate < 2:
        raise ValueError("need at least 2 frames per estimate")
    n_blocks = len(centroids) // frames_per_estimate
    if n_blocks == 0:
        return []
    xy = np.array([(c.theta_x, c.theta_y) for c in centroids[:n_blocks * frames_per_estimate]])
    xy = xy.reshape(n_blocks, frames_per_estimate, 2)
    var = xy.var(axis=1, ddof=1).sum(axis=1)
    # exact test: identical centroids can leave round-off variance
    constant = np.ptp(xy, axis=1).max(axis=1) == 0
    out = []
    for k, s2 in enumerate(var):
        if constant[k] or not s2 > 0:
            if skip_degenerate:
                continue
            raise DegenerateBlock(f"block {k} has constant centroids")
        out.append(FriedEstimate(k, r0_from_tilt_variance(float(s2), D, wavelength),
                                 frames_per_estimate, float(s2)))
    return out


def cn2_from_r0(r0: float, wavelength: float, L: float, const: float = PLANE_WAVE_CONST) -> float:
    """Cn^2 = r0^(-5/3) / (const k^2 L) for a plane wave over a horizontal path."""
    _positive(r0=r0, wavelength=wavelength, L=L)
    k = 2 * math.pi / wavelength
    return r0 ** (-5.0 / 3.0) / (const * k * k * L)


def r0_from_cn2(cn2: float, wavelength: float, L: float, const: float = PLANE_WAVE_CONST) -> float:
    _positive(cn2=cn2, wavelength=wavelength, L=L)
    k = 2 * math.pi / wavelength
    return (const * k * k * L * cn2) ** (-0.6)


def fluctuation_stats(series: Sequence[float]) -> tuple[float, float]:
    """(mean, relative standard deviation in percent), n-1 denominator."""
    x = np.asarray(series, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two values")
    mean = float(x.mean())
    if mean == 0:
        raise ValueError("zero mean: relative spread undefined")
    return mean, float(x.std(ddof=1) / abs(mean) * 100.0)


def r0_text(estimates: Sequence[FriedEstimate]) -> str:
    lines = ["second,r0_m,sigma2_rad2"]
    lines += [f"{e.second_index},{e.r0!r},{e.sigma2_2axis!r}" for e in estimates]
    return "\n".join(lines) + "\n"
