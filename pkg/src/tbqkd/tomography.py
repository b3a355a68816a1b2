"""Single-qubit polarization tomography and wave-plate compensation.

Wave-plate Jones matrices with the fast axis at angle t:
QWP(t) = R(t) diag(1, i) R(-t) and HWP(t) = R(t) diag(1, -1) R(-t).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .core import qber_from_visibility, visibility_from_purity

LABELS = ("H", "V", "D", "A", "R", "L")
TOL = 1e-10

_S = 1 / math.sqrt(2)
KETS = {
    "H": np.array([1, 0], complex),
    "V": np.array([0, 1], complex),
    "D": np.array([_S, _S], complex),
    "A": np.array([_S, -_S], complex),
    "R": np.array([_S, -1j * _S], complex),
    "L": np.array([_S, 1j * _S], complex),
}
PROJECTORS = np.array([np.outer(KETS[k], KETS[k].conj()) for k in LABELS])


@dataclass
class SixStateCounts:
    H: int
    V: int
    D: int
    A: int
    R: int
    L: int
    integration: float = 1.0

    def __post_init__(self):
        if any(c < 0 for c in self.as_array()):
            raise ValueError("counts must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([self.H, self.V, self.D, self.A, self.R, self.L], dtype=float)

    def check_complete(self) -> None:
        c = self.as_array()
        if min(c[0] + c[1], c[2] + c[3], c[4] + c[5]) <= 0:
            raise ValueError("every basis pair needs at least one count")


def is_density_matrix(rho: np.ndarray, tol: float = TOL) -> bool:
    rho = np.asarray(rho)
    if rho.shape != (2, 2):
        return False
    if np.max(np.abs(rho - rho.conj().T)) >= tol or abs(np.trace(rho) - 1) > tol:
        return False
    return bool(np.linalg.eigvalsh((rho + rho.conj().T) / 2).min() >= -tol)


def _check_rho(rho) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if not is_density_matrix(rho):
        raise ValueError("not a valid density matrix")
    return rho


def probabilities(rho) -> np.ndarray:
    return np.real(np.einsum("kij,ji->k", PROJECTORS, rho))


def project_counts(rho, total_per_basis: int, rng: np.random.Generator) -> SixStateCounts:
    """Binomial split of ``total_per_basis`` detections within each basis pair."""
    rho = _check_rho(rho)
    p = np.clip(probabilities(rho), 0.0, 1.0)
    out = []
    for k in (0, 2, 4):
        n = int(rng.binomial(total_per_basis, p[k] / (p[k] + p[k + 1])))
        out += [n, total_per_basis - n]
    return SixStateCounts(*out)


def _loglik(counts: np.ndarray, rho: np.ndarray) -> float:
    p = probabilities(rho)
    m = counts > 0
    if np.any(p[m] <= 0):
        return -math.inf
    return float(np.sum(counts[m] * np.log(p[m])))


def _trace_distance(a: np.ndarray, b: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.linalg.eigvalsh(a - b)).sum())


@dataclass
class Reconstruction:
    rho: np.ndarray
    iterations: int
    converged: bool
    loglik_trace: list


def mle_reconstruct(counts: SixStateCounts, max_iter: int = 1000, tol: float = TOL) -> Reconstruction:
    """Maximum-likelihood state by RrhoR iteration started at I/2.

    Each basis pair sums to the identity, so the per-pair multinomial
    likelihood is sum_k n_k log Tr(rho Pi_k).  If a full RrhoR step would lower
    the likelihood the step is diluted, (I + eps R) rho (I + eps R), with eps
    halved until it does not, so the recorded likelihood never decreases.
    """
    counts.check_complete()
    n = counts.as_array()
    total = n.sum()
    rho = np.eye(2, dtype=complex) / 2
    ll = _loglik(n, rho)
    trace = [ll]
    eye = np.eye(2)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = probabilities(rho)
        w = np.where(n > 0, n / np.where(p > 0, p, 1.0), 0.0) / total
        R = np.einsum("k,kij->ij", w, PROJECTORS)
        eps = None
        while True:
            op = R if eps is None else (eye + eps * R) / (1 + eps)
            new = op @ rho @ op
            new = new / np.trace(new).real
            new = (new + new.conj().T) / 2
            new_ll = _loglik(n, new)
            if new_ll >= ll - 1e-12 * abs(ll) or (eps is not None and eps < 1e-12):
                break
            eps = 1.0 if eps is None else eps / 2
        step = _trace_distance(new, rho)
        rho, ll = new, max(new_ll, ll)
        trace.append(new_ll)
        if step < tol:
            converged = True
            break
    return Reconstruction(rho, it, converged, trace)


def linear_inversion(counts: SixStateCounts) -> np.ndarray:
    """Bloch vector (sx, sy, sz) from pair-normalised count differences."""
    c = counts.as_array()
    sz = (c[0] - c[1]) / (c[0] + c[1])
    sx = (c[2] - c[3]) / (c[2] + c[3])
    sy = (c[5] - c[4]) / (c[4] + c[5])  # |R> = (1, -i)/sqrt2 is the sigma_y = -1 state
    return np.array([sx, sy, sz])


def bloch_to_rho(r) -> np.ndarray:
    x, y, z = r
    return 0.5 * np.array([[1 + z, x - 1j * y], [x + 1j * y, 1 - z]])


def purity(rho) -> float:
    rho = _check_rho(rho)
    return float(np.real(np.trace(rho @ rho)))


def qber_pol_from_purity(P: float) -> float:
    return qber_from_visibility(visibility_from_purity(P))


# --- wave plates -------------------------------------------------------------

def _rot(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s], [s, c]])


def qwp(theta: float) -> np.ndarray:
    return _rot(theta) @ np.diag([1, 1j]) @ _rot(-theta)


def hwp(theta: float) -> np.ndarray:
    return _rot(theta) @ np.diag([1, -1]).astype(complex) @ _rot(-theta)


def _plate_stack(t, diag2):
    """Vectorised plates for an array of angles: (..., 2, 2)."""
    c, s = np.cos(t), np.sin(t)
    # R(t) diag(1, d) R(-t)
    m = np.empty(np.shape(t) + (2, 2), complex)
    m[..., 0, 0] = c * c + diag2 * s * s
    m[..., 0, 1] = c * s - diag2 * c * s
    m[..., 1, 0] = c * s - diag2 * c * s
    m[..., 1, 1] = s * s + diag2 * c * c
    return m


@dataclass(frozen=True)
class WavePlateTriplet:
    qwp1: float
    hwp: float
    qwp2: float

    def __post_init__(self):
        for name in ("qwp1", "hwp", "qwp2"):
            object.__setattr__(self, name, float(getattr(self, name)) % math.pi)

    def matrix(self) -> np.ndarray:
        return qwp(self.qwp2) @ hwp(self.hwp) @ qwp(self.qwp1)


def process_fidelity(A: np.ndarray, B: np.ndarray) -> float:
    """|Tr(A^dag B)|^2 / 4: 1 iff A and B agree up to a global phase."""
    return float(abs(np.trace(A.conj().T @ B)) ** 2 / 4)


class CompensationError(RuntimeError):
    pass


def compensation_angles(U, step: float = math.pi / 36, target: float = 0.999) -> WavePlateTriplet:
    """Triplet with QWP(q2) HWP(h) QWP(q1) U equal to the identity up to phase."""
    U = np.asarray(U, dtype=complex)
    if U.shape != (2, 2) or np.max(np.abs(U.conj().T @ U - np.eye(2))) > 1e-9:
        raise ValueError("U must be a 2x2 unitary")
    grid = np.arange(0.0, math.pi, step)
    Q = _plate_stack(grid, 1j)
    Hp = _plate_stack(grid, -1)
    QU = Q @ U  # qwp1 applied to U
    HQU = np.einsum("hij,qjk->hqik", Hp, QU)
    # fidelity with identity = |Tr(Q2 HQU)|^2/4
    tr = np.einsum("pij,hqji->phq", Q, HQU)
    F = np.abs(tr) ** 2 / 4
    i2, ih, i1 = np.unravel_index(int(np.argmax(F)), F.shape)

    def loss(x):
        return 1.0 - abs(np.trace(qwp(x[2]) @ hwp(x[1]) @ qwp(x[0]) @ U)) ** 2 / 4

    x0 = np.array([grid[i1], grid[ih], grid[i2]])
    res = minimize(loss, x0, method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000})
    best = res.x if res.fun < loss(x0) else x0
    trip = WavePlateTriplet(*best)
    if process_fidelity(np.eye(2), trip.matrix() @ U) < target:
        raise CompensationError("compensation fidelity below target")
    return trip


# --- per-second IO ---------------------------------------------------------------

def read_counts(path) -> list[tuple[int, SixStateCounts]]:
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#") or line[0].isalpha():
            continue
        vals = [int(float(v)) for v in line.split(",")]
        if len(vals) != 7:
            raise ValueError(f"expected 7 fields, got {len(vals)}: {line!r}")
        out.append((vals[0], SixStateCounts(*vals[1:])))
    return out


def write_counts(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("second,H,V,D,A,R,L\n")
        for sec, c in rows:
            fh.write(f"{sec}," + ",".join(str(int(v)) for v in c.as_array()) + "\n")


def report_text(rows) -> str:
    """rows: (second, purity) pairs -> ``second,purity,qber_pol`` text."""
    lines = ["second,purity,qber_pol"]
    for sec, p in rows:
        p = min(max(p, 0.5), 1.0)
        lines.append(f"{sec},{p:.6f},{qber_pol_from_purity(p):.6f}")
    return "\n".join(lines) + "\n"


def mixed_state(unitaries: np.ndarray, rho0=None) -> np.ndarray:
    """Average of U rho0 U^dag over a stack of unitaries (rho0 defaults to |H><H|)."""
    rho0 = PROJECTORS[0] if rho0 is None else np.asarray(rho0, complex)
    rho = np.einsum("kij,jl,kml->im", unitaries, rho0, unitaries.conj()) / len(unitaries)
    return (rho + rho.conj().T) / 2
