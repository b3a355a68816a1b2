"""Block reconciliation, verification and privacy amplification on paired keys."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..core import binary_entropy
from .decoy import DecoyBounds, pa_length
from .ldpc import LdpcCode, ldpc_decode, ldpc_generate, ldpc_syndrome
from .toeplitz import TAG_BITS, ToeplitzSpec, toeplitz_hash, verify_tag


@dataclass
class CodeConfig:
    block_size: int = 4096
    rate: float = 0.65
    profile: str = "irregular"
    seed: int = 4
    max_iter: int = 60

    def build(self) -> LdpcCode:
        return ldpc_generate(self.block_size, self.rate, self.seed, self.profile)


@dataclass
class KeyRateConfig:
    """Inputs of a stand-alone key-rate evaluation (Table-1-style parameters)."""

    loss_db: float = 38.4
    qber: float = 0.0532
    background: float = 3.65e-7
    misalignment: float | None = None  # defaults to qber
    f_ec: float = 1.17
    q: float = 0.5
    signal_fraction: float = 0.8


@dataclass
class BlockOutcome:
    index: int
    decoded: bool
    verified: bool
    errors: int  # bits the decoder flipped
    iterations: int


@dataclass
class ReconciliationResult:
    blocks: list[BlockOutcome]
    tx_key: np.ndarray  # concatenated verified blocks
    rx_key: np.ndarray
    syndrome_bits: int  # disclosed, including failed blocks
    block_size: int

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def frame_error_rate(self) -> float:
        return sum(not b.verified for b in self.blocks) / self.n_blocks if self.blocks else 0.0

    @property
    def corrected_qber(self) -> float | None:
        ok = [b for b in self.blocks if b.verified]
        return sum(b.errors for b in ok) / (len(ok) * self.block_size) if ok else None

    def f_ec(self, qber: float | None = None) -> float | None:
        """Syndrome bits per block bit over H2(qber)."""
        q = self.corrected_qber if qber is None else qber
        ok = sum(b.verified for b in self.blocks)
        if not ok or not q:
            return None
        return self.syndrome_bits / self.n_blocks / (self.block_size * binary_entropy(q))


def reconcile(tx_bits, rx_bits, code: LdpcCode, crossover: float, tag_seed: int = 0,
              max_iter: int = 60) -> ReconciliationResult:
    """The receiver discloses one syndrome per block; the transmitter decodes its
    copy towards the receiver's key.  Blocks whose 64-bit tags disagree are dropped."""
    tx = np.asarray(tx_bits, np.uint8) & 1
    rx = np.asarray(rx_bits, np.uint8) & 1
    if tx.size != rx.size:
        raise ValueError("paired keys differ in length")
    n = code.n
    crossover = min(max(crossover, 1e-6), 0.499)
    blocks, keep_tx, keep_rx = [], [], []
    for b in range(tx.size // n):
        a, r = tx[b * n:(b + 1) * n], rx[b * n:(b + 1) * n]
        syn = ldpc_syndrome(r, code)
        res = ldpc_decode(a, syn, code, crossover, max_iter)
        verified = res.success and verify_tag(res.key, tag_seed + b) == verify_tag(r, tag_seed + b)
        blocks.append(BlockOutcome(b, res.success, bool(verified),
                                   int(np.count_nonzero(res.key != a)), res.iterations))
        if verified:
            keep_tx.append(res.key)
            keep_rx.append(r)
    cat = (lambda x: np.concatenate(x) if x else np.empty(0, np.uint8))
    return ReconciliationResult(blocks, cat(keep_tx), cat(keep_rx), len(blocks) * code.m, n)


@dataclass
class DistillResult:
    recon: ReconciliationResult
    final_length: int
    tx_final: np.ndarray
    rx_final: np.ndarray
    leak: int
    notes: list[str] = field(default_factory=list)

    @property
    def secure(self) -> bool:
        return self.final_length > 0


def amplify(recon: ReconciliationResult, bounds: DecoyBounds | None, Q_mu: float | None,
            rng: np.random.Generator) -> DistillResult:
    """Toeplitz-compress the reconciled key to its secure length.

    The leak charged is the syndrome and 64-bit tag of every accepted block;
    discarded blocks reveal nothing about the bits that are kept.
    Without decoy bounds the whole reconciled key is treated as single-photon with
    e1 given by the corrected QBER.
    """
    n = recon.tx_key.size
    accepted = sum(b.verified for b in recon.blocks)
    leak = accepted * (recon.syndrome_bits // max(recon.n_blocks, 1) + TAG_BITS)
    notes = []
    if bounds is None:
        q = recon.corrected_qber or 0.0
        bounds = DecoyBounds(1.0, min(q, 0.5), 1.0)
        Q_mu = 1.0
        notes.append("no decoy data: single-photon fraction taken as 1")
    m = pa_length(n, bounds, Q_mu, leak) if n else 0
    if m == 0:
        notes.append("no secure key")
        empty = np.empty(0, np.uint8)
        return DistillResult(recon, 0, empty, empty, leak, notes)
    spec = ToeplitzSpec.random(n, m, rng)
    return DistillResult(recon, m, toeplitz_hash(recon.tx_key, spec),
                         toeplitz_hash(recon.rx_key, spec), leak, notes)


def qber_gate(qber: float, limit: float = 0.11) -> bool:
    """True when the error rate leaves room for a key at all."""
    return qber < limit and not math.isnan(qber)
