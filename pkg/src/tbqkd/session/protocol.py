"""Two-party post-processing session over a reliable byte stream.

Message flow (TX = transmitter, RX = receiver):

    HELLO           TX -> RX -> TX   protocol parameters, must match
    per aggregation window:
      SECOND_SUMMARY RX -> TX        retained flag, detected pulse indices, measured bases
      BASIS_REVEAL   TX -> RX        prepared bases and intensity classes of those pulses
      SIFT_INDICES   RX -> TX        sift count and the receiver's decoy/vacuum test bits
    SYNDROME        RX -> TX         one per key block
    VERIFY_TAG      TX -> RX -> TX   per block: decode status and 64-bit tags
    PA_SEED         TX -> RX         output length and Toeplitz seed
    KEY_CONFIRM     TX -> RX -> TX   tag of the final key

Correlation (delay search, slot classification) runs at the receiver, so
detection times never leave it.  Only signal-class sifted bits enter the key;
decoy and vacuum bits are disclosed for parameter estimation.
"""
from __future__ import annotations

import enum
import math
import socket
import struct
from dataclasses import dataclass, field

import numpy as np

from ..config import RunConfig
from ..distill.decoy import DecoyObservables, decoy_bounds, pa_length
from ..distill.ldpc import LdpcCode, ldpc_decode, ldpc_syndrome
from ..distill.toeplitz import TAG_BITS, ToeplitzSpec, toeplitz_hash, verify_tag
from ..source import PS_PER_S, Intensity, PulseTrain
from ..timing import (PulseClock, classify_events, first_per_emission, measured_basis,
                      measured_bit, optimize_delay)
from .framing import FrameError, MsgType, frame_encode, read_frame


class Role(enum.Enum):
    TRANSMITTER = "tx"
    RECEIVER = "rx"


class Phase(enum.IntEnum):
    HELLO = 0
    SIFTING = 1
    RECONCILING = 2
    VERIFYING = 3
    AMPLIFYING = 4
    DONE = 5
    ABORTED = 6


# message types a party may receive in each phase
LEGAL = {
    (Role.TRANSMITTER, Phase.HELLO): {MsgType.HELLO},
    (Role.RECEIVER, Phase.HELLO): {MsgType.HELLO},
    (Role.TRANSMITTER, Phase.SIFTING): {MsgType.SECOND_SUMMARY, MsgType.SIFT_INDICES},
    (Role.RECEIVER, Phase.SIFTING): {MsgType.BASIS_REVEAL},
    (Role.TRANSMITTER, Phase.RECONCILING): {MsgType.SYNDROME},
    (Role.RECEIVER, Phase.RECONCILING): set(),
    (Role.TRANSMITTER, Phase.VERIFYING): {MsgType.VERIFY_TAG},
    (Role.RECEIVER, Phase.VERIFYING): {MsgType.VERIFY_TAG},
    (Role.TRANSMITTER, Phase.AMPLIFYING): {MsgType.KEY_CONFIRM},
    (Role.RECEIVER, Phase.AMPLIFYING): {MsgType.PA_SEED, MsgType.KEY_CONFIRM},
}


class SessionAborted(RuntimeError):
    pass


@dataclass
class TransmitterData:
    train: PulseTrain  # knows states and intensity classes of every pulse
    duration: float


@dataclass
class ReceiverData:
    times: np.ndarray  # detection timestamps, ps
    channels: np.ndarray
    duration: float


@dataclass
class SessionOptions:
    # test hook: transmitter tags its raw block instead of decoding
    skip_ec: bool = False


@dataclass
class SessionResult:
    role: Role
    phase: Phase
    key: np.ndarray
    transcript: list = field(default_factory=list)  # (direction, raw frame)
    stats: dict = field(default_factory=dict)

    @property
    def payloads(self) -> list[bytes]:
        return [raw[8:-4] for _, raw in self.transcript]


# --- payload helpers ---------------------------------------------------------------

def _pack_bits(bits) -> bytes:
    b = np.asarray(bits, np.uint8)
    return struct.pack(">I", b.size) + np.packbits(b).tobytes()


def _unpack_bits(buf: bytes, pos: int) -> tuple[np.ndarray, int]:
    (n,) = struct.unpack_from(">I", buf, pos)
    pos += 4
    nb = (n + 7) // 8
    if pos + nb > len(buf):
        raise FrameError("truncated bit field")
    bits = np.unpackbits(np.frombuffer(buf, np.uint8, nb, pos))[:n]
    return bits.astype(np.uint8), pos + nb


def _pack_u64(a) -> bytes:
    a = np.asarray(a, dtype=">u8")
    return struct.pack(">I", a.size) + a.tobytes()


def _unpack_u64(buf: bytes, pos: int) -> tuple[np.ndarray, int]:
    (n,) = struct.unpack_from(">I", buf, pos)
    pos += 4
    if pos + 8 * n > len(buf):
        raise FrameError("truncated index field")
    return np.frombuffer(buf, ">u8", n, pos).astype(np.int64), pos + 8 * n


def _pack_u8(a) -> bytes:
    a = np.asarray(a, np.uint8)
    return struct.pack(">I", a.size) + a.tobytes()


def _unpack_u8(buf: bytes, pos: int) -> tuple[np.ndarray, int]:
    (n,) = struct.unpack_from(">I", buf, pos)
    pos += 4
    if pos + n > len(buf):
        raise FrameError("truncated byte field")
    return np.frombuffer(buf, np.uint8, n, pos).copy(), pos + n


def hello_payload(cfg: RunConfig, code: LdpcCode, duration: float) -> bytes:
    src, co = cfg.source, cfg.coincidence
    fields = [
        ("protocol", 1), ("duration", repr(float(duration))),
        ("repetition_rate", repr(src.repetition_rate)), ("mu", repr(src.mu_signal)),
        ("nu", repr(src.mu_decoy)), ("proportions", repr(src.class_proportions)),
        ("aggregation", repr(co.aggregation)), ("snr_threshold", repr(co.snr_threshold)),
        ("block_size", code.n), ("code", code.digest()), ("tag_seed", cfg.session.tag_seed),
    ]
    return "\n".join(f"{k}={v}" for k, v in fields).encode()


# --- session core -----------------------------------------------------------------

class Session:
    def __init__(self, role: Role, sock: socket.socket, cfg: RunConfig, code: LdpcCode,
                 options: SessionOptions | None = None):
        self.role = role
        self.sock = sock
        self.cfg = cfg
        self.code = code
        self.options = options or SessionOptions()
        self.phase = Phase.HELLO
        self.transcript: list[tuple[str, bytes]] = []
        self.sock.settimeout(cfg.session.timeout)

    def send(self, mtype: MsgType, payload: bytes = b"") -> None:
        raw = frame_encode(mtype, payload)
        self.transcript.append(("out", raw))
        self.sock.sendall(raw)

    def recv(self, expected: MsgType) -> bytes:
        try:
            mtype, payload, raw = read_frame(self.sock)
        except (FrameError, OSError) as exc:
            self.abort(f"receive failed: {exc}")
        self.transcript.append(("in", raw))
        if mtype == MsgType.ABORT:
            self.phase = Phase.ABORTED
            raise SessionAborted(f"peer aborted: {payload.decode(errors='replace')}")
        if mtype not in LEGAL.get((self.role, self.phase), set()) or mtype != expected:
            self.abort(f"unexpected {mtype.name} in phase {self.phase.name}")
        return payload

    def abort(self, reason: str):
        self.phase = Phase.ABORTED
        try:
            raw = frame_encode(MsgType.ABORT, reason.encode()[:200])
            self.transcript.append(("out", raw))
            self.sock.sendall(raw)
        except OSError:
            pass
        raise SessionAborted(reason)

    def advance(self, phase: Phase) -> None:
        if phase < self.phase:
            self.abort(f"illegal transition {self.phase.name} -> {phase.name}")
        self.phase = phase

    def result(self, key, stats) -> SessionResult:
        return SessionResult(self.role, self.phase, key, self.transcript, stats)


def _hello(s: Session, duration: float) -> None:
    mine = hello_payload(s.cfg, s.code, duration)
    if s.role is Role.TRANSMITTER:
        s.send(MsgType.HELLO, mine)
        theirs = s.recv(MsgType.HELLO)
    else:
        theirs = s.recv(MsgType.HELLO)
        s.send(MsgType.HELLO, mine)
    if theirs != mine:
        s.abort("protocol parameters differ")


def _n_windows(cfg: RunConfig, duration: float) -> int:
    return int(math.ceil(round(duration / cfg.coincidence.aggregation, 9))) if duration > 0 else 0


def _window_pulses(cfg: RunConfig, w: int, n_total: int) -> tuple[int, int]:
    rate = cfg.source.repetition_rate * cfg.coincidence.aggregation
    lo = min(math.floor(round(w * rate, 6)), n_total)
    hi = min(math.floor(round((w + 1) * rate, 6)), n_total)
    return lo, hi


# --- receiver -------------------------------------------------------------------------

def _rx_correlate(cfg: RunConfig, clock: PulseClock, t: np.ndarray, ch: np.ndarray,
                  last_delay: int | None):
    co = cfg.coincidence
    # without vacuum knowledge the comb repeats every period: search within
    # half a period of the nominal central slot, then track
    period = clock.config.period_ps
    if last_delay is None:
        center, half = co.time_of_flight + co.slot_offset, int(period / 2) - co.bin_width
    else:
        center, half = last_delay, co.track_halfwidth
    res = optimize_delay(clock, t, co, center=center, halfwidth=half)
    if not res.found:
        return None, np.empty(0, np.int64), np.empty(0, np.int8), np.empty(0, np.uint8)
    c = classify_events(clock, t, ch, res.delay, co)
    pick = first_per_emission(c.emission, c.residual)
    return res.delay, c.emission[pick], c.slot[pick], c.port[pick]


def _run_receiver(s: Session, data: ReceiverData) -> SessionResult:
    cfg = s.cfg
    _hello(s, data.duration)
    s.advance(Phase.SIFTING)
    n_win = _n_windows(cfg, data.duration)
    n_total = math.floor(round(data.duration * cfg.source.repetition_rate, 6))
    clock = PulseClock(cfg.source, n_total)
    agg_ps = int(round(cfg.coincidence.aggregation * PS_PER_S))
    t = np.asarray(data.times, np.int64)
    ch = np.asarray(data.channels)
    win = (t - cfg.coincidence.time_of_flight) // agg_ps
    bounds = np.searchsorted(win, np.arange(n_win + 1))
    key_parts = []
    delay = None
    n_retained = 0
    for w in range(n_win):
        tw, cw = t[bounds[w]:bounds[w + 1]], ch[bounds[w]:bounds[w + 1]]
        rate = tw.size / cfg.coincidence.aggregation
        retained = rate >= cfg.coincidence.snr_threshold
        idx = np.empty(0, np.int64)
        slot = np.empty(0, np.int8)
        port = np.empty(0, np.uint8)
        if retained:
            d, idx, slot, port = _rx_correlate(cfg, clock, tw, cw, delay)
            if d is None:
                retained = False
            else:
                delay = d
        n_retained += retained
        basis = measured_basis(slot)
        s.send(MsgType.SECOND_SUMMARY, struct.pack(">IBI", w, retained, tw.size)
               + _pack_u64(idx) + _pack_bits(basis))
        p = s.recv(MsgType.BASIS_REVEAL)
        (w2,) = struct.unpack_from(">I", p, 0)
        tx_basis, pos = _unpack_bits(p, 4)
        inten, _ = _unpack_u8(p, pos)
        if w2 != w or tx_basis.size != idx.size or inten.size != idx.size:
            s.abort("basis reveal does not match summary")
        match = tx_basis == basis
        bits = measured_bit(slot, port)
        test = match & (inten != Intensity.SIGNAL)
        s.send(MsgType.SIFT_INDICES, struct.pack(">II", w, int(match.sum())) + _pack_bits(bits[test]))
        key_parts.append(bits[match & (inten == Intensity.SIGNAL)])
    sifted = np.concatenate(key_parts) if key_parts else np.empty(0, np.uint8)

    s.advance(Phase.RECONCILING)
    n = s.code.n
    n_blocks = sifted.size // n
    blocks = [sifted[b * n:(b + 1) * n] for b in range(n_blocks)]
    s.send(MsgType.SYNDROME, struct.pack(">I", n_blocks))
    for b, blk in enumerate(blocks):
        s.send(MsgType.SYNDROME, struct.pack(">I", b) + _pack_bits(ldpc_syndrome(blk, s.code)))

    s.advance(Phase.VERIFYING)
    accepted = []
    for b, blk in enumerate(blocks):
        p = s.recv(MsgType.VERIFY_TAG)
        b2, ok, tag = struct.unpack(">IBQ", p)
        mine = verify_tag(blk, cfg.session.tag_seed + b)
        good = b2 == b and ok == 1 and tag == mine
        s.send(MsgType.VERIFY_TAG, struct.pack(">IBQ", b, int(good), mine))
        if good:
            accepted.append(blk)
    rec = np.concatenate(accepted) if accepted else np.empty(0, np.uint8)

    s.advance(Phase.AMPLIFYING)
    p = s.recv(MsgType.PA_SEED)
    (m,) = struct.unpack_from(">I", p, 0)
    seed, _ = _unpack_bits(p, 4)
    if m > rec.size or (m and seed.size != rec.size - 1):
        s.abort("PA seed inconsistent with reconciled key")
    final = toeplitz_hash(rec, ToeplitzSpec(rec.size, m, seed)) if m else np.empty(0, np.uint8)
    p = s.recv(MsgType.KEY_CONFIRM)
    mine = verify_tag(final, cfg.session.tag_seed - 1)
    s.send(MsgType.KEY_CONFIRM, struct.pack(">Q", mine))
    if struct.unpack(">Q", p)[0] != mine:
        s.abort("final key confirmation failed")
    s.advance(Phase.DONE)
    return s.result(final, {"sifted": int(sifted.size), "blocks": n_blocks,
                            "accepted_blocks": len(accepted), "retained_windows": n_retained,
                            "windows": n_win, "final_length": int(final.size)})


# --- transmitter ------------------------------------------------------------------------

def _run_transmitter(s: Session, data: TransmitterData) -> SessionResult:
    cfg = s.cfg
    _hello(s, data.duration)
    s.advance(Phase.SIFTING)
    train = data.train
    n_win = _n_windows(cfg, data.duration)
    props = np.asarray(cfg.source.class_proportions)
    # expected pulses per class in retained windows; the realised counts differ
    # by ~sqrt(N), negligible next to the detection statistics
    pulses = np.zeros(3)
    clicks = np.zeros(3)
    test_err = np.zeros(3)
    test_n = np.zeros(3)
    key_parts = []
    sifted_total = 0
    for w in range(n_win):
        p = s.recv(MsgType.SECOND_SUMMARY)
        w2, retained, _count = struct.unpack_from(">IBI", p, 0)
        idx, pos = _unpack_u64(p, 9)
        rx_basis, _ = _unpack_bits(p, pos)
        if w2 != w or rx_basis.size != idx.size:
            s.abort("malformed second summary")
        lo, hi = _window_pulses(cfg, w, len(train))
        if idx.size and (idx.min() < lo - 1 or idx.max() > hi + 1):
            s.abort("reported pulse index outside its window")
        idx = np.clip(idx, 0, max(len(train) - 1, 0))
        states = train.states(idx).astype(np.int64) if idx.size else np.empty(0, np.int64)
        inten = train.intensities(idx).astype(np.uint8) if idx.size else np.empty(0, np.uint8)
        basis = (states >= 2).astype(np.uint8)
        s.send(MsgType.BASIS_REVEAL, struct.pack(">I", w) + _pack_bits(basis) + _pack_u8(inten))
        p = s.recv(MsgType.SIFT_INDICES)
        w3, n_match = struct.unpack_from(">II", p, 0)
        test_bits, _ = _unpack_bits(p, 8)
        match = basis == rx_basis
        test = match & (inten != Intensity.SIGNAL)
        if w3 != w or n_match != int(match.sum()) or test_bits.size != int(test.sum()):
            s.abort("sift confirmation mismatch")
        if retained:
            pulses += (hi - lo) * props
            clicks += np.bincount(inten, minlength=3)[:3]
            sent = (states[test] & 1).astype(np.uint8)
            cls = inten[test]
            test_n += np.bincount(cls, minlength=3)[:3]
            test_err += np.bincount(cls, weights=sent != test_bits, minlength=3)[:3]
        sifted_total += n_match
        key_parts.append((states[match & (inten == Intensity.SIGNAL)] & 1).astype(np.uint8))
    sifted = np.concatenate(key_parts) if key_parts else np.empty(0, np.uint8)

    s.advance(Phase.RECONCILING)
    n = s.code.n
    p = s.recv(MsgType.SYNDROME)
    (n_blocks,) = struct.unpack(">I", p)
    if n_blocks != sifted.size // n:
        s.abort("block count mismatch")
    syndromes = []
    for b in range(n_blocks):
        p = s.recv(MsgType.SYNDROME)
        (b2,) = struct.unpack_from(">I", p, 0)
        syn, _ = _unpack_bits(p, 4)
        if b2 != b or syn.size != s.code.m:
            s.abort("malformed syndrome")
        syndromes.append(syn)

    # decoder crossover: the configured design QBER.  The decoy test bits are
    # too few, and background-heavy, to steer the decoder.
    crossover = min(max(cfg.decoy.qber, 0.01), 0.2)
    s.advance(Phase.VERIFYING)
    accepted, errors = [], 0
    for b in range(n_blocks):
        blk = sifted[b * n:(b + 1) * n]
        if s.options.skip_ec:
            key, ok = blk, True
        else:
            res = ldpc_decode(blk, syndromes[b], s.code, crossover, cfg.codes.max_iter)
            key, ok = res.key, res.success
        tag = verify_tag(key, cfg.session.tag_seed + b)
        s.send(MsgType.VERIFY_TAG, struct.pack(">IBQ", b, int(ok), tag))
        p = s.recv(MsgType.VERIFY_TAG)
        b2, good, _ = struct.unpack(">IBQ", p)
        if b2 != b:
            s.abort("verify tag out of order")
        if good:
            accepted.append(key)
            errors += int(np.count_nonzero(key != blk))
    rec = np.concatenate(accepted) if accepted else np.empty(0, np.uint8)

    s.advance(Phase.AMPLIFYING)
    stats = {"sifted": int(sifted.size), "sifted_all_classes": sifted_total, "blocks": n_blocks,
             "accepted_blocks": len(accepted), "crossover_estimate": crossover}
    m = 0
    bounds = None
    gains = np.divide(clicks, pulses, out=np.zeros(3), where=pulses > 0)
    if rec.size:
        e_mu = errors / rec.size
        e_nu = test_err[Intensity.DECOY] / test_n[Intensity.DECOY] if test_n[Intensity.DECOY] else 0.5
        try:
            obs = DecoyObservables(gains[0], gains[1], e_mu, e_nu, gains[2],
                                   cfg.source.mu_signal, cfg.source.mu_decoy)
            bounds = decoy_bounds(obs)
            # syndromes of discarded blocks describe only discarded bits
            leak = len(accepted) * (s.code.m + TAG_BITS)
            m = pa_length(rec.size, bounds, obs.Q_mu, leak)
        except ValueError:
            m = 0
        stats.update(E_mu=e_mu, E_nu=e_nu, Q_mu=gains[0], Q_nu=gains[1], Y0=gains[2])
    if bounds is not None:
        stats.update(Y1_lower=bounds.Y1_lower, e1_upper=bounds.e1_upper)
    rng = np.random.default_rng([cfg.session.pa_seed, rec.size])
    seed = rng.integers(0, 2, rec.size - 1, dtype=np.uint8) if m else np.empty(0, np.uint8)
    s.send(MsgType.PA_SEED, struct.pack(">I", m) + _pack_bits(seed))
    final = toeplitz_hash(rec, ToeplitzSpec(rec.size, m, seed)) if m else np.empty(0, np.uint8)
    mine = verify_tag(final, cfg.session.tag_seed - 1)
    s.send(MsgType.KEY_CONFIRM, struct.pack(">Q", mine))
    p = s.recv(MsgType.KEY_CONFIRM)
    if struct.unpack(">Q", p)[0] != mine:
        s.abort("final key confirmation failed")
    s.advance(Phase.DONE)
    stats["final_length"] = int(final.size)
    return s.result(final, stats)


def run_session(role, sock: socket.socket, cfg: RunConfig, local, code: LdpcCode | None = None,
                options: SessionOptions | None = None) -> SessionResult:
    """Run one role of the protocol on a connected socket.

    Raises :class:`SessionAborted` (after sending ABORT where possible) on any
    protocol violation, malformed frame, timeout or failed confirmation.
    """
    role = Role(role)
    code = code if code is not None else cfg.codes.build()
    s = Session(role, sock, cfg, code, options)
    try:
        if role is Role.TRANSMITTER:
            return _run_transmitter(s, local)
        return _run_receiver(s, local)
    except (struct.error, FrameError, ValueError) as exc:
        if s.phase is Phase.ABORTED:
            raise SessionAborted(str(exc)) from None
        s.abort(f"malformed payload: {exc}")


def _windows64(bits: np.ndarray, width: int) -> np.ndarray:
    """Every ``width``-bit run of ``bits`` packed into bytes, one row per offset."""
    if bits.size < width:
        return np.empty((0, (width + 7) // 8), np.uint8)
    view = np.lib.stride_tricks.sliding_window_view(bits, width)
    return np.packbits(view, axis=1)


def audit_transcript(transcript, keys, min_bits: int = 64) -> list[tuple[int, int]]:
    """Frames whose payload contains a run of >= ``min_bits`` consecutive bits of
    any key, at any bit alignment.  Returns (frame number, key number) hits."""
    key_sets = []
    for key in keys:
        w = _windows64(np.asarray(key, np.uint8) & 1, min_bits)
        key_sets.append({r.tobytes() for r in w})
    hits = []
    for fi, (_, raw) in enumerate(transcript):
        bits = np.unpackbits(np.frombuffer(raw[8:-4], np.uint8))
        if bits.size < min_bits or not any(key_sets):
            continue
        rows = _windows64(bits, min_bits)
        rows = {r.tobytes() for r in rows}
        for ki, ks in enumerate(key_sets):
            if ks and not rows.isdisjoint(ks):
                hits.append((fi, ki))
    return hits
