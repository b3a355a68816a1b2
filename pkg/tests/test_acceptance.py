"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (also collected into the
terminal summary) and then asserts.  Long simulations run at 1/10 of the
150 MHz repetition rate with the rates scaled as in ``presets``.
"""
import itertools
import math
import socket
import subprocess
import sys
import threading
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import curve_fit

from conftest import ACCEPTANCE_LINES
from tbqkd.atmos import cn2_from_r0, fluctuation_stats, r0_from_tilt_variance, r0_series, tilt_variance_from_r0
from tbqkd.channel import synth_centroid_series
from tbqkd.cli import main
from tbqkd.core import qber_from_visibility
from tbqkd.distill.bits import read_bits
from tbqkd.distill.decoy import (asymptotic_key_rate, decoy_bounds, poisson_observables,
                                 sample_observables, true_single_photon)
from tbqkd.distill.pipeline import CodeConfig, reconcile
from tbqkd.distill.toeplitz import ToeplitzSpec, toeplitz_hash
from tbqkd.experiment import (analyze_experiment, emission_log, histogram_for, receiver_tags,
                              simulate, transmitter_tags)
from tbqkd.presets import LINK_PRESETS, link_preset
from tbqkd.session.framing import MsgType, frame_encode, read_frame
from tbqkd.session.protocol import audit_transcript
from tbqkd.tomography import qber_pol_from_purity

D, LAM, L = 0.12, 850e-9, 1200.0
R0_MEAN = 0.0783


def record(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def _run(cfg):
    s = simulate(cfg)
    tx, rx = transmitter_tags(s), receiver_tags(s, blind=True)
    a = analyze_experiment(cfg, emission_log(tx), rx.timestamps, rx.channels,
                           cfg.simulation.duration, s.centroids, s.tomography)
    return s, a


@pytest.fixture(scope="module")
def turbulent():
    return _run(link_preset("turbulent", rate_scale=0.1))


def test_criterion_01_tilt_round_trip():
    t0 = time.time()
    worst = max(abs(r0_from_tilt_variance(tilt_variance_from_r0(r, D, LAM), D, LAM) / r - 1)
                for r in (0.01, 0.0783, 0.1, 1.0))
    s2 = tilt_variance_from_r0(R0_MEAN, D, LAM)
    ok = worst <= 1e-12 and abs(s2 / 3.94e-9 - 1) <= 0.005 and time.time() - t0 < 1
    record(1, ok, f"round-trip rel err {worst:.1e}; sigma2(7.83 cm) = {s2:.4e} rad^2")
    assert ok


def test_criterion_02_fried_closed_loop():
    t0 = time.time()
    samples = synth_centroid_series(R0_MEAN, D, LAM, 20.0, 600.0, seed=2)
    est = r0_series(samples, 20, D, LAM)
    r0 = np.array([e.r0 for e in est])
    med = float(np.median(r0))
    _, rel = fluctuation_stats(r0)
    dt = time.time() - t0
    ok = len(est) == 600 and abs(med / R0_MEAN - 1) <= 0.15 and dt < 10
    record(2, ok, f"block-median r0 {100 * med:.2f} cm (target 7.83 +/- 15 %); "
                  f"relative std {rel:.1f} % at constant r0 (reference 25.4 %); {dt:.1f} s")
    assert ok


def test_criterion_03_cn2():
    cn2 = cn2_from_r0(R0_MEAN, LAM, L)
    ok = 2.36e-15 <= cn2 <= 3.20e-15
    record(3, ok, f"Cn2 = {cn2:.3e} m^-2/3 (bracket [2.36, 3.20]e-15, reference 2.78e-15)")
    assert ok


def test_criterion_04_qber_floors():
    q = qber_from_visibility(0.16)
    ends = (qber_pol_from_purity(1.0), qber_pol_from_purity(0.5))
    ok = q == 0.42 and ends == (0.0, 0.5)
    record(4, ok, f"QBER(V=0.16) = {q!r}; qber_pol(P=1, 0.5) = {ends}")
    assert ok


def test_criterion_05_turbulent_run(turbulent):
    t0 = time.time()
    s, a = turbulent
    q = np.array([r.qber_time for r in a.series if r.retained])
    mean, std = a.timing.mean_qber, float(np.std(q, ddof=1))
    lo, hi = np.percentile(s.r0_truth, [10, 90])
    _, r0_rel = fluctuation_stats(s.r0_truth)
    ok = abs(mean - 0.0532) <= 0.003 and std < 0.015 and len(q) >= 590
    record(5, ok, f"mean QBER_time {100 * mean:.2f} % (5.32 +/- 0.3), per-second std {100 * std:.2f} pp "
                  f"over {len(q)} retained s; r0 10-90 % range {100 * lo:.1f}-{100 * hi:.1f} cm "
                  f"(rel std {r0_rel:.1f} %)")
    assert ok


def test_criterion_06_depolarization(turbulent):
    base = turbulent[1].timing.mean_qber
    cfg = link_preset("turbulent", rate_scale=0.1)
    cfg.drift = link_preset("depolarizing", rate_scale=0.1, calibrate=False).drift
    s, a = _run(cfg)
    qp = np.array([r.qber_pol for r in a.series if r.qber_pol is not None])
    est = np.array([a.purity[k] for k in sorted(a.purity)])
    perr = float(np.abs(est - s.purity_truth).max())
    shift = abs(a.timing.mean_qber - base)
    # the depolarizing reference column on its own calibration
    _, d = _run(link_preset("depolarizing", rate_scale=0.1))
    ok = qp.min() < 0.05 and qp.max() > 0.40 and shift < 0.01 and perr <= 0.02
    record(6, ok, f"qber_pol spans [{qp.min():.3f}, {qp.max():.3f}]; QBER_time shift {100 * shift:.2f} pp; "
                  f"max purity error {perr:.4f}; depolarizing column mean {100 * d.timing.mean_qber:.2f} % "
                  f"(reference 5.08 %)")
    assert ok


def test_criterion_07_decoy_monte_carlo():
    p = LINK_PRESETS["turbulent"]
    eta = 10 ** (-p["loss_db"] / 10)
    e_d = p["qber"]
    y1, e1 = true_single_photon(eta, p["Y0"], e_d)
    # 600 s at 150 MHz split over the signal/decoy/vacuum classes
    n = 600 * 1.5e8
    counts = [int(n * f) for f in (0.80, 0.14, 0.06)]
    rng = np.random.default_rng(7)
    ratio, e_ok = [], []
    for _ in range(1000):
        b = decoy_bounds(sample_observables(eta, p["mu"], p["nu"], p["Y0"], e_d, *counts, rng))
        ratio.append(b.Y1_lower / y1)
        e_ok.append(b.e1_upper >= e1)
    ratio = np.array(ratio)
    frac_y = float(np.mean((ratio >= 0.93) & (ratio <= 1.0)))
    frac_e = float(np.mean(e_ok))
    point = decoy_bounds(poisson_observables(eta, p["mu"], p["nu"], p["Y0"], e_d, E_mu=e_d))
    point_ok = (float(f"{point.Y1_lower:.3g}") == float(f"{1.414e-4:.3g}")
                and round(point.e1_upper, 3) == 0.060)
    ok = frac_y >= 0.99 and frac_e >= 0.99 and point_ok
    record(7, ok, f"Y1_lower/Y1 in [0.93, 1] for {100 * frac_y:.1f} %, e1_upper >= e1 for {100 * frac_e:.1f} % "
                  f"of 1000 trials; point Y1_lower {point.Y1_lower:.4e}, e1_upper {point.e1_upper:.4f}")
    assert ok


def test_criterion_08_key_rate():
    rates = {}
    for kind in ("turbulent", "depolarizing"):
        p = LINK_PRESETS[kind]
        obs = poisson_observables(10 ** (-p["loss_db"] / 10), p["mu"], p["nu"], p["Y0"], p["qber"],
                                  E_mu=p["qber"])
        rates[kind] = asymptotic_key_rate(obs, decoy_bounds(obs)).rate_per_second
    p = LINK_PRESETS["turbulent"]
    zero = []
    for q in (0.11, 0.12, 0.15):
        obs = poisson_observables(10 ** (-p["loss_db"] / 10), p["mu"], p["nu"], p["Y0"], q, E_mu=q)
        zero.append(asymptotic_key_rate(obs, decoy_bounds(obs)).rate_per_second)
    band_d = (100 * 138.8 / 154.2, 260 * 138.8 / 154.2)
    ok = (100 <= rates["turbulent"] <= 260 and band_d[0] <= rates["depolarizing"] <= band_d[1]
          and all(z == 0 for z in zero))
    record(8, ok, f"turbulent {rates['turbulent']:.1f} bits/s (reference 154.2, band [100, 260]); depolarizing "
                  f"{rates['depolarizing']:.1f} bits/s (reference 138.8, band [{band_d[0]:.0f}, {band_d[1]:.0f}]); "
                  f"rate at QBER >= 11 %: {zero}")
    assert ok


def test_criterion_09_reconciliation():
    t0 = time.time()
    code = CodeConfig().build()
    rng = np.random.default_rng(0)
    rx = rng.integers(0, 2, 100 * code.n, dtype=np.uint8)
    tx = rx ^ (rng.random(rx.size) < 0.0532).astype(np.uint8)
    recon = reconcile(tx, rx, code, 0.0532)
    f_ec = recon.f_ec(0.0532)
    mismatch = int(np.count_nonzero(recon.tx_key != recon.rx_key))
    dt = time.time() - t0
    ok = recon.frame_error_rate <= 0.10 and f_ec <= 1.25 and mismatch == 0 and dt < 120
    record(9, ok, f"FER {100 * recon.frame_error_rate:.0f} % over 100 blocks (limit 10 %); f_EC {f_ec:.3f}; "
                  f"residual mismatch {mismatch} bits; {dt:.0f} s")
    assert ok


def test_criterion_10_toeplitz_universal():
    t0 = time.time()
    n, m = 12, 4
    keys = np.array(list(itertools.product((0, 1), repeat=n)), np.uint8)  # 4096
    seeds = np.array(list(itertools.product((0, 1), repeat=n - 1)), np.uint8)  # 2048
    # independent construction: row i of (I | T) reads seed[m-1-i .. m-1-i+n-m)
    zero_hits = np.zeros(len(keys), np.int64)
    for s in seeds:
        M = np.zeros((m, n), np.int64)
        M[:, :m] = np.eye(m, dtype=np.int64)
        for i in range(m):
            M[i, m:] = s[m - 1 - i:m - 1 - i + n - m]
        out = (keys @ M.T) & 1
        zero_hits += ~out.any(axis=1)
    # GF(2)-linear: h(a) = h(b) iff h(a ^ b) = 0, so every pair's collision
    # count over seeds is the zero-hash count of its difference
    worst = zero_hits[1:].max() / len(seeds)
    # direct pairwise check through the implementation on sampled pairs
    rng = np.random.default_rng(10)
    specs = [ToeplitzSpec(n, m, s) for s in seeds]
    for _ in range(20):
        a, b = rng.choice(len(keys), 2, replace=False)
        hits = sum(np.array_equal(toeplitz_hash(keys[a], sp), toeplitz_hash(keys[b], sp)) for sp in specs)
        assert hits == zero_hits[a ^ b]
    dt = time.time() - t0
    ok = worst <= 2**-m and dt < 60
    record(10, ok, f"max collision probability {worst:.4f} over all {len(keys) * (len(keys) - 1) // 2} "
                   f"pairs and 2^11 seeds (bound 2^-4 = 0.0625); {dt:.1f} s")
    assert ok


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _transcript(path):
    data = path.read_bytes()
    frames, pos = [], 0
    while pos < len(data):
        direction = "out" if data[pos:pos + 1] == b">" else "in"
        length = int.from_bytes(data[pos + 5:pos + 9], "big")
        frames.append((direction, data[pos + 1:pos + 13 + length]))
        pos += 13 + length
    return frames


def test_criterion_11_session(tmp_path):
    t0 = time.time()
    cfg = link_preset("turbulent", rate_scale=0.1)
    cfg.simulation = replace(cfg.simulation, duration=60.0)
    cfg.session = replace(cfg.session, endpoint=f"127.0.0.1:{_free_port()}")
    (tmp_path / "run.cfg").write_text(cfg.echo())
    common = ["--config", str(tmp_path / "run.cfg")]
    assert main(["simulate", *common, "--out", str(tmp_path / "sim"), "--blind"]) == 0
    cli = [sys.executable, "-m", "tbqkd.cli", "session", *common]
    tx = subprocess.Popen(cli + ["--role", "tx", "--out", str(tmp_path / "tx")])
    rx = subprocess.Popen(cli + ["--role", "rx", "--out", str(tmp_path / "rx"),
                                 "--rx", str(tmp_path / "sim" / "rx.ttag")])
    rc = (tx.wait(timeout=300), rx.wait(timeout=300))
    k_tx = read_bits(tmp_path / "tx" / "key_tx.bits")
    k_rx = read_bits(tmp_path / "rx" / "key_rx.bits")
    same = k_tx.size > 0 and np.array_equal(k_tx, k_rx)
    hits = []
    for role in ("tx", "rx"):
        hits += audit_transcript(_transcript(tmp_path / role / f"transcript_{role}.bin"), [k_tx, k_rx])

    # a receiver process facing a corrupted frame must abort (exit 4) and say so
    srv = socket.create_server(("127.0.0.1", 0))
    port = srv.getsockname()[1]
    got = []

    def peer():
        conn, _ = srv.accept()
        with conn:
            bad = bytearray(frame_encode(MsgType.HELLO, b"protocol=1"))
            bad[-2] ^= 0x10
            conn.sendall(bytes(bad))
            try:
                got.append(read_frame(conn)[0])
            except Exception:
                pass

    th = threading.Thread(target=peer)
    th.start()
    crc_rc = subprocess.run(cli + ["--role", "rx", "--endpoint", f"127.0.0.1:{port}", "--out",
                                   str(tmp_path / "crc"), "--rx", str(tmp_path / "sim" / "rx.ttag")],
                            timeout=120).returncode
    th.join()
    srv.close()
    dt = time.time() - t0
    ok = rc == (0, 0) and same and not hits and crc_rc == 4 and got == [MsgType.ABORT] and dt < 120
    record(11, ok, f"exit codes {rc}, identical keys of {k_tx.size} bits: {same}; audit hits {len(hits)}; "
                   f"corrupted frame -> exit {crc_rc}, peer saw {[t.name for t in got]}; {dt:.0f} s")
    assert ok


def test_criterion_12_histogram():
    t0 = time.time()
    cfg = link_preset("turbulent", rate_scale=1.0)
    s = simulate(cfg, 2.0)
    tx, rx = transmitter_tags(s), receiver_tags(s)
    period = cfg.source.period_ps
    delay = s.link.time_of_flight + cfg.decoder.bin_separation
    x_basis = tx.channels >= 2
    h = histogram_for(tx.timestamps[x_basis], rx.timestamps, delay, period, seconds=2.0, bin_width=20)
    c, y = h.centers, h.counts

    def gauss(x, a, mu, sig, b):
        return a * np.exp(-0.5 * ((x - mu) / sig) ** 2) + b

    fits = {}
    for k in (-1, 0, 1):
        for side in (-2000, 0, 2000):
            center = k * period + side
            sel = (c >= center - 1000) & (c < center + 1000)
            p, _ = curve_fit(gauss, c[sel], y[sel], p0=[y[sel].max(), center, 200, 0])
            fits[k, side] = (p[0], p[1], 2 * math.sqrt(2 * math.log(2)) * abs(p[2]))
    pos_err = max(abs(f[1] - (k * period + sd)) for (k, sd), f in fits.items())
    fwhm = [f[2] for f in fits.values()]
    fwhm_err = max(abs(w / 500 - 1) for w in fwhm)
    dominance = min(fits[k, 0][0] / max(fits[k, -2000][0], fits[k, 2000][0]) for k in (-1, 0, 1))
    dt = time.time() - t0
    ok = pos_err < 50 and fwhm_err <= 0.15 and dominance > 1.5 and dt < 30
    record(12, ok, f"peaks within {pos_err:.0f} ps of k*{period:.0f} + {{-2000, 0, 2000}}; "
                   f"central/side height ratio >= {dominance:.2f}; FWHM {min(fwhm):.0f}-{max(fwhm):.0f} ps "
                   f"(500 +/- 15 %); {dt:.1f} s")
    assert ok
