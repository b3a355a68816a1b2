"""Command-line entry point: ``tbqkd <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 I/O or input-format error,
4 protocol abort, 5 run completed without a secure key.
"""
from __future__ import annotations

import argparse
import logging
import math
import socket
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .atmos import (DegenerateBlock, cn2_from_r0, fluctuation_stats, r0_series, r0_text, read_frame,
                    centroid_from_frame)
from .channel import CentroidSample, read_centroids, transmittance, write_centroids
from .config import FORMAT_VERSION, ConfigError, RunConfig, load_config
from .distill.bits import read_bits, write_bits
from .distill.decoy import asymptotic_key_rate, decoy_bounds, poisson_observables
from .distill.pipeline import amplify, qber_gate, reconcile
from .experiment import (analyze_experiment, emission_log, histogram_for, receiver_tags, simulate,
                         transmitter_tags)
from .session.protocol import ReceiverData, SessionAborted, TransmitterData, run_session
from .source import generate_pulse_train
from .timetag import read_tags, write_tags
from .tomography import mle_reconstruct, purity, read_counts, report_text, write_counts

log = logging.getLogger("tbqkd")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_ABORT, EXIT_NOKEY = 0, 2, 3, 4, 5


class NoKey(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.simulation = replace(cfg.simulation, seed=args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _report(path: Path, cfg: RunConfig, fields: dict) -> None:
    lines = [f"format_version={FORMAT_VERSION}", f"tool_version={__version__}"]
    lines += [f"{k}={v}" for k, v in fields.items()]
    lines.append("# config")
    lines += ["# " + ln for ln in cfg.echo().splitlines()]
    path.write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


# --- commands ------------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _config(args)
    duration = cfg.simulation.duration if args.duration is None else args.duration
    cfg.simulation = replace(cfg.simulation, duration=duration)
    out = _out(args)
    t0 = time.time()
    s = simulate(cfg)
    write_tags(out / "tx.ttag", transmitter_tags(s))
    write_tags(out / "rx.ttag", receiver_tags(s, blind=args.blind))
    write_centroids(out / "centroids.csv", s.centroids)
    write_counts(out / "tomography.csv", s.tomography)
    truth = {
        "duration_s": duration, "pulses": len(s.link.train), "detections": s.link.n_detections,
        "background_detections": int(s.link.background.sum()) if not args.blind else "hidden",
        "time_of_flight_ps": s.link.time_of_flight,
        "central_delay_ps": s.link.time_of_flight + cfg.decoder.bin_separation,
        "r0_mean_m": float(np.mean(s.r0_truth)) if s.r0_truth.size else None,
        "purity_mean": float(np.mean(s.purity_truth)) if s.purity_truth.size else None,
    }
    _report(out / "truth.txt", cfg, {k: _fmt(v) for k, v in truth.items()})
    log.info("simulated %.1f s: %d detections in %.1f s", duration, s.link.n_detections, time.time() - t0)
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config(args)
    out = _out(args)
    tx = read_tags(args.tx)
    rx = read_tags(args.rx)
    if args.blind:
        rx = rx.blind()
    duration = cfg.simulation.duration if args.duration is None else args.duration
    centroids = read_centroids(args.centroids) if args.centroids else None
    tomo = read_counts(args.tomography) if args.tomography else None
    res = analyze_experiment(cfg, emission_log(tx), rx.timestamps, rx.channels, duration,
                             centroids, tomo)
    (out / "series.csv").write_text(res.series_text())
    (out / "seconds.csv").write_text(res.timing.stats_text())
    if res.timing.acquisition_delay is not None and len(tx):
        hist = histogram_for(tx.timestamps, rx.timestamps, res.timing.acquisition_delay,
                             cfg.source.period_ps)
        (out / "histogram.csv").write_text(hist.to_text())
    key = res.timing.sifted
    write_bits(out / "sifted_tx.bits", key.transmitter_bits)
    write_bits(out / "sifted_rx.bits", key.receiver_bits)
    retained = res.timing.retained
    fields = {
        "seconds": len(res.timing.stats), "retained_seconds": len(retained),
        "acquisition_delay_ps": res.timing.acquisition_delay,
        "mean_qber_time": res.timing.mean_qber, "sifted_bits": len(key),
        "sifted_qber": key.qber,
        "status": "ok" if res.timing.mean_qber is not None else "no retained data",
    }
    _report(out / "analysis.txt", cfg, {k: _fmt(v) for k, v in fields.items()})
    print(f"mean_qber_time={_fmt(res.timing.mean_qber)} retained={len(retained)}/{len(res.timing.stats)}")
    return EXIT_OK


def _centroids_from_frames(paths, plate_scale: float, frame_rate: float) -> list[CentroidSample]:
    out = []
    for i, p in enumerate(sorted(paths)):
        tx, ty = centroid_from_frame(read_frame(p, plate_scale))
        out.append(CentroidSample(i / frame_rate, tx, ty))
    return out


def cmd_characterize(args) -> int:
    cfg = _config(args)
    out = _out(args)
    ch = cfg.channel
    inputs = [(Path(p).stem, read_centroids(p)) for p in args.centroids or []]
    if args.frames:
        if not args.plate_scale:
            raise ConfigError("--plate-scale is required with --frames")
        inputs.append(("frames", _centroids_from_frames(args.frames, args.plate_scale,
                                                        cfg.simulation.frame_rate)))
    if not inputs:
        raise ConfigError("nothing to characterize: give --centroids or --frames")
    fps = args.frames_per_estimate or max(int(round(cfg.simulation.frame_rate)), 2)
    table = ["label,blocks,degenerate,mean_r0_m,relative_std_pct,cn2_m-2/3"]
    for label, samples in inputs:
        n_blocks = len(samples) // fps
        est = r0_series(samples, fps, ch.beam_diameter, ch.wavelength_beacon, skip_degenerate=True)
        (out / f"r0_{label}.csv").write_text(r0_text(est))
        degenerate = n_blocks - len(est)
        if len(est) >= 2:
            mean, rel = fluctuation_stats([e.r0 for e in est])
            cn2 = cn2_from_r0(mean, ch.wavelength_beacon, ch.distance)
            table.append(f"{label},{n_blocks},{degenerate},{mean:.6g},{rel:.4g},{cn2:.4g}")
        else:
            table.append(f"{label},{n_blocks},{degenerate},,,")
    (out / "characterization.csv").write_text("\n".join(table) + "\n")
    print("\n".join(table))
    return EXIT_OK


def cmd_tomography(args) -> int:
    _config(args)
    out = _out(args)
    rows = []
    for sec, counts in read_counts(args.counts):
        rows.append((sec, purity(mle_reconstruct(counts).rho)))
    (out / "polarization.csv").write_text(report_text(rows))
    return EXIT_OK


def _observables(cfg: RunConfig, qber: float | None = None):
    d = cfg.decoy
    q = d.qber if qber is None else qber
    e_d = d.misalignment if d.misalignment is not None else q
    return poisson_observables(transmittance(d.loss_db), cfg.source.mu_signal, cfg.source.mu_decoy,
                               d.background, e_d, E_mu=q)


def cmd_keyrate(args) -> int:
    cfg = _config(args)
    obs = _observables(cfg)
    b = decoy_bounds(obs)
    rep = asymptotic_key_rate(obs, b, f_EC=cfg.decoy.f_ec, q=cfg.decoy.q,
                              repetition=cfg.source.repetition_rate,
                              signal_fraction=cfg.decoy.signal_fraction)
    fields = {"mu": obs.mu, "nu": obs.nu, "Y0": obs.Y0, "loss_db": cfg.decoy.loss_db,
              "Q_mu": obs.Q_mu, "Q_nu": obs.Q_nu, "E_mu": obs.E_mu, "E_nu": obs.E_nu,
              "Y1_lower": b.Y1_lower, "Q1_lower": b.Q1_lower, "e1_upper": b.e1_upper,
              "rate_per_pulse": rep.rate_per_pulse, "rate_bits_per_s": rep.rate_per_second,
              "q": rep.q, "f_EC": rep.f_EC, "status": "ok" if rep.rate_per_second > 0 else "no secure key"}
    text = "\n".join(f"{k}={_fmt(v)}" for k, v in fields.items())
    print(text)
    if args.out:
        _report(_out(args) / "keyrate.txt", cfg, {k: _fmt(v) for k, v in fields.items()})
    if rep.rate_per_second <= 0:
        raise NoKey("no secure key")
    return EXIT_OK


def cmd_distill(args) -> int:
    if args.role:
        return cmd_session(args)
    cfg = _config(args)
    out = _out(args)
    if not (args.tx_key and args.rx_key):
        raise ConfigError("offline distill needs --tx-key and --rx-key (or --role for a session)")
    tx, rx = read_bits(args.tx_key), read_bits(args.rx_key)
    if tx.size != rx.size:
        raise ValueError("paired key files differ in length")
    qber = float(np.count_nonzero(tx != rx)) / tx.size if tx.size else float("nan")
    fields = {"sifted_bits": tx.size, "qber": qber}
    if not qber_gate(qber):
        fields["status"] = "no secure key"
        fields["final_bits"] = 0
        write_bits(out / "final_tx.bits", [])
        write_bits(out / "final_rx.bits", [])
        _report(out / "distill.txt", cfg, {k: _fmt(v) for k, v in fields.items()})
        raise NoKey("QBER above the 11 % bound: no secure key")
    code = cfg.codes.build()
    recon = reconcile(tx, rx, code, max(qber, 1e-3), tag_seed=cfg.session.tag_seed,
                      max_iter=cfg.codes.max_iter)
    obs = _observables(cfg, qber=recon.corrected_qber if recon.corrected_qber is not None else qber)
    res = amplify(recon, decoy_bounds(obs), obs.Q_mu, np.random.default_rng(cfg.session.pa_seed))
    write_bits(out / "final_tx.bits", res.tx_final)
    write_bits(out / "final_rx.bits", res.rx_final)
    fields.update({"blocks": recon.n_blocks, "frame_error_rate": recon.frame_error_rate,
                   "f_EC": recon.f_ec(), "reconciled_bits": recon.tx_key.size, "leak_bits": res.leak,
                   "final_bits": res.final_length, "keys_identical": bool(np.array_equal(res.tx_final, res.rx_final)),
                   "status": "ok" if res.secure else "no secure key"})
    _report(out / "distill.txt", cfg, {k: _fmt(v) for k, v in fields.items()})
    print(f"final_bits={res.final_length} fer={recon.frame_error_rate:.3f}")
    if not res.secure:
        raise NoKey("no secure key")
    return EXIT_OK


def _connect(host: str, port: int, timeout: float) -> socket.socket:
    deadline = time.time() + timeout
    while True:
        try:
            return socket.create_connection((host, port), timeout=timeout)
        except OSError:
            if time.time() > deadline:
                raise
            time.sleep(0.05)


def cmd_session(args) -> int:
    cfg = _config(args)
    out = _out(args)
    host, port = cfg.session.host_port() if not args.endpoint else _split_endpoint(args.endpoint)
    duration = cfg.simulation.duration if args.duration is None else args.duration
    if args.role == "tx":
        local = TransmitterData(generate_pulse_train(cfg.source, duration), duration)
    else:
        if not args.rx:
            raise ConfigError("the receiver role needs --rx detections")
        tags = read_tags(args.rx).blind()
        local = ReceiverData(tags.timestamps, tags.channels, duration)
    code = cfg.codes.build()
    if args.role == "tx":
        with socket.create_server((host, port)) as srv:
            srv.settimeout(cfg.session.timeout)
            conn, _ = srv.accept()
    else:
        conn = _connect(host, port, cfg.session.timeout)
    with conn:
        try:
            res = run_session(args.role, conn, cfg, local, code)
        except SessionAborted as exc:
            log.error("session aborted: %s", exc)
            return EXIT_ABORT
    write_bits(out / f"key_{args.role}.bits", res.key)
    with open(out / f"transcript_{args.role}.bin", "wb") as fh:
        for direction, raw in res.transcript:
            fh.write((b">" if direction == "out" else b"<") + raw)
    fields = dict(res.stats)
    fields["status"] = "ok" if res.key.size else "no secure key"
    _report(out / f"session_{args.role}.txt", cfg, {k: _fmt(v) for k, v in fields.items()})
    print(f"role={args.role} final_bits={res.key.size}")
    if not res.key.size:
        raise NoKey("session produced no key")
    return EXIT_OK


def _split_endpoint(ep: str) -> tuple[str, int]:
    host, _, port = ep.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"endpoint {ep!r} is not host:port")
    return host, int(port)


# --- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tbqkd", description="Time-bin QKD link simulation and analysis")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="run configuration file")
        sp.add_argument("--seed", type=int, help="override simulation.seed")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--blind", action="store_true", help="strip ground-truth markers")

    sp = sub.add_parser("simulate", help="simulate a link run and write tag files")
    common(sp)
    sp.add_argument("--duration", type=float)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("analyze", help="time-correlation analysis of tag files")
    common(sp)
    sp.add_argument("--tx", required=True)
    sp.add_argument("--rx", required=True)
    sp.add_argument("--centroids")
    sp.add_argument("--tomography")
    sp.add_argument("--duration", type=float)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("characterize", help="Fried parameter and Cn2 from beacon data")
    common(sp)
    sp.add_argument("--centroids", nargs="+")
    sp.add_argument("--frames", nargs="+", help="FRAM image files, one per frame")
    sp.add_argument("--plate-scale", type=float, help="rad per pixel for --frames")
    sp.add_argument("--frames-per-estimate", type=int)
    sp.set_defaults(func=cmd_characterize)

    sp = sub.add_parser("tomography", help="purity and QBER_pol from six-state counts")
    common(sp)
    sp.add_argument("--counts", required=True)
    sp.set_defaults(func=cmd_tomography)

    for name, helptext in (("distill", "reconcile and amplify paired keys"),
                           ("session", "run one party of a networked session")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--role", choices=["tx", "rx"], required=name == "session")
        sp.add_argument("--endpoint", help="host:port (tx listens, rx connects)")
        sp.add_argument("--rx", help="receiver detection tag file")
        sp.add_argument("--duration", type=float)
        if name == "distill":
            sp.add_argument("--tx-key")
            sp.add_argument("--rx-key")
            sp.set_defaults(func=cmd_distill)
        else:
            sp.set_defaults(func=cmd_session)

    sp = sub.add_parser("keyrate", help="decoy bounds and asymptotic key rate")
    common(sp, out_required=False)
    sp.set_defaults(func=cmd_keyrate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except NoKey as exc:
        log.warning("%s", exc)
        return EXIT_NOKEY
    except SessionAborted as exc:
        log.error("session aborted: %s", exc)
        return EXIT_ABORT
    except (OSError, ValueError, DegenerateBlock) as exc:
        log.error("input/output error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
