"""Command line entry point: ``cosurf run | eval ate | eval surface | export``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from .collab import Session
from .config import SessionConfig
from .eval import TrajectoryPair, ate_rmse, surface_accuracy, timing_report
from .frame import load_tum_sequence, read_trajectory
from .geometry import Intrinsics
from .scenarios import render_sequence, three_camera_fixture, two_camera_fixture
from .scene import NoiseSpec, load_scene, parse_scene
from .surfelmap import export_ply, load_map, read_ply, save_map

log = logging.getLogger("cosurf")

LISTEN_ENV = "COSURF_LISTEN"


def _parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not port.isdigit():
        raise argparse.ArgumentTypeError(f"address must be host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _config(path) -> SessionConfig:
    return SessionConfig.load(path) if path else SessionConfig()


def _scene_sequences(args, config: SessionConfig):
    scene = load_scene(args.scene)
    if not scene.trajectories:
        raise SystemExit(f"{args.scene}: no 'traj' lines, nothing to render")
    k = Intrinsics.default(args.width, args.height)
    noise = NoiseSpec(args.noise, args.seed) if args.noise > 0 else None
    seqs, start = {}, {}
    for cam, entries in sorted(scene.trajectories.items()):
        entries = entries[: args.frames] if args.frames else entries
        start[cam] = entries[0][0]
        seqs[cam] = render_sequence(scene, [p for _, p in entries], k, cam, noise)
    return seqs, start, {}


def _fixture_sequences(args, config: SessionConfig):
    fx = {"two-camera": two_camera_fixture, "three-camera": three_camera_fixture}[args.fixture]()
    seqs = {c: fx.frames(c) for c in fx.poses}
    if args.frames:
        seqs = {c: s[: args.frames] for c, s in seqs.items()}
    return seqs, dict(fx.start), {c: fx.ground_truth(c) for c in fx.poses}


def _tum_sequences(args, config):
    # the single sequence is cut into equal consecutive parts, one per pseudo camera
    seq, gt = load_tum_sequence(args.tum, factor=args.downscale)
    n = args.cameras
    parts = seq.split(n) if n > 1 else [seq]
    seqs = {p.camera_id: p[: args.frames or len(p)] for p in parts}
    return seqs, {c: 0 for c in seqs}, {c: gt for c in seqs} if gt else {}


def _write_outputs(session: Session, out: Path, gt: dict) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    session.write_trajectories(out)
    (out / "session.log").write_text(session.session_log())
    (out / "timing.csv").write_text(timing_report(session.timings).to_csv())
    for ref in session.live_refs():
        save_map(ref.map, out / f"map_{ref.id}.npz")
        (out / f"map_{ref.id}.ply").write_bytes(export_ply(ref.map, stable_only=True))
    summary = {
        "timesteps": session.step,
        "merges": len(session.events),
        "live_reference_frames": [r.id for r in session.live_refs()],
        "tracking_failures": dict(session.failures),
        "dropped_frames": dict(session.drops),
    }
    if gt:
        summary["ate_rmse"] = {}
        for c in session.cameras:
            if c in gt:
                try:
                    summary["ate_rmse"][c] = ate_rmse(TrajectoryPair(session.trajectory(c), gt[c]))
                except ValueError as e:
                    log.warning("camera %d: %s", c, e)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str))
    return summary


def cmd_run(args) -> int:
    config = _config(args.config)
    out = Path(args.out)
    serve = args.serve or (os.environ.get(LISTEN_ENV) and _parse_address(os.environ[LISTEN_ENV]))
    if serve:
        return _serve(config, serve, out)
    if args.scene:
        seqs, start, gt = _scene_sequences(args, config)
    elif args.tum:
        seqs, start, gt = _tum_sequences(args, config)
    else:
        seqs, start, gt = _fixture_sequences(args, config)
    config.validate(len(seqs))
    session = Session(config)
    t0 = time.perf_counter()
    session.run(seqs, start)
    log.info("processed %d timesteps in %.1f s", session.step, time.perf_counter() - t0)
    summary = _write_outputs(session, out, gt)
    print(json.dumps(summary, indent=2, default=str))
    return 0


def _serve(config: SessionConfig, address, out: Path) -> int:
    from .protocol import FrameServer

    session = Session(config)
    server = FrameServer(session, *address)
    print(f"listening on {server.address[0]}:{server.address[1]}", flush=True)
    server.start()
    try:
        while True:
            time.sleep(0.5)
            cams = set(session.camera_ref)
            if cams and cams <= server.stats.finished and not session.pending():
                break
    except KeyboardInterrupt:
        pass
    server.stop()
    print(json.dumps(_write_outputs(session, out, {}), indent=2, default=str))
    return 0


def cmd_eval_ate(args) -> int:
    tp = TrajectoryPair(read_trajectory(args.est), read_trajectory(args.gt), args.max_dt)
    print(f"{ate_rmse(tp):.6f}")
    return 0


def cmd_eval_surface(args) -> int:
    pts = read_ply(Path(args.map).read_bytes()).points
    ref_path = Path(args.ref)
    if ref_path.suffix == ".ply":
        ply = read_ply(ref_path.read_bytes())
        reference = ply.triangles() if ply.triangles() is not None else ply.points
    else:
        reference = parse_scene(ref_path.read_text())
    print(f"{surface_accuracy(pts, reference):.6f}")
    return 0


def cmd_export(args) -> int:
    path = Path(args.session) / f"map_{args.map}.npz"
    if not path.exists():
        raise SystemExit(f"no saved map {args.map} in {args.session}")
    config = _config(args.config)
    data = export_ply(load_map(path, config.surfel), args.mode, config.palette, args.stable_only)
    if args.out == "-":
        sys.stdout.buffer.write(data)
    else:
        Path(args.out).write_bytes(data)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cosurf", description="Collaborative dense surfel mapping")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a mapping session")
    src = run.add_mutually_exclusive_group()
    src.add_argument("--scene", help="synthetic scene file with per-camera 'traj' lines")
    src.add_argument("--tum", help="TUM RGB-D sequence directory")
    src.add_argument("--fixture", choices=["two-camera", "three-camera"], default="two-camera",
                     help="built-in synthetic session (default when no source is given)")
    src.add_argument("--serve", type=_parse_address, metavar="HOST:PORT",
                     help=f"accept camera clients (also via ${LISTEN_ENV})")
    run.add_argument("--cameras", type=int, default=1, help="pseudo cameras for --tum")
    run.add_argument("--split", choices=["even"], default="even",
                     help="how --tum is divided among cameras (equal consecutive parts)")
    run.add_argument("--config", help="JSON session configuration")
    run.add_argument("--out", default="cosurf_out")
    run.add_argument("--frames", type=int, default=0, help="limit frames per camera")
    run.add_argument("--downscale", type=int, default=4, help="integer TUM downscale factor")
    run.add_argument("--width", type=int, default=160)
    run.add_argument("--height", type=int, default=120)
    run.add_argument("--noise", type=float, default=0.0, help="depth noise sigma0 for --scene")
    run.add_argument("--seed", type=int, default=0)
    run.set_defaults(fn=cmd_run)

    ev = sub.add_parser("eval", help="evaluate outputs")
    evsub = ev.add_subparsers(dest="metric", required=True)
    ate = evsub.add_parser("ate", help="ATE RMSE between two TUM trajectories")
    ate.add_argument("--est", required=True)
    ate.add_argument("--gt", required=True)
    ate.add_argument("--max-dt", type=float, default=0.02)
    ate.set_defaults(fn=cmd_eval_ate)
    surf = evsub.add_parser("surface", help="mean surfel-to-reference distance")
    surf.add_argument("--map", required=True, help="exported PLY")
    surf.add_argument("--ref", required=True, help="PLY point cloud/mesh or synthetic scene file")
    surf.set_defaults(fn=cmd_eval_surface)

    ex = sub.add_parser("export", help="export a saved map as PLY")
    ex.add_argument("--map", type=int, required=True, help="reference frame id")
    ex.add_argument("--mode", choices=["color", "contribution"], default="color")
    ex.add_argument("--session", default="cosurf_out", help="output directory of a run")
    ex.add_argument("--config", help="JSON session configuration (palette)")
    ex.add_argument("--stable-only", action="store_true")
    ex.add_argument("--out", default="-")
    ex.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
