"""Command-line pipeline: simulate -> restore -> evaluate, plus prompt
ranking, slice/flow visualization, and the gradient-integrity suite.

Exit codes: 0 success, 1 usage error, 2 runtime error. Reports go to stdout
(JSON when --json is set), diagnostics to stderr. The CONVRT_ORACLE
environment variable overrides any configured oracle command.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .videoio import VideoIOError, load_disparity, load_video, save_video

ORACLE_ENV = "CONVRT_ORACLE"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.apply_override(key.strip(), value.strip())
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _emit(args, report: dict, human_lines):
    if args.json:
        json.dump(report, sys.stdout, indent=2, sort_keys=True, default=float)
        sys.stdout.write("\n")
    else:
        for line in human_lines:
            print(line)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args):
    from .turbsim import degrade, synthetic_scene

    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.clean:
        clean = load_video(args.clean).frames
    else:
        sc = cfg.scene
        clean = synthetic_scene(sc.frames, sc.height, sc.width, sc.channels,
                                kind=sc.kind, seed=cfg.sub_seed("scene"))
    pack = degrade(clean, cfg.turbulence_params())
    save_video(pack.clean, out / "clean")
    save_video(pack.degraded, out / "degraded")
    save_video(pack.clean, out / "clean.fvid", fmt="fvid")
    save_video(pack.degraded, out / "degraded.fvid", fmt="fvid")
    save_video(_tilts_to_volume(pack.tilts), out / "tilts.fvid", fmt="fvid")
    cfg.save(out / "config.json")
    rms = float(np.sqrt(np.mean(pack.tilts.astype(np.float64) ** 2)))
    report = {"frames": int(clean.shape[0]), "height": int(clean.shape[1]),
              "width": int(clean.shape[2]), "rms_tilt_px": rms,
              "out": str(out)}
    _emit(args, report, [f"wrote {clean.shape[0]} frames to {out}",
                         f"rms tilt: {rms:.3f} px"])
    return 0


TILT_EXPORT_RANGE = 8.0  # px; exported tilt channels are v/(2*range) + 0.5


def _tilts_to_volume(tilts):
    """(T,2,H,W) pixel offsets -> a 3-channel [0,1] volume for the raw
    container (dx, dy mapped around 0.5; third channel zero)."""
    from .videoio import VideoVolume
    t, _, h, w = tilts.shape
    scaled = tilts.transpose(0, 2, 3, 1).astype(np.float32) / (2.0 * TILT_EXPORT_RANGE) + 0.5
    return VideoVolume(frames=np.concatenate(
        [scaled, np.zeros((t, h, w, 1), np.float32)], axis=-1))


def tilts_from_volume(frames):
    """Invert the tilt export encoding back to (T,2,H,W) pixel offsets."""
    arr = (np.asarray(frames)[..., :2] - 0.5) * (2.0 * TILT_EXPORT_RANGE)
    return arr.transpose(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# restore
# ---------------------------------------------------------------------------


def _attach_oracles(cfg, args, weights):
    from .oracle import OracleSet, OracleUnavailable, spawn_oracle

    command = os.environ.get(ORACLE_ENV) or args.oracle or cfg.oracle.command
    if not command or (weights.text == 0 and weights.lpips == 0):
        return None, None
    try:
        client = spawn_oracle(command, timeout=cfg.oracle.timeout)
    except OracleUnavailable as e:
        print(f"warning: oracle disabled ({e}); "
              "continuing without semantic/perceptual terms", file=sys.stderr)
        return None, None
    return OracleSet.from_client(client, prompt_pair=cfg.prompt_pair()), client


def _enhance_via_command(video, command):
    import tempfile

    with tempfile.TemporaryDirectory() as td:
        src = Path(td) / "in.fvid"
        save_video(video, src, fmt="fvid")
        proc = subprocess.run(command, shell=True, input=src.read_bytes(),
                              stdout=subprocess.PIPE, check=True)
        dst = Path(td) / "out.fvid"
        dst.write_bytes(proc.stdout)
        return load_video(dst).frames


def cmd_restore(args):
    from .losses import LossWeights
    from .model import save_checkpoint
    from .optim import train

    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    observed = load_video(args.input).frames
    supervision = load_video(args.supervision).frames if args.supervision else observed
    t, h, w, c = observed.shape
    disparity = load_disparity(args.disparity, t, h, w) if args.disparity else None

    ablate = set(args.ablate or [])
    weights = cfg.loss_weights(ablate=ablate)
    oracles, client = _attach_oracles(cfg, args, weights)
    if oracles is None:
        weights = LossWeights(mse=weights.mse, ssim=weights.ssim, lpips=0.0,
                              temp=weights.temp, text=0.0)

    started = time.perf_counter()
    model, log = train(observed, supervision, disparity=disparity,
                       model_config=cfg.model_config(t, h, w, c),
                       train_config=cfg.train_config(weights), oracles=oracles,
                       checkpoint_dir=str(out))
    seconds = time.perf_counter() - started
    if client is not None:
        client.shutdown()

    restored = model.render_video()
    if args.enhance_cmd and "enhance" not in ablate:
        restored = _enhance_via_command(restored, args.enhance_cmd)
    save_video(restored, out / "restored")
    save_video(restored, out / "restored.fvid", fmt="fvid")
    save_checkpoint(model, out / "model.cvrt")
    log.to_csv(out / "train_log.csv")
    cfg.save(out / "config.json")

    final = log.records[-1].breakdown.total if log.records else float("nan")
    report = {"out": str(out), "iterations": cfg.train.iterations,
              "final_total_loss": final, "seconds": seconds,
              "oracle": bool(oracles)}
    _emit(args, report, [f"restored {t} frames into {out}",
                         f"final total loss {final:.5f} after "
                         f"{cfg.train.iterations} iterations ({seconds:.0f}s)"])
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def cmd_evaluate(args):
    from .flowlab import klt_track, psnr_xt, track_smoothness, tv_histogram, warp_error_video
    from .quality import psnr, ssim_eval

    video = load_video(args.input).frames
    metrics = {
        "e_warp": warp_error_video(video),
        "mean_tv": tv_histogram(video).mean_tv,
    }
    tracks = klt_track(video)
    metrics["track_count"] = len(tracks.surviving())
    metrics["track_smoothness"] = track_smoothness(tracks)
    if args.reference:
        ref = load_video(args.reference).frames
        metrics["psnr"] = psnr(video, ref)
        metrics["ssim"] = float(np.mean([ssim_eval(video[i], ref[i])
                                         for i in range(video.shape[0])]))
        metrics["psnr_xt"] = psnr_xt(video, ref)
    if args.out:
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        with open(outdir / "report.json", "w") as f:
            json.dump(metrics, f, indent=2, sort_keys=True, default=float)
            f.write("\n")
        with open(outdir / "report.csv", "w", newline="") as f:
            writer = csv.writer(f)
            keys = sorted(metrics)
            writer.writerow(keys)
            writer.writerow([metrics[k] for k in keys])
    _emit(args, metrics, [f"{k}: {v:.6g}" if isinstance(v, float) else f"{k}: {v}"
                          for k, v in sorted(metrics.items())])
    return 0


# ---------------------------------------------------------------------------
# prompts
# ---------------------------------------------------------------------------


def cmd_prompts(args):
    from .quality import select_prompt

    with open(args.input, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{args.input}: empty sequence file")
    columns = rows[0].keys()
    if "lpips" not in columns:
        raise ValueError(f"{args.input}: need an 'lpips' column, found {sorted(columns)}")
    lpips_seq = [float(r["lpips"]) for r in rows]
    candidates = {}
    for col in columns:
        if col in ("iter", "lpips"):
            continue
        candidates[col] = [float(r[col]) for r in rows]
    report = select_prompt(lpips_seq, candidates)
    ranked = [{"rank": s.rank, "candidate": s.label, "krcc": s.krcc, "srcc": s.srcc,
               "combined": s.combined} for s in sorted(report.scores, key=lambda s: s.rank)]
    payload = {"best": report.best().label, "ranking": ranked,
               "samples": len(lpips_seq)}
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
    _emit(args, payload,
          [f"#{r['rank']} {r['candidate']}: combined {r['combined']:+.4f} "
           f"(krcc {r['krcc']:+.4f}, srcc {r['srcc']:+.4f})" for r in ranked])
    return 0


# ---------------------------------------------------------------------------
# slice / flow visualizations
# ---------------------------------------------------------------------------


def _flow_to_rgb(flow, max_mag=None):
    from matplotlib.colors import hsv_to_rgb

    mag = np.hypot(flow[..., 0], flow[..., 1])
    if max_mag is None:
        max_mag = max(float(mag.max()), 1e-6)
    hsv = np.stack([
        (np.arctan2(flow[..., 1], flow[..., 0]) + np.pi) / (2 * np.pi),
        np.ones_like(mag),
        np.clip(mag / max_mag, 0, 1),
    ], axis=-1)
    return hsv_to_rgb(hsv).astype(np.float32)


def cmd_slice(args):
    from .flowlab import xt_slice

    video = load_video(args.input).frames
    row = args.row if args.row is not None else video.shape[1] // 2
    sl = xt_slice(video, row)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .videoio import _write_png
    _write_png(out / f"slice_row{row:04d}.png", sl)
    with open(out / f"slice_row{row:04d}.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "x", *(f"c{i}" for i in range(sl.shape[-1]))])
        for t in range(sl.shape[0]):
            for x in range(sl.shape[1]):
                writer.writerow([t, x, *(f"{v:.6f}" for v in sl[t, x])])
    _emit(args, {"row": row, "shape": list(sl.shape), "out": str(out)},
          [f"x-t slice of row {row} -> {out}"])
    return 0


def cmd_flow(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .flowlab import flow_tv, lk_flow, to_gray, tv_histogram
    from .videoio import _write_png

    video = load_video(args.input).frames
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grays = [to_gray(f) for f in video]
    flows = [lk_flow(grays[i], grays[i + 1]) for i in range(len(grays) - 1)]
    max_mag = max(max(float(np.hypot(f[..., 0], f[..., 1]).max()) for f in flows), 1e-6)
    tvs = []
    for i, flow in enumerate(flows):
        _write_png(out / f"flow_{i:04d}.png", _flow_to_rgb(flow, max_mag))
        tvs.append(flow_tv(flow))
    hist = tv_histogram(video, bins=args.bins)
    fig, ax = plt.subplots(figsize=(5, 3))
    centers = 0.5 * (hist.edges[:-1] + hist.edges[1:])
    ax.bar(centers, hist.counts, width=0.9 * np.diff(hist.edges), color="#3b6ea5")
    ax.set_xlabel("flow total variation per frame pair")
    ax.set_ylabel("pairs")
    fig.tight_layout()
    fig.savefig(out / "tv_histogram.png", dpi=120)
    plt.close(fig)
    with open(out / "tv.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["pair", "tv"])
        for i, tv in enumerate(tvs):
            writer.writerow([i, f"{tv:.8f}"])
    _emit(args, {"pairs": len(flows), "mean_tv": float(np.mean(tvs)), "out": str(out)},
          [f"{len(flows)} flow maps -> {out}", f"mean TV {np.mean(tvs):.5f}"])
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(args):
    from .checks import run_suite

    results = run_suite(include_wire=not args.skip_wire)
    if args.json:
        payload = [{"name": r.name, "err": r.err, "tol": r.tol, "passed": r.passed}
                   for r in results]
        json.dump(payload, sys.stdout, indent=2)
        sys.stdout.write("\n")
    else:
        for r in results:
            print(r.line())
    return 0 if all(r.passed for r in results) else 2


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="turbvid",
                description="test-time optimization toolkit for turbulence-distorted video")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value (dotted path)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--json", action="store_true", help="machine-readable stdout")

    sp = sub.add_parser("simulate", help="generate a degraded synthetic scene with ground truth")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--clean", help="use this clean video instead of a generated scene")
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("restore", help="fit the video model and render the restoration")
    common(sp)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--supervision", help="supervision frames (default: the input)")
    sp.add_argument("--disparity", help="per-frame disparity maps")
    sp.add_argument("--oracle", help="oracle command line (overrides config)")
    sp.add_argument("--enhance-cmd", help="external enhancement filter (fvid stdin/stdout)")
    sp.add_argument("--ablate", action="append", choices=["temp", "text", "enhance"],
                    help="zero out a component")
    sp.set_defaults(fn=cmd_restore)

    sp = sub.add_parser("evaluate", help="temporal-consistency and fidelity metrics")
    common(sp)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--reference", help="clean reference for psnr/ssim/psnr_xt")
    sp.add_argument("--out", help="directory for report.json/report.csv")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("prompts", help="rank candidate prompt sequences against lpips")
    common(sp)
    sp.add_argument("--in", dest="input", required=True, help="CSV: iter,lpips,<candidates...>")
    sp.add_argument("--out", help="write ranked JSON report here")
    sp.set_defaults(fn=cmd_prompts)

    sp = sub.add_parser("slice", help="export an x-t slice image")
    common(sp)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--row", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_slice)

    sp = sub.add_parser("flow", help="export flow color maps and the TV histogram")
    common(sp)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--bins", type=int, default=20)
    sp.set_defaults(fn=cmd_flow)

    sp = sub.add_parser("gradcheck", help="run the gradient-integrity suite")
    common(sp)
    sp.add_argument("--skip-wire", action="store_true",
                    help="skip the subprocess oracle check")
    sp.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.fn(args)
    except (ConfigError, VideoIOError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
