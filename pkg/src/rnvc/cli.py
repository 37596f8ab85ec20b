"""Command-line entry points: train, encode, decode, eval, ablate, errprop,
inspect. Exit codes: 0 ok, 1 runtime failure, 2 usage error."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import ablation as AB
from . import codec as C
from . import metrics as MM
from . import train as TR
from .config import CodecConfig

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _worker_cap() -> int:
    raw = os.environ.get("RNVC_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError as exc:
        raise UsageError(f"RNVC_THREADS must be an integer, got {raw!r}") from exc
    return max(1, cap)


# ---------------------------------------------------------------------------
# raw video io: planar 8-bit file + JSON sidecar {width,height,frames,channels}


def read_raw_video(path) -> np.ndarray:
    sidecar = str(path) + ".json"
    if not os.path.exists(path):
        raise UsageError(f"raw video not found: {path}")
    if not os.path.exists(sidecar):
        raise UsageError(f"missing sidecar {sidecar}")
    with open(sidecar) as fh:
        meta = json.load(fh)
    w, h = int(meta["width"]), int(meta["height"])
    frames, channels = int(meta["frames"]), int(meta["channels"])
    data = np.fromfile(path, dtype=np.uint8)
    expect = frames * channels * h * w
    if data.size != expect:
        raise UsageError(f"{path}: expected {expect} bytes per sidecar, found {data.size}")
    return (data.reshape(frames, channels, h, w).astype(np.float32) / 255.0)


def write_raw_video(path, frames: np.ndarray) -> None:
    f, c, h, w = frames.shape
    data = np.clip(np.rint(frames * 255.0), 0, 255).astype(np.uint8)
    data.tofile(path)
    with open(str(path) + ".json", "w") as fh:
        json.dump({"width": w, "height": h, "frames": f, "channels": c}, fh)


def pad_to_coded_dims(frames: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    """Edge-replicate so both dims divide by 16; returns (padded, crop dims)."""
    f, c, h, w = frames.shape
    ph = (-h) % 16
    pw = (-w) % 16
    if ph or pw:
        frames = np.pad(frames, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    return frames, (w, h)


def _load_checkpoint_model(path) -> tuple[C.CodecModel, TR.TrainConfig]:
    if not os.path.exists(path):
        raise UsageError(f"checkpoint not found: {path}")
    if not os.path.exists(str(path) + ".json"):
        raise UsageError(f"checkpoint sidecar not found: {path}.json")
    weights, config, _stage = TR.load_checkpoint(path)
    model = C.CodecModel(config.codec, seed=config.seed)
    model.load_state_dict(weights)
    return model, config


def _gop_from_args(args) -> C.GopStructure:
    return C.GopStructure(args.gop_mode, args.gop_n,
                          args.gop_m if args.gop_mode == "bi" else 0)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    codec = CodecConfig(width=args.width, channels=args.channels,
                        latent_channels=args.latent_channels,
                        iframe_levels=args.iframe_levels,
                        lambda_id=args.lambda_id, distortion=args.distortion)
    steps = {"ME": args.steps_me, "MC": args.steps_mc,
             "P1": args.steps_p1, "FULL": args.steps_full}
    config = TR.TrainConfig(codec=codec, stage=args.stage, lr=args.lr,
                            seq_len=args.seq_len, batch_size=args.batch_size,
                            crop=args.crop, seed=args.seed, dataset=args.dataset,
                            motion_px=args.motion_px, steps=steps)
    init_weights = init_stage = None
    if args.resume:
        if not os.path.exists(args.resume):
            raise UsageError(f"checkpoint not found: {args.resume}")
        init_weights, _cfg, init_stage = TR.load_checkpoint(args.resume)
    result = TR.train_pipeline(config, only_stage=args.only_stage,
                               init_weights=init_weights, init_stage=init_stage,
                               from_scratch=args.from_scratch,
                               log_path=args.log)
    TR.save_checkpoint(args.out, result.model, config, result.completed_stage)
    print(f"trained through {result.completed_stage}; checkpoint: {args.out}")
    return EXIT_OK


def cmd_encode(args) -> int:
    model, _cfg = _load_checkpoint_model(args.checkpoint)
    frames = read_raw_video(args.input)
    if frames.shape[1] != model.config.channels:
        raise UsageError(
            f"video has {frames.shape[1]} channels, model codes {model.config.channels}; "
            "re-train or convert the input")
    padded, crop = pad_to_coded_dims(frames)
    gop = _gop_from_args(args)
    blob, stats = C.encode_video(model, padded, gop, crop=crop)
    with open(args.output, "wb") as fh:
        fh.write(blob)
    on_disk = os.path.getsize(args.output)
    if on_disk != stats["total_bytes"]:
        raise RuntimeError(f"stats/bitstream mismatch: {stats['total_bytes']} vs {on_disk}")
    per_frame = []
    for row, src, rec in zip(stats["frames"], frames, stats["recons"]):
        entry = dict(row)
        entry["msssim"] = MM.msssim_value(src[None], rec[None, :, : src.shape[1], : src.shape[2]])
        per_frame.append(entry)
    report = {
        "total_bytes": on_disk,
        "bpp": stats["bpp"],
        "rate_bits_total": stats["rate_bits_total"],
        "frame_count": stats["frame_count"],
        "gop": {"mode": gop.mode, "n": gop.n, "m": gop.m, "size": gop.size},
        "psnr_mean": float(np.mean([r["psnr"] for r in per_frame])),
        "msssim_mean": float(np.mean([r["msssim"] for r in per_frame])),
        "frames": per_frame,
    }
    if args.stats:
        with open(args.stats, "w") as fh:
            json.dump(report, fh, indent=2)
    print(f"encoded {stats['frame_count']} frames -> {on_disk} bytes "
          f"({stats['bpp']:.4f} bpp, mean PSNR {report['psnr_mean']:.2f} dB)")
    return EXIT_OK


def cmd_decode(args) -> int:
    model, _cfg = _load_checkpoint_model(args.checkpoint)
    if not os.path.exists(args.input):
        raise UsageError(f"bitstream not found: {args.input}")
    with open(args.input, "rb") as fh:
        blob = fh.read()
    frames, stats = C.decode_video(model, blob)
    frames = frames[:, :, : stats["crop_h"], : stats["crop_w"]]
    write_raw_video(args.output, frames)
    print(f"decoded {stats['frame_count']} frames -> {args.output}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg = _load_checkpoint_model(args.checkpoint)
    frames = read_raw_video(args.input)
    padded, crop = pad_to_coded_dims(frames)
    gop = _gop_from_args(args)
    blob, stats = C.encode_video(model, padded, gop, crop=crop)
    decoded, _ = C.decode_video(model, blob)
    decoded = decoded[:, :, : frames.shape[2], : frames.shape[3]]
    bpp = len(blob) * 8.0 / (frames.shape[0] * frames.shape[2] * frames.shape[3])
    rows = [{
        "lambda_id": model.config.lambda_id,
        "bpp": bpp,
        "psnr": float(np.mean([MM.psnr(a[None], b[None]) for a, b in zip(frames, decoded)])),
        "msssim": float(np.mean([MM.msssim_value(a[None], b[None]) for a, b in zip(frames, decoded)])),
    }]
    MM.write_rd_csv(args.output, rows)
    print(f"eval: {rows[0]['bpp']:.4f} bpp, {rows[0]['psnr']:.2f} dB, "
          f"MS-SSIM {rows[0]['msssim']:.4f} -> {args.output}")
    return EXIT_OK


def _ablate_train_config(args) -> TR.TrainConfig:
    codec = CodecConfig(width=args.width, latent_channels=args.latent_channels,
                        lambda_id=args.lambda_id)
    steps = {"ME": args.steps_me, "MC": args.steps_mc,
             "P1": args.steps_p1, "FULL": args.steps_full}
    return TR.TrainConfig(codec=codec, crop=args.crop, batch_size=args.batch_size,
                          seq_len=args.seq_len, seed=args.seed, dataset=args.dataset,
                          lr=args.lr, steps=steps, plateau_window=10**6)


def cmd_ablate(args) -> int:
    base = _ablate_train_config(args)
    os.makedirs(args.outdir, exist_ok=True)
    gop = C.GopStructure("uni", n=max(2, base.seq_len - 1))
    eval_ds = TR.SyntheticDataset(base.dataset, base.crop, base.seq_len,
                                  seed=base.seed + 9000)
    eval_seqs = [eval_ds.sequence() for _ in range(args.eval_sequences)]

    rows = []
    models = {}
    bl_rae_model = None
    for variant in AB.VARIANTS:
        model, log = AB.train_variant(variant, base, transform_from=bl_rae_model)
        if variant == "bl_rae":
            bl_rae_model = model
        models[variant] = model
        rd = AB.evaluate_rd(model, eval_seqs, gop)
        tail = [r["loss"] for r in log if r.get("stage") == "FULL"][-50:]
        rows.append({"variant": variant, "lambda_id": base.codec.lambda_id,
                     "p_bpp": rd["p_bpp"], "p_psnr": rd["p_psnr"],
                     "i_bpp": rd["i_bpp"],
                     "loss_tail": float(np.mean(tail)) if tail else float("nan")})
        model.save(os.path.join(args.outdir, f"{variant}.rnvw"))
        TR.save_checkpoint(os.path.join(args.outdir, f"{variant}.rnvw"),
                           model, dataclasses.replace(base, codec=AB.variant_config(base.codec, variant)),
                           "FULL")
    MM.write_rd_csv(os.path.join(args.outdir, "ablation_rd.csv"), rows)

    probe_seqs = AB.rotation_probe_sequences(args.eval_sequences, base.crop, 8,
                                             seed=base.seed + 9500)
    probe = AB.reset_probe(models["full"], probe_seqs)
    probe_rows = [{"run": tag, "bpp": v["bpp"], "psnr": v["psnr"]}
                  for tag, v in probe.items()]
    MM.write_rd_csv(os.path.join(args.outdir, "reset_probe.csv"), probe_rows)
    print(f"ablation results in {args.outdir}")
    for row in rows:
        print(f"  {row['variant']:7s}: P-frame bpp {row['p_bpp']:.4f} psnr {row['p_psnr']:.2f}")
    return EXIT_OK


def cmd_errprop(args) -> int:
    model, cfg = _load_checkpoint_model(args.checkpoint)
    ds = TR.SyntheticDataset(args.dataset, args.crop, args.frames,
                             channels=model.config.channels, seed=args.seed)
    seqs = [ds.sequence() for _ in range(args.sequences)]
    rows = AB.error_propagation(model, seqs, gop_size=args.gop_size)
    MM.write_rd_csv(args.output, rows)
    print(f"error-propagation table ({len(rows)} P-indices) -> {args.output}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if not os.path.exists(args.input):
        raise UsageError(f"bitstream not found: {args.input}")
    with open(args.input, "rb") as fh:
        blob = fh.read()
    head = C.parse_header(blob)
    head["model_hash"] = f"{head['model_hash']:016x}"
    head["file_bytes"] = len(blob)
    print(json.dumps(head, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rnvc",
                                     description="recurrent neural video codec")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the staged training schedule")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--stage", default="FULL", choices=list(TR.STAGES))
    p.add_argument("--resume", help="checkpoint to initialize from")
    p.add_argument("--only-stage", action="store_true")
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--latent-channels", type=int, default=0)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--seq-len", type=int, default=7)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--dataset", default="mixed", choices=list(TR.SyntheticDataset.KINDS))
    p.add_argument("--motion-px", type=float, default=3.0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lambda-id", type=int, default=2)
    p.add_argument("--distortion", default="mse", choices=["mse", "msssim"])
    p.add_argument("--iframe-levels", type=int, default=64)
    p.add_argument("--steps-me", type=int, default=300)
    p.add_argument("--steps-mc", type=int, default=300)
    p.add_argument("--steps-p1", type=int, default=300)
    p.add_argument("--steps-full", type=int, default=600)
    p.add_argument("--log", help="CSV training log path")
    p.set_defaults(func=cmd_train)

    for name, func, needs_gop in (("encode", cmd_encode, True),
                                  ("decode", cmd_decode, False),
                                  ("eval", cmd_eval, True)):
        p = sub.add_parser(name)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--input", required=True)
        p.add_argument("--output", required=True)
        if name == "encode":
            p.add_argument("--stats", help="write per-frame stats JSON here")
        if needs_gop:
            p.add_argument("--gop-mode", default="uni", choices=["uni", "bi"])
            p.add_argument("--gop-n", type=int, default=9)
            p.add_argument("--gop-m", type=int, default=0)
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="train/compare BL, BL+RAE, BL+RAE+RPM")
    p.add_argument("--outdir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--latent-channels", type=int, default=32)
    p.add_argument("--crop", type=int, default=32)
    p.add_argument("--seq-len", type=int, default=7)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--dataset", default="mixed")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lambda-id", type=int, default=2)
    p.add_argument("--eval-sequences", type=int, default=12)
    p.add_argument("--steps-me", type=int, default=300)
    p.add_argument("--steps-mc", type=int, default=250)
    p.add_argument("--steps-p1", type=int, default=200)
    p.add_argument("--steps-full", type=int, default=350)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("errprop", help="per-P-index rate/quality table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--gop-size", type=int, default=13)
    p.add_argument("--frames", type=int, default=27)
    p.add_argument("--sequences", type=int, default=6)
    p.add_argument("--crop", type=int, default=32)
    p.add_argument("--dataset", default="mixed")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_errprop)

    p = sub.add_parser("inspect", help="dump a bitstream header as JSON")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    _worker_cap()
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (C.BitstreamError, TR.TrainError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
