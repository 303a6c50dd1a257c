"""Command-line front end.

Exit status: 0 on success, 2 on invalid arguments or malformed inputs, 3 on
I/O failures. Every JSON report carries ``schema_version`` and the library
defaults it was produced with.
"""

from __future__ import annotations

import argparse
import glob
import json
import sys
from pathlib import Path

from . import __version__
from .errors import ValidationError
from .io import formats
from .io.models import QUANT_FORMAT, load_float_model, load_qmodel, save_qmodel
from .io.synthetic import Plane, SyntheticSceneSpec, generate_synthetic_pair
from .metrics import (
    MIDDEVAL_COLUMNS,
    RATE_COLUMNS,
    SCHEMA_VERSION,
    GroundTruth,
    evaluate,
    format_table,
)
from .model import PRESETS, model_stats
from .quant import CalibrationSet, QuantConfig, QuantizedModel, descriptor_flip_rate, quantize_model
from .stereo import DisparityMap, PipelineConfig, SgmParams, run_pipeline

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 2, 3

DEFAULTS = {
    "p1": 3, "p2": 24, "sgm_paths": 8, "box_radius": 2, "lr_tolerance": 1.0, "n_disp": 64,
    "median_radius": 1, "census_window": 5, "steps": 1000, "bins": 255, "z_bits": 8, "tau": 127,
}


def _report(command: str, body: dict) -> bytes:
    doc = {"schema_version": SCHEMA_VERSION, "tool_version": __version__, "command": command,
           "defaults": DEFAULTS}
    doc.update(body)
    return (json.dumps(doc, indent=2) + "\n").encode()


def _load_model(spec: str, seed: int):
    """A preset name, or a float / quantized model manifest path."""
    if spec in PRESETS:
        return PRESETS[spec](seed)
    raw = Path(spec).read_bytes()
    try:
        fmt = json.loads(raw.decode("utf-8")).get("format")
    except (UnicodeDecodeError, ValueError, AttributeError, RecursionError):
        fmt = None
    return load_qmodel(spec) if fmt == QUANT_FORMAT else load_float_model(spec)


def _positive(kind):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
        return v
    return parse


def _non_negative(kind):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
        if not v >= 0:
            raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
        return v
    return parse


def _plane(text):
    try:
        x0, x1, d = text.split(":")
        return Plane(int(x0), int(x1), float(d))
    except ValueError:
        raise argparse.ArgumentTypeError(f"plane must be X0:X1:DISPARITY, got {text!r}") from None


# --------------------------------------------------------------------- stereo

def cmd_stereo(args) -> int:
    cfg = PipelineConfig(
        n_disp=args.n_disp, box_radius=args.box_radius,
        sgm=SgmParams(args.p1, args.p2, args.paths), lr_tolerance=args.lr_tol,
        subpixel=not args.no_subpixel, median_radius=args.median_radius,
        cost_mode=args.cost, census_window=args.census_window)
    source = "census" if args.model == "census" else _load_model(args.model, args.seed)
    left, right = formats.load_image(args.left), formats.load_image(args.right)
    if left.pixels.shape != right.pixels.shape:
        raise ValidationError(f"left image is {left.width}x{left.height}, "
                              f"right image is {right.width}x{right.height}")
    bits = source.descriptor_bits if not isinstance(source, str) else args.census_window ** 2 - 1
    cfg.validate_for(left.width, left.height, bits)

    result = run_pipeline(left, right, source, cfg, threads=args.threads)
    out_pfm = Path(args.out_pfm)
    out_png = Path(args.out_png) if args.out_png else out_pfm.with_suffix(".png")
    out_json = Path(args.report) if args.report else out_pfm.with_suffix(".json")
    pfm_bytes = formats.encode_pfm(result.disparity)
    png_bytes = formats.encode_png(formats.visualization(result.disparity, cfg.n_disp))
    valid = result.disparity.valid_mask()
    report = _report("stereo", {
        "inputs": {"left": str(args.left), "right": str(args.right), "descriptors": args.model,
                   "seed": args.seed, "width": left.width, "height": left.height},
        "config": cfg.as_dict(),
        "threads": args.threads,
        "outputs": {"pfm": str(out_pfm), "png": str(out_png)},
        "valid_fraction": float(valid.mean()),
        "timings_s": {k: round(v, 6) for k, v in result.timings.items()},
    })
    formats.atomic_write(out_pfm, pfm_bytes)
    formats.atomic_write(out_png, png_bytes)
    formats.atomic_write(out_json, report)
    print(f"{out_pfm}: {left.width}x{left.height}, {100 * valid.mean():.2f}% valid, "
          f"{result.timings['total']:.3f} s")
    return EXIT_OK


# ------------------------------------------------------------------- quantize

def cmd_quantize(args) -> int:
    config = QuantConfig(mode=args.mode, steps=args.steps, bins=args.bins, z_bits=args.z_bits,
                         tau=args.tau, reference=args.reference)
    paths = sorted(glob.glob(args.calib))
    if not paths:
        raise ValidationError(f"calibration pattern {args.calib!r} matched no files")
    model = _load_model(args.model, args.seed)
    if isinstance(model, QuantizedModel):
        raise ValidationError(f"{args.model}: model is already quantized")
    images = [formats.load_image(p) for p in paths]
    qmodel, report = quantize_model(model, CalibrationSet(images), config)
    flip = descriptor_flip_rate(model, qmodel, images)

    layers = []
    worst = (-1.0, None)
    for li, (channels, qlayer) in enumerate(zip(report, qmodel.layers)):
        rows = []
        for c, entry in enumerate(channels):
            rows.append({"channel": c, "s": entry["s"], "scale": float(qlayer.channel_scales[c]),
                         "loss": entry["loss"], "degenerate": entry["degenerate"],
                         "mul": entry["m"], "shift": entry["h"], "act_loss": entry["act_loss"]})
            if entry["loss"] > worst[0]:
                worst = (entry["loss"], [li, c])
        layers.append(rows)
    out = Path(args.out)
    report_path = Path(args.report) if args.report else out.with_suffix(".report.json")
    body = _report("quantize", {
        "inputs": {"model": args.model, "seed": args.seed, "calibration": paths},
        "config": config.as_dict(),
        "layers": layers,
        "summary": {"worst_channel_loss": worst[0], "worst_channel": worst[1],
                    "bit_flip_rate": flip},
    })
    save_qmodel(qmodel, out, args.blob)
    formats.atomic_write(report_path, body)
    print(f"worst-channel loss: {worst[0]:.6g} (layer {worst[1][0]}, channel {worst[1][1]}, "
          f"mode {config.mode})")
    print(f"descriptor bit-flip rate: {100 * flip:.4f}% over {len(paths)} calibration image(s)")
    return EXIT_OK


# ----------------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    pred = formats.read_pfm(args.pred)
    gt_map = formats.read_pfm(args.gt)
    mask = formats.load_mask(args.mask) if args.mask else None
    if mask is not None and mask.shape != gt_map.values.shape:
        raise ValidationError(f"mask is {mask.shape[1]}x{mask.shape[0]}, ground truth is "
                              f"{gt_map.width}x{gt_map.height}")
    gt = GroundTruth(gt_map.values, mask)
    report = evaluate(pred, gt, args.region, args.t_over)
    body = _report("eval", {
        "inputs": {"pred": str(args.pred), "gt": str(args.gt),
                   "mask": str(args.mask) if args.mask else None},
        "region": args.region, "t_over": args.t_over, "degenerate": report.degenerate,
        "metrics": report.flat(),
    })
    if args.json:
        formats.atomic_write(args.json, body)
    sys.stdout.write(format_table(report, RATE_COLUMNS))
    sys.stdout.write(format_table(report, MIDDEVAL_COLUMNS))
    return EXIT_OK


# ---------------------------------------------------------------------- stats

def cmd_stats(args) -> int:
    model = _load_model(args.model, args.seed)
    stats = model_stats(model, args.width, args.height).as_dict()
    body = _report("stats", {"inputs": {"model": args.model, "width": args.width,
                                        "height": args.height}, "stats": stats})
    if args.json:
        formats.atomic_write(args.json, body)
    sys.stdout.write(body.decode())
    width = max(len(k) for k in stats)
    for k, v in stats.items():
        print(f"{k.ljust(width)}  {v:>16,}")
    return EXIT_OK


# ---------------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    planes = tuple(args.plane) if args.plane else (Plane(0, args.width, args.disparity),)
    spec = SyntheticSceneSpec(args.width, args.height, planes, args.seed, args.noise,
                              args.blur, args.n_disp)
    left, right, gt = generate_synthetic_pair(spec)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "im0.png": formats.encode_png(formats.image_bytes(left)),
        "im1.png": formats.encode_png(formats.image_bytes(right)),
        "disp0GT.pfm": formats.encode_pfm(DisparityMap(gt.disparities)),
        "mask0nocc.png": formats.encode_png(gt.mask),
    }
    files["scene.json"] = _report("synth", {
        "scene": {"width": spec.width, "height": spec.height, "texture_seed": spec.texture_seed,
                  "noise_sigma": spec.noise_sigma, "blur_sigma": spec.blur_sigma,
                  "n_disp": spec.max_disparity,
                  "planes": [{"x0": p.x0, "x1": p.x1, "disparity": p.disparity}
                             for p in spec.planes]},
        "occluded_pixels": int((gt.mask == 128).sum()),
    })
    for name, data in files.items():
        formats.atomic_write(out / name, data)
    print(f"wrote {', '.join(files)} to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive(int), default=1,
                        help="maximum worker threads (default 1)")
    common.add_argument("--seed", type=int, default=0,
                        help="seed for preset model weights (default 0)")

    parser = argparse.ArgumentParser(prog="edgestereo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stereo", parents=[common], help="compute a disparity map")
    p.add_argument("left")
    p.add_argument("right")
    p.add_argument("out_pfm", help="output disparity map (PFM, +inf = invalid)")
    p.add_argument("--out-png", help="visualization PNG (default: OUT_PFM with .png)")
    p.add_argument("--report", help="JSON timing report (default: OUT_PFM with .json)")
    p.add_argument("--model", default="census",
                   help="'census', a preset (%s) or a model manifest" % ", ".join(PRESETS))
    p.add_argument("--cost", choices=("hamming", "cosine"), default="hamming")
    p.add_argument("--n-disp", type=_positive(int), default=DEFAULTS["n_disp"])
    p.add_argument("--p1", type=_positive(float), default=DEFAULTS["p1"])
    p.add_argument("--p2", type=_positive(float), default=DEFAULTS["p2"])
    p.add_argument("--paths", type=int, choices=(4, 8), default=DEFAULTS["sgm_paths"])
    p.add_argument("--box-radius", type=_non_negative(int), default=DEFAULTS["box_radius"])
    p.add_argument("--lr-tol", type=_non_negative(float), default=DEFAULTS["lr_tolerance"])
    p.add_argument("--median-radius", type=_non_negative(int), default=DEFAULTS["median_radius"])
    p.add_argument("--census-window", type=int, choices=(3, 5, 7),
                   default=DEFAULTS["census_window"])
    p.add_argument("--no-subpixel", action="store_true", help="disable parabola refinement")
    p.set_defaults(func=cmd_stereo)

    p = sub.add_parser("quantize", parents=[common], help="quantize a float model to int8")
    p.add_argument("model", help="preset (%s) or float model manifest" % ", ".join(PRESETS))
    p.add_argument("--calib", required=True, help="glob of calibration images (quote it)")
    p.add_argument("--out", required=True, help="quantized model manifest to write")
    p.add_argument("--blob", help="weight blob path (default: OUT with .bin)")
    p.add_argument("--report", help="per-channel loss report (default: OUT with .report.json)")
    p.add_argument("--mode", choices=("kl", "rms", "l1", "hd"), default="hd")
    p.add_argument("--steps", type=_positive(int), default=DEFAULTS["steps"])
    p.add_argument("--bins", type=_positive(int), default=DEFAULTS["bins"])
    p.add_argument("--z-bits", type=int, choices=range(1, 17), metavar="Z",
                   default=DEFAULTS["z_bits"])
    p.add_argument("--tau", type=_positive(int), default=DEFAULTS["tau"])
    p.add_argument("--reference", choices=("float", "requantized"), default="float",
                   help="float-network reference fed with float or quantized activations")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", parents=[common], help="score a disparity map against ground truth")
    p.add_argument("pred", help="predicted disparity PFM")
    p.add_argument("gt", help="ground-truth disparity PFM")
    p.add_argument("--mask", help="MiddEval3 mask PNG (255 nonocc, 128 occluded, 0 undefined)")
    p.add_argument("--region", choices=("nonocc", "all"), default="nonocc")
    p.add_argument("--t-over", choices=("valid", "all"), default="valid",
                   help="pixels the T and bad metrics are computed over")
    p.add_argument("--json", help="write the metrics report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", parents=[common], help="weight, FLOP and memory accounting")
    p.add_argument("model", help="preset (%s) or model manifest" % ", ".join(PRESETS))
    p.add_argument("--width", type=_positive(int), default=1280)
    p.add_argument("--height", type=_positive(int), default=720)
    p.add_argument("--json", help="also write the JSON report here")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic stereo pair with GT")
    p.add_argument("outdir")
    p.add_argument("--width", type=_positive(int), default=128)
    p.add_argument("--height", type=_positive(int), default=96)
    p.add_argument("--plane", type=_plane, action="append",
                   help="X0:X1:DISPARITY, repeatable; default one plane at --disparity")
    p.add_argument("--disparity", type=_non_negative(float), default=5.0)
    p.add_argument("--noise", type=_non_negative(float), default=0.0)
    p.add_argument("--blur", type=_positive(float), default=1.0)
    p.add_argument("--n-disp", type=_positive(int), default=DEFAULTS["n_disp"])
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"edgestereo {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"edgestereo {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
