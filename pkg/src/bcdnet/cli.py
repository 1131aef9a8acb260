"""Command-line interface: encode, decode, truncate, train, eval, analyze-bitplanes.

Exit codes: 0 success, 2 usage or configuration error, 3 data or contract
error (for example a level that a truncated file no longer holds).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import bitplane, codec, container, imageio, training
from .codec import CodecConfig, ConfigError
from .metrics import ms_ssim_value, psnr

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3

EVAL_FIELDS = ("image", "level", "bpp", "psnr", "ms_ssim")
IMAGE_SUFFIXES = (".ppm", ".png")
TRAIN_KEYS = {
    "steps": int,
    "lr": float,
    "batch_size": int,
    "weight_decay": float,
    "distortion": str,
    "seed": int,
    "patch_size": int,
    "patches_per_image": int,
    "beta": lambda v: tuple(float(x) for x in v.split(",") if x.strip()),
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _usage(message: str) -> CliError:
    return CliError(message, EXIT_USAGE)


def _data(message: str) -> CliError:
    return CliError(message, EXIT_DATA)


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise _usage(f"{what} not found: {path}")
    return p


def _load_model(path: str) -> codec.CodecModel:
    p = _require_file(path, "model file")
    try:
        return codec.load_model(p)
    except (ValueError, OSError) as exc:
        raise _data(f"{path}: cannot load model: {exc}") from None


def _read_image(path) -> np.ndarray:
    try:
        return bitplane.validate_image(imageio.read_image(path))
    except (ValueError, OSError) as exc:
        raise _data(f"{path}: cannot read image: {exc}") from None


def _read_bytes(path: str, what: str) -> bytes:
    return _require_file(path, what).read_bytes()


def _seed(default: int) -> int:
    env = os.environ.get("BCD_SEED")
    if env is None:
        return default
    try:
        return int(env)
    except ValueError:
        raise _usage(f"BCD_SEED must be an integer, got {env!r}") from None


def _dataset(path: str) -> list[Path]:
    d = Path(path)
    if not d.is_dir():
        raise _usage(f"dataset directory not found: {path}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise _data(f"dataset directory {path} holds no .ppm/.png images")
    return files


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_encode(args) -> int:
    model = _load_model(args.model)
    image = _read_image(_require_file(args.image, "image"))
    if args.mask is not None and (
        len(args.mask) != model.config.branches or set(args.mask) - {"0", "1"}
    ):
        raise _usage(f"--mask needs {model.config.branches} characters of 0/1, got {args.mask!r}")
    data = container.encode_image(image, model, args.mask)
    Path(args.out).write_bytes(data)
    header = container.read_header(data)
    print(f"wrote {args.out}: {len(data)} bytes, header {header.size} bytes")
    for level in range(1, header.branches + 1):
        print(f"level {level}: {container.measured_bpp(data, level):.6f} bpp")
    return EXIT_OK


def cmd_decode(args) -> int:
    data = _read_bytes(args.input, "container")
    model = _load_model(args.model)
    try:
        header = container.read_header(data)
        container.check_model(header, model)
        levels = range(1, header.branches + 1) if args.all_levels else [args.level]
        outputs = []
        for level in levels:
            outputs.append((level, container.decode_image(data, model, level)))
    except container.ContainerError as exc:
        raise _data(str(exc)) from None
    if args.all_levels:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = Path(args.input).stem
        for level, img in outputs:
            path = out_dir / f"{stem}_level{level}.ppm"
            imageio.write_image(path, img)
            print(f"level {level}: {path}")
    else:
        imageio.write_image(args.out, outputs[0][1])
        print(f"level {args.level}: {args.out}")
    return EXIT_OK


def cmd_truncate(args) -> int:
    data = _read_bytes(args.input, "container")
    try:
        cut = container.truncate_to_level(data, args.level)
    except container.ContainerError as exc:
        raise _data(str(exc)) from None
    Path(args.out).write_bytes(cut)
    print(f"wrote {args.out}: {len(cut)} bytes, levels 1..{args.level}")
    return EXIT_OK


def read_train_config(path: str | None) -> tuple[CodecConfig, dict]:
    """Split a key=value file into a CodecConfig and training options."""
    items = {}
    if path is not None:
        items = codec.read_key_values(_require_file(path, "config file").read_text())
    train_items = {k: items.pop(k) for k in list(items) if k in TRAIN_KEYS}
    options = {}
    for key, raw in train_items.items():
        try:
            options[key] = TRAIN_KEYS[key](raw)
        except ValueError:
            raise ConfigError(f"{key}: invalid value {raw!r}") from None
    return CodecConfig(**codec.parse_config_overrides(items)), options


def extract_patches(images: list[np.ndarray], size: int, per_image: int | None = None) -> np.ndarray:
    """Non-overlapping size x size crops in raster order (no content filtering)."""
    patches = []
    for img in images:
        found = []
        for y in range(0, img.shape[0] - size + 1, size):
            for x in range(0, img.shape[1] - size + 1, size):
                found.append(img[y : y + size, x : x + size])
        patches.extend(found[:per_image] if per_image else found)
    if not patches:
        raise _data(f"no {size}x{size} patches fit in the dataset images")
    return np.stack(patches)


def cmd_train(args) -> int:
    try:
        config, options = read_train_config(args.config)
    except ConfigError as exc:
        message = str(exc)
        if message.startswith("unknown config keys"):
            valid = sorted({f.name for f in dataclasses.fields(CodecConfig)} | {"N", "B", "se"} | set(TRAIN_KEYS))
            message += "; valid keys: " + ", ".join(valid)
        raise _usage(message) from None
    for key in ("steps", "lr", "seed", "patch_size"):
        if getattr(args, key) is not None:
            options[key] = getattr(args, key)
    files = _dataset(args.data)
    size = options.pop("patch_size", 32)
    if size % config.spatial_factor:
        raise _usage(f"patch_size {size} must be a multiple of {config.spatial_factor}")
    per_image = options.pop("patches_per_image", None)
    options["seed"] = _seed(options.get("seed", 0))
    fields = {f.name for f in dataclasses.fields(training.TrainSchedule)}
    schedule = training.TrainSchedule(**{k: v for k, v in options.items() if k in fields})
    if schedule.beta is not None and len(schedule.beta) != config.branches:
        raise _usage(f"beta has {len(schedule.beta)} entries for {config.branches} branches")
    patches = extract_patches([_read_image(p) for p in files], size, per_image)
    model, log = training.train_toy(patches, config, schedule)
    codec.save_model(model, args.out)
    log_path = args.log or str(Path(args.out).with_suffix(".csv"))
    Path(log_path).write_text(log.to_csv())
    last = log.loss_series()
    summary = f"final loss {last[-1]:.6f}" if len(last) else "no steps run"
    print(f"trained {schedule.steps} steps on {len(patches)} patches; {summary}")
    print(f"model: {args.out}\nlog: {log_path}")
    return EXIT_OK


def evaluate_image(image: np.ndarray, model: codec.CodecModel) -> list[tuple[int, float, float, float]]:
    data = container.encode_image(image, model)
    target = image.astype(np.float64) / 255.0
    rows = []
    for level in range(1, model.config.branches + 1):
        rec = container.decode_image(data, model, level).astype(np.float64) / 255.0
        rows.append((level, container.measured_bpp(data, level), psnr(rec, target), ms_ssim_value(rec, target)))
    return rows


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    files = _dataset(args.data)
    results, failed = [], []
    for path in files:
        try:
            image = _read_image(path)
            for row in evaluate_image(image, model):
                results.append((path.name,) + row)
        except (CliError, ValueError) as exc:
            failed.append(path.name)
            print(f"error: {path.name}: {exc}", file=sys.stderr)
    results.sort(key=lambda r: (r[0], r[1]))
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(EVAL_FIELDS)
        for name, level, bpp, p, m in results:
            writer.writerow([name, level, f"{bpp:.6f}", f"{p:.4f}", f"{m:.6f}"])
    finally:
        if args.out:
            out.close()
    if failed:
        print(f"{len(failed)} of {len(files)} images failed", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_analyze_bitplanes(args) -> int:
    image = _read_image(_require_file(args.image, "image"))
    report = bitplane.entropy_report(image)
    for ch in report["channels"]:
        planes = " ".join(f"{e:.4f}" for e in ch["plane_entropies"])
        print(f"{ch['channel']}: planes [{planes}]")
        print(
            f"{ch['channel']}: plane sum {ch['plane_sum']:.4f} bits, image entropy {ch['image_entropy']:.4f} bits, "
            f"sum >= image entropy: {ch['sum_exceeds']}"
        )
    print(f"holds for all channels: {report['holds']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _level(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("level must be at least 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bcdnet", description="Scalable bit-plane image codec.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="encode an image into a .bcd container")
    p.add_argument("image")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask", help="branch switches, e.g. 11000000")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct an image from a .bcd container")
    p.add_argument("input")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output image, or directory with --all-levels")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--level", type=_level)
    group.add_argument("--all-levels", action="store_true")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("truncate", help="keep only the segments of levels 1..L")
    p.add_argument("input")
    p.add_argument("--level", type=_level, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_truncate)

    p = sub.add_parser("train", help="train a model on patches of a directory of images")
    p.add_argument("--config", help="key=value file with model and training settings")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--log", help="loss log CSV (default: model path with .csv)")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rate-distortion CSV over a directory of images")
    p.add_argument("data")
    p.add_argument("--model", required=True)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-bitplanes", help="bit-plane entropy report")
    p.add_argument("image")
    p.set_defaults(func=cmd_analyze_bitplanes)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
