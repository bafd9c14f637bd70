"""Command-line interface: train, encode, decode, eval, bdrate, inspect, synth.

Machine-readable results go to stdout as ``key=value`` lines, diagnostics to
stderr. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .autoencoder import PRESETS, ModelConfig
from .model import LAMBDAS

log = logging.getLogger("freqcodec")


class UsageError(Exception):
    pass


# --- config files ---------------------------------------------------------------

_EXTRA_KEYS = {"preset": str, "data": str, "n_synth": int, "out": str, "log": str}


def _field_types():
    from .training import TrainConfig

    types = {}
    for cls in (ModelConfig, TrainConfig):
        for f in dataclasses.fields(cls):
            types[f.name] = f.type if isinstance(f.type, type) else str(f.type)
    return types


def _convert(key: str, value: str, kind):
    kind = str(kind)
    try:
        if value.lower() in ("none", "") and "Optional" in kind:
            return None
        if "bool" in kind:
            if value.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("1", "true", "yes")
        if "int" in kind:
            return int(value)
        if "float" in kind:
            return float(value)
    except ValueError:
        raise UsageError(f"bad value for {key}: {value!r}") from None
    return value


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    types = {**_field_types(), **_EXTRA_KEYS}
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = "lmbda" if key == "lambda" else key
        if key not in types:
            raise UsageError(f"config line {n}: unknown key {key!r}")
        out[key] = _convert(key, value, types[key])
    return out


# --- subcommands ------------------------------------------------------------------


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .synth import synth_dataset
    from .training import TrainConfig, config_record, desk_train_config, load_dataset, train_loop

    if args.config is None and not args.desk:
        raise UsageError("train needs a config file or --desk")
    settings = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        settings = parse_config_text(path.read_text())
    for item in args.set or []:
        settings.update(parse_config_text(item))
    flags = {"lmbda": args.lmbda, "epochs": args.epochs, "seed": args.seed, "lr": args.lr,
             "batch_size": args.batch_size, "crop_size": args.crop_size, "data": args.data,
             "n_synth": args.n_synth, "out": args.out, "log": args.log}
    settings.update({k: v for k, v in flags.items() if v is not None})
    if settings.get("data") and "n_synth" in settings:
        raise UsageError("--data and --n-synth are mutually exclusive")
    if "out" not in settings:
        raise UsageError("train needs --out")

    lmbda = settings.get("lmbda", 0.0483)
    if not args.desk and not any(abs(lmbda - v) < 1e-12 for v in LAMBDAS):
        raise UsageError(f"lambda {lmbda} is not one of the valid values: {', '.join(map(str, LAMBDAS))}")
    preset = settings.pop("preset", "desk" if args.desk else "low")
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    try:
        mcfg = dataclasses.replace(PRESETS[preset], **{k: v for k, v in settings.items() if k in model_fields})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    base = desk_train_config(lmbda, settings.get("seed", 0), settings.get("epochs", 20)) if args.desk else TrainConfig()
    tcfg = dataclasses.replace(base, **{k: v for k, v in settings.items() if k in train_fields})
    if "epochs" in settings and "lr_drop_epoch" not in settings and args.desk:
        tcfg.lr_drop_epoch = desk_train_config(lmbda, tcfg.seed, tcfg.epochs).lr_drop_epoch
    try:
        tcfg.validate(mcfg.granularity)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    if settings.get("data"):
        dataset = load_dataset(settings["data"])
    else:
        dataset = synth_dataset(settings.get("n_synth", 64), tcfg.crop_size, tcfg.seed)
    log_path = settings.get("log") or str(Path(settings["out"]).with_suffix(".csv"))
    log.info("training %d images, %d epochs, lambda=%g", len(dataset), tcfg.epochs, tcfg.lmbda)
    result = train_loop(dataset, tcfg, mcfg, log_path=log_path)
    save_checkpoint(result.model, settings["out"], extra={"train": config_record(tcfg)})
    last = result.history[-1]
    print(f"checkpoint={settings['out']}")
    print(f"log={log_path}")
    print(f"loss={last['L']:.6g} bpp={last['R_bpp']:.6g} skipped={result.skipped_steps}")
    return 0


def _load_model(path):
    from .checkpoint import load_checkpoint

    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_encode(args) -> int:
    from .bitstream import encode_image
    from .imageio import read_image, to_tensor

    model = _load_model(args.ckpt)
    img = read_image(args.image)
    data = encode_image(to_tensor(img), model).to_bytes()
    out = Path(args.out or Path(args.image).with_suffix(".fdsc"))
    out.write_bytes(data)
    h, w = img.shape[:2]
    print(f"out={out}")
    print(f"bytes={len(data)} bpp={8 * len(data) / (w * h):.6f}")
    return 0


def cmd_decode(args) -> int:
    from .bitstream import Container, decode_image
    from .evaluation import psnr
    from .imageio import read_image, to_array, to_uint8, write_image

    model = _load_model(args.ckpt)
    data = Path(args.file).read_bytes()
    cont = Container.from_bytes(data)
    rec = to_array(decode_image(cont, model))
    write_image(args.out, rec)
    print(f"out={args.out}")
    print(f"bpp={8 * len(data) / (cont.orig_w * cont.orig_h):.6f}")
    if args.ref:
        ref = read_image(args.ref)
        print(f"psnr={psnr(to_uint8(ref) / 255.0, to_uint8(rec) / 255.0):.4f}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import eval_dataset

    models = [_load_model(p) for p in args.ckpt]
    models.sort(key=lambda m: (m.lmbda is None, m.lmbda or 0.0))
    summary = eval_dataset(args.dir, {args.label: models}, args.csv, args.json)
    for p in summary["curves"][args.label]:
        print(f"lambda={p['lmbda']:.6g} bpp={p['bpp']:.6f} psnr={p['psnr']:.4f} msssim={p['msssim']:.6f}")
    if summary["skipped"]:
        print(f"skipped={len(summary['skipped'])}")
    return 0


def cmd_bdrate(args) -> int:
    from .evaluation import bd_rate, curve_from_points, read_rd_csv

    anchor = curve_from_points(read_rd_csv(args.anchor))
    test = curve_from_points(read_rd_csv(args.test))
    print(f"bd_rate={bd_rate(anchor, test, 'pchip' if args.pchip else 'cubic'):.4f}")
    return 0


def cmd_inspect(args) -> int:
    from .bitstream import HEADER_SIZE, STREAM_NAMES, Container

    data = Path(args.file).read_bytes()
    c = Container.from_bytes(data)
    info = {
        "version": c.version, "config_id": c.config_id, "lambda_index": c.lambda_index,
        "flags": c.flags, "orig_w": c.orig_w, "orig_h": c.orig_h,
        "padded_w": c.padded_w, "padded_h": c.padded_h, "header_bytes": HEADER_SIZE,
        "file_bytes": len(data), "crc": bool(c.flags & 1),
        "substreams": {n: len(s) for n, s in zip(STREAM_NAMES, c.streams)},
    }
    if args.json:
        print(json.dumps(info))
    else:
        for k, v in info.items():
            if k != "substreams":
                print(f"{k}={v}")
        for n, s in info["substreams"].items():
            print(f"{n}={s}")
    return 0


def cmd_synth(args) -> int:
    from .imageio import write_image
    from .synth import synth_dataset

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(synth_dataset(args.n, args.size, args.seed)):
        write_image(out / f"synth_{i:04d}.png", img)
    print(f"out={out} n={args.n}")
    return 0


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="freqcodec", description="Learned three-band image codec for screen content.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more diagnostics on stderr")
    p.add_argument("--device", choices=["cpu"], default="cpu", help="compute device (CPU only)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("config", nargs="?", help="flat key = value config file")
    t.add_argument("--desk", action="store_true", help="desk-scale model and schedule")
    t.add_argument("--lambda", dest="lmbda", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--crop-size", type=int)
    t.add_argument("--data", help="directory of PNG/PPM training images (default: synthetic)")
    t.add_argument("--n-synth", type=int, help="number of synthetic training images")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--log", help="per-epoch CSV log (default: next to the checkpoint)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="compress an image")
    e.add_argument("image")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", help="output .fdsc file")
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="reconstruct an image")
    d.add_argument("file")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--out", required=True, help="output PNG/PPM")
    d.add_argument("--ref", help="original image; prints psnr=")
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", help="RD evaluation of a directory")
    v.add_argument("dir")
    v.add_argument("--ckpt", nargs="+", required=True)
    v.add_argument("--csv")
    v.add_argument("--json")
    v.add_argument("--label", default="model")
    v.set_defaults(func=cmd_eval)

    b = sub.add_parser("bdrate", help="BD-rate between two RD CSV files")
    b.add_argument("anchor")
    b.add_argument("test")
    b.add_argument("--pchip", action="store_true", help="piecewise cubic instead of cubic polynomial fit")
    b.set_defaults(func=cmd_bdrate)

    i = sub.add_parser("inspect", help="print a container's header and substream sizes")
    i.add_argument("file")
    i.add_argument("--json", action="store_true")
    i.set_defaults(func=cmd_inspect)

    s = sub.add_parser("synth", help="write a synthetic screen-content dataset")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report and exit 1
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
