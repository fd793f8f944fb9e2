"""Command line entry point: ``croptryon <subcommand> ...``.

Exit status: 0 on success, 1 on a contract error raised by the library,
2 on bad usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data_io
from .config import RunConfig
from .crop import precrop_dataset
from .errors import ConfigError, TryOnError
from .evaluation import (HandcraftedExtractor, build_fid_report, frechet_distance,
                         run_unpaired_inference, stats_for_dir)
from .toy import make_toy_dataset
from .training import STAGES, train_stage

log = logging.getLogger("croptryon")


def _common(p):
    p.add_argument("--config", help="sectioned key-value config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="croptryon", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-data", help="check the dataset layout and every record")
    _common(p)
    p.add_argument("--data", help="dataset root")
    p.add_argument("--split", choices=data_io.SPLITS, default="train")
    p.add_argument("--mode", choices=data_io.MODES, default="paired")

    p = sub.add_parser("precrop", help="crop a test split once at a fixed scale")
    _common(p)
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=data_io.SPLITS, default="test")
    p.add_argument("--force", action="store_true", help="replace a non-empty output directory")

    p = sub.add_parser("train", help="train one stage in the paired setting")
    _common(p)
    p.add_argument("--stage", choices=STAGES, required=True)
    p.add_argument("--data", help="dataset root")
    p.add_argument("--out", required=True, help="checkpoint and log directory")
    p.add_argument("--ckpt-dir", help="where earlier-stage checkpoints live (default: --out)")
    p.add_argument("--iters", type=int, help="stop after this many iterations")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("infer", help="unpaired try-on over a (pre-cropped) test set")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="test dataset root")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=data_io.MODES, default="unpaired")

    p = sub.add_parser("fid", help="FID between two image directories")
    _common(p)
    p.add_argument("--real", required=True)
    p.add_argument("--fake", required=True)

    p = sub.add_parser("report", help="FID-vs-scale table over model output trees")
    _common(p)
    p.add_argument("--real", required=True,
                   help="tree with one sub-directory per scale (e.g. 1.0/, 0.7/)")
    p.add_argument("--model", action="append", required=True, metavar="NAME=TREE",
                   help="model output tree with the same per-scale sub-directories")
    p.add_argument("--out", required=True)

    p = sub.add_parser("make-toy", help="write a procedural toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=16)
    p.add_argument("--n-test", type=int, default=16)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _load_config(args, flags=None) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None), getattr(args, "set", []), flags)
    log.info("resolved config: %s", json.dumps(cfg.resolved(), sort_keys=True))
    return cfg


def _data_root(cfg: RunConfig) -> Path:
    root = cfg.get("data_io.root")
    if not root:
        raise ConfigError("no dataset root: pass --data, set data_io.root or CROPTRYON_DATA_ROOT")
    return Path(root)


def _write_resolved(cfg: RunConfig, out_dir: Path, name: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(json.dumps(cfg.resolved(), indent=1, sort_keys=True) + "\n")


def _scale_dirs(tree) -> dict:
    tree = Path(tree)
    if not tree.is_dir():
        raise ConfigError(f"not a directory: {tree}")
    out = {}
    for sub in sorted(p for p in tree.iterdir() if p.is_dir()):
        try:
            scale = float(sub.name.removeprefix("scale_"))
        except ValueError:
            continue
        images = sub / "test" / "image"
        out[scale] = images if images.is_dir() else sub
    if not out:
        raise ConfigError(f"{tree} has no per-scale sub-directories")
    return out


def _cmd_validate(args):
    cfg = _load_config(args, {"data_io.root": args.data})
    root = _data_root(cfg)
    pairs = data_io.load_dataset_index(root, args.split, args.mode)
    palette = data_io.load_palette(root)
    for person_id, cloth_id in pairs:
        data_io.load_sample(root, person_id, cloth_id, args.split,
                            binarize_mask=cfg.get("data_io.binarize_mask"), palette=palette)
    print(f"{root}: {len(pairs)} {args.mode} {args.split} pairs OK")


def _cmd_precrop(args):
    cfg = _load_config(args)
    report = precrop_dataset(args.root, args.out, args.scale, args.seed, cfg.crop_config(),
                             split=args.split, force=args.force)
    print(f"cropped {report.count} records at scale {args.scale}; manifest {report.manifest_path}")


def _cmd_train(args):
    cfg = _load_config(args, {"data_io.root": args.data, "train.max_iters": args.iters,
                              "train.seed": args.seed})
    out = Path(args.out)
    tcfg = cfg.train_config(args.stage)
    _write_resolved(cfg, out, f"{args.stage}_config.json")
    result = train_stage(tcfg, _data_root(cfg), out, ckpt_dir=args.ckpt_dir)
    print(f"stage {args.stage}: {len(result.rows)} iterations -> {result.checkpoint}")


def _cmd_infer(args):
    cfg = _load_config(args, {"data_io.root": args.data})
    out = Path(args.out)
    manifest = run_unpaired_inference(args.ckpt, _data_root(cfg), out, cfg.net_config(),
                                      cfg.agnostic_config(), cfg.get("data_io.sigma"), mode=args.mode,
                                      batch_size=cfg.get("eval.batch_size"))
    _write_resolved(cfg, out, "infer_config.json")
    print(f"wrote {len(manifest['pairs'])} images to {out}")


def _extractor(cfg):
    name = cfg.get("eval.extractor")
    if name != "handcrafted":
        raise ConfigError(f"unknown extractor {name!r}; plug others in through the Python API")
    return HandcraftedExtractor()


def _cmd_fid(args):
    cfg = _load_config(args)
    ext = _extractor(cfg)
    print(f"{frechet_distance(stats_for_dir(args.real, ext), stats_for_dir(args.fake, ext)):.6f}")


def _cmd_report(args):
    cfg = _load_config(args)
    real = _scale_dirs(args.real)
    fakes = {}
    for item in args.model:
        if "=" not in item:
            raise ConfigError(f"--model expects NAME=TREE, got {item!r}")
        name, tree = item.split("=", 1)
        for scale, d in _scale_dirs(tree).items():
            fakes[(name, scale)] = d
    rows = build_fid_report(real, fakes, _extractor(cfg), args.out)
    print("model,scale,fid,n_real,n_fake")
    for r in rows:
        print(f"{r['model']},{r['scale']:g},{r['fid']:.6f},{r['n_real']},{r['n_fake']}")


def _cmd_make_toy(args):
    make_toy_dataset(args.out, args.n_train, args.n_test, args.height, args.width, args.seed)
    print(f"toy dataset written to {args.out}")


COMMANDS = {
    "validate-data": _cmd_validate, "precrop": _cmd_precrop, "train": _cmd_train,
    "infer": _cmd_infer, "fid": _cmd_fid, "report": _cmd_report, "make-toy": _cmd_make_toy,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except TryOnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
