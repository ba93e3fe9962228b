"""``vala`` command line: synth, train, eval, ablate, gradcheck, heatmap, info.

Machine-readable results go to stdout as JSON; progress and errors go to
stderr.  Exit codes: 0 success, 1 runtime or check failure, 2 configuration
or usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import SynthConfig, load_manifest, read_ppm, synth_generate, write_pgm
from .engine import (
    Checkpoint,
    TrainConfig,
    evaluate,
    prepare_batch,
    run_ablation_suite,
    stderr_progress,
    train,
)
from .errors import ConfigError, ImageFormatError, VALAError
from .model import VARIANTS, VIEW_NAMES, ModelConfig, VALAModel, variant_config
from .numerics import no_grad

CONFIG_VERSION = 1
LOSS_KEYS = ("alpha", "beta", "positive_rates")
DEFAULT_ABLATION_VARIANTS = ("baseline", "vf_4vp", "vala")


@dataclass
class RunConfig:
    """One JSON document: ``version`` plus ``synth``, ``model``, ``train``, ``loss`` and ``ablation`` sections."""

    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    positive_rates: list[float] | None = None
    variants: list[str] = field(default_factory=lambda: list(DEFAULT_ABLATION_VARIANTS))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        loss = {"alpha": train.pop("alpha"), "beta": train.pop("beta"), "positive_rates": self.positive_rates}
        return {
            "version": CONFIG_VERSION,
            "synth": self.synth.to_dict(),
            "model": self.model.to_dict(),
            "train": train,
            "loss": loss,
            "ablation": {"variants": list(self.variants), "seeds": list(self.seeds)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        allowed = {"version", "synth", "model", "train", "loss", "ablation"}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        if d.get("version") != CONFIG_VERSION:
            raise ConfigError(f"config version must be {CONFIG_VERSION}, got {d.get('version')!r}")
        cfg = cls()
        if "synth" in d:
            cfg.synth = SynthConfig.from_dict(d["synth"])
        if "model" in d:
            cfg.model = ModelConfig.from_dict(d["model"])
        train = dict(d.get("train", {}))
        for k in ("alpha", "beta"):
            if k in train:
                raise ConfigError(f"unknown train config key(s): {k} (set it under 'loss')")
        loss = dict(d.get("loss", {}))
        bad = sorted(set(loss) - set(LOSS_KEYS))
        if bad:
            raise ConfigError(f"unknown loss config key(s): {', '.join(bad)}")
        cfg.positive_rates = loss.pop("positive_rates", None)
        cfg.train = TrainConfig.from_dict({**train, **loss})
        abl = dict(d.get("ablation", {}))
        bad = sorted(set(abl) - {"variants", "seeds"})
        if bad:
            raise ConfigError(f"unknown ablation config key(s): {', '.join(bad)}")
        cfg.variants = list(abl.get("variants", cfg.variants))
        cfg.seeds = [int(s) for s in abl.get("seeds", cfg.seeds)]
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.synth.validate()
        self.model.validate()
        self.train.validate()
        if self.model.num_attrs != self.synth.K:
            raise ConfigError(f"model.num_attrs={self.model.num_attrs} but the synth config defines {self.synth.K} attributes")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown ablation variant {v!r}; choose from {sorted(VARIANTS)}")
        if self.positive_rates is not None and len(self.positive_rates) != self.model.num_attrs:
            raise ConfigError("loss.positive_rates needs one rate per attribute")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")
    sys.stdout.flush()


def _writable_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"{out}: cannot create output directory ({exc.strerror})") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"{out}: output directory is not writable")
    return out


def _load_split(data: str, split: str):
    p = Path(data)
    if p.is_dir():
        p = p / f"{split}.jsonl"
    if not p.exists():
        raise ConfigError(f"{p}: manifest not found")
    return load_manifest(p)


def _run_config(args) -> RunConfig:
    return RunConfig.load(args.config) if args.config else RunConfig()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _run_config(args).synth
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = _writable_dir(args.out or "synth")
    try:
        paths = synth_generate(cfg, out)
    except OSError as exc:
        raise ConfigError(f"{out}: cannot write dataset ({exc.strerror})") from None
    _emit({"out": str(out), "manifests": {k: str(v) for k, v in paths.items()}, "K": cfg.K})
    return 0


def cmd_train(args) -> int:
    rc = _run_config(args)
    tcfg = rc.train if args.seed is None else replace(rc.train, seed=args.seed)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    mcfg = variant_config(args.variant, rc.model) if args.variant else rc.model
    out = _writable_dir(args.out or "run")
    train_ds = _load_split(args.data, "train")
    val_path = Path(args.data) / "val.jsonl"
    val_ds = load_manifest(val_path) if Path(args.data).is_dir() and val_path.exists() else None
    model = VALAModel(mcfg, seed=tcfg.seed)
    result = train(model, train_ds, tcfg, val=val_ds, out_dir=out, progress=stderr_progress, rates=rc.positive_rates)
    last = result.log[-1]
    _emit({
        "checkpoint": str(out / "final.ckpt"),
        "log": str(out / "train_log.jsonl"),
        "epochs": tcfg.epochs,
        "final_loss": last["loss"],
        "val": last.get("val"),
    })
    return 0


def cmd_eval(args) -> int:
    report = evaluate(args.checkpoint, _load_split(args.data, args.split))
    _emit(report.to_dict())
    return 0


def cmd_ablate(args) -> int:
    rc = _run_config(args)
    seeds = rc.seeds if args.seed is None else [args.seed + i for i in range(len(rc.seeds))]
    variants = args.variants.split(",") if args.variants else rc.variants
    tcfg = rc.train if args.epochs is None else replace(rc.train, epochs=args.epochs)
    out = _writable_dir(args.out or "ablation")
    result = run_ablation_suite(
        rc.model, tcfg, _load_split(args.data, "train"), _load_split(args.data, "test"),
        variants=variants, seeds=seeds, progress=stderr_progress,
    )
    doc = result.to_dict()
    (out / "ablation.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    (out / "ablation.txt").write_text(result.text_table())
    sys.stderr.write(result.text_table())
    _emit(doc)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    base = args.seed or 0
    result = run_suite(range(base, base + args.seeds))
    _emit(result.to_dict())
    for r in result.failing():
        print(f"FAIL {r.name}: max relative error {r.max_rel_error:.3e} (tol {r.tol:g})", file=sys.stderr)
    return 0 if result.passed else 1


def scale_to_u8(m: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant map becomes all zeros."""
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def upsample_nearest(m: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    H, W = size
    h, w = m.shape
    rows = (np.arange(H) * h) // H
    cols = (np.arange(W) * w) // W
    return m[rows][:, cols]


def heatmaps(model: VALAModel, image_chw_u8: np.ndarray, attr_names) -> dict[str, np.ndarray]:
    """``{filename: uint8 map}`` for every (attribute, view) map and every fused map."""
    cfg = model.config
    if image_chw_u8.shape[0] != cfg.backbone.input_shape[0]:
        raise ImageFormatError(f"image has {image_chw_u8.shape[0]} channels, checkpoint expects {cfg.backbone.input_shape[0]}")
    x = prepare_batch(image_chw_u8[None], cfg.backbone.input_shape)
    with no_grad():
        out = model.forward(x, mode="eval")
    size = cfg.backbone.input_shape[1:]
    maps = {}
    regional = out.regional.array[0]  # V x K x h x w
    fused = out.fused.data[0]
    for k, attr in enumerate(attr_names):
        for t in range(cfg.num_views):
            maps[f"{attr}_{VIEW_NAMES[t]}.pgm"] = upsample_nearest(scale_to_u8(regional[t, k]), size)
        maps[f"{attr}_fused.pgm"] = upsample_nearest(scale_to_u8(fused[k]), size)
    return maps


def cmd_heatmap(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    try:
        img_u8 = read_ppm(args.image).transpose(2, 0, 1)
    except ImageFormatError as exc:
        raise ImageFormatError(f"{args.image}: {exc}") from None
    out = _writable_dir(args.out or "heatmaps")
    files = []
    for name, m in heatmaps(ckpt.build_model(), img_u8, ckpt.attr_names).items():
        write_pgm(out / name, m)
        files.append(str(out / name))
    _emit({"out": str(out), "files": files})
    return 0


def cmd_info(args) -> int:
    if args.checkpoint:
        ckpt = Checkpoint.load(args.checkpoint)
        model = ckpt.build_model()
        _emit({
            "epoch": ckpt.epoch,
            "config_hash": ckpt.config_hash,
            "model": ckpt.model_config.to_dict(),
            "train": ckpt.train_config.to_dict(),
            "attr_names": ckpt.attr_names,
            "param_count": model.param_count(),
        })
        return 0
    rc = _run_config(args)
    _emit({
        "version": __version__,
        "config": rc.to_dict(),
        "variants": {v: VALAModel(variant_config(v, rc.model)).param_count() for v in VARIANTS},
    })
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=d, help="RunConfig JSON")
    p.add_argument("--seed", type=int, metavar="INT", default=d, help="override the configured seed")
    p.add_argument("--out", metavar="DIR", default=d, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vala", description="View-aware attribute recognition toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--data", required=True, help="dataset directory (train.jsonl, optional val.jsonl) or manifest")
    p.add_argument("--variant", choices=sorted(VARIANTS), help="ablation variant to apply to the model config")
    p.add_argument("--epochs", type=int, help="override the configured epoch count")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--split", default="test", help="split name when --data is a directory (default: test)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run the ablation suite")
    p.add_argument("--data", required=True, help="dataset directory with train.jsonl and test.jsonl")
    p.add_argument("--variants", help="comma-separated variant names (default: from config)")
    p.add_argument("--epochs", type=int, help="override the configured epoch count")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=100, help="number of random seeds (default: 100)")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("heatmap", parents=[common], help="export attention maps as PGM files")
    p.add_argument("checkpoint")
    p.add_argument("image", help="PPM image")
    p.set_defaults(fn=cmd_heatmap)

    p = sub.add_parser("info", parents=[common], help="show configuration or checkpoint details")
    p.add_argument("checkpoint", nargs="?")
    p.set_defaults(fn=cmd_info)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except VALAError as exc:
        print(f"vala {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"vala {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
