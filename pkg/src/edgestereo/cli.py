"""``edgestereo`` command line: edges, warp, train, translate, eval, params.

Exit codes: 0 ok, 2 configuration, 3 data/format, 4 runtime/numeric.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import data, evaluation, imageops
from .errors import ConfigError, DataError, RuntimeFailure
from .model import NetConfig, count_params, init_model, translate_pair
from .train import Trainer, TrainConfig, fit, load_checkpoint

RUN_DIR_ENV = "EDGESTEREO_RUN_DIR"

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

ABLATIONS = {
    "none": (False, False),
    "edge": (True, False),
    "disp": (False, True),
    "edge+disp": (True, True),
}


@dataclass
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: str | None = None
    real: str | None = None
    building_class_ids: list[int] | None = None
    building_threshold: float = 0.15
    run_dir: str | None = None

    def to_dict(self) -> dict:
        return {
            "net": self.net.to_dict(),
            "train": self.train.to_dict(),
            "data": {
                "synthetic": self.synthetic,
                "real": self.real,
                "building_class_ids": self.building_class_ids,
                "building_threshold": self.building_threshold,
            },
            "output": {"run_dir": self.run_dir},
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)


def parse_run_config(raw: dict | None, base: Path = Path("."), need_data: bool = True) -> RunConfig:
    """Build a RunConfig, collecting every problem before raising."""
    raw = raw or {}
    problems = []
    unknown = sorted(set(raw) - {"net", "train", "data", "output"})
    problems += [f"{k} is not a recognised section" for k in unknown]

    def section(name):
        v = raw.get(name) or {}
        if not isinstance(v, dict):
            problems.append(f"{name} must be a mapping")
            return {}
        return v

    net = NetConfig()
    try:
        net = NetConfig.from_dict(section("net"))
        net.validate()
    except ConfigError as exc:
        problems += exc.problems
    except TypeError as exc:
        problems.append(f"net: {exc}")

    train = TrainConfig()
    try:
        train = TrainConfig.from_dict(section("train"))
        problems += train.problems()
    except ConfigError as exc:
        problems += exc.problems
    except TypeError as exc:
        problems.append(f"train: {exc}")

    d = section("data")
    out = section("output")
    unknown = sorted(set(d) - {"synthetic", "real", "building_class_ids", "building_threshold"})
    problems += [f"data.{k} is not a recognised field" for k in unknown]

    def resolve(p):
        return str((base / p)) if p is not None and not os.path.isabs(p) else p

    cfg = RunConfig(
        net=net,
        train=train,
        synthetic=resolve(d.get("synthetic")),
        real=resolve(d.get("real")),
        building_class_ids=d.get("building_class_ids"),
        building_threshold=d.get("building_threshold", 0.15),
        run_dir=out.get("run_dir"),
    )
    if need_data:
        for key in ("synthetic", "real"):
            if not getattr(cfg, key):
                problems.append(f"data.{key} must name a manifest file")
    if not isinstance(cfg.building_threshold, (int, float)) or not 0 <= cfg.building_threshold <= 1:
        problems.append(f"data.building_threshold must lie in [0, 1], got {cfg.building_threshold!r}")
    if problems:
        raise ConfigError(problems)
    return cfg


def load_run_config(path, need_data: bool = True) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_run_config(raw, path.parent, need_data)


# ------------------------------------------------------------------ commands


def cmd_edges(args) -> int:
    img = data.load_image(args.input)
    edges = imageops.sobel_edges(img)
    data.write_raster(args.output, imageops.unit_to_bytes(edges))
    return EXIT_OK


def mask_sidecar_path(output) -> Path:
    out = Path(output)
    return out.with_name(out.stem + ".mask.png")


def cmd_warp(args) -> int:
    img = data.load_image(args.left)
    disp = data.load_disparity(args.disparity)
    warped, mask = imageops.warp_horizontal(img, disp, args.sign)
    data.save_image(args.output, warped)
    data.write_raster(mask_sidecar_path(args.output), mask.numpy().astype(np.uint8) * 255)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.ablation is not None:
        cfg.train.use_edges, cfg.train.use_warp = ABLATIONS[args.ablation]
    run_dir = args.run_dir or cfg.run_dir or os.environ.get(RUN_DIR_ENV)
    if not run_dir:
        raise ConfigError(f"no run directory: set output.run_dir, pass --run-dir or export {RUN_DIR_ENV}")
    cfg.run_dir = str(run_dir)
    cfg.train.validate()

    synthetic = data.read_manifest(cfg.synthetic)
    real = data.read_manifest(cfg.real)
    if synthetic.domain != data.SYNTHETIC or real.domain != data.REAL:
        raise ConfigError("data.synthetic must be a synthetic manifest and data.real a real one")
    if cfg.building_class_ids:
        real = data.filter_manifest(real, cfg.building_class_ids, cfg.building_threshold)
    if not synthetic.entries or not real.entries:
        raise ConfigError("a manifest is empty (after filtering)")
    cfg.train.disparity_sign = synthetic.disparity_sign

    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    latest = run / "checkpoints" / "latest.ckpt"
    if args.resume and latest.exists():
        trainer = Trainer.from_checkpoint(load_checkpoint(latest), cfg.train)
    else:
        trainer = Trainer.create(cfg.net, cfg.train)
    (run / "config.yaml").write_text(cfg.dump())

    stream = data.BatchStream(synthetic, real, cfg.train.batch_size, cfg.train.seed, cfg.train.crop, cfg.train.workers)
    records = fit(trainer, stream, run)
    if records:
        last = records[-1].losses
        print(f"step {trainer.step}: total_g={last.total_g:.6f} total_d={last.total_d:.6f} warp={last.warp:.6f}")
    return EXIT_OK


def cmd_translate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model.eval()
    use_edges = ckpt.train.use_edges if ckpt.train else True
    manifest = data.read_manifest(args.manifest)
    if manifest.domain != data.SYNTHETIC:
        raise ConfigError("translate expects a synthetic manifest")
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    source = data.ManifestSource(manifest)
    with torch.no_grad():
        for i in range(len(source)):
            item = source.load(i)
            left_ab, right_ab = translate_pair(
                model,
                item.left,
                item.right,
                imageops.sobel_edges(item.left),
                imageops.sobel_edges(item.right),
                use_edges,
            )
            data.save_image(out / f"{item.id}_left.png", left_ab)
            data.save_image(out / f"{item.id}_right.png", right_ab)
    print(f"translated {len(source)} pairs into {out}")
    return EXIT_OK


def _find_prediction(pred_dir: Path, key: str) -> Path:
    for ext in (".pfm", ".dsp"):
        p = pred_dir / f"{key}{ext}"
        if p.exists():
            return p
    raise data.ManifestError(f"no prediction for id {key!r} in {pred_dir}")


def cmd_eval(args) -> int:
    manifest = data.read_manifest(args.gt_manifest)
    if manifest.domain != data.SYNTHETIC:
        raise ConfigError("eval needs a manifest whose entries carry disparity paths")
    pred_dir = Path(args.pred_dir)
    if not pred_dir.is_dir():
        raise data.MissingFileError(f"no such prediction directory: {pred_dir}")
    gts, preds = {}, {}
    for e in manifest.entries:
        gts[e.id] = data.load_disparity(e.disparity)
        preds[e.id] = data.load_disparity(_find_prediction(pred_dir, e.id))
    report = evaluation.evaluate(preds, gts)
    out = Path(args.out or os.environ.get(RUN_DIR_ENV) or pred_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.txt", out / "report.jsonl")
    sys.stdout.write(report.table())
    return EXIT_OK


def cmd_params(args) -> int:
    net = load_run_config(args.config, need_data=False).net if args.config else NetConfig()
    model = init_model(net, 0)
    print(count_params(model))
    if args.verbose:
        g = sum(p.numel() for p in model.generator_parameters())
        d = sum(p.numel() for p in model.discriminator_parameters())
        print(f"generator {g}\ndiscriminators {d}")
    return EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgestereo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("edges", help="write the Sobel edge map of an image")
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(func=cmd_edges)

    s = sub.add_parser("warp", help="warp an image horizontally by a disparity map")
    s.add_argument("left")
    s.add_argument("disparity")
    s.add_argument("output")
    s.add_argument("--sign", type=int, choices=(1, -1), default=1)
    s.set_defaults(func=cmd_warp)

    s = sub.add_parser("train", help="train from a YAML run config")
    s.add_argument("config")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--run-dir")
    s.add_argument("--ablation", choices=sorted(ABLATIONS))
    s.add_argument("--resume", action="store_true", help="continue from <run-dir>/checkpoints/latest.ckpt")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("translate", help="translate the pairs of a synthetic manifest")
    s.add_argument("checkpoint")
    s.add_argument("manifest")
    s.add_argument("outdir")
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("eval", help="score predicted disparities against a manifest")
    s.add_argument("pred_dir")
    s.add_argument("gt_manifest")
    s.add_argument("--out", help=f"report directory (default ${RUN_DIR_ENV} or pred_dir)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("params", help="print the trainable parameter count")
    s.add_argument("config", nargs="?")
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RuntimeFailure as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
