"""Command-line front end: ``spigan {train,eval,simulate,export-masks,make-synthetic}``.

Exit codes: 0 success, 2 usage/config/input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from spigan import data, imaging
from spigan.pgm import write_pgm
from spigan.training import (
    Checkpoint,
    NonFiniteLossError,
    TrainConfig,
    evaluate,
    measure,
    reconstruct,
)
from spigan.losses import psnr, ssim

log = logging.getLogger("spigan")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    train: TrainConfig
    dataset: data.DatasetSpec
    out: str = "runs/default"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"out": self.out, "train": self.train.to_dict(), "dataset": asdict(self.dataset), **self.extra}


def _pick(cls, d: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise UsageError(f"unknown {section} option(s): {', '.join(sorted(unknown))}")
    return d


def load_config(path: str | None, args: argparse.Namespace) -> ExperimentConfig:
    """Read the YAML config (if any) and apply command-line overrides (flags win)."""
    raw: dict = {}
    if path:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
    train = dict(raw.get("train", {}))
    ds = dict(raw.get("dataset", {}))
    out = raw.get("out", "runs/default")
    if getattr(args, "sr", None) is not None:
        train["sr"] = args.sr
    if getattr(args, "seed", None) is not None:
        train["seed"] = args.seed
        ds["seed"] = args.seed
    if getattr(args, "image_size", None) is not None:
        train["image_size"] = args.image_size
    if getattr(args, "no_gan", False):
        train["use_gan"] = False
    if getattr(args, "epochs", None) is not None:
        train["epochs"] = args.epochs
    if getattr(args, "out", None):
        out = args.out
    # dataset resolution and channel mode always follow the model
    if "image_size" in train:
        ds["image_size"] = train["image_size"]
    elif "image_size" in ds:
        train["image_size"] = ds["image_size"]
    ds["grayscale"] = not train.get("rgb", False)
    try:
        tc = TrainConfig(**_pick(TrainConfig, train, "train"))
        spec = data.DatasetSpec(**_pick(data.DatasetSpec, ds, "dataset"))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return ExperimentConfig(tc, spec, out)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def save_image(path: Path, img: np.ndarray) -> Path:
    """Gray -> PGM, RGB -> PNG (without time-dependent metadata)."""
    if img.ndim == 2:
        path = path.with_suffix(".pgm")
        write_pgm(path, _to_u8(img))
    else:
        from PIL import Image

        path = path.with_suffix(".png")
        Image.fromarray(_to_u8(img), mode="RGB").save(path)
    return path


def mask_preview(masks: np.ndarray, n: int = 16, scale: int = 4) -> np.ndarray:
    """Grid of the first ``n`` masks (+1 white, -1 black), nearest-upscaled."""
    tiles = masks[:n]
    cols = int(np.ceil(np.sqrt(len(tiles))))
    rows = int(np.ceil(len(tiles) / cols))
    h, w = tiles.shape[1:]
    pad = 2
    grid = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad), 128, dtype=np.uint8)
    for i, t in enumerate(tiles):
        r, c = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y : y + h, x : x + w] = np.where(t > 0, 255, 0)
    return np.kron(grid, np.ones((scale, scale), dtype=np.uint8))


def plot_history(history: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [r["epoch"] for r in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for key in ("mse", "vgg", "adv", "d_loss"):
        vals = [r[key] for r in history]
        if any(vals):
            ax1.plot(epochs, vals, label=key)
    ax1.set_xlabel("epoch")
    ax1.set_yscale("log")
    ax1.legend()
    ax2.plot(epochs, [r["val_psnr"] for r in history])
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def cmd_train(args) -> int:
    cfg = load_config(args.config, args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    scenes = data.load_dataset(cfg.dataset)
    train_set, val_set = data.split(scenes, cfg.dataset.split_ratio, cfg.dataset.seed)
    log.info("training on %d scenes, validating on %d (M=%d)", len(train_set), len(val_set), cfg.train.m)
    log_path = out / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    from spigan.training import Trainer

    trainer = Trainer(cfg.train)
    try:
        ckpt = trainer.fit(train_set, val_set, log_path=log_path)
    except NonFiniteLossError as exc:
        log.error("%s", exc)
        if exc.checkpoint is not None:
            exc.checkpoint.save(out / "checkpoint_last_good.pt")
        return EXIT_NUMERIC
    ckpt.save(out / "checkpoint.pt")
    tag = f"sr{cfg.train.sr:g}"
    write_pgm(out / f"mask_preview_{tag}.pgm", mask_preview(trainer.model.mask.masks()))
    plot_history(ckpt.history, out / "loss_curve.png")
    report = evaluate(ckpt, val_set, dataset="validation")
    report.write(out / "val_report.json")
    log.info("best validation PSNR %.2f dB at epoch %d", ckpt.best_val_psnr, ckpt.best_epoch)
    return EXIT_OK


def _load_checkpoint(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except (OSError, ValueError, RuntimeError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from exc


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    spec = data.DatasetSpec(source=args.dataset, image_size=ckpt.config.image_size, grayscale=not ckpt.config.rgb)
    try:
        ids, scenes = data.load_image_dir(args.dataset, spec)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    noise = imaging.NoiseConfig(args.noise_sigma, args.seed or 0) if args.noise_sigma else None
    model = ckpt.model(args.which)
    report = evaluate(model, scenes, ids=ids, noise=noise, dataset=Path(args.dataset).name)
    report.config_hash = ckpt.config.digest()
    report.sr = ckpt.config.sr
    report.meta = {"weights": args.which, "perceptual_pretrained": ckpt.perceptual_pretrained}
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.json")
    print(report.table())
    log.info("mean latency %.2f ms/image", 1e3 * float(np.mean(report.latencies_s)))
    return EXIT_OK


def cmd_simulate(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    scene_path = Path(args.scene)
    if not scene_path.is_file():
        raise UsageError(f"scene file not found: {scene_path}")
    try:
        raw = data.read_image(scene_path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read scene {scene_path}: {exc}") from exc
    if raw.shape[:2] != (cfg.image_size, cfg.image_size) and not args.resize:
        raise UsageError(
            f"scene is {raw.shape[1]}x{raw.shape[0]} but the checkpoint expects "
            f"{cfg.image_size}x{cfg.image_size} (use --resize)"
        )
    spec = data.DatasetSpec(source=str(scene_path), image_size=cfg.image_size, grayscale=not cfg.rgb)
    scene = data.preprocess(raw[None], spec)[0]
    model = ckpt.model(args.which)
    noise = imaging.NoiseConfig(args.noise_sigma, args.seed or 0)
    values = measure(scene, model.mask_set(), noise)
    rec = reconstruct(model, values)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(
        out / "measurements.json",
        {"sr": cfg.sr, "m": cfg.m, "channels": cfg.channels, "noise_sigma": noise.sigma, "values": values.tolist()},
    )
    save_image(out / "reconstruction", rec.image)
    metrics = {"scene": scene_path.name, "psnr_db": psnr(scene, rec.image), "ssim": ssim(scene, rec.image)}
    _write_json(out / "metrics.json", metrics)
    print(f"PSNR {metrics['psnr_db']:.2f} dB  SSIM {metrics['ssim']:.4f}")
    log.info("reconstruction latency %.2f ms", 1e3 * rec.latency_s)
    return EXIT_OK


def cmd_export_masks(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    model = ckpt.model(args.which)
    try:
        path = imaging.export_masks(model.mask_set(), args.out, sr=ckpt.config.sr, seed=ckpt.config.seed)
    except OSError as exc:
        raise UsageError(f"cannot write masks to {args.out}: {exc}") from exc
    log.info("wrote %d mask pairs, manifest %s", ckpt.config.m, path)
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    try:
        scenes = data.synth_shapes(args.count, args.size, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    meta = {"generator": "synth_shapes", "size": args.size, "seed": args.seed}
    try:
        data.save_image_set(scenes, args.out, meta)
    except OSError as exc:
        raise UsageError(f"cannot write to {args.out}: {exc}") from exc
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--sr", type=float, help="sampling rate in (0, 1]")
    common.add_argument("--image-size", type=int)
    common.add_argument("--no-gan", action="store_true", help="disable the adversarial term")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="spigan", description="Single-pixel imaging with learned masks and GAN reconstruction")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train masks + reconstruction network")
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    which = argparse.ArgumentParser(add_help=False)
    which.add_argument("--checkpoint", required=True)
    which.add_argument("--which", choices=("best", "last"), default="best", help="weights to use")

    e = sub.add_parser("eval", parents=[common, which], help="PSNR/SSIM report over an image directory")
    e.add_argument("dataset", help="directory of images")
    e.add_argument("--noise-sigma", type=float, default=0.0)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", parents=[common, which], help="measure and reconstruct one scene")
    s.add_argument("scene", help="image file")
    s.add_argument("--noise-sigma", type=float, default=0.0)
    s.add_argument("--resize", action="store_true", help="resize the scene to the checkpoint size")
    s.set_defaults(func=cmd_simulate)

    x = sub.add_parser("export-masks", parents=[common, which], help="write pos/neg PGM pairs for DMD upload")
    x.set_defaults(func=cmd_export_masks)

    m = sub.add_parser("make-synthetic", parents=[common], help="write a synthetic shapes dataset")
    m.add_argument("--count", type=int, default=500)
    m.add_argument("--size", type=int, default=32)
    m.set_defaults(func=cmd_make_synthetic)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.command == "make-synthetic":
        args.seed = 0 if args.seed is None else args.seed
        if args.out is None:
            print("error: --out is required", file=sys.stderr)
            return EXIT_USAGE
    if args.command == "export-masks" and args.out is None:
        print("error: --out is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
