"""Joint training of sampling masks, generator and discriminator; inference and evaluation."""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn

from spigan import imaging
from spigan.imaging import MaskSet, NoiseConfig
from spigan.losses import (
    LossWeights,
    PerceptualExtractor,
    adversarial_loss_g,
    discriminator_loss,
    mse_loss,
    perceptual_loss,
    psnr,
    ssim,
    total_loss,
)
from spigan.networks import Discriminator, Generator, MaskLayer, seeded

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "spigan-checkpoint"
CHECKPOINT_VERSION = 1
D_SCHEDULES = ("alternate", "per_warmup_epochs")


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/inf loss; ``checkpoint`` holds the last good state."""

    def __init__(self, message: str, checkpoint: "Checkpoint | None" = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    sr: float = 0.1
    image_size: int = 32
    lr_mask: float = 1e-5
    lr_gen: float = 1e-4
    lr_disc: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    warmup_epochs_before_adversarial: int = 4
    d_steps_per_g_step: int = 1
    d_schedule: str = "alternate"
    epochs: int = 30
    batch_size: int = 32
    lambda_adv: float = 0.05
    seed: int = 0
    use_gan: bool = True
    rgb: bool = False
    gen_features: int = 64
    disc_features: tuple[int, int] = (32, 64)
    disc_hidden: int = 1024
    perceptual: bool = True
    perceptual_layer: tuple[int, int] = (5, 4)
    vgg_weights: str | None = None

    def __post_init__(self):
        self.disc_features = tuple(self.disc_features)
        self.perceptual_layer = tuple(self.perceptual_layer)
        if not 0 < self.sr <= 1:
            raise ValueError(f"invalid sampling rate {self.sr}: must be in (0, 1]")
        if min(self.lr_mask, self.lr_gen, self.lr_disc) <= 0:
            raise ValueError("learning rates must be > 0")
        if self.warmup_epochs_before_adversarial < 0:
            raise ValueError("warm-up must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.d_schedule not in D_SCHEDULES:
            raise ValueError(f"d_schedule must be one of {D_SCHEDULES}")
        if self.lambda_adv < 0:
            raise ValueError("lambda_adv must be >= 0")

    @property
    def channels(self) -> int:
        return 3 if self.rgb else 1

    @property
    def m(self) -> int:
        return imaging.sampling_count(self.sr, self.image_size, self.image_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disc_features"] = list(self.disc_features)
        d["perceptual_layer"] = list(self.perceptual_layer)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class SPIModel(nn.Module):
    """Mask layer, generator and discriminator for one sampling rate."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        c, s = config.channels, config.image_size
        with seeded(config.seed):
            self.mask = MaskLayer(config.m, s, s, seed=config.seed)
            self.generator = Generator(config.m, s, s, channels=c, features=config.gen_features)
            self.discriminator = Discriminator(
                s, s, channels=c, features=config.disc_features, hidden=config.disc_hidden
            )

    def mask_set(self) -> MaskSet:
        return MaskSet(self.mask.masks(), ordering="learned")

    def forward(self, scenes: torch.Tensor) -> torch.Tensor:
        return self.generator(self.mask(scenes))


def to_tensor(scenes) -> torch.Tensor:
    """``(N, H, W)`` or ``(N, H, W, 3)`` numpy scenes -> ``(N, C, H, W)`` float tensor."""
    x = torch.as_tensor(np.asarray(scenes), dtype=torch.get_default_dtype())
    if x.dim() == 2:
        x = x[None]
    if x.dim() == 3:
        return x.unsqueeze(1)
    return x.permute(0, 3, 1, 2).contiguous()


def to_numpy_image(x: torch.Tensor) -> np.ndarray:
    """Single ``(C, H, W)`` tensor -> ``(H, W)`` or ``(H, W, 3)`` float64 array."""
    x = x.detach().cpu().double().numpy()
    return x[0] if x.shape[0] == 1 else np.transpose(x, (1, 2, 0))


def params_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _canonical(obj):
    """Rebuild containers and intern strings so pickle's memo, which keys on object
    identity, sees the same sharing pattern whether the payload is fresh or reloaded.
    Plain dicts also drop the module-version metadata attached to state dicts."""
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_canonical(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_canonical(v) for v in obj)
    return obj


@dataclass
class Checkpoint:
    config: TrainConfig
    model_state: dict
    optimizer_state: dict
    epoch: int = 0
    history: list = field(default_factory=list)
    best_model_state: dict | None = None
    best_val_psnr: float = -math.inf
    best_epoch: int = 0
    d_updates: int = 0
    perceptual_pretrained: bool = False

    def save(self, path) -> None:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "model": self.model_state,
            "best_model": self.best_model_state,
            "best_val_psnr": self.best_val_psnr,
            "best_epoch": self.best_epoch,
            "optimizers": self.optimizer_state,
            "history": self.history,
            "d_updates": self.d_updates,
            "perceptual_pretrained": self.perceptual_pretrained,
        }
        # via a buffer so the archive's inner folder name does not depend on the file name
        buf = io.BytesIO()
        torch.save(_canonical(payload), buf)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        payload = torch.load(path, map_location="cpu", weights_only=True)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if payload["version"] > CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {payload['version']} is newer than supported")
        return cls(
            config=TrainConfig.from_dict(payload["config"]),
            model_state=payload["model"],
            optimizer_state=payload["optimizers"],
            epoch=payload["epoch"],
            history=payload["history"],
            best_model_state=payload["best_model"],
            best_val_psnr=payload["best_val_psnr"],
            best_epoch=payload["best_epoch"],
            d_updates=payload["d_updates"],
            perceptual_pretrained=payload["perceptual_pretrained"],
        )

    def model(self, which: str = "best") -> SPIModel:
        """Rebuild the network in eval mode from the ``"best"`` or ``"last"`` weights."""
        if which not in ("best", "last"):
            raise ValueError("which must be 'best' or 'last'")
        state = self.best_model_state if which == "best" and self.best_model_state else self.model_state
        model = SPIModel(self.config)
        model.load_state_dict(state)
        return model.eval()


class Trainer:
    """Owns one :class:`SPIModel` and its three Adam optimizers."""

    def __init__(self, config: TrainConfig, model: SPIModel | None = None):
        self.config = config
        self.model = model or SPIModel(config)
        betas = (config.adam_beta1, config.adam_beta2)
        self.opt_mask = torch.optim.Adam(self.model.mask.parameters(), lr=config.lr_mask, betas=betas)
        self.opt_gen = torch.optim.Adam(self.model.generator.parameters(), lr=config.lr_gen, betas=betas)
        self.opt_disc = torch.optim.Adam(self.model.discriminator.parameters(), lr=config.lr_disc, betas=betas)
        self.weights = LossWeights(config.lambda_adv, config.perceptual_layer)
        self.extractor = (
            PerceptualExtractor(config.perceptual_layer, weights=config.vgg_weights, seed=config.seed)
            if config.perceptual
            else None
        )
        self.epoch = 0
        self.d_updates = 0
        self.history: list[dict] = []
        self.best_state: dict | None = None
        self.best_val = -math.inf
        self.best_epoch = 0

    @property
    def adversarial(self) -> bool:
        """True once the generator warm-up is over (and the GAN is enabled)."""
        return self.config.use_gan and self.epoch > self.config.warmup_epochs_before_adversarial

    def train_step_generator(self, batch: torch.Tensor, adversarial: bool | None = None):
        """One Adam step on the masks (through the STE) and the generator.

        Returns ``(components, recon)`` where ``components`` holds the float
        values of ``mse``, ``vgg``, ``adv`` and ``total`` and ``recon`` is the
        detached reconstruction.
        """
        adversarial = self.adversarial if adversarial is None else adversarial
        model = self.model
        model.train()
        recon = model(batch)
        mse = mse_loss(batch, recon)
        vgg = perceptual_loss(self.extractor, batch, recon) if self.extractor is not None else torch.zeros(())
        if adversarial:
            adv = adversarial_loss_g(model.discriminator(recon))
        else:
            adv = torch.zeros(())
        if not torch.isfinite(mse + vgg + adv):
            raise NonFiniteLossError(
                f"non-finite generator loss at epoch {self.epoch}: "
                f"mse={float(mse.detach())} vgg={float(torch.as_tensor(vgg).detach())} adv={float(torch.as_tensor(adv).detach())}"
            )
        loss = total_loss(mse, vgg, adv, self.weights)
        self.opt_mask.zero_grad(set_to_none=True)
        self.opt_gen.zero_grad(set_to_none=True)
        self.opt_disc.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_mask.step()
        self.opt_gen.step()
        comps = {k: float(torch.as_tensor(v).detach()) for k, v in (("mse", mse), ("vgg", vgg), ("adv", adv), ("total", loss))}
        return comps, recon.detach()

    def train_step_discriminator(self, real: torch.Tensor, fake: torch.Tensor) -> float:
        """One Adam step on the discriminator only; masks and generator stay frozen."""
        if not self.config.use_gan:
            raise RuntimeError("discriminator step requested with use_gan disabled")
        if not self.adversarial:
            raise RuntimeError(
                f"discriminator step during generator warm-up (epoch {self.epoch} <= "
                f"{self.config.warmup_epochs_before_adversarial})"
            )
        disc = self.model.discriminator
        disc.train()
        loss = discriminator_loss(disc(real), disc(fake.detach()))
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"non-finite discriminator loss at epoch {self.epoch}")
        self.opt_disc.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_disc.step()
        self.d_updates += 1
        return float(loss.detach())

    def batches(self, scenes: torch.Tensor) -> Iterable[torch.Tensor]:
        order = np.random.default_rng([self.config.seed, self.epoch]).permutation(len(scenes))
        bs = self.config.batch_size
        for start in range(0, len(order), bs):
            yield scenes[torch.as_tensor(order[start : start + bs])]

    def run_epoch(self, train_scenes: torch.Tensor) -> dict:
        self.epoch += 1
        cfg = self.config
        sums = {"mse": 0.0, "vgg": 0.0, "adv": 0.0, "total": 0.0}
        d_losses = []
        n = 0
        alternate = self.adversarial and cfg.d_schedule == "alternate"
        for batch in self.batches(train_scenes):
            comps, recon = self.train_step_generator(batch)
            for k in sums:
                sums[k] += comps[k] * len(batch)
            n += len(batch)
            if alternate:
                for _ in range(cfg.d_steps_per_g_step):
                    d_losses.append(self.train_step_discriminator(batch, recon))
        if (
            self.adversarial
            and cfg.d_schedule == "per_warmup_epochs"
            and self.epoch % max(cfg.warmup_epochs_before_adversarial, 1) == 0
        ):
            for batch in self.batches(train_scenes):
                with torch.no_grad():
                    self.model.train()
                    fake = self.model(batch)
                d_losses.append(self.train_step_discriminator(batch, fake))
        row = {k: v / n for k, v in sums.items()}
        row["d_loss"] = float(np.mean(d_losses)) if d_losses else 0.0
        return row

    def validate(self, val_scenes: torch.Tensor) -> float:
        self.model.eval()
        with torch.no_grad():
            recon = self.model(val_scenes)
        return float(np.mean([psnr(to_numpy_image(t), to_numpy_image(r)) for t, r in zip(val_scenes, recon)]))

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config,
            model_state=copy.deepcopy(self.model.state_dict()),
            optimizer_state={
                "mask": copy.deepcopy(self.opt_mask.state_dict()),
                "generator": copy.deepcopy(self.opt_gen.state_dict()),
                "discriminator": copy.deepcopy(self.opt_disc.state_dict()),
            },
            epoch=self.epoch,
            history=copy.deepcopy(self.history),
            best_model_state=copy.deepcopy(self.best_state),
            best_val_psnr=self.best_val,
            best_epoch=self.best_epoch,
            d_updates=self.d_updates,
            perceptual_pretrained=bool(self.extractor is not None and self.extractor.pretrained),
        )

    @classmethod
    def resume(cls, ckpt: Checkpoint) -> "Trainer":
        trainer = cls(ckpt.config)
        trainer.model.load_state_dict(ckpt.model_state)
        trainer.opt_mask.load_state_dict(ckpt.optimizer_state["mask"])
        trainer.opt_gen.load_state_dict(ckpt.optimizer_state["generator"])
        trainer.opt_disc.load_state_dict(ckpt.optimizer_state["discriminator"])
        trainer.epoch = ckpt.epoch
        trainer.history = list(ckpt.history)
        trainer.best_state = ckpt.best_model_state
        trainer.best_val = ckpt.best_val_psnr
        trainer.best_epoch = ckpt.best_epoch
        trainer.d_updates = ckpt.d_updates
        return trainer

    def fit(self, train_scenes, val_scenes, epochs: int | None = None, log_path=None) -> Checkpoint:
        """Run ``epochs`` more epochs (default: up to ``config.epochs``)."""
        train_t, val_t = to_tensor(train_scenes), to_tensor(val_scenes)
        target = self.epoch + epochs if epochs is not None else self.config.epochs
        log_file = open(log_path, "a") if log_path else None
        try:
            while self.epoch < target:
                last_good = self.checkpoint()
                try:
                    row = self.run_epoch(train_t)
                except NonFiniteLossError as exc:
                    exc.checkpoint = last_good
                    raise
                val = self.validate(val_t)
                row = {"epoch": self.epoch, **row, "val_psnr": val}
                self.history.append(row)
                if val > self.best_val:
                    self.best_val, self.best_epoch = val, self.epoch
                    self.best_state = copy.deepcopy(self.model.state_dict())
                log.info(
                    "epoch %d mse=%.5f vgg=%.5f adv=%.5f d=%.5f val_psnr=%.2f",
                    self.epoch, row["mse"], row["vgg"], row["adv"], row["d_loss"], val,
                )
                if log_file:
                    keys = ("epoch", "mse", "vgg", "adv", "d_loss", "val_psnr")
                    log_file.write(json.dumps({k: row[k] for k in keys}) + "\n")
                    log_file.flush()
        finally:
            if log_file:
                log_file.close()
        return self.checkpoint()


def train(config: TrainConfig, train_scenes, val_scenes, log_path=None) -> Checkpoint:
    """Train from scratch for ``config.epochs`` epochs and return the final checkpoint."""
    return Trainer(config).fit(train_scenes, val_scenes, log_path=log_path)


def rgb_measure_concat(scene: np.ndarray, masks: MaskSet, noise: NoiseConfig | None = None) -> np.ndarray:
    """Measure R, G and B with the same masks and concatenate (length ``3M``)."""
    noise = noise or NoiseConfig()
    scene = imaging.check_scene(scene, rgb=True)
    blocks = [
        imaging.forward_measure(scene[..., c], masks, NoiseConfig(noise.sigma, noise.seed * 3 + c)).values
        for c in range(3)
    ]
    return np.concatenate(blocks)


def measure(scene: np.ndarray, masks: MaskSet, noise: NoiseConfig | None = None) -> np.ndarray:
    scene = np.asarray(scene)
    if scene.ndim == 3:
        return rgb_measure_concat(scene, masks, noise)
    return imaging.forward_measure(scene, masks, noise).values


@dataclass
class Reconstruction:
    image: np.ndarray
    latency_s: float


def reconstruct(model: SPIModel | Checkpoint, measurements) -> Reconstruction:
    """Generator inference (eval mode, output clamped to ``[0, 1]``) for one measurement vector."""
    if isinstance(model, Checkpoint):
        model = model.model()
    values = np.asarray(getattr(measurements, "values", measurements), dtype=np.float64)
    gen = model.generator
    expected = gen.channels * gen.m
    if values.shape != (expected,):
        raise ValueError(f"model expects {expected} measurements, got {values.shape}")
    model.eval()
    x = torch.as_tensor(values, dtype=torch.get_default_dtype())[None]
    start = time.perf_counter()
    with torch.no_grad():
        out = gen(x)[0]
    latency = time.perf_counter() - start
    return Reconstruction(to_numpy_image(out), latency)


@dataclass
class MetricsReport:
    per_image: list[dict]
    sr: float
    config_hash: str
    dataset: str = ""
    meta: dict = field(default_factory=dict)
    latencies_s: list[float] = field(default_factory=list, repr=False)  # not serialized

    @property
    def mean_psnr_db(self) -> float:
        return float(np.mean([r["psnr_db"] for r in self.per_image]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r["ssim"] for r in self.per_image]))

    def to_dict(self) -> dict:
        return {
            "per_image": self.per_image,
            "aggregate": {
                "mean_psnr_db": self.mean_psnr_db,
                "mean_ssim": self.mean_ssim,
                "sr": self.sr,
                "n_images": len(self.per_image),
                "config_hash": self.config_hash,
            },
            "dataset": self.dataset,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())

    def table(self) -> str:
        lines = [f"{'image':<24} {'PSNR (dB)':>10} {'SSIM':>8}", "-" * 44]
        for r in self.per_image:
            lines.append(f"{r['id']:<24} {r['psnr_db']:>10.2f} {r['ssim']:>8.4f}")
        lines.append("-" * 44)
        lines.append(f"{'mean (SR=' + format(self.sr, 'g') + ')':<24} {self.mean_psnr_db:>10.2f} {self.mean_ssim:>8.4f}")
        return "\n".join(lines)


def evaluate(
    model: SPIModel | Checkpoint,
    scenes,
    ids: list[str] | None = None,
    noise: NoiseConfig | None = None,
    dataset: str = "",
) -> MetricsReport:
    """Measure each scene with the model's masks, reconstruct, and score PSNR/SSIM."""
    meta = {}
    if isinstance(model, Checkpoint):
        meta["perceptual_pretrained"] = model.perceptual_pretrained
        config = model.config
        model = model.model()
    else:
        config = None
    scenes = np.asarray(scenes)
    if len(scenes) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    ids = ids or [f"{i:05d}" for i in range(len(scenes))]
    masks = model.mask_set()
    rows, latencies = [], []
    for i, (name, scene) in enumerate(zip(ids, scenes)):
        n = NoiseConfig(noise.sigma, noise.seed + i) if noise else None
        rec = reconstruct(model, measure(scene, masks, n))
        latencies.append(rec.latency_s)
        rows.append({"id": name, "psnr_db": psnr(scene, rec.image), "ssim": ssim(scene, rec.image)})
    sr = config.sr if config else masks.count / (masks.shape[0] * masks.shape[1])
    digest = config.digest() if config else ""
    return MetricsReport(rows, sr=sr, config_hash=digest, dataset=dataset, meta=meta, latencies_s=latencies)


def mean_predictor_psnr(train_scenes, val_scenes) -> float:
    """Mean validation PSNR of a predictor that always outputs the training mean image."""
    mean_img = np.mean(np.asarray(train_scenes, dtype=np.float64), axis=0)
    return float(np.mean([psnr(v, mean_img) for v in np.asarray(val_scenes)]))
