"""Dataset ingestion: STL-10 binaries, image directories, and synthetic shapes."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from spigan.pgm import read_pgm, write_pgm

log = logging.getLogger(__name__)

STL10_SIDE = 96
STL10_RECORD = STL10_SIDE * STL10_SIDE * 3  # 27648 bytes
LUMA = np.array([0.299, 0.587, 0.114])
IMAGE_SUFFIXES = {".pgm", ".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".ppm"}


@dataclass
class DatasetSpec:
    source: str = "synthetic"  # "synthetic" or a path to an STL-10 .bin file / image directory
    image_size: int = 128
    grayscale: bool = True
    split_ratio: float = 0.9
    seed: int = 0
    count: int = 500  # synthetic only

    def __post_init__(self):
        if not 0 < self.split_ratio < 1:
            raise ValueError(f"split_ratio must be in (0, 1), got {self.split_ratio}")
        if self.image_size < 16:
            raise ValueError(f"image_size must be >= 16, got {self.image_size}")


def load_stl10(path) -> np.ndarray:
    """Decode an STL-10 binary image file into ``(N, 96, 96, 3)`` uint8.

    Each 27648-byte record stores the red, green and blue planes in turn,
    each plane in column-major order.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        raise ValueError(f"{path}: empty STL-10 file")
    if raw.size % STL10_RECORD:
        raise ValueError(
            f"{path}: {raw.size} bytes is not a multiple of the {STL10_RECORD}-byte record"
        )
    return raw.reshape(-1, 3, STL10_SIDE, STL10_SIDE).transpose(0, 3, 2, 1)


def _resize(plane: np.ndarray, size: int) -> np.ndarray:
    if plane.shape == (size, size):
        return plane
    img = Image.fromarray(plane.astype(np.float32), mode="F")
    return np.asarray(img.resize((size, size), Image.BICUBIC), dtype=np.float64)


def preprocess(images, spec: DatasetSpec) -> np.ndarray:
    """8-bit images -> float scenes in ``[0, 1]`` of side ``spec.image_size``.

    Accepts ``(N, h, w, 3)`` RGB or ``(N, h, w)`` single-channel input. RGB is
    converted with luma weights unless ``spec.grayscale`` is off; resizing is
    bicubic and the result is clipped back to ``[0, 1]``.
    """
    images = np.asarray(images)
    if images.size == 0 or images.ndim not in (3, 4):
        raise ValueError(f"expected a non-empty image batch, got shape {images.shape}")
    x = images.astype(np.float64) / 255.0
    if x.ndim == 4:
        if spec.grayscale:
            x = x @ LUMA
    elif not spec.grayscale:
        x = np.repeat(x[..., None], 3, axis=-1)
    size = spec.image_size
    if x.ndim == 3:
        out = np.stack([_resize(im, size) for im in x])
    else:
        out = np.stack([np.stack([_resize(im[..., c], size) for c in range(3)], axis=-1) for im in x])
    return np.clip(out, 0.0, 1.0)


def split(scenes, ratio: float, seed: int):
    """Seeded shuffle, then ``floor(ratio * N)`` for training and the rest for validation."""
    if not 0 < ratio < 1:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    n = len(scenes)
    if n == 0:
        raise ValueError("cannot split an empty batch")
    order = np.random.default_rng(seed).permutation(n)
    cut = int(np.floor(ratio * n))
    scenes = np.asarray(scenes)
    return scenes[order[:cut]], scenes[order[cut:]]


def _shape_layer(rng, size: int, ss: int) -> tuple[np.ndarray, float]:
    n = size * ss
    coords = (np.arange(n) + 0.5) / n
    y, x = np.meshgrid(coords, coords, indexing="ij")
    kind = rng.choice(["rect", "ellipse", "bar"])
    cx, cy = rng.uniform(0.15, 0.85, size=2)
    theta = rng.uniform(0, np.pi)
    u = (x - cx) * np.cos(theta) + (y - cy) * np.sin(theta)
    v = -(x - cx) * np.sin(theta) + (y - cy) * np.cos(theta)
    if kind == "ellipse":
        a, b = rng.uniform(0.08, 0.3, size=2)
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1
    elif kind == "rect":
        a, b = rng.uniform(0.06, 0.25, size=2)
        inside = (np.abs(u) <= a) & (np.abs(v) <= b)
    else:
        a, b = rng.uniform(0.25, 0.6), rng.uniform(0.02, 0.05)
        inside = (np.abs(u) <= a) & (np.abs(v) <= b)
    # anti-alias by box-averaging the supersampled coverage
    cover = inside.reshape(size, ss, size, ss).mean(axis=(1, 3))
    return cover, rng.uniform(0, 1)


def _synth_one(seed: int, index: int, size: int, ss: int = 4) -> np.ndarray:
    rng = np.random.default_rng([seed, index])
    lo, hi = np.sort(rng.uniform(0.05, 0.95, size=2))
    angle = rng.uniform(0, 2 * np.pi)
    t = (np.arange(size) + 0.5) / size
    y, x = np.meshgrid(t, t, indexing="ij")
    ramp = (x - 0.5) * np.cos(angle) + (y - 0.5) * np.sin(angle)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    img = lo + (hi - lo) * ramp
    for _ in range(rng.integers(2, 6)):
        cover, level = _shape_layer(rng, size, ss)
        img = (1 - cover) * img + cover * level
    return np.clip(img, 0.0, 1.0)


def synth_shapes(count: int, size: int, seed: int) -> np.ndarray:
    """Seeded desk-scale scenes: 2-5 anti-aliased shapes on a graded background.

    Image ``i`` depends only on ``(seed, i)``, so a longer batch extends a
    shorter one with the same seed.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if size < 16:
        raise ValueError("size must be >= 16")
    return np.stack([_synth_one(seed, i, size) for i in range(count)])


def quantize8(scenes: np.ndarray) -> np.ndarray:
    """Round scenes to the 8-bit grid (what a PGM round trip yields)."""
    return np.round(np.asarray(scenes) * 255.0) / 255.0


def save_image_set(scenes: np.ndarray, out_dir, meta: dict) -> Path:
    """Write scenes as 8-bit PGM files plus a ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, scene in enumerate(scenes):
        name = f"img_{i:05d}.pgm"
        write_pgm(out / name, np.round(np.asarray(scene) * 255).astype(np.uint8))
        files.append(name)
    manifest = dict(meta, count=len(files), files=files)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_image(path) -> np.ndarray:
    """Load one image file as uint8, ``(h, w)`` for gray or ``(h, w, 3)`` for color."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    with Image.open(path) as im:
        if im.mode in ("L", "I", "I;16", "F", "1"):
            return np.asarray(im.convert("L"))
        return np.asarray(im.convert("RGB"))


def load_image_dir(path, spec: DatasetSpec) -> tuple[list[str], np.ndarray]:
    """Read every image file in ``path`` (sorted by name) and preprocess it."""
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"{path}: no images found")
    scenes = [preprocess(read_image(f)[None], spec)[0] for f in files]
    return [f.stem for f in files], np.stack(scenes)


def colorize(scenes: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic per-image channel tints turning gray scenes into RGB ones."""
    rng = np.random.default_rng(seed)
    tint = rng.uniform(0.4, 1.0, size=(len(scenes), 1, 1, 3))
    g = scenes[..., None]
    return quantize8(np.clip(g * tint + (1 - tint) * g**2, 0.0, 1.0))


def cache_dir() -> Path | None:
    root = os.environ.get("SPI_CACHE_DIR")
    return Path(root) if root else None


def load_dataset(spec: DatasetSpec) -> np.ndarray:
    """Materialize the full (unsplit) scene batch described by ``spec``.

    Synthetic scenes are quantized to 8 bits so that a cached PGM copy under
    ``$SPI_CACHE_DIR`` loads bit-identically to a fresh generation.
    """
    if spec.source == "synthetic":
        gray_spec = DatasetSpec(**{**asdict(spec), "grayscale": True})
        cache = cache_dir()
        key = f"synth_n{spec.count}_s{spec.image_size}_seed{spec.seed}"
        if cache is not None and (cache / key / "manifest.json").exists():
            log.info("using cached synthetic set %s", cache / key)
            scenes = load_image_dir(cache / key, gray_spec)[1]
        else:
            scenes = quantize8(synth_shapes(spec.count, spec.image_size, spec.seed))
            if cache is not None:
                save_image_set(scenes, cache / key, {"generator": "synth_shapes", "spec": asdict(gray_spec)})
        return scenes if spec.grayscale else colorize(scenes, spec.seed)
    path = Path(spec.source)
    if path.is_dir():
        return load_image_dir(path, spec)[1]
    return preprocess(load_stl10(path), spec)
