"""Single-pixel forward model, binary masks, Hadamard patterns and classical inversion.

Scenes are plain ``numpy`` arrays of shape ``(H, W)`` with reflectance in
``[0, 1]``. A mask set is a stack of ``M`` patterns with entries in ``{-1, +1}``;
flattened, the stack is the ``M x K`` measurement matrix with ``K = H * W``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from spigan.pgm import read_pgm, write_pgm

ORDERINGS = ("natural", "sequency")


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver stops before reaching its tolerance."""

    def __init__(self, message: str, iterations: int, residual: float):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ValueError(f"noise sigma must be finite and >= 0, got {self.sigma}")


@dataclass
class MaskSet:
    """``M`` binary (+1/-1) patterns of shape ``(H, W)``."""

    masks: np.ndarray
    ordering: str = "learned"

    def __post_init__(self):
        masks = np.asarray(self.masks)
        if masks.ndim != 3:
            raise ValueError(f"masks must have shape (M, H, W), got {masks.shape}")
        check_binary(masks)
        self.masks = masks.astype(np.float64, copy=False)

    @property
    def count(self) -> int:
        return self.masks.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.masks.shape[1], self.masks.shape[2]

    def matrix(self) -> np.ndarray:
        """The ``M x K`` measurement matrix (a view, rows are flattened masks)."""
        return self.masks.reshape(self.count, -1)


@dataclass
class MeasurementVector:
    values: np.ndarray
    noise_sigma: float = 0.0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.values)


def check_binary(a: np.ndarray) -> None:
    a = np.asarray(a)
    if not np.all((a == 1) | (a == -1)):
        raise ValueError("mask entries must be exactly -1 or +1")


def check_scene(scene: np.ndarray, *, rgb: bool = False) -> np.ndarray:
    scene = np.asarray(scene, dtype=np.float64)
    want = 3 if rgb else 2
    if scene.ndim != want or (rgb and scene.shape[-1] != 3):
        kind = "H x W x 3" if rgb else "H x W"
        raise ValueError(f"scene must be {kind}, got shape {scene.shape}")
    if scene.size == 0:
        raise ValueError("scene is empty")
    if not np.all(np.isfinite(scene)) or scene.min() < 0 or scene.max() > 1:
        raise ValueError("scene values must lie in [0, 1]")
    return scene


def sampling_count(sr: float, width: int, height: int) -> int:
    """Number of masks for sampling rate ``sr`` on a ``width x height`` scene.

    Uses ``floor(sr * width * height)`` so the pattern budget is never exceeded.
    """
    if width < 1 or height < 1:
        raise ValueError("width and height must be positive")
    if not (0 < sr <= 1):
        raise ValueError(f"invalid sampling rate {sr}: must be in (0, 1]")
    # guard against 0.1 * 16384 = 1638.3999999999999 style float noise
    m = math.floor(sr * width * height + 1e-9)
    if m < 1:
        raise ValueError(f"sampling rate {sr} gives no measurements on {width}x{height}")
    return min(m, width * height)


def binarize(weights) -> np.ndarray:
    """Sign binarization: ``w >= 0`` maps to +1, ``w < 0`` to -1."""
    w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("cannot binarize non-finite weights")
    return np.where(w >= 0, 1.0, -1.0)


def forward_measure(
    scene: np.ndarray, masks: MaskSet, noise: NoiseConfig | None = None
) -> MeasurementVector:
    """Simulated detector readouts ``I = A O + n`` for a grayscale scene."""
    noise = noise or NoiseConfig()
    scene = check_scene(scene)
    if scene.shape != masks.shape:
        raise ValueError(f"scene shape {scene.shape} does not match masks {masks.shape}")
    values = masks.matrix() @ scene.ravel()
    if noise.sigma > 0:
        rng = np.random.default_rng(noise.seed)
        values = values + rng.normal(0.0, noise.sigma, size=values.shape)
    return MeasurementVector(values, noise_sigma=noise.sigma)


def decompose_mask(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a +/-1 pattern into the two {0,1} patterns a DMD can display.

    ``pos - neg == mask``, so the +/-1 measurement is the difference of the
    two on/off measurements.
    """
    mask = np.asarray(mask)
    check_binary(mask)
    pos = (mask + 1) / 2
    neg = (1 - mask) / 2
    return pos, neg


def sign_changes(rows: np.ndarray) -> np.ndarray:
    return np.count_nonzero(np.diff(np.sign(rows), axis=-1), axis=-1)


def hadamard_matrix(n: int, ordering: str = "sequency") -> np.ndarray:
    """Sylvester Hadamard matrix of order ``n``, optionally in sequency order."""
    if n < 1 or n & (n - 1):
        raise ValueError(f"Hadamard order must be a power of two, got {n}")
    if ordering not in ORDERINGS:
        raise ValueError(f"unknown ordering {ordering!r}, expected one of {ORDERINGS}")
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    if ordering == "sequency":
        h = h[np.argsort(sign_changes(h), kind="stable")]
    return h


def _pattern_shape(n: int) -> tuple[int, int]:
    side = math.isqrt(n)
    if side * side == n:
        return side, side
    return 1, n


def walsh_hadamard_masks(n: int, count: int | None = None, ordering: str = "sequency") -> MaskSet:
    """First ``count`` rows of the order-``n`` Hadamard matrix as patterns.

    Rows are reshaped to ``sqrt(n) x sqrt(n)`` when ``n`` is an even power of
    two, otherwise to ``1 x n``.
    """
    count = n if count is None else count
    if not 1 <= count <= n:
        raise ValueError(f"count must be in [1, {n}], got {count}")
    h = hadamard_matrix(n, ordering)[:count]
    return MaskSet(h.reshape(count, *_pattern_shape(n)), ordering=ordering)


def hadamard_reconstruct_full(measurements, n: int, ordering: str = "sequency") -> np.ndarray:
    """Exact inverse ``O = H^T I / n`` from all ``n`` Hadamard measurements."""
    values = np.asarray(getattr(measurements, "values", measurements), dtype=np.float64)
    if values.shape != (n,):
        raise ValueError(f"expected {n} measurements, got {values.shape}")
    h = hadamard_matrix(n, ordering)
    return (h.T @ values / n).reshape(_pattern_shape(n))


def classical_reconstruct(
    masks,
    measurements,
    reg_weight: float = 0.0,
    max_iters: int | None = None,
    tol: float = 1e-10,
    clip: bool = False,
    shape: Sequence[int] | None = None,
) -> np.ndarray:
    """Tikhonov-regularized least squares by conjugate gradient.

    Minimizes ``||I - A O||^2 + reg_weight * ||O||^2`` by running CG on the
    normal equations ``(A^T A + reg_weight) O = A^T I`` from ``O = 0``; with
    ``reg_weight = 0`` on an underdetermined system this yields the
    minimum-norm solution.

    ``masks`` is a :class:`MaskSet` or a dense ``M x K`` matrix. Raises
    :class:`ConvergenceError` if the relative residual is still above ``tol``
    after ``max_iters`` iterations.
    """
    if reg_weight < 0:
        raise ValueError("reg_weight must be >= 0")
    if isinstance(masks, MaskSet):
        a = masks.matrix()
        shape = shape or masks.shape
    else:
        a = np.asarray(masks, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError("measurement matrix must be 2-D")
        shape = shape or (a.shape[1],)
    b = np.asarray(getattr(measurements, "values", measurements), dtype=np.float64)
    if b.shape != (a.shape[0],):
        raise ValueError(f"{b.shape[0]} measurements for {a.shape[0]} masks")
    k = a.shape[1]
    max_iters = max_iters or 10 * k

    rhs = a.T @ b
    x = np.zeros(k)
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0:
        return x.reshape(shape)

    def normal_op(v):
        return a.T @ (a @ v) + reg_weight * v

    r = rhs.copy()
    p = r.copy()
    rr = r @ r
    converged = False
    it = 0
    while it < max_iters:
        if math.sqrt(rr) / rhs_norm < tol:
            converged = True
            break
        q = normal_op(p)
        alpha = rr / (p @ q)
        x += alpha * p
        r -= alpha * q
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
    converged = converged or math.sqrt(rr) / rhs_norm < tol
    if not converged:
        raise ConvergenceError(
            f"CG did not reach tol={tol:g} in {it} iterations",
            iterations=it,
            residual=math.sqrt(rr) / rhs_norm,
        )
    if clip:
        x = np.clip(x, 0.0, 1.0)
    return x.reshape(shape)


def export_masks(
    masks: MaskSet,
    out_dir,
    *,
    sr: float | None = None,
    seed: int | None = None,
) -> Path:
    """Write each mask as a pos/neg pair of 8-bit PGMs plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, mask in enumerate(masks.masks):
        pos, neg = decompose_mask(mask)
        names = (f"mask_{i:05d}_pos.pgm", f"mask_{i:05d}_neg.pgm")
        write_pgm(out / names[0], (pos * 255).astype(np.uint8))
        write_pgm(out / names[1], (neg * 255).astype(np.uint8))
        files.append({"index": i, "pos": names[0], "neg": names[1]})
    height, width = masks.shape
    manifest = {
        "sr": sr,
        "width": width,
        "height": height,
        "count": masks.count,
        "ordering": masks.ordering,
        "seed": seed,
        "files": files,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def import_masks(manifest_path) -> MaskSet:
    """Rebuild a :class:`MaskSet` from an exported pos/neg PGM directory."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    masks = []
    for entry in manifest["files"]:
        pos = read_pgm(path.parent / entry["pos"]).astype(np.int16) // 255
        neg = read_pgm(path.parent / entry["neg"]).astype(np.int16) // 255
        masks.append(pos - neg)
    return MaskSet(np.stack(masks), ordering=manifest.get("ordering", "learned"))
