"""Training losses (torch, differentiable) and evaluation metrics (numpy).

The generator objective is ``mse + vgg + lambda_adv * adv`` with least-squares
adversarial terms; PSNR and SSIM follow their usual definitions with a 100 dB
cap for identical images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from scipy.ndimage import correlate1d

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 0.05
    perceptual_layer: tuple[int, int] = (5, 4)

    def __post_init__(self):
        if not self.lambda_adv >= 0:
            raise ValueError("lambda_adv must be >= 0")


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def mse_loss(truth, recon) -> torch.Tensor:
    """Pixel-wise mean squared error."""
    truth, recon = torch.as_tensor(truth), torch.as_tensor(recon)
    _same_shape(truth, recon)
    return ((truth - recon) ** 2).mean()


# VGG-19 convolution counts per block
VGG19_BLOCKS = (2, 2, 4, 4, 4)


class PerceptualExtractor(nn.Module):
    """Frozen feature network returning the map after the ``j``-th ReLU of block ``i``.

    With ``weights=None`` the VGG-19 layout is built with a seeded random init;
    pass a state-dict path (torchvision ``vgg19`` ``features`` keys) to use
    pretrained weights. ``pretrained`` records which one is in use.
    """

    def __init__(self, layer: tuple[int, int] = (5, 4), weights=None, seed: int = 0, features: nn.Module | None = None):
        super().__init__()
        self.layer = tuple(layer)
        if features is not None:
            self.features = features
            self.in_channels = getattr(features, "in_channels", 3)
            self.pretrained = False
        else:
            self.features = _vgg19_prefix(self.layer, seed)
            self.in_channels = 3
            self.pretrained = weights is not None
            if weights is not None:
                state = torch.load(weights, map_location="cpu", weights_only=True)
                state = {k.removeprefix("features."): v for k, v in state.items() if not k.startswith("classifier")}
                self.features.load_state_dict(state, strict=False)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # stays in eval mode; parameters never update
        return super().train(False)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(1)
        if images.shape[1] == 1 and self.in_channels == 3:
            images = images.expand(-1, 3, -1, -1)
        return self.features(images)


def _vgg19_prefix(layer: tuple[int, int], seed: int) -> nn.Sequential:
    """VGG-19 feature stack up to and including the ReLU after conv ``j`` of block ``i``."""
    block, conv = layer
    if not (1 <= block <= 5 and 1 <= conv <= VGG19_BLOCKS[block - 1]):
        raise ValueError(f"no VGG-19 layer {layer}")
    widths = (64, 128, 256, 512, 512)
    mods: list[nn.Module] = []
    c_in = 3
    gen = torch.Generator().manual_seed(seed)
    for b in range(block):
        if b:
            mods.append(nn.MaxPool2d(2, 2))
        n = VGG19_BLOCKS[b] if b < block - 1 else conv
        for _ in range(n):
            c = nn.Conv2d(c_in, widths[b], 3, padding=1)
            # torchvision's VGG init: kaiming normal (fan_out, relu), zero bias
            std = math.sqrt(2.0 / (widths[b] * 9))
            with torch.no_grad():
                c.weight.copy_(torch.randn(c.weight.shape, generator=gen) * std)
                c.bias.zero_()
            mods += [c, nn.ReLU(inplace=True)]
            c_in = widths[b]
    return nn.Sequential(*mods)


class IdentityFeatures(nn.Module):
    """Extractor stand-in that returns its (channel-replicated) input."""

    in_channels = 3

    def forward(self, x):
        return x


def perceptual_loss(extractor: PerceptualExtractor, truth, recon) -> torch.Tensor:
    """Squared feature distance summed over channels, normalized by feature-map area.

    Averaged over the batch. Grayscale inputs are replicated to 3 channels
    when the extractor expects RGB.
    """
    truth, recon = torch.as_tensor(truth), torch.as_tensor(recon)
    _same_shape(truth, recon)
    try:
        ft, fr = extractor(truth), extractor(recon)
    except RuntimeError as exc:
        raise ValueError(f"input of shape {tuple(truth.shape)} is incompatible with extractor: {exc}") from exc
    if ft.dim() < 3 or ft.shape[-1] == 0 or ft.shape[-2] == 0:
        raise ValueError("extractor produced an empty feature map")
    area = ft.shape[-1] * ft.shape[-2]
    per_image = ((ft - fr) ** 2).flatten(1).sum(1) / area
    return per_image.mean()


def _check_scores(scores: torch.Tensor) -> None:
    if torch.any(scores < 0) or torch.any(scores > 1) or not torch.all(torch.isfinite(scores)):
        raise ValueError("discriminator scores must lie in [0, 1]")


def adversarial_loss_g(d_scores) -> torch.Tensor:
    """Generator-side least-squares term ``mean(0.5 * (D(G) - 1)^2)``."""
    d_scores = torch.as_tensor(d_scores, dtype=torch.get_default_dtype())
    _check_scores(d_scores)
    return (0.5 * (d_scores - 1) ** 2).mean()


def discriminator_loss(real_scores, fake_scores) -> torch.Tensor:
    """``0.5 * mean((D(real) - 1)^2) + 0.5 * mean(D(fake)^2)``."""
    real = torch.as_tensor(real_scores, dtype=torch.get_default_dtype())
    fake = torch.as_tensor(fake_scores, dtype=torch.get_default_dtype())
    _check_scores(real)
    _check_scores(fake)
    return 0.5 * ((real - 1) ** 2).mean() + 0.5 * (fake**2).mean()


def total_loss(mse, vgg, adv, weights: LossWeights = LossWeights()):
    for name, v in (("mse", mse), ("vgg", vgg), ("adv", adv)):
        value = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(value):
            raise ValueError(f"{name} loss component is not finite: {value}")
    return mse + vgg + weights.lambda_adv * adv


def psnr(truth, recon, peak: float = 1.0) -> float:
    truth = np.asarray(truth, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if truth.shape != recon.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {recon.shape}")
    err = np.mean((truth - recon) ** 2)
    if err == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak**2 / err))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    out = img
    for axis in (0, 1):
        out = correlate1d(out, win, axis=axis, mode="constant")
    r = len(win) // 2
    return out[r:-r, r:-r] if r else out


def ssim(truth, recon, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-covered 11x11 Gaussian windows (sigma 1.5).

    RGB inputs are scored per channel and averaged.
    """
    truth = np.asarray(truth, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if truth.shape != recon.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {recon.shape}")
    if truth.ndim == 3:
        return float(np.mean([ssim(truth[..., c], recon[..., c], data_range) for c in range(truth.shape[-1])]))
    if min(truth.shape) < SSIM_WINDOW:
        raise ValueError(f"image {truth.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    mu_x = _filter_valid(truth, win)
    mu_y = _filter_valid(recon, win)
    sxx = _filter_valid(truth * truth, win) - mu_x**2
    syy = _filter_valid(recon * recon, win) - mu_y**2
    sxy = _filter_valid(truth * recon, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))
