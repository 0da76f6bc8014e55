"""Trainable parts: binary sampling-mask layer, reconstruction generator, discriminator."""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
import torch
import torch.nn as nn

MASK_INIT_RANGE = 0.1
LEAKY_SLOPE = 0.2


@contextmanager
def seeded(seed: int):
    """Run a block under a private, seeded torch RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


class SignSTE(torch.autograd.Function):
    """``w >= 0 -> +1`` else ``-1``; backward passes the gradient where ``|w| <= 1``."""

    @staticmethod
    def forward(ctx, weight):
        ctx.save_for_backward(weight)
        return torch.where(weight >= 0, torch.ones_like(weight), -torch.ones_like(weight))

    @staticmethod
    def backward(ctx, grad_output):
        (weight,) = ctx.saved_tensors
        return grad_output * (weight.abs() <= 1).to(grad_output.dtype)


def ste_gradient(upstream, weights) -> np.ndarray:
    """Gradient of the sign binarization under the clipped straight-through rule."""
    upstream = np.asarray(upstream, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if upstream.shape != weights.shape:
        raise ValueError(f"shape mismatch: {upstream.shape} vs {weights.shape}")
    return np.where(np.abs(weights) <= 1, upstream, 0.0)


class MaskLayer(nn.Module):
    """``M`` learned sampling masks stored as real weights of shape ``M x (H*W)``.

    The forward pass binarizes the weights on every call, so measurements are
    always taken with +/-1 patterns. Multi-channel scenes are measured channel
    by channel with the same masks and concatenated channel-major.
    """

    def __init__(self, m: int, height: int, width: int, seed: int = 0):
        super().__init__()
        if m < 1:
            raise ValueError("mask count must be >= 1")
        self.m, self.height, self.width = m, height, width
        gen = torch.Generator().manual_seed(seed)
        w = torch.rand(m, height * width, generator=gen, dtype=torch.float64)
        w = (2 * w - 1) * MASK_INIT_RANGE
        self.weight = nn.Parameter(w.to(torch.get_default_dtype()))

    def binary(self) -> torch.Tensor:
        return SignSTE.apply(self.weight)

    def masks(self) -> np.ndarray:
        """Current binarized masks as an ``(M, H, W)`` float64 array."""
        w = self.weight.detach().cpu().numpy()
        return np.where(w >= 0, 1.0, -1.0).reshape(self.m, self.height, self.width)

    def forward(self, scenes: torch.Tensor) -> torch.Tensor:
        if scenes.dim() == 3:
            scenes = scenes.unsqueeze(1)
        b, c, h, w = scenes.shape
        if (h, w) != (self.height, self.width):
            raise ValueError(f"scene {h}x{w} does not match masks {self.height}x{self.width}")
        flat = scenes.reshape(b, c, h * w)
        return (flat @ self.binary().to(flat.dtype).T).reshape(b, c * self.m)


def init_mask_layer(m: int, height: int, width: int, seed: int) -> MaskLayer:
    return MaskLayer(m, height, width, seed=seed)


def mask_layer_forward(layer: MaskLayer, scenes) -> torch.Tensor:
    """Noiseless measurements ``binarize(w) @ flatten(scene)`` for a batch."""
    scenes = torch.as_tensor(scenes)
    return layer(scenes)


class Generator(nn.Module):
    """Measurements -> affine initial image -> 5 conv/BN/ReLU blocks -> conv head.

    Raw (unclamped) output during training; clamped to ``[0, 1]`` in eval mode.
    """

    n_blocks = 5

    def __init__(self, m: int, height: int, width: int, channels: int = 1, features: int = 64):
        super().__init__()
        self.m, self.height, self.width, self.channels = m, height, width, channels
        self.fc = nn.Linear(channels * m, channels * height * width)
        blocks = []
        c_in = channels
        for _ in range(self.n_blocks):
            blocks += [nn.Conv2d(c_in, features, 3, padding=1), nn.BatchNorm2d(features), nn.ReLU()]
            c_in = features
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Conv2d(features, channels, 3, padding=1)

    def forward(self, measurements: torch.Tensor) -> torch.Tensor:
        if measurements.shape[-1] != self.channels * self.m:
            raise ValueError(
                f"expected {self.channels * self.m} measurements, got {measurements.shape[-1]}"
            )
        x = self.fc(measurements).reshape(-1, self.channels, self.height, self.width)
        x = self.head(self.blocks(x))
        if not self.training:
            x = x.clamp(0.0, 1.0)
        return x

    @staticmethod
    def param_count(m: int, height: int, width: int, channels: int = 1, features: int = 64) -> int:
        k = height * width * channels
        fc = channels * m * k + k
        convs = (channels * 9 + 1) * features + 4 * (features * 9 + 1) * features
        bn = 5 * 2 * features
        head = (features * 9 + 1) * channels
        return fc + convs + bn + head


class Discriminator(nn.Module):
    """Nine 3x3 conv/BN/LeakyReLU layers, max-pool after the 5th and 9th, two affine layers, sigmoid."""

    def __init__(self, height: int, width: int, channels: int = 1, features=(32, 64), hidden: int = 1024):
        super().__init__()
        if height % 4 or width % 4:
            raise ValueError("discriminator needs height and width divisible by 4")
        self.height, self.width, self.channels = height, width, channels
        f1, f2 = features
        layers = []
        c_in = channels
        for i in range(9):
            c_out = f1 if i < 5 else f2
            layers += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.BatchNorm2d(c_out), nn.LeakyReLU(LEAKY_SLOPE)]
            if i in (4, 8):
                layers.append(nn.MaxPool2d(2))
            c_in = c_out
        self.convs = nn.Sequential(*layers)
        self.fc = nn.Sequential(
            nn.Linear(f2 * (height // 4) * (width // 4), hidden),
            nn.LeakyReLU(LEAKY_SLOPE),
            nn.Linear(hidden, 1),
        )

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(1)
        if images.shape[1:] != (self.channels, self.height, self.width):
            raise ValueError(f"expected images of shape {(self.channels, self.height, self.width)}")
        return self.fc(self.convs(images).flatten(1)).squeeze(1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(images))

    @staticmethod
    def param_count(height: int, width: int, channels: int = 1, features=(32, 64), hidden: int = 1024) -> int:
        f1, f2 = features
        total, c_in = 0, channels
        for i in range(9):
            c_out = f1 if i < 5 else f2
            total += (c_in * 9 + 1) * c_out + 2 * c_out
            c_in = c_out
        flat = f2 * (height // 4) * (width // 4)
        return total + (flat + 1) * hidden + hidden + 1


def generator_forward(gen: Generator, measurements) -> torch.Tensor:
    return gen(torch.as_tensor(measurements))


def discriminator_forward(disc: Discriminator, images) -> torch.Tensor:
    return disc(torch.as_tensor(images))
