"""Convolutional blocks on channels-first maps ``[B, C, H, W]``."""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import DimensionError, InputError
from .nn import Conv2d, Linear, Module
from .tensor import Tensor


@dataclass(frozen=True)
class DenseBlockConfig:
    num_layers: int
    growth_rate: int
    bottleneck_width: int | None = None  # defaults to 4 * growth_rate

    @property
    def width(self) -> int:
        return self.bottleneck_width or 4 * self.growth_rate

    def out_channels(self, cin: int) -> int:
        return cin + self.num_layers * self.growth_rate


class DenseLayer(Module):
    """concat(x, conv3x3(relu(conv1x1(relu(x)))))."""

    def __init__(self, cin: int, growth_rate: int, width: int, rng):
        self.conv1 = Conv2d(cin, width, 1, rng)
        self.conv2 = Conv2d(width, growth_rate, 3, rng, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv2(T.relu(self.conv1(T.relu(x))))
        return T.concat([x, y], axis=1)


class DenseBlock(Module):
    def __init__(self, cin: int, cfg: DenseBlockConfig, rng):
        self.cfg = cfg
        self.layers = [
            DenseLayer(cin + i * cfg.growth_rate, cfg.growth_rate, cfg.width, rng)
            for i in range(cfg.num_layers)
        ]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class ResidualBlock(Module):
    def __init__(self, channels: int, rng):
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return T.add(x, self.conv2(T.relu(self.conv1(x))))


def _to_patches(x: Tensor, p: int) -> Tensor:
    """[B,C,H,W] -> [B*(H/p)*(W/p), p*p, C]."""
    B, C, H, W = x.shape
    x = T.reshape(x, (B, C, H // p, p, W // p, p))
    x = T.transpose(x, (0, 2, 4, 3, 5, 1))
    return T.reshape(x, (B * (H // p) * (W // p), p * p, C))


def _from_patches(x: Tensor, p: int, B: int, H: int, W: int) -> Tensor:
    C = x.shape[-1]
    x = T.reshape(x, (B, H // p, W // p, p, p, C))
    x = T.transpose(x, (0, 5, 1, 3, 2, 4))
    return T.reshape(x, (B, C, H, W))


class PSNL(Module):
    """Embedded-Gaussian non-local block applied independently inside each p x p patch."""

    def __init__(self, channels: int, patch: int, rng, inter_channels: int | None = None):
        ci = inter_channels or max(channels // 2, 1)
        self.patch = patch
        self.theta = Conv2d(channels, ci, 1, rng)
        self.phi = Conv2d(channels, ci, 1, rng, bias=False)  # a key bias cancels in the softmax
        self.g = Conv2d(channels, ci, 1, rng)
        self.out = Conv2d(ci, channels, 1, rng)

    def forward(self, x: Tensor, return_affinity: bool = False):
        B, C, H, W = x.shape
        p = self.patch
        if H % p or W % p:
            raise DimensionError(f"PSNL patch {p} does not divide {H}x{W}")
        th = _to_patches(self.theta(x), p)
        ph = _to_patches(self.phi(x), p)
        g = _to_patches(self.g(x), p)
        aff = T.softmax(T.matmul(th, T.transpose(ph, (0, 2, 1))), axis=-1)
        y = _from_patches(T.matmul(aff, g), p, B, H, W)
        out = T.add(x, self.out(y))
        return (out, aff) if return_affinity else out


class IAWCA(Module):
    """Channel attention with a learned softmax spatial pooling map and a linear bottleneck.

    Y = softmax_HW(conv(x));  s_c = sum_p x_c[p] Y[p];
    F = sigmoid(W2 relu(W1 s));  out = x * F
    """

    def __init__(self, channels: int, rng, reduction: int = 4, kernel_size: int = 1):
        if reduction < 1 or channels % reduction:
            raise InputError(f"reduction {reduction} must divide channels {channels}")
        self.weight_conv = Conv2d(channels, 1, kernel_size, rng, padding=kernel_size // 2, bias=False)
        self.w1 = Linear(channels, channels // reduction, rng, bias=False)
        self.w2 = Linear(channels // reduction, channels, rng, bias=False)

    def pooling_weights(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        y = T.reshape(self.weight_conv(x), (B, H * W, 1))
        return T.softmax(y, axis=1)

    def channel_scale(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        y = self.pooling_weights(x)
        s = T.reshape(T.matmul(T.reshape(x, (B, C, H * W)), y), (B, C))
        return T.sigmoid(self.w2(T.relu(self.w1(s))))

    def forward(self, x: Tensor) -> Tensor:
        B, C = x.shape[:2]
        f = self.channel_scale(x)
        return T.mul(x, T.reshape(f, (B, C, 1, 1)))


def zero_(module: Module) -> Module:
    """Set every parameter of ``module`` to zero in place (test and ablation helper)."""
    for p in module.parameters():
        p.data[...] = 0.0
    return module


__all__ = [
    "DenseBlockConfig", "DenseLayer", "DenseBlock", "ResidualBlock", "PSNL", "IAWCA", "zero_",
]
