"""Miniature style-based generator and three-headed residual discriminator.

Every weight uses the equalized learning-rate parameterization: it is stored
with unit variance and multiplied by ``lr_mul / sqrt(fan_in)`` at run time.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ShapeError
from ..layout import SubspaceLayout

SQRT2 = math.sqrt(2.0)


def lrelu(x):
    return F.leaky_relu(x, 0.2) * SQRT2


class EqualLinear(nn.Module):
    def __init__(self, in_features, out_features, bias_init=0.0, lr_mul=1.0, activate=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_features,), float(bias_init)))
        self.scale = lr_mul / math.sqrt(in_features)
        self.lr_mul = lr_mul
        self.activate = activate

    def forward(self, x):
        out = F.linear(x, self.weight * self.scale, self.bias * self.lr_mul)
        return lrelu(out) if self.activate else out


class EqualConv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, bias=True, activate=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.scale = 1.0 / math.sqrt(in_channels * kernel_size ** 2)
        self.padding = kernel_size // 2
        self.activate = activate

    def forward(self, x):
        out = F.conv2d(x, self.weight * self.scale, self.bias, padding=self.padding)
        return lrelu(out) if self.activate else out


class MappingNetwork(nn.Module):
    """z_k -> w_k through ``n_layers`` fully connected layers (pixel-normalized input)."""

    def __init__(self, z_dim, w_dim, n_layers=8, hidden=64, lr_mul=0.01):
        super().__init__()
        dims = [z_dim] + [hidden] * (n_layers - 1) + [w_dim]
        self.layers = nn.Sequential(*[
            EqualLinear(a, b, lr_mul=lr_mul, activate=True) for a, b in zip(dims[:-1], dims[1:])
        ])

    def forward(self, z):
        z = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        return self.layers(z)


class ModulatedConv2d(nn.Module):
    """Conv whose input channels are scaled per sample by a style, then demodulated."""

    def __init__(self, in_channels, out_channels, kernel_size, style_dim, demodulate=True, upsample=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(1, out_channels, in_channels, kernel_size, kernel_size))
        self.scale = 1.0 / math.sqrt(in_channels * kernel_size ** 2)
        self.affine = EqualLinear(style_dim, in_channels, bias_init=1.0)
        self.demodulate = demodulate
        self.upsample = upsample
        self.padding = kernel_size // 2
        self.out_channels = out_channels

    def forward(self, x, w):
        # equivalent to convolving with per-sample modulated weights, but
        # scales activations instead so one shared convolution serves the batch
        style = self.affine(w)
        weight = self.scale * self.weight[0]
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        out = F.conv2d(x * style[:, :, None, None], weight, padding=self.padding)
        if self.demodulate:
            demod = torch.rsqrt(style.pow(2) @ weight.pow(2).sum(dim=(2, 3)).t() + 1e-8)
            out = out * demod[:, :, None, None]
        return out


class StyledLayer(nn.Module):
    def __init__(self, in_channels, out_channels, style_dim, upsample=False):
        super().__init__()
        self.conv = ModulatedConv2d(in_channels, out_channels, 3, style_dim, upsample=upsample)
        self.noise_strength = nn.Parameter(torch.zeros(()))
        self.bias = nn.Parameter(torch.zeros(1, out_channels, 1, 1))

    def forward(self, x, w, noise):
        out = self.conv(x, w)
        out = out + self.noise_strength * noise
        return lrelu(out + self.bias)


class ToRGB(nn.Module):
    def __init__(self, in_channels, style_dim, channels=3):
        super().__init__()
        self.conv = ModulatedConv2d(in_channels, channels, 1, style_dim, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(1, channels, 1, 1))

    def forward(self, x, w, skip=None):
        out = self.conv(x, w) + self.bias
        if skip is not None:
            out = out + F.interpolate(skip, scale_factor=2, mode="bilinear", align_corners=False)
        return out


def _channels(resolution, base, max_channels):
    return min(max_channels, base * 32 // resolution)


class SynthesisNetwork(nn.Module):
    """Learned 4x4 constant, two styled convs per resolution, RGB skip outputs."""

    def __init__(self, style_dim, resolution=32, base_channels=32, max_channels=64, channels=3):
        super().__init__()
        if resolution < 8 or resolution & (resolution - 1):
            raise ShapeError(f"resolution must be a power of two >= 8, got {resolution}")
        self.resolution = resolution
        c4 = _channels(4, base_channels, max_channels)
        self.const = nn.Parameter(torch.randn(1, c4, 4, 4))
        self.input_layer = StyledLayer(c4, c4, style_dim)
        self.rgbs = nn.ModuleList([ToRGB(c4, style_dim, channels)])
        self.blocks = nn.ModuleList()
        self.sizes = [4]
        res, c_in = 8, c4
        while res <= resolution:
            c_out = _channels(res, base_channels, max_channels)
            self.blocks.append(nn.ModuleList([
                StyledLayer(c_in, c_out, style_dim, upsample=True),
                StyledLayer(c_out, c_out, style_dim),
            ]))
            self.rgbs.append(ToRGB(c_out, style_dim, channels))
            self.sizes.append(res)
            res, c_in = res * 2, c_out
        # one style per conv layer and one per RGB output
        self.num_ws = 1 + 2 * len(self.blocks) + len(self.rgbs)

    def layer_resolutions(self) -> list[int]:
        """Resolution at which each style input acts, in consumption order."""
        out = [4, 4]
        for res in self.sizes[1:]:
            out += [res, res, res]
        return out

    def make_noise(self, n, generator=None, device=None):
        noise = [torch.randn(n, 1, 4, 4, generator=generator, device=device)]
        for res in self.sizes[1:]:
            noise += [torch.randn(n, 1, res, res, generator=generator, device=device) for _ in range(2)]
        return noise

    def forward(self, ws, noise=None):
        """``ws`` is (n, num_ws, d): one w per style input."""
        n = ws.shape[0]
        if noise is None:
            noise = self.make_noise(n, device=ws.device)
        i = 0
        x = self.input_layer(self.const.expand(n, -1, -1, -1), ws[:, i], noise[0])
        i += 1
        rgb = self.rgbs[0](x, ws[:, i])
        i += 1
        for b, (up, conv) in enumerate(self.blocks):
            x = up(x, ws[:, i], noise[1 + 2 * b])
            x = conv(x, ws[:, i + 1], noise[2 + 2 * b])
            rgb = self.rgbs[b + 1](x, ws[:, i + 2], rgb)
            i += 3
        return rgb


class Generator(nn.Module):
    """Per-subspace mapping networks feeding one synthesis network."""

    def __init__(self, layout: SubspaceLayout, resolution=32, mapping_layers=8, mapping_hidden=64,
                 mapping_lr_mul=0.01, base_channels=32, max_channels=64):
        super().__init__()
        self.layout = layout
        self.mappings = nn.ModuleDict({
            name: MappingNetwork(d, d, mapping_layers, mapping_hidden, mapping_lr_mul)
            for name, d in zip(layout.names, layout.dims)
        })
        self.synthesis = SynthesisNetwork(layout.total, resolution, base_channels, max_channels)

    @property
    def num_ws(self) -> int:
        return self.synthesis.num_ws

    def map(self, z: torch.Tensor) -> torch.Tensor:
        """Concatenated w = [m_1(z_1), ..., m_K(z_K)] for a concatenated z."""
        parts = self.layout.split(z)
        return torch.cat([self.mappings[name](p) for name, p in zip(self.layout.names, parts)], dim=1)

    def broadcast(self, w):
        return w.unsqueeze(1).expand(-1, self.num_ws, -1)

    def mix(self, w_a, w_b, crossover: int):
        """Style inputs before ``crossover`` come from ``w_a``, the rest from ``w_b``."""
        ws = self.broadcast(w_a).clone()
        ws[:, crossover:] = w_b.unsqueeze(1)
        return ws

    def synthesize(self, w, noise=None):
        if w.ndim != 2 or w.shape[1] != self.layout.total:
            raise ShapeError(f"expected w of shape (n, {self.layout.total}), got {tuple(w.shape)}")
        return self.synthesis(self.broadcast(w), noise)

    def forward(self, z, noise=None):
        return self.synthesize(self.map(z), noise)


class DiscriminatorBlock(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv1 = EqualConv2d(in_channels, in_channels, 3, activate=True)
        self.conv2 = EqualConv2d(in_channels, out_channels, 3, activate=True)
        self.skip = EqualConv2d(in_channels, out_channels, 1, bias=False)

    def forward(self, x):
        out = F.avg_pool2d(self.conv2(self.conv1(x)), 2)
        skip = self.skip(F.avg_pool2d(x, 2))
        return (out + skip) / SQRT2


class Discriminator(nn.Module):
    """Residual trunk with an adversarial logit, a latent head and a pixel-feature head.

    The pixel feature ``p`` is the flattened output of the last conv layer,
    which is the input of the shared fully connected layer.
    """

    def __init__(self, w_dim, resolution=32, base_channels=32, max_channels=64, channels=3):
        super().__init__()
        c = _channels(resolution, base_channels, max_channels)
        self.from_rgb = EqualConv2d(channels, c, 1, activate=True)
        blocks, res = [], resolution
        while res > 4:
            c_out = _channels(res // 2, base_channels, max_channels)
            blocks.append(DiscriminatorBlock(c, c_out))
            c, res = c_out, res // 2
        self.blocks = nn.Sequential(*blocks)
        self.final_conv = EqualConv2d(c, c, 3, activate=True)
        self.pixel_dim = c * 16
        self.shared = EqualLinear(self.pixel_dim, c, activate=True)
        self.adv_head = EqualLinear(c, 1)
        self.latent_head = nn.Sequential(EqualLinear(c, c, activate=True), EqualLinear(c, w_dim))
        self.resolution = resolution

    def features(self, x):
        if x.shape[-1] != self.resolution or x.shape[-2] != self.resolution:
            raise ShapeError(f"expected {self.resolution}x{self.resolution} images, got {tuple(x.shape)}")
        return self.final_conv(self.blocks(self.from_rgb(x))).flatten(1)

    def forward(self, x):
        """Returns (adversarial logit, w_hat, pixel feature p)."""
        p = self.features(x)
        h = self.shared(p)
        return self.adv_head(h).squeeze(1), self.latent_head(h), p
