"""3D network building blocks: translation generator with a dynamic
instance-norm decoder, segmentation decoders, patch discriminator, U-Net.

The generator follows the resnet encoder/decoder family: the encoder is the
shared front half (its intermediate features also feed the contrastive
criterion and the segmentation decoder), the synthesis decoder carries the
style-controlled normalization just before the output convolution.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def init_weights(net, gain: float = 0.02):
    """Gaussian init for conv layers, the usual choice for this family."""
    def fn(m):
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.constant_(m.bias, 0.0)
    net.apply(fn)
    return net


class SiteController(nn.Module):
    """Maps a site code to per-channel (gamma, beta) through a 1x1x1 conv.

    The map is affine in the code, so convex combinations of codes give the
    same combination of style parameters. The bias initializes gamma at 1
    and beta at 0 (plain instance norm for a zero code).
    """

    def __init__(self, n_sites: int, n_channels: int):
        super().__init__()
        self.n_sites = n_sites
        self.n_channels = n_channels
        self.conv = nn.Conv3d(n_sites, 2 * n_channels, kernel_size=1)
        nn.init.normal_(self.conv.weight, 0.0, 0.02)
        with torch.no_grad():
            self.conv.bias[:n_channels] = 1.0
            self.conv.bias[n_channels:] = 0.0

    def forward(self, code):
        if code.dim() == 1:
            code = code.unsqueeze(0)
        if code.shape[-1] != self.n_sites:
            raise ValueError(
                f"site code length {code.shape[-1]} != {self.n_sites}")
        out = self.conv(code.reshape(-1, self.n_sites, 1, 1, 1))
        out = out.reshape(code.shape[0], 2 * self.n_channels)
        gamma, beta = out[:, :self.n_channels], out[:, self.n_channels:]
        return gamma, beta


def dynamic_instance_norm(x, gamma, beta, eps: float = 1e-5):
    """Per-instance, per-channel standardization followed by a style affine.

    x: (B, C, X, Y, Z); gamma/beta: (B, C) or (C,).
    """
    if x.shape[1] != gamma.shape[-1]:
        raise ValueError(f"channel mismatch: {x.shape[1]} vs {gamma.shape[-1]}")
    mean = x.mean(dim=(2, 3, 4), keepdim=True)
    var = x.var(dim=(2, 3, 4), unbiased=False, keepdim=True)
    xhat = (x - mean) / torch.sqrt(var + eps)
    gamma = gamma.reshape(-1, x.shape[1], 1, 1, 1)
    beta = beta.reshape(-1, x.shape[1], 1, 1, 1)
    return gamma * xhat + beta


class ResnetBlock3d(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv3d(channels, channels, 3, padding=1),
            nn.InstanceNorm3d(channels),
            nn.ReLU(inplace=True),
            nn.Conv3d(channels, channels, 3, padding=1),
            nn.InstanceNorm3d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


def raw_patch_features(x, radius: int = 1):
    """Local neighborhoods of a volume as channels: (B, C*k^3, X, Y, Z).

    The layer-0 feature of the contrastive criterion. Unlike the
    post-normalization encoder taps these stay sensitive to the global
    intensity mapping, and with no learned projection on top their
    normalized directions pin local contrast polarity.
    """
    k = 2 * radius + 1
    b, c = x.shape[0], x.shape[1]
    padded = F.pad(x, (radius,) * 6, mode="replicate")
    views = []
    for dx in range(k):
        for dy in range(k):
            for dz in range(k):
                views.append(padded[:, :,
                                    dx:dx + x.shape[2],
                                    dy:dy + x.shape[3],
                                    dz:dz + x.shape[4]])
    return torch.cat(views, dim=1)


class TranslationEncoder(nn.Module):
    """Front half of the generator; exposes features at three depths.

    The first tap holds raw local patches of the input (the usual layer-0
    choice of the contrastive translation family); the deeper taps are
    encoder features.
    """

    def __init__(self, in_channels: int = 1, base: int = 16, n_front_blocks: int = 2):
        super().__init__()
        self.inc = nn.Sequential(
            nn.Conv3d(in_channels, base, 7, padding=3),
            nn.InstanceNorm3d(base),
            nn.ReLU(inplace=True))
        self.down1 = nn.Sequential(
            nn.Conv3d(base, base * 2, 3, stride=2, padding=1),
            nn.InstanceNorm3d(base * 2),
            nn.ReLU(inplace=True))
        self.down2 = nn.Sequential(
            nn.Conv3d(base * 2, base * 4, 3, stride=2, padding=1),
            nn.InstanceNorm3d(base * 4),
            nn.ReLU(inplace=True))
        self.blocks = nn.Sequential(
            *[ResnetBlock3d(base * 4) for _ in range(n_front_blocks)])
        self.tap_channels = (27 * in_channels, base * 2, base * 4)

    def forward(self, x, return_taps: bool = False):
        t1 = self.down1(self.inc(x))
        t2 = self.blocks(self.down2(t1))
        if return_taps:
            return t2, [raw_patch_features(x), t1, t2]
        return t2


class SynthesisDecoder(nn.Module):
    """Back half with the dynamic instance norm as its last normalization."""

    def __init__(self, base: int = 16, n_back_blocks: int = 2):
        super().__init__()
        self.blocks = nn.Sequential(
            *[ResnetBlock3d(base * 4) for _ in range(n_back_blocks)])
        self.up1 = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv3d(base * 4, base * 2, 3, padding=1),
            nn.InstanceNorm3d(base * 2),
            nn.ReLU(inplace=True))
        self.up2 = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv3d(base * 2, base, 3, padding=1))
        self.out = nn.Conv3d(base, 1, 7, padding=3)
        self.style_channels = base

    def forward(self, feat, gamma, beta):
        h = self.up2(self.up1(self.blocks(feat)))
        h = F.relu(dynamic_instance_norm(h, gamma, beta))
        return torch.tanh(self.out(h))


class SegDecoder(nn.Module):
    """Mirror decoder emitting class logits from shared encoder features."""

    def __init__(self, base: int = 16, n_back_blocks: int = 2, n_classes: int = 4):
        super().__init__()
        self.blocks = nn.Sequential(
            *[ResnetBlock3d(base * 4) for _ in range(n_back_blocks)])
        self.up1 = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv3d(base * 4, base * 2, 3, padding=1),
            nn.InstanceNorm3d(base * 2),
            nn.ReLU(inplace=True))
        self.up2 = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv3d(base * 2, base, 3, padding=1),
            nn.InstanceNorm3d(base),
            nn.ReLU(inplace=True))
        self.out = nn.Conv3d(base, n_classes, 3, padding=1)

    def forward(self, feat):
        return self.out(self.up2(self.up1(self.blocks(feat))))


class PatchDiscriminator3d(nn.Module):
    """Small least-squares patch discriminator."""

    def __init__(self, in_channels: int = 1, base: int = 16, n_layers: int = 2):
        super().__init__()
        layers = [nn.Conv3d(in_channels, base, 4, stride=2, padding=1),
                  nn.LeakyReLU(0.2, inplace=True)]
        ch = base
        for _ in range(n_layers - 1):
            layers += [nn.Conv3d(ch, ch * 2, 4, stride=2, padding=1),
                       nn.InstanceNorm3d(ch * 2),
                       nn.LeakyReLU(0.2, inplace=True)]
            ch *= 2
        layers += [nn.Conv3d(ch, 1, 4, padding=1)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class ProjectionHead(nn.Module):
    """Two-layer MLP projecting sampled features for the contrastive loss."""

    def __init__(self, in_dim: int, proj_dim: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, proj_dim), nn.ReLU(inplace=True),
            nn.Linear(proj_dim, proj_dim))

    def forward(self, x):
        return self.net(x)


# ---------------------------------------------------------------------------
# segmentation backbones
# ---------------------------------------------------------------------------

class _ConvBlock(nn.Module):
    def __init__(self, cin, cout, residual=False):
        super().__init__()
        self.residual = residual
        self.conv = nn.Sequential(
            nn.Conv3d(cin, cout, 3, padding=1),
            nn.InstanceNorm3d(cout),
            nn.LeakyReLU(0.01, inplace=True),
            nn.Conv3d(cout, cout, 3, padding=1),
            nn.InstanceNorm3d(cout),
            nn.LeakyReLU(0.01, inplace=True))
        if residual:
            self.skip = (nn.Identity() if cin == cout
                         else nn.Conv3d(cin, cout, 1))

    def forward(self, x):
        out = self.conv(x)
        if self.residual:
            out = out + self.skip(x)
        return out


class UNet3d(nn.Module):
    """Plain 3D U-Net; residual=True turns encoder blocks into res-blocks."""

    def __init__(self, in_channels: int = 1, n_classes: int = 4,
                 channels=(8, 16, 32), residual: bool = False):
        super().__init__()
        self.depth = len(channels)
        self.encoders = nn.ModuleList()
        cin = in_channels
        for c in channels:
            self.encoders.append(_ConvBlock(cin, c, residual))
            cin = c
        self.pool = nn.MaxPool3d(2)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.decoders = nn.ModuleList()
        for lo, hi in zip(channels[:-1][::-1], channels[1:][::-1]):
            self.decoders.append(_ConvBlock(hi + lo, lo, residual))
        self.out = nn.Conv3d(channels[0], n_classes, 1)

    def forward(self, x):
        skips = []
        for i, enc in enumerate(self.encoders):
            if i > 0:
                x = self.pool(x)
            x = enc(x)
            skips.append(x)
        x = skips[-1]
        for dec, skip in zip(self.decoders, skips[:-1][::-1]):
            x = dec(torch.cat([self.up(x), skip], dim=1))
        return self.out(x)


def build_unet(arch: str, channels=(8, 16, 32), n_classes: int = 4) -> UNet3d:
    if arch == "unet":
        return UNet3d(channels=channels, n_classes=n_classes, residual=False)
    if arch == "res-unet":
        return UNet3d(channels=channels, n_classes=n_classes, residual=True)
    raise ValueError(f"unknown architecture {arch!r}")
