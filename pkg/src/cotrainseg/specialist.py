"""Specialist segmentation network: a compact U-Net trained from scratch.

Produces per-pixel 2-class logits at the input resolution. Normalization is
GroupNorm so small desk-scale batches stay stable. A registry keyed by name
leaves room for alternative backbones; only "unet" ships.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class SpecialistConfig:
    in_channels: int = 1
    base_width: int = 16
    depth: int = 4
    num_classes: int = 2
    backbone: str = "unet"

    def validate(self) -> "SpecialistConfig":
        if self.depth < 2:
            raise ValueError("specialist depth must be >= 2")
        if self.base_width < 4:
            raise ValueError("specialist base_width must be >= 4")
        if self.num_classes != 2:
            raise ValueError("specialist is binary: num_classes is fixed at 2")
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 or 3")
        if self.backbone not in SPECIALIST_BACKBONES:
            raise ValueError(
                f"unknown backbone {self.backbone!r}; registered: {sorted(SPECIALIST_BACKBONES)}"
            )
        return self


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            _norm(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            _norm(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class UNet(nn.Module):
    """Encoder-decoder with skip connections and a 2-class 1x1 head.

    Inputs whose spatial dims are not divisible by 2**depth are padded before
    the encoder and the output is cropped back, so output spatial size always
    equals input spatial size.
    """

    def __init__(self, config: SpecialistConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = [config.base_width * 2**i for i in range(config.depth + 1)]
        self.enc_blocks = nn.ModuleList()
        in_ch = config.in_channels
        for w in widths[:-1]:
            self.enc_blocks.append(ConvBlock(in_ch, w))
            in_ch = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = ConvBlock(widths[-2], widths[-1])
        self.up_convs = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.up_convs.append(nn.ConvTranspose2d(w * 2, w, 2, stride=2))
            self.dec_blocks.append(ConvBlock(w * 2, w))
        self.head = nn.Conv2d(widths[0], config.num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected {self.config.in_channels} input channels, got {x.shape[1]}"
            )
        h, w = x.shape[-2:]
        factor = 2**self.config.depth
        pad_h = (-h) % factor
        pad_w = (-w) % factor
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
        skips = []
        for block in self.enc_blocks:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, block, skip in zip(self.up_convs, self.dec_blocks, reversed(skips)):
            x = up(x)
            x = block(torch.cat([x, skip], dim=1))
        logits = self.head(x)
        if pad_h or pad_w:
            logits = logits[..., :h, :w]
        return logits.squeeze(0) if squeeze else logits


SPECIALIST_BACKBONES: dict[str, type[nn.Module]] = {"unet": UNet}


def register_specialist(name: str, cls: type[nn.Module]) -> None:
    SPECIALIST_BACKBONES[name] = cls


def build_specialist(config: SpecialistConfig, seed: int) -> nn.Module:
    """Build a specialist with deterministic per-seed initialization."""
    config.validate()
    generator_state = torch.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = SPECIALIST_BACKBONES[config.backbone](config)
    finally:
        torch.set_rng_state(generator_state)
    return model


def parameter_count(model: nn.Module, trainable_only: bool = False) -> int:
    return sum(
        p.numel() for p in model.parameters() if p.requires_grad or not trainable_only
    )


def specialist_forward(model: nn.Module, image: torch.Tensor) -> torch.Tensor:
    """Per-pixel 2-class logits for one image (C, H, W) -> (2, H, W)."""
    return model(image)
