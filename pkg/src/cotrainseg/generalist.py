"""Toy promptable generalist with a SAM-style three-part interface.

An image encoder (patch embedding + transformer blocks carrying bottleneck
adapters), a prompt encoder (point / box / mask prompts, plus learnable
default box tokens), and one or two cross-attention mask decoders. The base
encoder can be frozen so only adapters, prompt encoder, and decoders train,
which is the parameter-efficient fine-tuning mode. A small learnable fusion
module maps two prediction maps to a mask prompt.

Scale is deliberately tiny: this reproduces the interface and training
dynamics of a promptable foundation model, not its pretrained weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class GeneralistConfig:
    in_channels: int = 1
    image_size: tuple[int, int] = (128, 128)
    patch_size: int = 16
    embed_dim: int = 128
    encoder_depth: int = 4
    num_heads: int = 8
    mlp_ratio: float = 4.0
    adapter_dim: int = 16
    freeze_encoder_base: bool = True
    pos_embed_trainable: bool = False
    num_decoders: int = 1
    decoder_depth: int = 2
    learnable_box_prompt: bool = True

    def validate(self) -> "GeneralistConfig":
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.adapter_dim >= self.embed_dim:
            raise ValueError("adapter_dim must be smaller than embed_dim")
        if self.num_decoders not in (1, 2):
            raise ValueError("num_decoders must be 1 or 2")
        if self.patch_size not in (4, 8, 16, 32):
            raise ValueError("patch_size must be one of 4, 8, 16, 32")
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 or 3")
        return self

    @property
    def grid_size(self) -> tuple[int, int]:
        return (self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size)

    @property
    def mask_prompt_size(self) -> tuple[int, int]:
        gh, gw = self.grid_size
        return (4 * gh, 4 * gw)


@dataclass
class PromptSet:
    """Sparse point / box prompts plus an optional low-resolution mask prompt.

    Point labels: 1 foreground, 0 background. An entirely empty PromptSet is
    the unprompted call; with ``learnable_box_prompt`` the model then falls
    back to its learned default box tokens.
    """

    points: list[tuple[int, int, int]] = field(default_factory=list)
    box: tuple[int, int, int, int] | None = None
    mask_prompt: torch.Tensor | np.ndarray | None = None

    def is_empty(self) -> bool:
        return not self.points and self.box is None and self.mask_prompt is None


class FourierPositionEncoding(nn.Module):
    """Random Fourier features of normalized 2D coordinates (non-trainable)."""

    def __init__(self, embed_dim: int, scale: float = 1.0):
        super().__init__()
        self.register_buffer("gauss", scale * torch.randn(2, embed_dim // 2))

    def encode(self, coords: torch.Tensor) -> torch.Tensor:
        # coords in [0, 1], shape (..., 2) as (y, x)
        proj = (2.0 * coords - 1.0) @ self.gauss * (2.0 * math.pi)
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)

    def grid(self, h: int, w: int) -> torch.Tensor:
        device = self.gauss.device
        yy = (torch.arange(h, device=device, dtype=torch.float32) + 0.5) / h
        xx = (torch.arange(w, device=device, dtype=torch.float32) + 0.5) / w
        coords = torch.stack(torch.meshgrid(yy, xx, indexing="ij"), dim=-1)
        return self.encode(coords).permute(2, 0, 1)  # (D, h, w)


class Adapter(nn.Module):
    """Bottleneck residual adapter: down-project, GELU, up-project, add."""

    def __init__(self, dim: int, adapter_dim: int):
        super().__init__()
        self.down = nn.Linear(dim, adapter_dim)
        self.act = nn.GELU()
        self.up = nn.Linear(adapter_dim, dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x):
        return x + self.up(self.act(self.down(x)))


class EncoderBlock(nn.Module):
    """Pre-norm transformer block with an adapter after each sublayer."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, adapter_dim: int):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.adapter_attn = Adapter(dim, adapter_dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.adapter_mlp = Adapter(dim, adapter_dim)

    def forward(self, x):
        y = self.norm1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        x = self.adapter_attn(x)
        x = x + self.mlp(self.norm2(x))
        x = self.adapter_mlp(x)
        return x


class ImageEncoder(nn.Module):
    def __init__(self, config: GeneralistConfig):
        super().__init__()
        gh, gw = config.grid_size
        self.patch_embed = nn.Conv2d(
            config.in_channels, config.embed_dim, config.patch_size, stride=config.patch_size
        )
        self.pos_embed = nn.Parameter(torch.zeros(1, config.embed_dim, gh, gw))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(config.embed_dim, config.num_heads, config.mlp_ratio, config.adapter_dim)
            for _ in range(config.encoder_depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        x = self.patch_embed(x) + self.pos_embed
        _, d, gh, gw = x.shape
        x = x.flatten(2).transpose(1, 2)  # (B, N, D)
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return x.transpose(1, 2).reshape(b, d, gh, gw)


class PromptEncoder(nn.Module):
    """Encodes prompt sets into sparse tokens plus an optional dense map.

    One token per point (position encoding + fg/bg label embedding); a box
    contributes two corner tokens. With ``learnable_box_prompt`` and no
    explicit box, two learned default box tokens are injected, so even an
    empty PromptSet yields a non-empty token sequence. A mask prompt is
    downsampled to the image-embedding grid and returned separately for
    additive injection.
    """

    def __init__(self, config: GeneralistConfig, pe: FourierPositionEncoding):
        super().__init__()
        self.config = config
        self.pe = pe
        d = config.embed_dim
        self.point_labels = nn.Embedding(2, d)  # 0 background, 1 foreground
        self.box_corners = nn.Embedding(2, d)
        self.default_box = nn.Parameter(torch.zeros(2, d))
        nn.init.trunc_normal_(self.default_box, std=0.02)
        self.mask_down = nn.Sequential(
            nn.Conv2d(1, d // 4, 2, stride=2),
            nn.GroupNorm(math.gcd(8, d // 4), d // 4),
            nn.GELU(),
            nn.Conv2d(d // 4, d, 2, stride=2),
        )

    def _point_token(self, y: float, x: float) -> torch.Tensor:
        h, w = self.config.image_size
        coords = torch.tensor(
            [(y + 0.5) / h, (x + 0.5) / w],
            dtype=self.default_box.dtype,
            device=self.default_box.device,
        )
        return self.pe.encode(coords)

    def forward(self, prompts: PromptSet) -> tuple[torch.Tensor, torch.Tensor | None]:
        h, w = self.config.image_size
        tokens = []
        for y, x, label in prompts.points:
            if not (0 <= y < h and 0 <= x < w):
                raise ValueError(f"point ({y}, {x}) outside image bounds {h}x{w}")
            if label not in (0, 1):
                raise ValueError(f"point label must be 0 or 1, got {label}")
            idx = torch.tensor(label, device=self.default_box.device)
            tokens.append(self._point_token(y, x) + self.point_labels(idx))
        if prompts.box is not None:
            y0, x0, y1, x1 = prompts.box
            if not (0 <= y0 <= y1 < h and 0 <= x0 <= x1 < w):
                raise ValueError(f"box {prompts.box} outside image bounds {h}x{w}")
            dev = self.default_box.device
            tokens.append(self._point_token(y0, x0) + self.box_corners(torch.tensor(0, device=dev)))
            tokens.append(self._point_token(y1, x1) + self.box_corners(torch.tensor(1, device=dev)))
        elif self.config.learnable_box_prompt:
            tokens.extend(self.default_box)
        sparse = (
            torch.stack(tokens)
            if tokens
            else torch.zeros(0, self.config.embed_dim, device=self.default_box.device)
        )

        dense = None
        if prompts.mask_prompt is not None:
            m = prompts.mask_prompt
            if isinstance(m, np.ndarray):
                m = torch.from_numpy(m.astype(np.float32))
            while m.dim() < 4:
                m = m.unsqueeze(0)
            expected = self.config.mask_prompt_size
            if tuple(m.shape[-2:]) != expected:
                raise ValueError(f"mask prompt must be {expected}, got {tuple(m.shape[-2:])}")
            dense = self.mask_down(m)  # (1, D, gh, gw)
        return sparse, dense


class TwoWayLayer(nn.Module):
    """Token self-attention, token->image and image->token cross-attention."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_t2i = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.cross_i2t = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens, src, src_pe):
        tokens = self.norm1(tokens + self.self_attn(tokens, tokens, tokens, need_weights=False)[0])
        tokens = self.norm2(
            tokens + self.cross_t2i(tokens, src + src_pe, src, need_weights=False)[0]
        )
        tokens = self.norm3(tokens + self.mlp(tokens))
        src = self.norm4(src + self.cross_i2t(src + src_pe, tokens, tokens, need_weights=False)[0])
        return tokens, src


class MaskDecoder(nn.Module):
    """Cross-attention decoder: two class mask tokens attend over the image
    embedding together with the prompt tokens; per-class logits come from the
    dot product of the output mask tokens with an upscaled embedding."""

    def __init__(self, config: GeneralistConfig, pe: FourierPositionEncoding):
        super().__init__()
        self.config = config
        self.pe = pe
        d = config.embed_dim
        self.mask_tokens = nn.Parameter(torch.zeros(2, d))
        nn.init.trunc_normal_(self.mask_tokens, std=0.02)
        self.layers = nn.ModuleList(
            TwoWayLayer(d, config.num_heads) for _ in range(config.decoder_depth)
        )
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(d, d // 4, 2, stride=2),
            nn.GroupNorm(math.gcd(8, d // 4), d // 4),
            nn.GELU(),
            nn.ConvTranspose2d(d // 4, d // 8, 2, stride=2),
            nn.GELU(),
        )
        self.token_proj = nn.Sequential(
            nn.Linear(d, d), nn.GELU(), nn.Linear(d, d // 8)
        )

    def forward(
        self,
        image_embedding: torch.Tensor,
        sparse_tokens: torch.Tensor,
        dense: torch.Tensor | None,
    ) -> torch.Tensor:
        if image_embedding.dim() == 3:
            image_embedding = image_embedding.unsqueeze(0)
        b, d, gh, gw = image_embedding.shape
        src = image_embedding
        if dense is not None:
            src = src + dense
        src = src.flatten(2).transpose(1, 2)  # (B, N, D)
        src_pe = self.pe.grid(gh, gw).flatten(1).transpose(0, 1).unsqueeze(0).expand(b, -1, -1)
        if sparse_tokens.dim() == 2:
            sparse_tokens = sparse_tokens.unsqueeze(0).expand(b, -1, -1)
        tokens = torch.cat([self.mask_tokens.unsqueeze(0).expand(b, -1, -1), sparse_tokens], dim=1)
        for layer in self.layers:
            tokens, src = layer(tokens, src, src_pe)
        up = self.upscale(src.transpose(1, 2).reshape(b, d, gh, gw))  # (B, D/8, 4gh, 4gw)
        hyper = self.token_proj(tokens[:, :2])  # (B, 2, D/8)
        logits = torch.einsum("bcd,bdhw->bchw", hyper, up)
        return F.interpolate(
            logits, size=self.config.image_size, mode="bilinear", align_corners=False
        )


class FusionModule(nn.Module):
    """Learnable fusion of two prediction maps into one mask prompt.

    Takes the two foreground probability maps, returns a single-channel map
    at the prompt encoder's expected mask-prompt resolution. Differentiable,
    so gradients reach both producing models.
    """

    def __init__(self, config: GeneralistConfig, width: int = 8):
        super().__init__()
        self.config = config
        n_down = int(math.log2(config.patch_size // 4))
        layers: list[nn.Module] = [
            nn.Conv2d(2, width, 3, padding=1),
            nn.GroupNorm(math.gcd(4, width), width),
            nn.GELU(),
        ]
        ch = width
        for _ in range(n_down):
            layers += [
                nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1),
                nn.GroupNorm(math.gcd(8, ch * 2), ch * 2),
                nn.GELU(),
            ]
            ch *= 2
        layers.append(nn.Conv2d(ch, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, p1: torch.Tensor, p2: torch.Tensor) -> torch.Tensor:
        if p1.shape != p2.shape:
            raise ValueError(f"prediction shapes differ: {tuple(p1.shape)} vs {tuple(p2.shape)}")
        squeeze = p1.dim() == 3
        if squeeze:
            p1, p2 = p1.unsqueeze(0), p2.unsqueeze(0)
        fg = torch.stack([p1.softmax(dim=1)[:, 1], p2.softmax(dim=1)[:, 1]], dim=1)
        out = self.net(fg)
        expected = self.config.mask_prompt_size
        if tuple(out.shape[-2:]) != expected:
            raise ValueError(
                f"fusion produced {tuple(out.shape[-2:])}, expected mask prompt size {expected};"
                " prediction maps must be at the configured image resolution"
            )
        return out.squeeze(0) if squeeze else out


def fuse_predictions(fusion: FusionModule, p1: torch.Tensor, p2: torch.Tensor) -> torch.Tensor:
    return fusion(p1, p2)


class Generalist(nn.Module):
    """Promptable segmenter: encode_image -> encode_prompts -> decode_mask.

    ``encode_calls`` counts images encoded, so the one-encode-per-image
    contract of two-phase strategies is checkable.
    """

    def __init__(self, config: GeneralistConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.pe = FourierPositionEncoding(config.embed_dim)
        self.encoder = ImageEncoder(config)
        self.prompt_encoder = PromptEncoder(config, self.pe)
        self.decoders = nn.ModuleList(
            MaskDecoder(config, self.pe) for _ in range(config.num_decoders)
        )
        self.encode_calls = 0
        self._apply_freezing()

    # -- parameter partition -------------------------------------------------

    def _is_base_encoder_param(self, name: str) -> bool:
        if not name.startswith("encoder."):
            return False
        if ".adapter_" in name:
            return False
        if name == "encoder.pos_embed":
            return not self.config.pos_embed_trainable
        return True

    def _apply_freezing(self) -> None:
        if not self.config.freeze_encoder_base:
            return
        for name, param in self.named_parameters():
            if self._is_base_encoder_param(name):
                param.requires_grad_(False)

    def base_encoder_parameters(self) -> dict[str, torch.Tensor]:
        return {
            n: p for n, p in self.named_parameters() if self._is_base_encoder_param(n)
        }

    def adapter_parameters(self) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.named_parameters() if ".adapter_" in n}

    def trainable_parameters(self) -> list[torch.Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    # -- model interface -----------------------------------------------------

    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        squeeze = image.dim() == 3
        if squeeze:
            image = image.unsqueeze(0)
        if image.shape[1] != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} channels, got {image.shape[1]}")
        if tuple(image.shape[-2:]) != self.config.image_size:
            raise ValueError(
                f"expected resolution {self.config.image_size}, got {tuple(image.shape[-2:])}"
            )
        self.encode_calls += int(image.shape[0])
        embedding = self.encoder(image)
        return embedding.squeeze(0) if squeeze else embedding

    def encode_prompts(self, prompts: PromptSet) -> tuple[torch.Tensor, torch.Tensor | None]:
        return self.prompt_encoder(prompts)

    def decode_mask(
        self,
        image_embedding: torch.Tensor,
        prompt_embedding: tuple[torch.Tensor, torch.Tensor | None],
        decoder_index: int = 1,
    ) -> torch.Tensor:
        if not 1 <= decoder_index <= len(self.decoders):
            raise ValueError(
                f"decoder_index {decoder_index} out of range (num_decoders={len(self.decoders)})"
            )
        squeeze = image_embedding.dim() == 3
        sparse, dense = prompt_embedding
        logits = self.decoders[decoder_index - 1](image_embedding, sparse, dense)
        return logits.squeeze(0) if squeeze else logits

    def predict(
        self,
        images: torch.Tensor,
        prompts: list[PromptSet],
        decoder_index: int = 1,
        image_embedding: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Full pipeline over a batch; one prompt set per image."""
        squeeze = images.dim() == 3
        if squeeze:
            images = images.unsqueeze(0)
        if len(prompts) != images.shape[0]:
            raise ValueError("need exactly one PromptSet per image")
        if image_embedding is None:
            image_embedding = self.encode_image(images)
        outs = [
            self.decode_mask(image_embedding[i : i + 1], self.encode_prompts(p), decoder_index)
            for i, p in enumerate(prompts)
        ]
        logits = torch.cat(outs, dim=0)
        return logits.squeeze(0) if squeeze else logits


def build_generalist(config: GeneralistConfig, seed: int) -> Generalist:
    """Build a generalist with deterministic per-seed initialization."""
    config.validate()
    state = torch.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = Generalist(config)
    finally:
        torch.set_rng_state(state)
    return model


def build_fusion(config: GeneralistConfig, seed: int) -> FusionModule:
    config.validate()
    state = torch.get_rng_state()
    torch.manual_seed(seed)
    try:
        module = FusionModule(config)
    finally:
        torch.set_rng_state(state)
    return module
