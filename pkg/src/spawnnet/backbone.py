"""Frozen vision transformer with access to multi-head self-attention internals.

The transformer uses the parameter naming of the public DINO checkpoints, so a
``dino_deitsmall8_pretrain.pth`` state dict loads directly.  Without a
checkpoint the weights are drawn from a seeded random init, which is what the
test suite and the offline desk benchmark use.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
DESCRIPTOR_KINDS = ("key", "query", "value", "token")


@dataclass(frozen=True)
class BackboneSpec:
    model_id: str = "random"
    patch_size: int = 8
    stride: int = 8
    embed_dim: int = 384
    num_layers: int = 12
    num_heads: int = 6
    mlp_ratio: float = 4.0
    extraction_layers: tuple[int, ...] = (6, 9, 12)
    descriptor: str = "key"
    pos_grid: int = 28  # positional-embedding grid the weights were trained with
    init_seed: int = 0
    frozen: bool = True

    def __post_init__(self):
        object.__setattr__(self, "extraction_layers", tuple(int(l) for l in self.extraction_layers))
        if not self.frozen:
            raise ConfigError("the pretrained backbone must stay frozen")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if self.stride < 1 or self.patch_size < 1 or self.stride > self.patch_size:
            raise ConfigError(f"need 1 <= stride <= patch_size, got {self.stride}/{self.patch_size}")
        layers = self.extraction_layers
        if any(l < 1 or l > self.num_layers for l in layers):
            raise ConfigError(f"extraction layers {layers} outside [1, {self.num_layers}]")
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ConfigError(f"extraction layers must be strictly increasing: {layers}")
        if self.descriptor not in DESCRIPTOR_KINDS:
            raise ConfigError(f"unknown descriptor kind {self.descriptor!r}")

    def grid_size(self, image_h: int, image_w: int) -> tuple[int, int]:
        if image_h < self.patch_size or image_w < self.patch_size:
            raise DimensionError(
                f"image {image_h}x{image_w} is smaller than one patch; "
                f"need at least {self.patch_size}x{self.patch_size} pixels"
            )
        return ((image_h - self.patch_size) // self.stride + 1,
                (image_w - self.patch_size) // self.stride + 1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["extraction_layers"] = list(self.extraction_layers)
        return d


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (B, N+1, C), CLS first
    grid_h: int
    grid_w: int
    layer_index: int = 0

    def __post_init__(self):
        if self.tokens.shape[-2] != self.grid_h * self.grid_w + 1:
            raise DimensionError(
                f"{self.tokens.shape[-2]} tokens for a {self.grid_h}x{self.grid_w} grid"
            )


@dataclass
class AttentionInternals:
    q: torch.Tensor  # (B, heads, N+1, d)
    k: torch.Tensor
    v: torch.Tensor
    x: torch.Tensor  # normalized block input the projections were computed from
    attn: torch.Tensor  # (B, heads, N+1, N+1) softmax weights
    out: torch.Tensor  # block output tokens

    @property
    def d(self) -> int:
        return self.q.shape[-1]


@dataclass
class DenseFeatureGrid:
    data: torch.Tensor  # (..., H, W, C)
    layer_index: int
    descriptor_kind: str = "key"
    source_image_id: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, keep=False):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        out = self.proj((attn @ v).transpose(1, 2).reshape(B, N, C))
        if keep:
            return out, (q, k, v, attn)
        return out, None


class Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x, keep=False):
        h = self.norm1(x)
        a, parts = self.attn(h, keep)
        x = x + a
        x = x + self.mlp(self.norm2(x))
        if keep:
            return x, (h, *parts)
        return x, None


class PatchEmbed(nn.Module):
    def __init__(self, patch_size, stride, dim):
        super().__init__()
        self.proj = nn.Conv2d(3, dim, kernel_size=patch_size, stride=stride)

    def forward(self, x):
        return self.proj(x)


class VisionTransformer(nn.Module):
    """Plain pre-norm ViT; parameter names follow the DINO release."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        dim = spec.embed_dim
        self.patch_embed = PatchEmbed(spec.patch_size, spec.stride, dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, spec.pos_grid ** 2 + 1, dim))
        self.blocks = nn.ModuleList(Block(dim, spec.num_heads, spec.mlp_ratio) for _ in range(spec.num_layers))
        self.norm = nn.LayerNorm(dim, eps=1e-6)

    def reset_parameters(self, seed: int):
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if "norm" in name:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    p.zero_()
                elif name.startswith("patch_embed"):
                    fan_in = p[0].numel()
                    p.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=g)
                else:
                    p.normal_(0.0, 0.02, generator=g).clamp_(-0.04, 0.04)

    def pos_encoding(self, grid_h, grid_w):
        base = self.pos_embed.shape[1] - 1
        if grid_h * grid_w == base and grid_h == grid_w:
            return self.pos_embed
        side = int(math.isqrt(base))
        cls_pos, patch_pos = self.pos_embed[:, :1], self.pos_embed[:, 1:]
        dim = patch_pos.shape[-1]
        patch_pos = patch_pos.reshape(1, side, side, dim).permute(0, 3, 1, 2)
        patch_pos = F.interpolate(patch_pos, size=(grid_h, grid_w), mode="bicubic", align_corners=False)
        patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, grid_h * grid_w, dim)
        return torch.cat([cls_pos, patch_pos], dim=1)


def _as_image_batch(images) -> torch.Tensor:
    """Channel-last uint8 or [0, 1] float images -> float tensor (B, 3, H, W)."""
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[-1] < 3:
        raise DimensionError(f"expected (B, H, W, >=3) images, got {tuple(x.shape)}")
    x = x[..., :3]
    x = x.float() / 255.0 if x.dtype == torch.uint8 else x.float()
    return x.permute(0, 3, 1, 2).contiguous()


class PretrainedBackbone:
    """Frozen ViT plus the dense-descriptor extraction built on top of it."""

    def __init__(self, spec: BackboneSpec | None = None, model: VisionTransformer | None = None):
        self.spec = spec or BackboneSpec()
        self.model = model if model is not None else VisionTransformer(self.spec)
        if model is None:
            self._load_weights()
        self.model.eval()
        self.model.requires_grad_(False)
        self._mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
        self._std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
        self._weights_digest = self.checksum()

    def _load_weights(self):
        model_id = self.spec.model_id
        if model_id == "random":
            self.model.reset_parameters(self.spec.init_seed)
            return
        if model_id.startswith("hub:"):
            from huggingface_hub import hf_hub_download

            repo, _, filename = model_id[4:].rpartition("/")
            path = Path(hf_hub_download(repo, filename))
        else:
            path = Path(model_id)
        if not path.exists():
            raise ConfigError(f"backbone weights not found: {path}")
        if path.suffix == ".safetensors":
            from safetensors.torch import load_file

            state = load_file(str(path))
        else:
            state = torch.load(path, map_location="cpu", weights_only=True)
            state = state.get("teacher", state.get("state_dict", state)) if isinstance(state, dict) else state
        state = {k.removeprefix("module.").removeprefix("backbone."): v for k, v in state.items()}
        missing, unexpected = self.model.load_state_dict(state, strict=False)
        if missing:
            raise ConfigError(f"checkpoint {path} is missing {len(missing)} tensors, e.g. {missing[:3]}")

    # -- identity ---------------------------------------------------------
    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.model.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    @property
    def spec_hash(self) -> str:
        payload = json.dumps({"spec": self.spec.to_dict(), "weights": self._weights_digest}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def parameters(self):
        return self.model.parameters()

    # -- forward pieces ---------------------------------------------------
    def preprocess(self, images) -> torch.Tensor:
        x = _as_image_batch(images)
        return (x - self._mean) / self._std

    @torch.no_grad()
    def patchify(self, x: torch.Tensor) -> TokenSequence:
        """Normalized (B, 3, H, W) batch -> layer-0 tokens with CLS prepended."""
        if x.ndim == 3:
            x = x.unsqueeze(0)
        gh, gw = self.spec.grid_size(x.shape[-2], x.shape[-1])
        patches = self.model.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.model.cls_token.expand(x.shape[0], -1, -1)
        tokens = torch.cat([cls, patches], dim=1) + self.model.pos_encoding(gh, gw)
        return TokenSequence(tokens, gh, gw, 0)

    def _check_layers(self, layers: Sequence[int]):
        for l in layers:
            if not 1 <= l <= self.spec.num_layers:
                raise ConfigError(f"layer {l} outside [1, {self.spec.num_layers}]")

    @torch.no_grad()
    def forward_with_internals(self, tokens: TokenSequence, layers: Sequence[int]) -> dict[int, AttentionInternals]:
        """Run the blocks once, keeping q/k/v/attention for the requested 1-based layers."""
        layers = sorted(set(int(l) for l in layers))
        self._check_layers(layers)
        wanted = set(layers)
        x = tokens.tokens
        out = {}
        for i, blk in enumerate(self.model.blocks[: max(layers)], start=1):
            x, parts = blk(x, keep=i in wanted)
            if parts is not None:
                h, q, k, v, attn = parts
                out[i] = AttentionInternals(q=q, k=k, v=v, x=h, attn=attn, out=x)
        return out

    @staticmethod
    def _descriptor(internals: AttentionInternals, kind: str) -> torch.Tensor:
        if kind == "token":
            return internals.out
        t = {"key": internals.k, "query": internals.q, "value": internals.v}[kind]
        B, heads, N, d = t.shape
        return t.transpose(1, 2).reshape(B, N, heads * d)  # head-major concat

    @torch.no_grad()
    def extract(self, images, layers: Sequence[int] | None = None, with_cls: bool = True):
        """One pass returning ({layer: (B, H, W, C)}, cls (B, C) or None)."""
        layers = tuple(layers or self.spec.extraction_layers)
        self._check_layers(layers)
        tokens = self.patchify(self.preprocess(images))
        run_to = self.spec.num_layers if with_cls else max(layers)
        internals = self.forward_with_internals(tokens, sorted(set(layers) | {run_to}))
        grids = {}
        for l in layers:
            desc = self._descriptor(internals[l], self.spec.descriptor)[:, 1:]
            grids[l] = desc.reshape(desc.shape[0], tokens.grid_h, tokens.grid_w, desc.shape[-1])
        cls = None
        if with_cls:
            cls = self.model.norm(internals[self.spec.num_layers].out)[:, 0]
        return grids, cls

    def extract_dense(self, images, layers: Sequence[int] | None = None) -> dict[int, DenseFeatureGrid]:
        if not (layers or self.spec.extraction_layers):
            raise ConfigError("no extraction layers configured")
        grids, _ = self.extract(images, layers, with_cls=False)
        return {l: DenseFeatureGrid(g, l, self.spec.descriptor) for l, g in grids.items()}

    @torch.no_grad()
    def extract_cls(self, images) -> torch.Tensor:
        tokens = self.patchify(self.preprocess(images))
        x = tokens.tokens
        for blk in self.model.blocks:
            x, _ = blk(x)
        return self.model.norm(x)[:, 0]


def build_backbone(spec: BackboneSpec | dict | None = None) -> PretrainedBackbone:
    if isinstance(spec, dict):
        spec = BackboneSpec(**spec)
    return PretrainedBackbone(spec)
