"""Trainable image encoders: the two-stream SpawnNet encoder and its baselines.

All encoders process every (view, frame) image independently with shared
weights and return the per-image embeddings concatenated view-major, then
frame-major.  Pretrained features are passed in as a dict mapping the 1-based
backbone layer to a ``(B, n_img, C, H, W)`` tensor, plus ``"cls"`` ->
``(B, n_img, C)`` where a variant needs the CLS token.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneSpec, DenseFeatureGrid
from .errors import ConfigError, DimensionError, InputError

VARIANTS = ("spawnnet", "spawnnet_depth", "lfs", "lfs_depth", "frozen_cls")
ABLATIONS = ("none", "zero_pretrained", "last_layer_only", "cls_tiled")


@dataclass
class AdapterSpec:
    source_layer: int
    projection_width: int = 64
    target_height: int = 28
    target_width: int = 28
    insertion_point: int = 1  # 1-based control-stream block after which fusion happens

    def __post_init__(self):
        if self.projection_width <= 0:
            raise ConfigError(f"adapter projection width must be positive, got {self.projection_width}")


@dataclass
class EncoderConfig:
    variant: str = "spawnnet"
    adapters: list[AdapterSpec] = field(default_factory=list)
    input_channels: int = 3
    ablation: str = "none"
    image_size: tuple[int, int] = (224, 224)
    grid_size: tuple[int, int] = (28, 28)  # backbone patch grid
    feature_dim: int = 384  # backbone channels C
    control_width: int = 64
    lfs_width: int = 128
    lfs_blocks: int = 3

    def __post_init__(self):
        self.adapters = [a if isinstance(a, AdapterSpec) else AdapterSpec(**a) for a in self.adapters]
        if isinstance(self.image_size, int):
            self.image_size = (self.image_size, self.image_size)
        self.image_size = tuple(self.image_size)
        self.grid_size = tuple(self.grid_size)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown encoder variant {self.variant!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}")
        spawn = self.variant.startswith("spawnnet")
        if spawn and not self.adapters:
            raise ConfigError("spawnnet variants need at least one adapter")
        if not spawn and self.adapters:
            raise ConfigError(f"{self.variant} takes no adapters")
        if not spawn and self.ablation != "none":
            raise ConfigError(f"ablation {self.ablation!r} only applies to spawnnet variants")
        if spawn:
            schedule = control_schedule(self.image_size, len(self.adapters))
            for i, a in enumerate(self.adapters, start=1):
                if a.insertion_point != i:
                    raise ConfigError(f"adapter {i} must be inserted after control block {i}")
                if (a.target_height, a.target_width) != schedule[i - 1]:
                    raise ConfigError(
                        f"adapter for layer {a.source_layer} targets {a.target_height}x{a.target_width} "
                        f"but control block {i} produces {schedule[i - 1]}"
                    )

    @property
    def uses_depth(self) -> bool:
        return self.variant.endswith("_depth")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _pool(n: int) -> int:
    return (n - 1) // 2 + 1  # maxpool k=3, s=2, p=1


def control_schedule(image_size, n_blocks: int) -> list[tuple[int, int]]:
    """Spatial size after each control-stream block (stride-4 stem, then halving)."""
    h, w = (image_size, image_size) if isinstance(image_size, int) else image_size
    if h < 4 or w < 4:
        raise DimensionError(f"image {h}x{w} too small for the stride-4 stem")
    h, w = _pool((h - 4) // 4 + 1), _pool((w - 4) // 4 + 1)
    out = [(h, w)]
    for _ in range(n_blocks - 1):
        h, w = _pool(h), _pool(w)
        out.append((h, w))
    return out


def make_encoder_config(
    variant: str,
    backbone: BackboneSpec,
    image_size=224,
    ablation: str = "none",
    projection_width: int = 64,
    control_width: int = 64,
    lfs_width: int = 128,
) -> EncoderConfig:
    """Default config: one adapter per extraction layer, shallow-to-deep."""
    hw = (image_size, image_size) if isinstance(image_size, int) else tuple(image_size)
    adapters = []
    if variant.startswith("spawnnet"):
        schedule = control_schedule(hw, len(backbone.extraction_layers))
        adapters = [
            AdapterSpec(layer, projection_width, th, tw, i)
            for i, (layer, (th, tw)) in enumerate(zip(backbone.extraction_layers, schedule), start=1)
        ]
    return EncoderConfig(
        variant=variant,
        adapters=adapters,
        input_channels=4 if variant.endswith("_depth") else 3,
        ablation=ablation,
        image_size=hw,
        grid_size=backbone.grid_size(*hw),
        feature_dim=backbone.embed_dim,
        control_width=control_width,
        lfs_width=lfs_width,
    )


class ResidualBlock(nn.Module):
    """Pre-activation 3x3 residual block with identity skip."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(F.relu(x))))


def bilinear_resize(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class Adapter(nn.Module):
    """1x1 projection of a pretrained grid, bilinear resize, concat, two residual blocks."""

    def __init__(self, spec: AdapterSpec, feature_dim: int, learned_channels: int):
        super().__init__()
        self.spec = spec
        self.learned_channels = learned_channels
        self.proj = nn.Conv2d(feature_dim, spec.projection_width, kernel_size=1, stride=1)
        width = learned_channels + spec.projection_width
        self.res1 = ResidualBlock(width)
        self.res2 = ResidualBlock(width)

    @property
    def out_channels(self) -> int:
        return self.learned_channels + self.spec.projection_width

    def project(self, grid: torch.Tensor) -> torch.Tensor:
        """Pretrained branch before concatenation: (B, C, H, W) -> (B, D, H_l, W_l)."""
        p = F.relu(self.proj(grid))
        return bilinear_resize(p, (self.spec.target_height, self.spec.target_width))

    def forward(self, grid: torch.Tensor, learned: torch.Tensor) -> torch.Tensor:
        target = (self.spec.target_height, self.spec.target_width)
        if tuple(learned.shape[-2:]) != target or learned.shape[1] != self.learned_channels:
            raise ConfigError(
                f"adapter for layer {self.spec.source_layer} expects a {self.learned_channels}x{target} "
                f"learned map, got {tuple(learned.shape[1:])}"
            )
        x = torch.cat([learned, self.project(grid)], dim=1)
        return self.res2(self.res1(x))


def _grid_tensor(grid) -> torch.Tensor:
    """DenseFeatureGrid / channel-last array -> (B, C, H, W)."""
    data = grid.data if isinstance(grid, DenseFeatureGrid) else torch.as_tensor(grid)
    if data.ndim == 3:
        data = data.unsqueeze(0)
    return data.permute(0, 3, 1, 2).float()


def adapter_forward(grid, learned, adapter: Adapter) -> torch.Tensor:
    """Functional form on channel-last inputs: grid (H, W, C), learned (H_l, W_l, ch)."""
    learned = torch.as_tensor(learned)
    squeeze = learned.ndim == 3
    if squeeze:
        learned = learned.unsqueeze(0)
    out = adapter(_grid_tensor(grid), learned.permute(0, 3, 1, 2).float())
    out = out.permute(0, 2, 3, 1)
    return out[0] if squeeze else out


def adapter_norm_map(grid, adapter: Adapter, resize: bool = True) -> torch.Tensor:
    """Per-position L2 norm of the adapter's projected (post-ReLU) pretrained features.

    Returns (B, H_l, W_l), or (B, H, W) at the backbone grid when ``resize`` is off.
    """
    x = grid if torch.is_tensor(grid) and grid.ndim == 4 and grid.shape[1] == adapter.proj.in_channels \
        else _grid_tensor(grid)
    with torch.no_grad():
        p = adapter.project(x) if resize else F.relu(adapter.proj(x))
        return p.norm(dim=1)


class Encoder(nn.Module):
    """Shared bookkeeping: per-image encoding, concatenated across images."""

    config: EncoderConfig

    def required_layers(self) -> tuple[int, ...]:
        return ()

    def needs_cls(self) -> bool:
        return False

    @property
    def image_dim(self) -> int:
        raise NotImplementedError

    def encode_images(self, images, features):
        raise NotImplementedError

    def forward(self, images: torch.Tensor | None, features: Mapping | None = None) -> torch.Tensor:
        """images: (B, n_img, ch, H, W) float; returns (B, n_img * image_dim)."""
        features = features or {}
        if images is not None:
            B, n = images.shape[:2]
        else:
            B, n = features["cls"].shape[:2]
        emb = self.encode_images(images, features)
        return emb.reshape(B, n * self.image_dim)


class SpawnNetEncoder(Encoder):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        cw = config.control_width
        self.stem = nn.Sequential(
            nn.Conv2d(config.input_channels, cw, kernel_size=4, stride=4),
            nn.ReLU(),
            nn.Conv2d(cw, cw, 3, padding=1),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.blocks = nn.ModuleList()
        self.adapters = nn.ModuleList()
        ch = cw
        for i, spec in enumerate(config.adapters):
            if i > 0:
                self.blocks.append(nn.Sequential(nn.Conv2d(ch, cw, 3, padding=1), nn.MaxPool2d(3, 2, 1)))
            adapter = Adapter(spec, config.feature_dim, cw)
            self.adapters.append(adapter)
            ch = adapter.out_channels
        self.out_channels = ch
        h, w = config.adapters[-1].target_height, config.adapters[-1].target_width
        self._image_dim = ch * h * w

    @property
    def image_dim(self) -> int:
        return self._image_dim

    def required_layers(self):
        ab, layers = self.config.ablation, tuple(a.source_layer for a in self.config.adapters)
        if ab in ("zero_pretrained", "cls_tiled"):
            return ()
        if ab == "last_layer_only":
            return layers[-1:]
        return layers

    def needs_cls(self):
        return self.config.ablation == "cls_tiled"

    def _pretrained_inputs(self, features, n: int) -> list[torch.Tensor]:
        cfg = self.config
        C, (gh, gw) = cfg.feature_dim, cfg.grid_size
        dtype = self.adapters[0].proj.weight.dtype
        layers = [a.source_layer for a in cfg.adapters]
        if cfg.ablation == "cls_tiled":
            if "cls" not in features:
                raise InputError("cls_tiled ablation needs the CLS token in the features")
            cls = features["cls"].reshape(n, C, 1, 1).to(dtype)
            return [cls.expand(n, C, gh, gw)] * len(layers)
        grids = []
        for i, l in enumerate(layers):
            use = cfg.ablation == "none" or (cfg.ablation == "last_layer_only" and i == len(layers) - 1)
            if not use:
                grids.append(None)
                continue
            if l not in features:
                raise InputError(f"missing pretrained grid for layer {l}")
            g = features[l]
            grids.append(g.reshape(n, *g.shape[-3:]).to(dtype))
        zero = torch.zeros(n, C, gh, gw, dtype=dtype)
        return [zero if g is None else g for g in grids]

    def encode_images(self, images, features):
        x = images.reshape(-1, *images.shape[-3:])
        grids = self._pretrained_inputs(features, x.shape[0])
        x = self.stem(x)
        for i, adapter in enumerate(self.adapters):
            if i > 0:
                x = self.blocks[i - 1](x)
            x = adapter(grids[i], x)
        return F.relu(x).flatten(1)

    def stage_maps(self, images, features) -> list[torch.Tensor]:
        """Feature maps after each fusion stage (for shape checks and inspection)."""
        x = images.reshape(-1, *images.shape[-3:])
        grids = self._pretrained_inputs(features, x.shape[0])
        maps = []
        x = self.stem(x)
        for i, adapter in enumerate(self.adapters):
            if i > 0:
                x = self.blocks[i - 1](x)
            x = adapter(grids[i], x)
            maps.append(x)
        return maps


class LfSEncoder(Encoder):
    """IMPALA-style shallow ConvNet: 4x4 stem to 128 channels, then conv/pool/2x residual blocks."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        w = config.lfs_width
        self.stem = nn.Conv2d(config.input_channels, w, kernel_size=4, stride=4)
        blocks = []
        for _ in range(config.lfs_blocks):
            blocks += [nn.Conv2d(w, w, 3, padding=1), nn.MaxPool2d(3, 2, 1), ResidualBlock(w), ResidualBlock(w)]
        self.blocks = nn.Sequential(*blocks)
        h, wd = config.image_size
        h, wd = (h - 4) // 4 + 1, (wd - 4) // 4 + 1
        for _ in range(config.lfs_blocks):
            h, wd = _pool(h), _pool(wd)
        self._image_dim = w * h * wd

    @property
    def image_dim(self):
        return self._image_dim

    def encode_images(self, images, features):
        x = images.reshape(-1, *images.shape[-3:])
        return F.relu(self.blocks(self.stem(x))).flatten(1)


class FrozenCLSEncoder(Encoder):
    """No trainable parameters: the embedding is the backbone's final CLS token."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config

    @property
    def image_dim(self):
        return self.config.feature_dim

    def needs_cls(self):
        return True

    def encode_images(self, images, features):
        if "cls" not in features:
            raise InputError("frozen_cls encoder needs the CLS token in the features")
        return features["cls"].reshape(-1, self.config.feature_dim).float()


def make_variant(config: EncoderConfig) -> Encoder:
    if config.ablation != "none" and not config.variant.startswith("spawnnet"):
        raise ConfigError(f"ablation {config.ablation!r} requested on {config.variant}")
    if config.variant.startswith("spawnnet"):
        return SpawnNetEncoder(config)
    if config.variant.startswith("lfs"):
        return LfSEncoder(config)
    return FrozenCLSEncoder(config)
