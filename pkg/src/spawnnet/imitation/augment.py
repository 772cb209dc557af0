"""Random shift / color jitter augmentation applied identically to every image of an observation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from ..errors import ConfigError
from ..policy import Observation

MODES = ("none", "sim_shift", "real_shift_jitter")


@dataclass
class AugmentConfig:
    mode: str = "none"
    p_aug: float = 0.5
    crop_scale: tuple[float, float] = (0.7, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    pad: int = 5
    brightness: float = 0.3
    output_size: int = 224

    def __post_init__(self):
        self.crop_scale = tuple(self.crop_scale)
        self.crop_ratio = tuple(self.crop_ratio)
        if self.mode not in MODES:
            raise ConfigError(f"unknown augmentation mode {self.mode!r}")
        if not 0.0 <= self.p_aug <= 1.0:
            raise ConfigError(f"p_aug must lie in [0, 1], got {self.p_aug}")


def crop_params(height: int, width: int, scale, ratio, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Sample (top, left, h, w) like torchvision's RandomResizedCrop, from a numpy rng."""
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    # fallback: central crop at the clamped ratio
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w, h = width, int(round(width / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = height, int(round(height * ratio[1]))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def edge_pad(x: torch.Tensor, pad: int) -> torch.Tensor:
    return F.pad(x, (pad, pad, pad, pad), mode="replicate")


def resized_crop(x: torch.Tensor, top: int, left: int, h: int, w: int, size: int) -> torch.Tensor:
    x = x[..., top:top + h, left:left + w]
    if h == size and w == size:
        return x
    return TF.resize(x, [size, size], antialias=True)


def augment_images(x: torch.Tensor, cfg: AugmentConfig, rng: np.random.Generator) -> torch.Tensor:
    """x: (n_img, ch, H, W) float in [0, 1]; one geometric transform shared by all images.

    Brightness jitter only touches the first three (RGB) channels.
    """
    if cfg.mode == "none" or rng.uniform() >= cfg.p_aug:
        return x
    if cfg.mode == "sim_shift":
        x = edge_pad(x, cfg.pad)
    top, left, h, w = crop_params(x.shape[-2], x.shape[-1], cfg.crop_scale, cfg.crop_ratio, rng)
    x = resized_crop(x, top, left, h, w, cfg.output_size)
    if cfg.mode == "real_shift_jitter":
        factor = rng.uniform(max(0.0, 1 - cfg.brightness), 1 + cfg.brightness)
        x = x.clone()
        x[:, :3] = (x[:, :3] * factor).clamp(0.0, 1.0)
    return x


def augment(obs: Observation, cfg: AugmentConfig, rng: np.random.Generator) -> Observation:
    """Observation-level wrapper; returns uint8 frames of size ``cfg.output_size``."""
    V, Fr = obs.frames.shape[:2]
    x = torch.from_numpy(obs.images()).float().div(255.0).permute(0, 3, 1, 2)
    y = augment_images(x, cfg, rng)
    if y is x:
        return obs
    y = (y.permute(0, 2, 3, 1) * 255.0).round().clamp(0, 255).to(torch.uint8).numpy()
    return Observation(y.reshape(V, Fr, *y.shape[1:]))
