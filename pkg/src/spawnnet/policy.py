"""Observation stacking, the MLP action head, and the policy module."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .encoders import EncoderConfig, make_variant
from .errors import ConfigError, DimensionError, InputError

# action layout: dx dy dz | d_alpha d_beta d_gamma | gripper
TRANSLATION = slice(0, 3)
ROTATION = slice(3, 6)
GRIPPER = 6


@dataclass
class ActionVector:
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gripper: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.translation, self.rotation, [self.gripper]]).astype(np.float32)

    @classmethod
    def from_array(cls, a) -> "ActionVector":
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        if a.shape[0] != 7:
            raise DimensionError(f"action vector needs 7 entries, got {a.shape[0]}")
        return cls(a[TRANSLATION].copy(), a[ROTATION].copy(), float(a[GRIPPER]))

    @property
    def closed(self) -> bool:
        return self.gripper > 0.5


@dataclass
class Observation:
    """Stacked frames, shape (views, frames, H, W, channels), oldest frame first."""

    frames: np.ndarray

    @property
    def n_views(self) -> int:
        return self.frames.shape[0]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[1]

    def images(self, channels: int | None = None) -> np.ndarray:
        """Flattened (views * frames, H, W, ch), view-major."""
        f = self.frames if channels is None else self.frames[..., :channels]
        return f.reshape(-1, *f.shape[2:])


def stack_indices(t: int, n_frames: int) -> list[int]:
    """Indices of the n most recent frames up to step t, repeating frame 0 at episode start."""
    return [max(0, t - n_frames + 1 + i) for i in range(n_frames)]


def assemble(frame_buffers: Sequence[Sequence[np.ndarray]], n_frames: int = 4) -> Observation:
    """Build an Observation from per-view frame histories (oldest first)."""
    if not frame_buffers or any(len(b) == 0 for b in frame_buffers):
        raise InputError("every view needs at least one frame")
    shape = np.shape(frame_buffers[0][0])
    views = []
    for buf in frame_buffers:
        if any(np.shape(f) != shape for f in buf):
            raise InputError(f"inconsistent frame sizes; expected {shape}")
        idx = stack_indices(len(buf) - 1, n_frames)
        views.append(np.stack([buf[i] for i in idx]))
    return Observation(np.stack(views))


@dataclass
class PolicySpec:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mlp_hidden: list[int] = field(default_factory=lambda: [256, 128])
    action_dim: int = 7
    frames: int = 4
    views: int = 2
    action_bound: float = 1.0
    proprioception: bool = False

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.mlp_hidden = list(self.mlp_hidden)
        if self.proprioception:
            raise ConfigError("policies never receive proprioception")
        if self.action_dim < 1:
            raise ConfigError("action_dim must be positive")

    @property
    def n_images(self) -> int:
        return self.frames * self.views

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


HEAD_INIT_SCALE = 0.01


def init_weights(module: nn.Module):
    """Fan-in scaled normal init for conv/linear weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class Policy(nn.Module):
    """Encoder followed by an MLP head; the last output is the gripper in [0, 1]."""

    def __init__(self, spec: PolicySpec):
        super().__init__()
        self.spec = spec
        self.encoder = make_variant(spec.encoder)
        in_dim = self.encoder.image_dim * spec.n_images
        layers: list[nn.Module] = []
        for h in spec.mlp_hidden:
            layers += [nn.Linear(in_dim, h), nn.ReLU()]
            in_dim = h
        layers.append(nn.Linear(in_dim, spec.action_dim))
        self.head = nn.Sequential(*layers)
        init_weights(self)
        with torch.no_grad():  # start near zero motion and an unsaturated gripper (sigmoid ~0.5)
            self.head[-1].weight.mul_(HEAD_INIT_SCALE)

    @property
    def embedding_dim(self) -> int:
        return self.encoder.image_dim * self.spec.n_images

    def required_layers(self):
        return self.encoder.required_layers()

    def needs_cls(self) -> bool:
        return self.encoder.needs_cls()

    def needs_images(self) -> bool:
        return self.spec.encoder.variant != "frozen_cls"

    def forward(self, images: torch.Tensor | None, features: Mapping | None = None) -> torch.Tensor:
        """images: (B, n_img, ch, H, W) in [0, 1]. Returns (B, action_dim), gripper squashed."""
        out = self.head(self.encoder(images, features))
        return torch.cat([out[:, :-1], torch.sigmoid(out[:, -1:])], dim=1)

    @torch.no_grad()
    def act(self, images: torch.Tensor | None, features: Mapping | None = None) -> np.ndarray:
        """Deterministic bounded actions, (B, action_dim)."""
        was_training = self.training
        self.eval()
        out = self(images, features)
        self.train(was_training)
        b = self.spec.action_bound
        out[:, :-1] = out[:, :-1].clamp(-b, b)
        return out.numpy()


def count_trainable(policy: nn.Module) -> int:
    return sum(p.numel() for p in policy.parameters() if p.requires_grad)


def images_to_tensor(frames: np.ndarray, channels: int) -> torch.Tensor:
    """uint8 (..., n_img, H, W, ch) -> float (..., n_img, channels, H, W) in [0, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(frames[..., :channels]))
    x = x.float() / 255.0 if x.dtype == torch.uint8 else x.float()
    return x.movedim(-1, -3)
