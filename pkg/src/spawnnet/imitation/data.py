"""Trajectories, their on-disk store, and the stacked-frame training dataset.

Trajectory store layout (one directory per trajectory)::

    <traj_id>/manifest.json        actions, instance metadata, source, views
    <traj_id>/t0000_v0.png         RGB frame of step 0, view 0
    <traj_id>/t0000_v0_depth.png   8-bit distance-field channel (if present)
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from ..errors import InputError
from ..policy import images_to_tensor, stack_indices

SOURCES = ("scripted_expert", "policy_rollout")


@dataclass
class Trajectory:
    traj_id: str
    frames: np.ndarray  # (T, V, H, W, ch) uint8
    actions: np.ndarray  # (T, action_dim) labels
    instance_id: str
    task_id: str
    source: str = "scripted_expert"
    instance: dict = field(default_factory=dict)  # serialized InstanceSpec
    views: tuple[str, ...] = ("global", "wrist")
    extras: dict = field(default_factory=dict)  # per-step annotations, e.g. handle pixels per view

    def __post_init__(self):
        if len(self.frames) == 0:
            raise InputError(f"trajectory {self.traj_id} is empty")
        if len(self.frames) != len(self.actions):
            raise InputError(f"trajectory {self.traj_id}: {len(self.frames)} frames vs {len(self.actions)} labels")
        if self.source not in SOURCES:
            raise InputError(f"unknown trajectory source {self.source!r}")

    def __len__(self):
        return len(self.frames)

    def image_id(self, t: int, v: int) -> str:
        return f"{self.traj_id}-t{t:04d}-v{v}"

    def image_items(self):
        """(image_id, frame) pairs for the feature cache."""
        for t in range(len(self)):
            for v in range(self.frames.shape[1]):
                yield self.image_id(t, v), self.frames[t, v]

    def instance_key(self) -> tuple | None:
        if not self.instance:
            return None
        return (tuple(sorted(self.instance["shape_params"].items())), tuple(self.instance["color"]))


def save_trajectory(traj: Trajectory, root) -> Path:
    d = Path(root) / traj.traj_id
    d.mkdir(parents=True, exist_ok=True)
    has_depth = traj.frames.shape[-1] == 4
    for t in range(len(traj)):
        for v in range(traj.frames.shape[1]):
            Image.fromarray(traj.frames[t, v, ..., :3]).save(d / f"t{t:04d}_v{v}.png")
            if has_depth:
                Image.fromarray(traj.frames[t, v, ..., 3]).save(d / f"t{t:04d}_v{v}_depth.png")
    manifest = {
        "traj_id": traj.traj_id,
        "instance_id": traj.instance_id,
        "task_id": traj.task_id,
        "source": traj.source,
        "instance": traj.instance,
        "views": list(traj.views),
        "steps": len(traj),
        "depth": has_depth,
        "extras": traj.extras,
        "actions": np.asarray(traj.actions, dtype=float).round(8).tolist(),
    }
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    with os.fdopen(fd, "w") as f:
        json.dump(manifest, f, indent=1)
    os.replace(tmp, d / "manifest.json")
    return d


def load_trajectory(path) -> Trajectory:
    d = Path(path)
    m = json.loads((d / "manifest.json").read_text())
    frames = []
    for t in range(m["steps"]):
        views = []
        for v in range(len(m["views"])):
            rgb = np.asarray(Image.open(d / f"t{t:04d}_v{v}.png").convert("RGB"))
            if m["depth"]:
                depth = np.asarray(Image.open(d / f"t{t:04d}_v{v}_depth.png"))
                rgb = np.concatenate([rgb, depth[..., None]], axis=-1)
            views.append(rgb)
        frames.append(np.stack(views))
    return Trajectory(
        traj_id=m["traj_id"],
        frames=np.stack(frames),
        actions=np.asarray(m["actions"], dtype=np.float32),
        instance_id=m["instance_id"],
        task_id=m["task_id"],
        source=m["source"],
        instance=m["instance"],
        views=tuple(m["views"]),
        extras=m.get("extras", {}),
    )


def load_trajectories(root) -> list[Trajectory]:
    return [load_trajectory(p.parent) for p in sorted(Path(root).glob("*/manifest.json"))]


class DemoDataset:
    """Every labeled state of a set of trajectories, with frame-stacking indices.

    ``rows[i]`` gives, for sample i, the global state indices of its stacked
    frames (oldest first, repeat-first padding at episode start).
    """

    def __init__(self, trajectories: Sequence[Trajectory], n_frames: int = 4):
        if not trajectories:
            raise InputError("dataset is empty")
        self.n_frames = n_frames
        self.trajectories: list[Trajectory] = []
        self._frames: list[np.ndarray] = []
        self._labels: list[np.ndarray] = []
        self._rows: list[np.ndarray] = []
        self.image_ids: list[str] = []
        self.n_states = 0
        self.n_views = trajectories[0].frames.shape[1]
        self._shape = trajectories[0].frames.shape[1:]
        self.extend(trajectories)

    def extend(self, trajectories: Sequence[Trajectory]):
        for traj in trajectories:
            if traj.frames.shape[1:] != self._shape:
                raise InputError(f"trajectory {traj.traj_id} frames {traj.frames.shape[1:]} != {self._shape}")
            T = len(traj)
            off = self.n_states
            self._rows.append(np.array([[off + i for i in stack_indices(t, self.n_frames)] for t in range(T)]))
            self._frames.append(traj.frames)
            self._labels.append(np.asarray(traj.actions, dtype=np.float32))
            self.image_ids.extend(traj.image_id(t, v) for t in range(T) for v in range(self.n_views))
            self.trajectories.append(traj)
            self.n_states += T
        self.frames = np.concatenate(self._frames) if len(self._frames) > 1 else self._frames[0]
        self._frames = [self.frames]
        self.labels = torch.from_numpy(np.concatenate(self._labels))
        self._labels = [self.labels.numpy()]
        self.rows = np.concatenate(self._rows)
        self._rows = [self.rows]

    def __len__(self):
        return self.n_states

    def batch_images(self, idx: np.ndarray, channels: int) -> torch.Tensor:
        """(B, V*F, channels, H, W) float images, view-major then frame-major."""
        rows = self.rows[idx]  # (B, F)
        x = self.frames[rows]  # (B, F, V, H, W, ch)
        x = np.swapaxes(x, 1, 2)
        x = x.reshape(len(idx), -1, *x.shape[3:])
        return images_to_tensor(x, channels)

    def batch_raw(self, idx: np.ndarray) -> np.ndarray:
        """Unaugmented uint8 images (B, V*F, H, W, ch) for live feature extraction."""
        x = np.swapaxes(self.frames[self.rows[idx]], 1, 2)
        return x.reshape(len(idx), -1, *x.shape[3:])

    def batch_image_ids(self, idx: np.ndarray) -> list[str]:
        """Image ids laid out like ``batch_images``, flattened."""
        out = []
        for rows in self.rows[idx]:
            for v in range(self.n_views):
                out.extend(self.image_ids[r * self.n_views + v] for r in rows)
        return out

    def state_rows(self, idx: np.ndarray) -> np.ndarray:
        """(B, V*F) flat image indices into ``image_ids``."""
        rows = self.rows[idx]  # (B, F)
        v = np.arange(self.n_views)
        flat = rows[:, None, :] * self.n_views + v[None, :, None]  # (B, V, F)
        return flat.reshape(len(idx), -1)


def collect_demos(env, instances, n_demos: int, seed: int = 0, action_noise: float = 0.0,
                  gripper_noise: float = 0.0, views: Sequence[str] = ("global", "wrist"), prefix: str = "demo") -> list[Trajectory]:
    """Scripted-expert demonstrations spread round-robin over ``instances``."""
    from ..bench.evaluate import rollout
    from ..bench.expert import NoisyExpertAgent, scripted_expert

    if not instances:
        raise InputError("no instances to demonstrate on")
    seeds = np.random.SeedSequence(seed).generate_state(2 * n_demos)
    out = []
    for k in range(n_demos):
        inst = instances[k % len(instances)]
        agent = NoisyExpertAgent(env.cfg, action_noise, int(seeds[2 * k + 1]), gripper_noise)
        handle_px = []

        def label(state):
            handle_px.append([env.world_to_pixel(state, v, state.handle()).round(3).tolist() for v in views])
            return scripted_expert(state, env.cfg)

        ep = rollout(env, inst, agent, int(seeds[2 * k]), views, label_fn=label, record=True)
        extras = {"handle_px": handle_px[: len(ep.frames)]}
        out.append(Trajectory(f"{prefix}-{k:04d}", ep.frames, ep.labels, inst.instance_id, inst.category,
                              "scripted_expert", inst.to_dict(), tuple(views), extras))
    return out
