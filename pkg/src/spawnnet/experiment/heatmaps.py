"""Adapter feature-norm overlays: where the policy draws on pretrained features."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from ..backbone import PretrainedBackbone
from ..encoders import SpawnNetEncoder, adapter_norm_map
from ..errors import UnsupportedMethodError
from ..imitation.data import Trajectory
from ..policy import Policy


def heat_colors(m: np.ndarray) -> np.ndarray:
    """[0, 1] map -> RGB float in [0, 255]: black -> red -> yellow -> white."""
    m = np.clip(m, 0.0, 1.0)[..., None]
    r = np.clip(3 * m, 0, 1)
    g = np.clip(3 * m - 1, 0, 1)
    b = np.clip(3 * m - 2, 0, 1)
    return 255.0 * np.concatenate([r, g, b], axis=-1)


def blend(rgb: np.ndarray, m: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    out = (1 - alpha) * rgb.astype(np.float64) + alpha * heat_colors(m)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def norm_maps(policy: Policy, backbone: PretrainedBackbone, frames: np.ndarray) -> np.ndarray:
    """Last adapter's per-position projected-feature norm for each frame, upsampled to image size.

    The norm is taken at the backbone grid resolution (before the adapter's
    resize to the control-stream map, which is only a few pixels wide at the
    end of the stream) and then bilinearly upsampled to the frame.

    frames: (T, S, S, ch) uint8 -> (T, S, S) float.
    """
    enc = policy.encoder
    if not isinstance(enc, SpawnNetEncoder):
        raise UnsupportedMethodError(f"norm maps need a SpawnNet policy, got {policy.spec.encoder.variant}")
    adapter = enc.adapters[-1]
    layer = adapter.spec.source_layer
    grids, _ = backbone.extract(frames[..., :3], [layer], with_cls=False)
    m = adapter_norm_map(grids[layer].permute(0, 3, 1, 2).contiguous(), adapter, resize=False)  # (T, h, w)
    S = frames.shape[1:3]
    with torch.no_grad():
        up = F.interpolate(m[:, None], size=S, mode="bilinear", align_corners=False)[:, 0]
    return up.numpy()


def handle_region_stats(maps: np.ndarray, handle_px, radius_px: float) -> dict:
    """Mean map value inside a disk around the handle vs the whole image, averaged over steps."""
    inside, whole = [], []
    T, H, W = maps.shape
    rr, cc = np.mgrid[:H, :W]
    for t in range(T):
        r, c = handle_px[t]
        disk = (rr - r) ** 2 + (cc - c) ** 2 <= radius_px ** 2
        if not disk.any():
            continue
        inside.append(float(maps[t][disk].mean()))
        whole.append(float(maps[t].mean()))
    if not inside:
        return {"handle_mean": None, "image_mean": None, "ratio": None, "steps": 0}
    hm, im = float(np.mean(inside)), float(np.mean(whole))
    return {"handle_mean": hm, "image_mean": im, "ratio": hm / im if im > 0 else None, "steps": len(inside)}


def emit_heatmaps(policy: Policy, trajectory: Trajectory, out_dir, backbone: PretrainedBackbone,
                  view: int = 0, alpha: float = 0.5, handle_radius_px: float | None = None) -> dict:
    """Write one overlay PNG per step of ``trajectory`` (for one camera view).

    Maps are scaled by the trajectory-wide maximum so brightness is comparable
    across steps; an all-zero map stays uniform.  If the trajectory carries
    per-step handle pixels, the summary compares the mean map value within
    ``handle_radius_px`` (default: 5% of the image side) to the image mean.
    """
    if not isinstance(policy.encoder, SpawnNetEncoder):
        raise UnsupportedMethodError(f"heatmaps are only defined for SpawnNet policies, "
                                     f"not {policy.spec.encoder.variant}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = trajectory.frames[:, view]
    maps = norm_maps(policy, backbone, frames)
    peak = float(maps.max())
    scaled = maps / peak if peak > 0 else np.zeros_like(maps)
    paths = []
    for t in range(len(frames)):
        p = out / f"{trajectory.traj_id}_v{view}_t{t:04d}.png"
        Image.fromarray(blend(frames[t, ..., :3], scaled[t], alpha)).save(p)
        paths.append(str(p))
    summary = {"trajectory": trajectory.traj_id, "view": view, "steps": len(frames), "peak_norm": peak,
               "files": [Path(p).name for p in paths]}
    handle_px = trajectory.extras.get("handle_px")
    if handle_px:
        radius = handle_radius_px if handle_radius_px is not None else 0.05 * frames.shape[1]
        summary["region"] = handle_region_stats(maps, [h[view] for h in handle_px], radius)
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    summary["maps"] = maps
    summary["paths"] = paths
    return summary
