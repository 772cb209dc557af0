"""A 2D kinematic pick-and-place world with procedurally varied object instances.

World coordinates live in the unit square with y pointing down, so the global
camera maps them to image rows/cols by a plain scale.  Objects are jittered
polygons carrying a handle point; the gripper must close within
``grasp_radius`` of the handle to pick the object up.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.ndimage import distance_transform_edt
from skimage.draw import disk, polygon

from ..errors import ConfigError, GenerationError, StateError

CATEGORY_DIR = Path(__file__).resolve().parent.parent / "configs" / "categories"
VIEWS = ("global", "wrist")

BACKGROUND = (228, 226, 218)
OUTSIDE = (70, 70, 70)
GOAL_COLOR = (150, 190, 150)
GRIPPER_OPEN = (30, 60, 200)
GRIPPER_CLOSED = (220, 40, 40)


@dataclass
class CategoryConfig:
    """Declarative ranges from which instances and episode poses are drawn."""

    name: str = "bags"
    task: str = "carry"  # carry: grasp + reach goal; place: grasp + move + release in goal
    n_vertices: tuple[int, int] = (5, 9)
    scale: tuple[float, float] = (0.09, 0.14)
    aspect: tuple[float, float] = (0.55, 1.0)
    handle_offset: tuple[float, float] = (0.6, 1.1)
    color_low: tuple[int, int, int] = (40, 40, 40)
    color_high: tuple[int, int, int] = (200, 200, 200)
    object_x: tuple[float, float] = (0.2, 0.4)
    object_y: tuple[float, float] = (0.3, 0.7)
    rotation: tuple[float, float] = (-math.pi / 4, math.pi / 4)
    gripper_x: tuple[float, float] = (0.35, 0.65)
    gripper_y: tuple[float, float] = (0.08, 0.15)
    goal_x: tuple[float, float] = (0.72, 0.8)
    goal_y: tuple[float, float] = (0.4, 0.6)
    goal_half: tuple[float, float] = (0.12, 0.12)
    horizon: int = 40
    max_step: float = 0.06
    grasp_radius: float = 0.05
    handle_radius: float = 0.022
    min_separation: float = 0.08
    wrist_window: float = 0.4

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))
        if self.task not in ("carry", "place"):
            raise ConfigError(f"unknown task {self.task!r}")
        for name in ("n_vertices", "scale", "aspect", "handle_offset", "object_x", "object_y",
                     "rotation", "gripper_x", "gripper_y", "goal_x", "goal_y"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ConfigError(f"range {name} has low > high")
        if self.n_vertices[0] < 3:
            raise ConfigError("polygons need at least 3 vertices")

    @property
    def stages(self) -> int:
        return 2 if self.task == "carry" else 3

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_category(name_or_path) -> CategoryConfig:
    """Load a category by shipped name ("bags", "tools") or from a YAML path."""
    if isinstance(name_or_path, CategoryConfig):
        return name_or_path
    if isinstance(name_or_path, dict):
        return CategoryConfig(**name_or_path)
    path = Path(name_or_path)
    if not path.exists():
        path = CATEGORY_DIR / f"{name_or_path}.yaml"
    if not path.exists():
        raise ConfigError(f"unknown category {name_or_path!r}")
    return CategoryConfig(**yaml.safe_load(path.read_text()))


@dataclass
class InstanceSpec:
    instance_id: str
    category: str
    shape_params: dict
    color: tuple[int, int, int]
    split: str = "train"
    pose_range: dict = field(default_factory=dict)

    def key(self) -> tuple:
        """Identity of the instance's appearance: (shape_params, color)."""
        return (tuple(sorted(self.shape_params.items())), tuple(self.color))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["color"] = list(self.color)
        return d

    @classmethod
    def from_dict(cls, d) -> "InstanceSpec":
        d = dict(d)
        d["color"] = tuple(d["color"])
        return cls(**d)

    def local_vertices(self) -> np.ndarray:
        p = self.shape_params
        n = p["n_vertices"]
        rng = np.random.default_rng(p["jitter_seed"])
        ang = (np.arange(n) + rng.uniform(-0.25, 0.25, n)) * 2 * math.pi / n
        rad = p["scale"] * rng.uniform(0.85, 1.15, n)
        return np.stack([rad * np.cos(ang), p["aspect"] * rad * np.sin(ang)], axis=1)

    def local_handle(self) -> np.ndarray:
        p = self.shape_params
        return np.array([p["handle_offset"] * p["scale"], 0.0])

    @property
    def handle_color(self) -> tuple[int, int, int]:
        return tuple(int(c * 0.35) for c in self.color)


def _instance_vector(shape_params: dict, color, cfg: CategoryConfig) -> np.ndarray:
    def norm(v, rng):
        lo, hi = rng
        return 0.0 if hi == lo else (v - lo) / (hi - lo)

    return np.array([
        norm(shape_params["n_vertices"], cfg.n_vertices),
        norm(shape_params["scale"], cfg.scale),
        norm(shape_params["aspect"], cfg.aspect),
        norm(shape_params["handle_offset"], cfg.handle_offset),
        *[norm(c, (lo, hi)) for c, lo, hi in zip(color, cfg.color_low, cfg.color_high)],
    ])


def generate_instances(cfg: CategoryConfig, n_train: int, n_heldout: int, seed: int,
                       max_attempts: int = 2000) -> list[InstanceSpec]:
    """Sample distinct instances; every pair is at least ``min_separation`` apart in
    normalized (shape, color) space, which makes the splits disjoint."""
    rng = np.random.default_rng(seed)
    pose_range = {k: list(getattr(cfg, k)) for k in ("object_x", "object_y", "rotation")}
    out: list[InstanceSpec] = []
    vecs: list[np.ndarray] = []
    attempts = 0
    while len(out) < n_train + n_heldout:
        attempts += 1
        if attempts > max_attempts:
            raise GenerationError(
                f"could only place {len(out)} of {n_train + n_heldout} distinct {cfg.name} instances; "
                "widen the shape/color ranges or lower min_separation"
            )
        params = {
            "n_vertices": int(rng.integers(cfg.n_vertices[0], cfg.n_vertices[1] + 1)),
            "scale": round(float(rng.uniform(*cfg.scale)), 4),
            "aspect": round(float(rng.uniform(*cfg.aspect)), 4),
            "handle_offset": round(float(rng.uniform(*cfg.handle_offset)), 4),
            "jitter_seed": int(rng.integers(0, 2**31 - 1)),
        }
        color = tuple(int(rng.integers(lo, hi + 1)) for lo, hi in zip(cfg.color_low, cfg.color_high))
        v = _instance_vector(params, color, cfg)
        if any(np.linalg.norm(v - u) < cfg.min_separation for u in vecs):
            continue
        split = "train" if len(out) < n_train else "heldout"
        idx = len(out) if split == "train" else len(out) - n_train
        out.append(InstanceSpec(f"{cfg.name}-{split}-{idx}", cfg.name, params, color, split, pose_range))
        vecs.append(v)
    return out


def split_fingerprint(instances) -> str:
    payload = json.dumps([i.to_dict() for i in instances], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass
class EnvState:
    instance: InstanceSpec
    gripper: np.ndarray
    obj_pos: np.ndarray
    obj_angle: float
    goal_center: np.ndarray
    goal_half: np.ndarray
    grasped: bool = False
    closed: bool = False
    grasp_offset: np.ndarray = field(default_factory=lambda: np.zeros(2))
    step_count: int = 0
    grasped_ever: bool = False
    success: bool = False
    done: bool = False

    def copy(self) -> "EnvState":
        return copy.deepcopy(self)

    def handle(self) -> np.ndarray:
        return self.obj_pos + _rot(self.obj_angle) @ self.instance.local_handle()

    def vertices(self) -> np.ndarray:
        return self.obj_pos + self.instance.local_vertices() @ _rot(self.obj_angle).T

    def in_goal(self, point=None, margin: float = 0.0) -> bool:
        p = self.obj_pos if point is None else point
        return bool(np.all(np.abs(p - self.goal_center) <= self.goal_half - margin))

    def stage_flags(self) -> dict:
        return {"grasped": self.grasped_ever, "in_goal": self.in_goal(), "success": self.success}

    def score(self) -> float:
        if self.success:
            return 1.0
        return 0.5 if self.grasped_ever else 0.0


class PickPlaceEnv:
    """Functional environment: states are values, ``step`` returns a new state."""

    def __init__(self, category: CategoryConfig, image_size: int = 64):
        self.cfg = load_category(category)
        self.image_size = image_size

    def reset(self, instance: InstanceSpec, seed: int) -> EnvState:
        cfg = self.cfg
        rng = np.random.default_rng(seed)
        pr = instance.pose_range or {}
        ox, oy, rot = pr.get("object_x", cfg.object_x), pr.get("object_y", cfg.object_y), pr.get("rotation", cfg.rotation)
        return EnvState(
            instance=instance,
            gripper=np.array([rng.uniform(*cfg.gripper_x), rng.uniform(*cfg.gripper_y)]),
            obj_pos=np.array([rng.uniform(*ox), rng.uniform(*oy)]),
            obj_angle=float(rng.uniform(*rot)),
            goal_center=np.array([rng.uniform(*cfg.goal_x), rng.uniform(*cfg.goal_y)]),
            goal_half=np.array(cfg.goal_half, dtype=float),
        )

    def step(self, state: EnvState, action) -> tuple[EnvState, bool, dict]:
        if state.done:
            raise StateError("episode is over; call reset")
        cfg = self.cfg
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        close = bool(a[-1] > 0.5)
        move = np.clip(a[:2], -1.0, 1.0) * cfg.max_step
        s = state.copy()
        s.step_count += 1
        s.gripper = np.clip(s.gripper + move, 0.0, 1.0)
        s.closed = close
        if s.grasped and not close:
            s.grasped = False
        if s.grasped:
            s.obj_pos = s.gripper + s.grasp_offset
        elif close and np.linalg.norm(s.gripper - s.handle()) <= cfg.grasp_radius:
            s.grasped = s.grasped_ever = True
            s.grasp_offset = s.obj_pos - s.gripper
        if s.grasped_ever and s.in_goal():
            s.success = cfg.task == "carry" or not s.grasped
        s.done = s.success or s.step_count >= cfg.horizon
        return s, s.done, s.stage_flags()

    # -- rendering --------------------------------------------------------
    def view_window(self, state: EnvState, view: str) -> tuple[float, float, float]:
        """(x0, y0, size) of the world square a view sees."""
        if view == "global":
            return 0.0, 0.0, 1.0
        if view == "wrist":
            w = self.cfg.wrist_window
            return state.gripper[0] - w / 2, state.gripper[1] - w / 2, w
        raise ConfigError(f"unknown view {view!r}")

    def world_to_pixel(self, state: EnvState, view: str, xy) -> np.ndarray:
        """World (x, y) -> continuous (row, col); pixel centers sit at integers."""
        x0, y0, size = self.view_window(state, view)
        xy = np.asarray(xy, dtype=np.float64)
        S = self.image_size
        col = (xy[..., 0] - x0) / size * S - 0.5
        row = (xy[..., 1] - y0) / size * S - 0.5
        return np.stack([row, col], axis=-1)

    def render(self, state: EnvState, view: str = "global") -> np.ndarray:
        """uint8 (S, S, 4): flat-shaded RGB plus a normalized distance-field channel."""
        S = self.image_size
        x0, y0, size = self.view_window(state, view)
        px = size / S  # world units per pixel
        img = np.empty((S, S, 3), dtype=np.uint8)
        centers = (np.arange(S) + 0.5) * px
        in_x = (x0 + centers >= 0.0) & (x0 + centers <= 1.0)
        in_y = (y0 + centers >= 0.0) & (y0 + centers <= 1.0)
        img[:] = OUTSIDE
        img[np.ix_(in_y, in_x)] = BACKGROUND

        g0 = state.goal_center - state.goal_half
        g1 = state.goal_center + state.goal_half
        gc = self.world_to_pixel(state, view, np.array([[g0[0], g0[1]], [g1[0], g0[1]], [g1[0], g1[1]], [g0[0], g1[1]]]))
        rr, cc = polygon(gc[:, 0], gc[:, 1], (S, S))
        img[rr, cc] = GOAL_COLOR

        occupied = np.zeros((S, S), dtype=bool)
        vc = self.world_to_pixel(state, view, state.vertices())
        rr, cc = polygon(vc[:, 0], vc[:, 1], (S, S))
        img[rr, cc] = state.instance.color
        occupied[rr, cc] = True

        hr = max(self.cfg.handle_radius / px, 0.75)
        rr, cc = disk(tuple(self.world_to_pixel(state, view, state.handle())), hr, shape=(S, S))
        img[rr, cc] = state.instance.handle_color
        occupied[rr, cc] = True

        g = self.world_to_pixel(state, view, state.gripper)
        half = max(0.015 / px, 0.75)
        if state.closed:
            rr, cc = disk(tuple(g), half, shape=(S, S))
            img[rr, cc] = GRIPPER_CLOSED
            occupied[rr, cc] = True
        else:
            for side in (-1, 1):
                rr, cc = disk((g[0], g[1] + side * 1.5 * half), half * 0.7, shape=(S, S))
                img[rr, cc] = GRIPPER_OPEN
                occupied[rr, cc] = True

        if occupied.any():
            dist = distance_transform_edt(~occupied) * px
            depth = np.clip(dist / 0.25, 0.0, 1.0)
        else:
            depth = np.ones((S, S))
        return np.concatenate([img, np.round(depth * 255).astype(np.uint8)[..., None]], axis=-1)

    def render_views(self, state: EnvState, views=VIEWS) -> np.ndarray:
        return np.stack([self.render(state, v) for v in views])
