"""Experiment configuration: one YAML file fully determines a run."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..backbone import BackboneSpec
from ..bench.world import CategoryConfig, load_category
from ..encoders import make_encoder_config
from ..errors import ConfigError
from ..imitation.augment import AugmentConfig
from ..imitation.train import TrainConfig
from ..policy import PolicySpec

PRESET_DIR = Path(__file__).resolve().parent.parent / "configs"

# method tag -> (encoder variant, ablation, default augmentation)
METHODS = {
    "spawnnet": ("spawnnet", "none", "none"),
    "spawnnet_d": ("spawnnet_depth", "none", "none"),
    "lfs_aug": ("lfs", "none", "sim_shift"),
    "lfs_aug_d": ("lfs_depth", "none", "sim_shift"),
    "frozen_cls": ("frozen_cls", "none", "none"),
    "ablation:zero_pretrained": ("spawnnet_depth", "zero_pretrained", "none"),
    "ablation:last_layer_only": ("spawnnet_depth", "last_layer_only", "none"),
    "ablation:cls_tiled": ("spawnnet_depth", "cls_tiled", "none"),
}

DEFAULTS = {
    "method": "spawnnet_d",
    "image_size": 224,
    "backbone": {},
    "policy": {
        "mlp_hidden": [256, 128],
        "action_dim": 7,
        "frames": 4,
        "views": 2,
        "projection_width": 64,
        "control_width": 64,
        "lfs_width": 128,
    },
    "train": {"algorithm": "bc"},
    "augment": {"mode": "auto", "p_aug": 0.5},
    "bench": {
        "category": "bags",
        "n_train": 3,
        "n_heldout": 6,
        "instance_seed": 0,
        "n_demos": 90,
        "demo_seed": 0,
        "action_noise": 0.0,  # std of noise on the expert's executed motion (labels stay clean)
        "gripper_noise": 0.0,  # chance of flipping the executed gripper command before the grasp
        "trials_per_instance": 5,
        "eval_seed": 0,
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_dotted(d: dict, key: str, value):
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a section")
    cur[parts[-1]] = value


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        self.raw = _merge(DEFAULTS, self.raw)
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {sorted(METHODS)}")
        unknown = set(self.raw) - set(DEFAULTS)
        unknown |= {f"bench.{k}" for k in set(self.bench) - set(DEFAULTS["bench"])}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        # resolve eagerly so inconsistent configs fail at load time
        self.backbone_spec()
        self.policy_spec()
        self.train_config()
        self.augment_config()
        self.category()

    # -- loading ------------------------------------------------------------
    @classmethod
    def load(cls, path_or_preset, overrides: dict | None = None) -> "ExperimentConfig":
        path = Path(path_or_preset)
        if not path.exists():
            path = PRESET_DIR / f"{path_or_preset}.yaml"
        if not path.exists():
            raise ConfigError(f"no config file or preset named {path_or_preset!r}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from None
        for k, v in (overrides or {}).items():
            set_dotted(raw, k, v)
        return cls(raw)

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        for k, v in overrides.items():
            set_dotted(raw, k, v)
        return ExperimentConfig(raw)

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)

    # -- derived objects ----------------------------------------------------
    @property
    def method(self) -> str:
        return self.raw["method"]

    @property
    def image_size(self) -> int:
        return int(self.raw["image_size"])

    @property
    def bench(self) -> dict:
        return self.raw["bench"]

    def backbone_spec(self) -> BackboneSpec:
        try:
            return BackboneSpec(**self.raw["backbone"])
        except TypeError as e:
            raise ConfigError(f"bad backbone section: {e}") from None

    def policy_spec(self) -> PolicySpec:
        variant, ablation, _ = METHODS[self.method]
        p = dict(self.raw["policy"])
        try:
            encoder = make_encoder_config(
                variant,
                self.backbone_spec(),
                self.image_size,
                ablation=ablation,
                projection_width=p.pop("projection_width"),
                control_width=p.pop("control_width"),
                lfs_width=p.pop("lfs_width"),
            )
            return PolicySpec(encoder=encoder, **p)
        except TypeError as e:
            raise ConfigError(f"bad policy section: {e}") from None

    def train_config(self, seed: int | None = None) -> TrainConfig:
        t = {k: v for k, v in self.raw["train"].items() if k != "algorithm"}
        if seed is not None:
            t["seed"] = seed
        if self.algorithm not in ("bc", "dagger"):
            raise ConfigError(f"unknown training algorithm {self.algorithm!r}")
        try:
            return TrainConfig(**t)
        except TypeError as e:
            raise ConfigError(f"bad train section: {e}") from None

    @property
    def algorithm(self) -> str:
        return self.raw["train"].get("algorithm", "bc")

    def augment_config(self) -> AugmentConfig:
        a = dict(self.raw["augment"])
        if a.get("mode", "auto") == "auto":
            a["mode"] = METHODS[self.method][2]
        a.setdefault("output_size", self.image_size)
        try:
            cfg = AugmentConfig(**a)
        except TypeError as e:
            raise ConfigError(f"bad augment section: {e}") from None
        if cfg.mode != "none" and cfg.output_size != self.image_size:
            raise ConfigError("augmentation output_size must equal image_size")
        return cfg

    def category(self) -> CategoryConfig:
        return load_category(self.bench["category"])

    # -- identity -----------------------------------------------------------
    def canonical(self, drop_seed: bool = True) -> dict:
        raw = copy.deepcopy(self.raw)
        if drop_seed:
            raw["train"].pop("seed", None)
        raw["bench"]["category"] = self.category().to_dict()
        return raw

    @property
    def config_hash(self) -> str:
        payload = json.dumps(self.canonical(), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    @property
    def bench_hash(self) -> str:
        """Identity of the demonstration data (category, splits, demo sampling, image size)."""
        b = dict(self.bench)
        b.pop("trials_per_instance", None)
        b.pop("eval_seed", None)
        b["category"] = self.category().to_dict()
        payload = json.dumps({"bench": b, "image_size": self.image_size,
                              "views": self.raw["policy"]["views"]}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]
