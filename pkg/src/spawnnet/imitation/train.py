"""Behavior cloning and DAgger with mean-squared action regression."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, asdict
from typing import Callable, Sequence

import numpy as np
import torch

from ..backbone import PretrainedBackbone
from ..bench.evaluate import rollout
from ..bench.world import InstanceSpec, PickPlaceEnv
from ..cache import FeatureStore
from ..errors import ConfigError, InputError, StaleCacheError
from ..policy import Policy, PolicySpec, images_to_tensor, stack_indices
from .augment import AugmentConfig, augment_images
from .data import DemoDataset, Trajectory

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 3e-4
    epochs: int = 10
    steps: int | None = None  # overrides epochs when set
    seed: int = 0
    dagger_iterations: int = 5
    rollouts_per_iteration: int = 10
    updates_per_iteration: int = 200
    use_cache: bool = True

    def __post_init__(self):
        for name in ("batch_size", "epochs", "dagger_iterations", "rollouts_per_iteration", "updates_per_iteration"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.steps is not None and self.steps < 1:
            raise ConfigError("steps must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def to_dict(self):
        return asdict(self)


def mse_loss(pred: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Mean over batch and action dims of squared differences."""
    if pred.shape != label.shape:
        raise InputError(f"prediction shape {tuple(pred.shape)} != label shape {tuple(label.shape)}")
    return ((pred - label) ** 2).mean()


def seed_streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def feature_store_for(policy: Policy) -> FeatureStore:
    return FeatureStore(policy.required_layers(), policy.needs_cls())


def needs_backbone(policy: Policy) -> bool:
    return bool(policy.required_layers()) or policy.needs_cls()


class Learner:
    """Owns a policy, its optimizer and the feature plumbing for gradient updates."""

    def __init__(self, policy: Policy, cfg: TrainConfig, augment: AugmentConfig | None = None,
                 backbone: PretrainedBackbone | None = None, features: FeatureStore | None = None):
        self.policy = policy
        self.cfg = cfg
        self.augment = augment or AugmentConfig(mode="none")
        self.backbone = backbone
        self.features = features
        self.optimizer = torch.optim.Adam(policy.parameters(), lr=cfg.learning_rate)
        self.shuffle_rng, self.aug_rng = seed_streams(cfg.seed, 2)
        self.channels = policy.spec.encoder.input_channels
        self.losses: list[float] = []
        self._map: torch.Tensor | None = None
        self._map_len = -1
        if needs_backbone(policy):
            if cfg.use_cache and features is None:
                raise StaleCacheError("use_cache is set but no cached features were supplied")
            if not cfg.use_cache and backbone is None:
                raise ConfigError("live feature extraction needs a backbone")

    def _feature_rows(self, data: DemoDataset) -> torch.Tensor:
        if self._map is None or self._map_len != len(data.image_ids):
            self._map = self.features.rows(data.image_ids)
            self._map_len = len(data.image_ids)
        return self._map

    def batch(self, data: DemoDataset, idx: np.ndarray):
        images = None
        if self.policy.needs_images():
            images = data.batch_images(idx, self.channels)
            if self.augment.mode != "none":
                images = torch.stack([augment_images(x, self.augment, self.aug_rng) for x in images])
        feats = {}
        if needs_backbone(self.policy):
            if self.cfg.use_cache:
                rows = self._feature_rows(data)[torch.from_numpy(data.state_rows(idx))]
                feats = self.features.gather(rows)
            else:
                raw = data.batch_raw(idx)
                B, n = raw.shape[:2]
                layers = self.policy.required_layers()
                grids, cls = self.backbone.extract(raw.reshape(B * n, *raw.shape[2:]), layers or None,
                                                   with_cls=self.policy.needs_cls())
                feats = {l: grids[l].permute(0, 3, 1, 2).contiguous().reshape(B, n, -1, *grids[l].shape[1:3])
                         for l in layers}
                if cls is not None:
                    feats["cls"] = cls.reshape(B, n, -1)
        return images, feats, data.labels[torch.from_numpy(idx)]

    def step(self, data: DemoDataset, idx: np.ndarray) -> float:
        images, feats, labels = self.batch(data, idx)
        self.policy.train()
        loss = mse_loss(self.policy(images, feats), labels)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        value = float(loss.detach())
        self.losses.append(value)
        return value

    def fit(self, data: DemoDataset, steps: int | None = None, epochs: int | None = None):
        """Shuffled minibatch passes; ``steps`` caps the number of updates."""
        n, bs = len(data), self.cfg.batch_size
        done = 0
        epoch = 0
        while True:
            if epochs is not None and epoch >= epochs:
                return
            order = self.shuffle_rng.permutation(n)
            for s in range(0, n, bs):
                if steps is not None and done >= steps:
                    return
                self.step(data, order[s:s + bs])
                done += 1
            epoch += 1


def _check_features(policy: Policy, cfg: TrainConfig, features: FeatureStore | None, data: DemoDataset):
    if needs_backbone(policy) and cfg.use_cache:
        if features is None:
            raise StaleCacheError("use_cache is set but no cached features were supplied")
        features.rows(data.image_ids)  # raises on a miss


def bc_train(dataset: Sequence[Trajectory], spec: PolicySpec, cfg: TrainConfig,
             augment: AugmentConfig | None = None, backbone: PretrainedBackbone | None = None,
             features: FeatureStore | None = None) -> tuple[Policy, dict]:
    """Behavior cloning on stored demonstrations; deterministic given ``cfg.seed``."""
    if not dataset:
        raise InputError("behavior cloning needs at least one trajectory")
    torch.manual_seed(cfg.seed)
    policy = Policy(spec)
    data = DemoDataset(dataset, spec.frames)
    _check_features(policy, cfg, features, data)
    learner = Learner(policy, cfg, augment, backbone, features)
    t0 = time.time()
    if cfg.steps is not None:
        learner.fit(data, steps=cfg.steps)
    else:
        learner.fit(data, epochs=cfg.epochs)
    metrics = {
        "loss": learner.losses,
        "updates": len(learner.losses),
        "samples": len(data),
        "wall_clock": time.time() - t0,
        "deviation_flags": deviation_flags(policy, augment),
    }
    return policy, metrics


def deviation_flags(policy: Policy, augment: AugmentConfig | None) -> list[str]:
    flags = []
    if augment is not None and augment.mode != "none" and needs_backbone(policy):
        flags.append("augmentation_control_stream_only")
    return flags


class PolicyAgent:
    """Runs a trained policy in the environment from rendered views only.

    Keeps per-view frame histories and the backbone features of every frame so
    each step extracts features for the new frames only.
    """

    needs_images = True

    def __init__(self, policy: Policy, backbone: PretrainedBackbone | None = None):
        self.policy = policy
        self.backbone = backbone
        self.spec = policy.spec
        self.layers = policy.required_layers()
        self.with_cls = policy.needs_cls()
        if needs_backbone(policy) and backbone is None:
            raise ConfigError("this policy needs a backbone to act")
        self.reset()

    def reset(self):
        self.frames: list[np.ndarray] = []  # (V, H, W, ch) per step
        self.feats: list[dict] = []  # per step: {key: (V, ...)}

    def observe(self, images: np.ndarray):
        self.frames.append(images)
        if needs_backbone(self.policy):
            grids, cls = self.backbone.extract(images, self.layers or None, with_cls=self.with_cls)
            f = {l: grids[l].permute(0, 3, 1, 2).contiguous() for l in self.layers}
            if cls is not None:
                f["cls"] = cls
            self.feats.append(f)

    def current_inputs(self):
        idx = stack_indices(len(self.frames) - 1, self.spec.frames)
        x = np.stack([self.frames[i] for i in idx], axis=1)  # (V, F, H, W, ch)
        images = images_to_tensor(x.reshape(1, -1, *x.shape[2:]), self.spec.encoder.input_channels)
        feats = {}
        if self.feats:
            for k in self.feats[-1]:
                t = torch.stack([self.feats[i][k] for i in idx], dim=1)  # (V, F, ...)
                feats[k] = t.reshape(1, -1, *t.shape[2:])
        return images, feats

    def act(self, state, images: np.ndarray) -> np.ndarray:
        self.observe(images)
        x, feats = self.current_inputs()
        out = self.policy.act(x if self.policy.needs_images() else None, feats)[0]
        return out


def _store_episode_features(features: FeatureStore, traj: Trajectory, agent, backbone):
    """Reuse the features the acting agent already extracted; compute the rest."""
    ids = [i for i, _ in traj.image_items()]
    V = traj.frames.shape[1]
    reused = agent.feats if isinstance(agent, PolicyAgent) else []
    k = len(reused)
    if k:
        grids = {l: torch.cat([f[l] for f in reused]).permute(0, 2, 3, 1) for l in features.layers}
        cls = torch.cat([f["cls"] for f in reused]) if features.with_cls else None
        features.add(ids[: k * V], grids, cls)
    if k < len(traj):
        rest = traj.frames[k:].reshape(-1, *traj.frames.shape[2:])
        features.add_live(backbone, ids[k * V:], rest)


def dagger_train(env: PickPlaceEnv, instances: Sequence[InstanceSpec], expert: Callable, spec: PolicySpec,
                 cfg: TrainConfig, backbone: PretrainedBackbone | None = None,
                 augment: AugmentConfig | None = None, rollout_policy: Callable | None = None,
                 views: Sequence[str] = ("global", "wrist")) -> tuple[Policy, dict]:
    """Alternate rollouts of the current policy with expert relabeling and MSE updates.

    ``expert(state)`` labels every visited state (terminal included); a failing
    expert call drops that episode.  ``rollout_policy`` substitutes the acting
    agent (the learner by default).
    """
    if not instances:
        raise InputError("DAgger needs at least one training instance")
    torch.manual_seed(cfg.seed)
    policy = Policy(spec)
    features = feature_store_for(policy)
    train_cfg = TrainConfig(**{**cfg.to_dict(), "use_cache": True})
    learner = Learner(policy, train_cfg, augment, backbone, features)
    (ep_rng,) = seed_streams(cfg.seed + 1, 1)
    data: DemoDataset | None = None
    sizes, returns, dropped = [], [], 0
    total = 0
    for it in range(cfg.dagger_iterations):
        new = []
        for r in range(cfg.rollouts_per_iteration):
            inst = instances[total % len(instances)]
            total += 1
            agent = rollout_policy or PolicyAgent(policy, backbone)
            seed = int(ep_rng.integers(0, 2**31 - 1))
            try:
                ep = rollout(env, inst, agent, seed, views, label_fn=expert, record=True, include_terminal=True)
            except Exception as e:  # expert could not label a visited state
                log.warning("dropping DAgger episode on %s: %s", inst.instance_id, e)
                dropped += 1
                continue
            traj = Trajectory(f"dagger-{cfg.seed}-{it:03d}-{r:03d}", ep.frames, ep.labels, inst.instance_id,
                              inst.category, "policy_rollout", inst.to_dict(), tuple(views))
            if needs_backbone(policy):
                _store_episode_features(features, traj, agent, backbone)
            new.append(traj)
            returns.append(ep.score)
        if new:
            if data is None:
                data = DemoDataset(new, spec.frames)
            else:
                data.extend(new)
        sizes.append(0 if data is None else len(data))
        if data is not None:
            learner.fit(data, steps=cfg.updates_per_iteration)
        log.info("DAgger iter %d: %d labeled states, last loss %.4g", it, sizes[-1],
                 learner.losses[-1] if learner.losses else float("nan"))
    metrics = {
        "loss": learner.losses,
        "dataset_sizes": sizes,
        "rollout_scores": returns,
        "dropped_episodes": dropped,
        "trajectories": total,
        "deviation_flags": deviation_flags(policy, augment),
    }
    metrics["dataset"] = data
    return policy, metrics
