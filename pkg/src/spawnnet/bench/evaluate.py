"""Episode rollouts and the seen/held-out evaluation harness with partial credit."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import InputError
from .world import VIEWS, EnvState, InstanceSpec, PickPlaceEnv

log = logging.getLogger(__name__)


@dataclass
class Episode:
    instance: InstanceSpec
    seed: int
    frames: np.ndarray | None  # (T, V, S, S, 4) uint8, one entry per labeled state
    actions: np.ndarray  # (T_exec, 7) executed actions
    labels: np.ndarray | None  # (T, 7) expert labels aligned with frames
    score: float
    success: bool
    grasped: bool

    @property
    def length(self) -> int:
        return len(self.actions)


def trial_seed(seed: int, instance_index: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, instance_index, trial]).generate_state(1)[0])


def rollout(env: PickPlaceEnv, instance: InstanceSpec, agent, seed: int, views: Sequence[str] = VIEWS,
            label_fn: Callable[[EnvState], np.ndarray] | None = None, record: bool = False,
            include_terminal: bool = False) -> Episode:
    """Run one episode. With ``label_fn`` every visited state is labeled."""
    state = env.reset(instance, seed)
    agent.reset()
    render = record or getattr(agent, "needs_images", True)
    frames, actions, labels = [], [], []
    while True:
        images = env.render_views(state, views) if render else None
        if label_fn is not None:
            labels.append(np.asarray(label_fn(state), dtype=np.float32))
        if record:
            frames.append(images)
        if state.done:
            break
        action = np.asarray(agent.act(state, images), dtype=np.float32)
        actions.append(action)
        state, done, _ = env.step(state, action)
        if done and not include_terminal:
            break
    if label_fn is not None and not include_terminal and len(labels) > len(actions):
        labels = labels[: len(actions)]
    return Episode(
        instance=instance,
        seed=seed,
        frames=np.stack(frames) if record else None,
        actions=np.stack(actions) if actions else np.zeros((0, 7), np.float32),
        labels=np.stack(labels) if labels else None,
        score=state.score(),
        success=state.success,
        grasped=state.grasped_ever,
    )


def _stderr(values: Sequence[float]) -> float | None:
    if len(values) < 2:
        return None
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


@dataclass
class EvalReport:
    trials_per_instance: int
    trial_scores: dict[str, list[float]] = field(default_factory=dict)
    splits: dict[str, str] = field(default_factory=dict)

    @property
    def per_instance(self) -> dict[str, float]:
        return {k: float(np.mean(v)) for k, v in self.trial_scores.items()}

    def _split_rates(self, split: str) -> list[float]:
        return [r for k, r in self.per_instance.items() if self.splits[k] == split]

    def mean(self, split: str) -> float | None:
        rates = self._split_rates(split)
        return float(np.mean(rates)) if rates else None

    def stderr(self, split: str) -> float | None:
        return _stderr(self._split_rates(split))

    @property
    def seen(self) -> float | None:
        return self.mean("train")

    @property
    def heldout(self) -> float | None:
        return self.mean("heldout")

    def to_dict(self) -> dict:
        return {
            "trials_per_instance": self.trials_per_instance,
            "per_instance": self.per_instance,
            "trial_scores": self.trial_scores,
            "splits": self.splits,
            "seen": {"mean": self.seen, "stderr": self.stderr("train")},
            "heldout": {"mean": self.heldout, "stderr": self.stderr("heldout")},
        }

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        return cls(d["trials_per_instance"], {k: list(v) for k, v in d["trial_scores"].items()}, dict(d["splits"]))


def check_split_hygiene(instances: Iterable[InstanceSpec], train_keys: Iterable[tuple]):
    """Raise if a held-out instance's appearance occurs in the training metadata."""
    seen = set(train_keys)
    for inst in instances:
        if inst.split == "heldout" and inst.key() in seen:
            raise InputError(f"held-out instance {inst.instance_id} appears in the training data")


def evaluate(agent, env: PickPlaceEnv, instances: Sequence[InstanceSpec], trials_per_instance: int = 5,
             seed: int = 0, train_keys: Iterable[tuple] | None = None,
             views: Sequence[str] = VIEWS) -> EvalReport:
    """Score each trial 0 / 0.5 (grasp only) / 1 (success); aggregate per instance, then per split."""
    if trials_per_instance < 1:
        raise InputError("trials_per_instance must be >= 1")
    if train_keys is not None:
        check_split_hygiene(instances, train_keys)
    report = EvalReport(trials_per_instance)
    for i, inst in enumerate(instances):
        scores = []
        for t in range(trials_per_instance):
            ep = rollout(env, inst, agent, trial_seed(seed, i, t), views)
            scores.append(ep.score)
        report.trial_scores[inst.instance_id] = scores
        report.splits[inst.instance_id] = inst.split
        log.info("eval %s: %.2f", inst.instance_id, float(np.mean(scores)))
    return report
