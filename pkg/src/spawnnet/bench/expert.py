"""Analytic experts and trivial reference agents for the pick-and-place world."""
from __future__ import annotations

import numpy as np

from .world import CategoryConfig, EnvState


def scripted_expert(state: EnvState, cfg: CategoryConfig) -> np.ndarray:
    """Proportional controller: reach the handle, grasp, carry to the goal, release.

    The gripper closes on the final approach step (the one that lands on the
    handle), so the grasp happens on arrival.

    Returns a 7-vector (dx, dy, dz, rotations, gripper) with planar motion in
    units of ``max_step`` clipped to [-1, 1].
    """
    action = np.zeros(7, dtype=np.float32)
    if not state.grasped:
        diff = state.handle() - state.gripper
        action[:2] = np.clip(diff / cfg.max_step, -1.0, 1.0)
        if np.linalg.norm(diff) <= cfg.max_step:
            action[6] = 1.0  # this step lands on the handle: close on arrival
        return action
    near_center = np.all(np.abs(state.obj_pos - state.goal_center) <= 0.3 * state.goal_half)
    if state.in_goal() and near_center:
        return action  # release
    action[:2] = np.clip((state.goal_center - state.obj_pos) / cfg.max_step, -1.0, 1.0)
    action[6] = 1.0
    return action


class ExpertAgent:
    """Privileged agent that reads the true state instead of images."""

    needs_images = False

    def __init__(self, cfg: CategoryConfig):
        self.cfg = cfg

    def reset(self):
        pass

    def act(self, state: EnvState, images=None) -> np.ndarray:
        return scripted_expert(state, self.cfg)


class RandomAgent:
    needs_images = False

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def reset(self):
        pass

    def act(self, state, images=None):
        a = np.zeros(7, dtype=np.float32)
        a[:2] = self.rng.uniform(-1, 1, 2)
        a[6] = float(self.rng.uniform() > 0.5)
        return a


class GraspOnlyAgent(ExpertAgent):
    """Follows the expert until the object is held, then keeps still: scores 0.5."""

    def act(self, state, images=None):
        if state.grasped:
            a = np.zeros(7, dtype=np.float32)
            a[6] = 1.0
            return a
        return scripted_expert(state, self.cfg)


class NoisyExpertAgent(ExpertAgent):
    """Expert whose executed actions are perturbed.

    Planar motion gets Gaussian noise of std ``noise``; before the object is
    held, the gripper command is flipped with probability ``gripper_noise``
    (premature closes and late grasps).  Only the executed action is noisy;
    demonstrations are still labeled with the clean expert action at every
    visited state, so the data covers recoveries from off-nominal states.
    """

    def __init__(self, cfg: CategoryConfig, noise: float, seed: int = 0, gripper_noise: float = 0.0):
        super().__init__(cfg)
        self.noise = noise
        self.gripper_noise = gripper_noise
        self.rng = np.random.default_rng(seed)

    def act(self, state, images=None):
        a = scripted_expert(state, self.cfg)
        if self.noise > 0:
            a[:2] = np.clip(a[:2] + self.rng.normal(0.0, self.noise, 2), -1.0, 1.0)
        if self.gripper_noise > 0 and not state.grasped and self.rng.random() < self.gripper_noise:
            a[6] = 1.0 - a[6]
        return a
