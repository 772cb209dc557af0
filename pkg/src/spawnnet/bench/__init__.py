"""Desk-scale categorical generalization benchmark."""
from .evaluate import EvalReport, Episode, evaluate, rollout, trial_seed
from .expert import ExpertAgent, GraspOnlyAgent, NoisyExpertAgent, RandomAgent, scripted_expert
from .world import (
    VIEWS,
    CategoryConfig,
    EnvState,
    InstanceSpec,
    PickPlaceEnv,
    generate_instances,
    load_category,
    split_fingerprint,
)
