"""Augmentation, demonstrations, and imitation training."""
from .augment import AugmentConfig, augment, augment_images
from .data import DemoDataset, Trajectory, collect_demos, load_trajectories, load_trajectory, save_trajectory
from .train import PolicyAgent, TrainConfig, bc_train, dagger_train, mse_loss
