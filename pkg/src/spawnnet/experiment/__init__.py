"""Experiment configuration, orchestration, reporting and the command-line entry point."""
from .config import METHODS, ExperimentConfig
from .heatmaps import emit_heatmaps, handle_region_stats
from .runner import (RunRecord, cache_root, collect, compare, demo_sweep, load_checkpoint, mean_stderr,
                     read_records, run, save_checkpoint, subsample_per_instance)
