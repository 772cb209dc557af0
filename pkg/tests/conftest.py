import numpy as np
import pytest
import torch

from spawnnet.backbone import BackboneSpec, build_backbone

torch.set_num_threads(1)


def tiny_backbone_spec(**kw) -> BackboneSpec:
    base = dict(embed_dim=24, num_layers=3, num_heads=2, mlp_ratio=2, extraction_layers=(1, 2, 3), pos_grid=4,
                init_seed=3)
    base.update(kw)
    return BackboneSpec(**base)


@pytest.fixture(scope="session")
def tiny_backbone():
    return build_backbone(tiny_backbone_spec())


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_experiment(**overrides) -> dict:
    """A complete experiment config small enough to train in seconds."""
    raw = {
        "method": "spawnnet_d",
        "image_size": 32,
        "backbone": {"embed_dim": 24, "num_layers": 3, "num_heads": 2, "mlp_ratio": 2,
                     "extraction_layers": [1, 2, 3], "pos_grid": 4, "init_seed": 3},
        "policy": {"mlp_hidden": [16, 16], "frames": 2, "projection_width": 4, "control_width": 4, "lfs_width": 8},
        "train": {"algorithm": "bc", "steps": 4, "batch_size": 4},
        "bench": {"n_train": 2, "n_heldout": 2, "n_demos": 2, "trials_per_instance": 1},
    }
    for k, v in overrides.items():
        cur = raw
        parts = k.split(".")
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = v
    return raw


# acceptance verdicts, echoed in the terminal summary so they survive output capture
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(n: int, ok: bool, detail: str):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
