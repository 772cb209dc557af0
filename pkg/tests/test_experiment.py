import json
import math

import numpy as np
import pytest
import torch
from PIL import Image

from spawnnet.errors import ComparisonError, ConfigError, InputError, StaleCacheError, StateError, \
    UnsupportedMethodError
from spawnnet.experiment import ExperimentConfig, emit_heatmaps, mean_stderr, subsample_per_instance
from spawnnet.experiment import runner
from spawnnet.experiment.cli import main
from spawnnet.experiment.heatmaps import handle_region_stats
from spawnnet.experiment.runner import RunRecord, comparison_rows, render_csv, rerender, write_record
from spawnnet.imitation.data import Trajectory

from conftest import tiny_experiment


@pytest.fixture(autouse=True)
def cache_root(tmp_path, monkeypatch):
    monkeypatch.setenv(runner.CACHE_ENV, str(tmp_path / "cache"))


def cfg_of(**kw) -> ExperimentConfig:
    return ExperimentConfig(tiny_experiment(**kw))


# -- configuration --------------------------------------------------------------

def test_presets_load_and_resolve():
    for name in ("desk", "full"):
        c = ExperimentConfig.load(name)
        assert c.policy_spec().mlp_hidden == [256, 128]
        assert c.bench["n_train"] == 3 and c.bench["n_demos"] == 90
    full = ExperimentConfig.load("full", {"method": "lfs_aug"})
    assert full.augment_config().mode == "sim_shift" and full.policy_spec().encoder.variant == "lfs"


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        cfg_of(method="vit_finetune")
    with pytest.raises(ConfigError):
        cfg_of(**{"policy.mlp_width": 3})
    with pytest.raises(ConfigError):
        cfg_of(**{"bench.n_demo": 3})
    with pytest.raises(ConfigError):
        cfg_of(**{"train.algorithm": "ppo"})
    with pytest.raises(ConfigError):
        cfg_of(**{"augment.output_size": 64, "method": "lfs_aug"})
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("method: [unclosed\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(bad)


def test_config_hash_ignores_seed_but_not_content(tmp_path):
    a = cfg_of()
    assert a.config_hash == cfg_of(**{"train.seed": 5}).config_hash
    assert a.config_hash != cfg_of(**{"train.steps": 5}).config_hash
    assert a.bench_hash == cfg_of(method="lfs_aug_d").bench_hash
    p = tmp_path / "c.yaml"
    p.write_text(a.dump())
    assert ExperimentConfig.load(p).config_hash == a.config_hash


def test_method_grid_channel_consistency():
    for m, (variant, ablation, aug) in runner.METHODS.items():
        c = cfg_of(method=m)
        enc = c.policy_spec().encoder
        assert enc.variant == variant and enc.ablation == ablation and c.augment_config().mode == aug
        assert enc.input_channels == (4 if variant.endswith("_depth") else 3)


# -- aggregation ----------------------------------------------------------------------

def welford(values):
    n, mean, m2 = 0, 0.0, 0.0
    for v in values:
        n += 1
        d = v - mean
        mean += d / n
        m2 += d * (v - mean)
    return mean, math.sqrt(m2 / (n - 1) / n) if n > 1 else None


@pytest.mark.parametrize("values", [[0.5], [0.2, 0.9, 0.4], list(np.random.default_rng(0).uniform(size=7))])
def test_mean_stderr_matches_one_pass_formula(values):
    m, s = mean_stderr(values)
    wm, ws = welford(values)
    assert abs(m - wm) <= 1e-12
    assert (s is None and ws is None) or abs(s - ws) <= 1e-12


def fake_record(run_id, cfg_hash, seed, seen, held, fp="fp", method="m"):
    ev = {"trials_per_instance": 1, "per_instance": {}, "trial_scores": {}, "splits": {},
          "seen": {"mean": seen, "stderr": None}, "heldout": {"mean": held, "stderr": None}}
    return RunRecord(run_id, cfg_hash, method, seed, fp, eval=ev)


def test_comparison_rows_and_renderings(tmp_path):
    recs = [fake_record("a0", "h1", 0, 1.0, 0.5, method="a"), fake_record("a1", "h1", 1, 0.5, 0.25, method="a"),
            fake_record("b0", "h2", 0, 0.75, 0.75, method="b")]
    rows = comparison_rows(recs)
    assert [r["method"] for r in rows] == ["a", "b"]
    assert rows[0]["seen_mean"] == 0.75 and rows[0]["seen_stderr"] == pytest.approx(0.25)
    assert rows[1]["n_seeds"] == 1 and rows[1]["seen_stderr"] is None
    csv_text = render_csv(rows)
    assert csv_text.splitlines()[0].startswith("method,config_hash,n_seeds,seen_mean")
    with pytest.raises(ComparisonError):
        comparison_rows(recs + [fake_record("c0", "h3", 0, 1, 1, fp="other")])
    single = comparison_rows(recs[2:])
    assert len(single) == 1


def test_records_are_append_only(tmp_path):
    r = fake_record("x", "h", 0, 1.0, 1.0)
    write_record(tmp_path, r)
    with pytest.raises(StateError):
        write_record(tmp_path, r)
    assert runner.read_records(tmp_path)[0] == r


# -- end-to-end on a tiny config --------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    import os

    root = tmp_path_factory.mktemp("run")
    old = os.environ.get(runner.CACHE_ENV)
    os.environ[runner.CACHE_ENV] = str(root / "cache")
    cfg = ExperimentConfig(tiny_experiment())
    records = runner.run(cfg, [0, 1], root / "out")
    yield cfg, records, root / "out"
    if old is None:
        os.environ.pop(runner.CACHE_ENV)
    else:
        os.environ[runner.CACHE_ENV] = old


def test_run_writes_records_summary_and_checkpoints(tiny_run):
    cfg, records, out = tiny_run
    assert len(records) == 2 and all(r.ok for r in records), [r.error for r in records]
    assert {r.seed for r in records} == {0, 1}
    assert (out / "config.yaml").exists() and (out / "tables" / "summary.csv").exists()
    for r in records:
        assert (out / r.checkpoint).exists() and len(r.metrics["loss"]) == 4
        assert r.report.seen is not None and set(r.wall_clock) >= {"collect", "cache", "train", "eval", "total"}
    row = comparison_rows(records)[0]
    assert row["records"].split() == [r.run_id for r in records]


def test_rerun_is_deterministic(tiny_run, tmp_path):
    cfg, records, out = tiny_run
    again = runner.run_seed(cfg, 0, tmp_path / "again")
    first = next(r for r in records if r.seed == 0)
    assert again.eval == first.eval and again.metrics["loss"] == first.metrics["loss"]


def test_checkpoint_round_trip_and_stale_rejection(tiny_run):
    cfg, records, out = tiny_run
    policy, stored = runner.load_checkpoint(out / records[0].checkpoint, cfg)
    assert stored.config_hash == cfg.config_hash
    payload = torch.load(out / records[0].checkpoint, weights_only=False)
    assert set(payload) == {"config_hash", "config", "encoder", "head"}
    assert any(k.startswith("adapters.") for k in payload["encoder"])
    with pytest.raises(StaleCacheError):
        runner.load_checkpoint(out / records[0].checkpoint, cfg.with_overrides({"train.steps": 99}))


def test_failed_seed_is_recorded_not_raised(tmp_path, monkeypatch):
    cfg = cfg_of()

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(runner, "train_policy", boom)
    recs = runner.run(cfg, [0, 1], tmp_path)
    assert all(not r.ok and "disk on fire" in r.error for r in recs)
    assert len(list((tmp_path / "records").glob("*.json"))) == 2


def test_compare_reuses_records_and_rerenders_identically(tiny_run):
    cfg, records, out = tiny_run
    rows = runner.compare([cfg], [0, 1], out)
    assert len(rows) == 1 and rows[0]["n_seeds"] == 2
    assert rerender(out) == (out / "tables" / "comparison.csv").read_text()


def test_compare_rejects_mismatched_splits(tmp_path):
    with pytest.raises(ComparisonError):
        runner.compare([cfg_of(), cfg_of(**{"bench.instance_seed": 1})], [0], tmp_path)


def test_demo_sweep_and_balanced_subsampling(tiny_run, tmp_path):
    cfg, _, _ = tiny_run
    rows = runner.demo_sweep(cfg, [1, 2], [0], tmp_path)
    assert [r["n_demos"] for r in rows] == [1, 2]
    with pytest.raises(InputError):
        runner.demo_sweep(cfg, [3], [0], tmp_path)


def test_subsample_counts_differ_by_at_most_one():
    trajs = [Trajectory(f"d{i}", np.zeros((1, 1, 2, 2, 3), np.uint8), np.zeros((1, 7)), f"inst-{i % 3}", "t")
             for i in range(90)]
    for n in (1, 30, 31, 59, 90):
        sub = subsample_per_instance(trajs, n, seed=n)
        counts = np.bincount([int(t.instance_id[-1]) for t in sub], minlength=3)
        assert counts.sum() == n and counts.max() - counts.min() <= 1
        assert len({t.traj_id for t in sub}) == n
    with pytest.raises(InputError):
        subsample_per_instance(trajs, 91)


def test_heatmaps(tiny_run, tmp_path):
    cfg, records, out = tiny_run
    policy, _ = runner.load_checkpoint(out / records[0].checkpoint)
    traj = runner.collect(cfg)[0]
    bb = runner.build_backbone(cfg.backbone_spec())
    s = emit_heatmaps(policy, traj, tmp_path / "h", bb)
    assert len(s["paths"]) == len(traj) and s["region"]["steps"] > 0
    img = np.asarray(Image.open(s["paths"][0]))
    assert img.shape == (32, 32, 3)
    with torch.no_grad():
        for p in policy.encoder.adapters[-1].proj.parameters():
            p.zero_()
    s0 = emit_heatmaps(policy, traj, tmp_path / "z", bb, alpha=0.5)
    for t, p in enumerate(s0["paths"]):
        expected = np.rint(0.5 * traj.frames[t, 0, ..., :3].astype(float)).astype(np.uint8)
        assert np.array_equal(np.asarray(Image.open(p)), expected)  # uniform (zero) overlay
    assert json.loads((tmp_path / "z" / "summary.json").read_text())["peak_norm"] == 0.0
    lfs, _ = runner.load_checkpoint(out / records[0].checkpoint)
    lfs_cfg = cfg_of(method="lfs_aug_d")
    from spawnnet.policy import Policy
    with pytest.raises(UnsupportedMethodError):
        emit_heatmaps(Policy(lfs_cfg.policy_spec()), traj, tmp_path / "l", bb)


def test_handle_region_statistic_by_hand():
    maps = np.zeros((1, 5, 5))
    maps[0, 2, 2] = 5.0
    s = handle_region_stats(maps, [(2.0, 2.0)], 0.5)
    assert s["handle_mean"] == 5.0 and s["image_mean"] == pytest.approx(0.2) and s["ratio"] == pytest.approx(25)


# -- command line -------------------------------------------------------------------------

def test_cli_exit_codes(tmp_path, capsys):
    cfg_file = tmp_path / "tiny.yaml"
    cfg_file.write_text(cfg_of().dump())
    assert main(["collect", "--config", str(cfg_file)]) == 0
    assert "2 demonstrations" in capsys.readouterr().out
    assert main(["collect", "--config", str(cfg_file), "--set", "method=nope"]) == 1
    assert main(["collect", "--config", str(tmp_path / "absent.yaml")]) == 1
    assert main(["collect", "--config", str(cfg_file), "--set", "novalue"]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.pt")]) == 2
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1


def test_cli_train_eval_heatmaps(tmp_path, capsys):
    cfg_file = tmp_path / "tiny.yaml"
    cfg_file.write_text(cfg_of().dump())
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg_file), "--out", str(out), "--set", "train.steps=2"]) == 0
    ckpt = json.loads(capsys.readouterr().out)["checkpoint"]
    assert main(["eval", "--checkpoint", ckpt]) == 0
    assert json.loads(capsys.readouterr().out)["seen"]["mean"] is not None
    assert main(["eval", "--checkpoint", ckpt, "--config", str(cfg_file)]) == 2  # stale: steps differ
    assert main(["heatmaps", "--checkpoint", ckpt, "--out", str(tmp_path / "h")]) == 0
    assert len(list((tmp_path / "h").glob("*.png"))) > 0
    assert main(["run", "--config", str(cfg_file), "--out", str(tmp_path / "r"), "--seeds", "0"]) == 0
    assert "spawnnet_d" in capsys.readouterr().out
    assert main(["compare", "--config", str(cfg_file), "--methods", "spawnnet_d", "frozen_cls",
                 "--out", str(tmp_path / "c")]) == 0
    text = capsys.readouterr().out
    assert "frozen_cls" in text and "heldout_mean" in text
    assert main(["sweep", "--config", str(cfg_file), "--counts", "1", "2", "--out", str(tmp_path / "s")]) == 0
    assert main(["cache", "--config", str(cfg_file)]) == 0
