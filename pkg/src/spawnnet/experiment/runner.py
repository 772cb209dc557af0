"""Orchestration: demos -> feature cache -> train -> evaluate, with persisted run records.

Run directory layout::

    <out>/config.yaml            copy of the (last) config run into this directory
    <out>/records/<run_id>.json  one immutable record per (config, seed) attempt
    <out>/checkpoints/<run_id>.pt
    <out>/tables/*.csv, *.txt
    <out>/heatmaps/...

Demonstrations and backbone features live under the cache root
(``$SPAWNNET_CACHE_ROOT``, default ``~/.cache/spawnnet``), keyed by the hash of
everything that determines them.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..backbone import PretrainedBackbone, build_backbone
from ..bench.evaluate import EvalReport, evaluate
from ..bench.expert import scripted_expert
from ..bench.world import InstanceSpec, PickPlaceEnv, generate_instances, split_fingerprint
from ..cache import FeatureStore, build_cache
from ..errors import ComparisonError, InputError, StaleCacheError, StateError
from ..imitation.data import Trajectory, collect_demos, load_trajectories, save_trajectory
from ..imitation.train import PolicyAgent, bc_train, dagger_train, needs_backbone
from ..policy import Policy
from .config import METHODS, ExperimentConfig

log = logging.getLogger(__name__)

CACHE_ENV = "SPAWNNET_CACHE_ROOT"


def cache_root() -> Path:
    return Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "spawnnet")


def _write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w") as f:
        f.write(text)
    os.replace(tmp, path)


# -- benchmark data ---------------------------------------------------------

def bench_instances(cfg: ExperimentConfig) -> list[InstanceSpec]:
    b = cfg.bench
    return generate_instances(cfg.category(), b["n_train"], b["n_heldout"], b["instance_seed"])


def make_env(cfg: ExperimentConfig) -> PickPlaceEnv:
    return PickPlaceEnv(cfg.category(), cfg.image_size)


def views(cfg: ExperimentConfig) -> tuple[str, ...]:
    return ("global", "wrist")[: cfg.raw["policy"]["views"]]


def demo_dir(cfg: ExperimentConfig) -> Path:
    return cache_root() / "demos" / cfg.bench_hash


def collect(cfg: ExperimentConfig, force: bool = False) -> list[Trajectory]:
    """Expert demonstrations on the training instances, stored once per bench hash."""
    d = demo_dir(cfg)
    stamp = d / "COMPLETE"
    if stamp.exists() and not force:
        return load_trajectories(d)
    b = cfg.bench
    train = [i for i in bench_instances(cfg) if i.split == "train"]
    trajs = collect_demos(make_env(cfg), train, b["n_demos"], b["demo_seed"],
                          action_noise=b["action_noise"],
                          gripper_noise=b["gripper_noise"], views=views(cfg))
    for t in trajs:
        save_trajectory(t, d)
    _write_atomic(stamp, cfg.bench_hash + "\n")
    return trajs


def feature_cache_dir(cfg: ExperimentConfig, backbone: PretrainedBackbone) -> Path:
    return cache_root() / "features" / f"{backbone.spec_hash}-{cfg.bench_hash}"


def image_ids(trajs: Sequence[Trajectory]) -> list[str]:
    return [i for t in trajs for i, _ in t.image_items()]


def build_feature_cache(cfg: ExperimentConfig, trajs: Sequence[Trajectory], backbone: PretrainedBackbone,
                        batch_size: int = 64) -> Path:
    path = feature_cache_dir(cfg, backbone)
    items = ((i, im) for t in trajs for i, im in t.image_items())
    build_cache(backbone, items, path, batch_size=batch_size, with_cls=True)
    return path


def load_features(cfg: ExperimentConfig, trajs, backbone: PretrainedBackbone, policy: Policy) -> FeatureStore | None:
    if not needs_backbone(policy):
        return None
    path = build_feature_cache(cfg, trajs, backbone)
    return FeatureStore.from_cache(path, image_ids(trajs), policy.required_layers(), policy.needs_cls(),
                                   spec_hash=backbone.spec_hash)


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, policy: Policy, cfg: ExperimentConfig):
    """Trainable weights only, namespaced by module; the frozen backbone is rebuilt from the config."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "config_hash": cfg.config_hash,
        "config": cfg.raw,
        "encoder": policy.encoder.state_dict(),
        "head": policy.head.state_dict(),
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, cfg: ExperimentConfig | None = None) -> tuple[Policy, ExperimentConfig]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    stored = ExperimentConfig(payload["config"])
    if stored.config_hash != payload["config_hash"]:
        raise StaleCacheError(f"checkpoint {path} is internally inconsistent")
    if cfg is not None and cfg.config_hash != payload["config_hash"]:
        raise StaleCacheError(f"checkpoint {path} was trained with config {payload['config_hash']}, "
                              f"not {cfg.config_hash}")
    policy = Policy(stored.policy_spec())
    policy.encoder.load_state_dict(payload["encoder"])
    policy.head.load_state_dict(payload["head"])
    return policy, stored


# -- run records ------------------------------------------------------------

@dataclass
class RunRecord:
    run_id: str
    config_hash: str
    method: str
    seed: int
    split_fingerprint: str
    metrics: dict = field(default_factory=dict)
    eval: dict | None = None
    wall_clock: dict = field(default_factory=dict)
    deviation_flags: list = field(default_factory=list)
    error: str | None = None
    checkpoint: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.error is None and self.eval is not None

    @property
    def report(self) -> EvalReport:
        return EvalReport.from_dict(self.eval)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))


def write_record(out_dir, record: RunRecord) -> Path:
    """Records are append-only: an existing id is never overwritten."""
    path = Path(out_dir) / "records" / f"{record.run_id}.json"
    if path.exists():
        raise StateError(f"record {record.run_id} already exists")
    _write_atomic(path, record.to_json())
    return path


def read_records(out_dir) -> list[RunRecord]:
    return [RunRecord.from_json(p.read_text()) for p in sorted((Path(out_dir) / "records").glob("*.json"))]


def _new_run_id(out_dir, cfg: ExperimentConfig, seed: int) -> str:
    return _unique_id(out_dir, f"{cfg.method.replace(':', '-')}-{cfg.config_hash[:8]}-s{seed}")


def _unique_id(out_dir, base: str) -> str:
    n = 0
    while (Path(out_dir) / "records" / f"{base}-r{n}.json").exists():
        n += 1
    return f"{base}-r{n}"


# -- training and evaluation ------------------------------------------------

def train_policy(cfg: ExperimentConfig, seed: int, trajs: Sequence[Trajectory],
                 backbone: PretrainedBackbone | None) -> tuple[Policy, dict]:
    spec = cfg.policy_spec()
    tcfg = cfg.train_config(seed)
    augment = cfg.augment_config()
    if cfg.algorithm == "dagger":
        category = cfg.category()
        train = [i for i in bench_instances(cfg) if i.split == "train"]
        policy, metrics = dagger_train(make_env(cfg), train, lambda s: scripted_expert(s, category), spec, tcfg,
                                       backbone, augment, views=views(cfg))
        metrics.pop("dataset", None)
        return policy, metrics
    probe = Policy(spec)
    features = load_features(cfg, trajs, backbone, probe) if tcfg.use_cache else None
    return bc_train(trajs, spec, tcfg, augment, backbone, features)


def evaluate_policy(cfg: ExperimentConfig, policy: Policy, backbone: PretrainedBackbone | None,
                    trajs: Sequence[Trajectory] | None = None) -> EvalReport:
    b = cfg.bench
    train_keys = [t.instance_key() for t in trajs] if trajs else None
    agent = PolicyAgent(policy, backbone if needs_backbone(policy) else None)
    return evaluate(agent, make_env(cfg), bench_instances(cfg), b["trials_per_instance"], b["eval_seed"],
                    train_keys=train_keys, views=views(cfg))


def run_seed(cfg: ExperimentConfig, seed: int, out_dir, backbone: PretrainedBackbone | None = None) -> RunRecord:
    """One seed end to end; any stage failure is captured in the record."""
    out_dir = Path(out_dir)
    record = RunRecord(_new_run_id(out_dir, cfg, seed), cfg.config_hash, cfg.method, seed,
                       split_fingerprint(bench_instances(cfg)))
    clock = record.wall_clock
    try:
        t0 = time.time()
        trajs = collect(cfg)
        clock["collect"] = time.time() - t0
        spec = cfg.policy_spec()
        probe = Policy(spec)
        if backbone is None and needs_backbone(probe):
            backbone = build_backbone(cfg.backbone_spec())
        t0 = time.time()
        if needs_backbone(probe) and cfg.algorithm == "bc" and cfg.train_config().use_cache:
            build_feature_cache(cfg, trajs, backbone)
        clock["cache"] = time.time() - t0
        t0 = time.time()
        policy, metrics = train_policy(cfg, seed, trajs, backbone)
        clock["train"] = time.time() - t0
        record.deviation_flags = list(metrics.pop("deviation_flags", []))
        record.metrics = metrics
        ckpt = out_dir / "checkpoints" / f"{record.run_id}.pt"
        save_checkpoint(ckpt, policy, cfg)
        record.checkpoint = str(ckpt.relative_to(out_dir))
        t0 = time.time()
        record.eval = evaluate_policy(cfg, policy, backbone, trajs).to_dict()
        clock["eval"] = time.time() - t0
    except Exception as e:  # recorded, not raised: other seeds continue
        log.error("seed %d of %s failed: %s", seed, cfg.method, e)
        record.error = f"{type(e).__name__}: {e}\n{traceback.format_exc(limit=5)}"
    clock["total"] = sum(v for k, v in clock.items() if k != "total")
    write_record(out_dir, record)
    return record


def _seed_worker(args):
    raw, seed, out_dir = args
    torch.set_num_threads(1)
    return run_seed(ExperimentConfig(raw), seed, out_dir)


def run(cfg: ExperimentConfig, seeds: Sequence[int], out_dir, workers: int = 1,
        backbone: PretrainedBackbone | None = None) -> list[RunRecord]:
    """Train and evaluate every seed; writes records plus an aggregate table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_atomic(out_dir / "config.yaml", cfg.dump())
    if workers > 1 and len(seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor

        collect(cfg)  # shared inputs are materialized once before forking
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_seed_worker, [(cfg.raw, s, str(out_dir)) for s in seeds]))
    else:
        records = [run_seed(cfg, s, out_dir, backbone) for s in seeds]
    write_table(out_dir, "summary", records)
    return records


# -- aggregation and tables -------------------------------------------------

def mean_stderr(values: Sequence[float]) -> tuple[float | None, float | None]:
    """Mean and standard error (sample std / sqrt(n)); stderr is None for fewer than two values."""
    if not values:
        return None, None
    mean = math.fsum(values) / len(values)
    if len(values) < 2:
        return mean, None
    var = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, math.sqrt(var / len(values))


TABLE_COLUMNS = ["method", "config_hash", "n_seeds", "seen_mean", "seen_stderr", "heldout_mean",
                 "heldout_stderr", "records"]


def comparison_rows(records: Sequence[RunRecord], label_key: str = "method") -> list[dict]:
    """One row per config (in first-appearance order), aggregated over successful seeds."""
    ok = [r for r in records if r.ok]
    fps = {r.split_fingerprint for r in ok}
    if len(fps) > 1:
        raise ComparisonError(f"records span {len(fps)} different bench splits; refusing to compare")
    groups: dict[str, list[RunRecord]] = {}
    for r in ok:
        groups.setdefault(r.config_hash, []).append(r)
    rows = []
    for h, rs in groups.items():
        rs = sorted(rs, key=lambda r: (r.seed, r.run_id))
        seen = mean_stderr([r.eval["seen"]["mean"] for r in rs])
        held = mean_stderr([r.eval["heldout"]["mean"] for r in rs])
        label = rs[0].extra.get("label", rs[0].method) if label_key == "method" else rs[0].extra[label_key]
        rows.append({
            "method": label,
            "config_hash": h,
            "n_seeds": len(rs),
            "seen_mean": seen[0],
            "seen_stderr": seen[1],
            "heldout_mean": held[0],
            "heldout_stderr": held[1],
            "records": " ".join(r.run_id for r in rs),
        })
    return rows


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def render_csv(rows: Sequence[dict], columns: Sequence[str] = TABLE_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                    for c in columns])
    return buf.getvalue()


def render_text(rows: Sequence[dict], columns: Sequence[str] = TABLE_COLUMNS) -> str:
    cols = [c for c in columns if c != "records"]
    cells = [[c for c in cols]] + [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_table(out_dir, name: str, records: Sequence[RunRecord], label_key: str = "method",
                columns: Sequence[str] = TABLE_COLUMNS) -> tuple[Path, Path]:
    rows = comparison_rows(records, label_key)
    if label_key != "method":
        for r in rows:
            r[label_key] = r.pop("method")
    d = Path(out_dir) / "tables"
    _write_atomic(d / f"{name}.csv", render_csv(rows, columns))
    _write_atomic(d / f"{name}.txt", render_text(rows, columns))
    return d / f"{name}.csv", d / f"{name}.txt"


def compare(configs: Sequence[ExperimentConfig], seeds: Sequence[int], out_dir, reuse: bool = True,
            workers: int = 1) -> list[dict]:
    """Run (or reuse recorded runs of) every config and tabulate seen/held-out success."""
    if not configs:
        raise InputError("compare needs at least one config")
    fps = {split_fingerprint(bench_instances(c)) for c in configs}
    if len(fps) > 1:
        raise ComparisonError("configs do not share the same bench splits")
    out_dir = Path(out_dir)
    existing = read_records(out_dir) if (reuse and (out_dir / "records").exists()) else []
    backbone = None
    chosen: list[RunRecord] = []
    for cfg in configs:
        for seed in seeds:
            prior = [r for r in existing if r.config_hash == cfg.config_hash and r.seed == seed and r.ok]
            if prior:
                chosen.append(prior[-1])
                continue
            if backbone is None and workers <= 1:
                backbone = build_backbone(cfg.backbone_spec())
            chosen.append(run_seed(cfg, seed, out_dir, backbone))
    write_table(out_dir, "comparison", chosen)
    return comparison_rows(chosen)


def rerender(out_dir, name: str = "comparison") -> str:
    """Rebuild a table's CSV from the records it cites (for provenance checks)."""
    out_dir = Path(out_dir)
    text = (out_dir / "tables" / f"{name}.csv").read_text()
    ids = [i for row in csv.DictReader(io.StringIO(text)) for i in row["records"].split()]
    recs = [RunRecord.from_json((out_dir / "records" / f"{i}.json").read_text()) for i in ids]
    return render_csv(comparison_rows(recs))


# -- demonstration-count sweep ----------------------------------------------

def subsample_per_instance(trajs: Sequence[Trajectory], n: int, seed: int = 0) -> list[Trajectory]:
    """n trajectories drawn so per-instance counts differ by at most one."""
    if n > len(trajs):
        raise InputError(f"asked for {n} demonstrations but only {len(trajs)} exist")
    if n < 1:
        raise InputError("demonstration count must be positive")
    rng = np.random.default_rng(seed)
    groups: dict[str, list[int]] = {}
    for i, t in enumerate(trajs):
        groups.setdefault(t.instance_id, []).append(i)
    order = {k: list(rng.permutation(v)) for k, v in sorted(groups.items())}
    picked: list[int] = []
    keys = list(order)
    while len(picked) < n:
        progressed = False
        for k in rng.permutation(len(keys)):
            if len(picked) == n:
                break
            if order[keys[k]]:
                picked.append(int(order[keys[k]].pop(0)))
                progressed = True
        if not progressed:
            break
    return [trajs[i] for i in sorted(picked)]


SWEEP_COLUMNS = ["n_demos", "config_hash", "n_seeds", "seen_mean", "seen_stderr", "heldout_mean",
                 "heldout_stderr", "records"]


def demo_sweep(cfg: ExperimentConfig, demo_counts: Sequence[int], seeds: Sequence[int], out_dir) -> list[dict]:
    """Held-out success as a function of the number of demonstrations."""
    trajs = collect(cfg)
    for n in demo_counts:
        if n > len(trajs):
            raise InputError(f"demo count {n} exceeds the {len(trajs)} available demonstrations")
    out_dir = Path(out_dir)
    backbone = None
    records = []
    for n in demo_counts:
        for seed in seeds:
            subset = subsample_per_instance(trajs, n, seed)
            rec = RunRecord(_unique_id(out_dir, f"sweep-{cfg.config_hash[:8]}-n{n}-s{seed}"),
                            f"{cfg.config_hash}-n{n}", cfg.method, seed, split_fingerprint(bench_instances(cfg)),
                            extra={"n_demos": n})
            try:
                probe = Policy(cfg.policy_spec())
                if backbone is None and needs_backbone(probe):
                    backbone = build_backbone(cfg.backbone_spec())
                t0 = time.time()
                policy, metrics = train_policy(cfg, seed, subset, backbone)
                rec.wall_clock["train"] = time.time() - t0
                rec.deviation_flags = list(metrics.pop("deviation_flags", []))
                rec.metrics = metrics
                t0 = time.time()
                rec.eval = evaluate_policy(cfg, policy, backbone, subset).to_dict()
                rec.wall_clock["eval"] = time.time() - t0
            except Exception as e:
                log.error("sweep n=%d seed %d failed: %s", n, seed, e)
                rec.error = f"{type(e).__name__}: {e}"
            write_record(out_dir, rec)
            records.append(rec)
    write_table(out_dir, "demo_sweep", records, label_key="n_demos", columns=SWEEP_COLUMNS)
    rows = comparison_rows(records, label_key="n_demos")
    for r in rows:
        r["n_demos"] = r.pop("method")
    return rows


def method_configs(base: ExperimentConfig, methods: Sequence[str]) -> list[ExperimentConfig]:
    for m in methods:
        if m not in METHODS:
            raise InputError(f"unknown method {m!r}")
    return [base.with_overrides({"method": m}) for m in methods]
