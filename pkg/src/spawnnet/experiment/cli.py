"""Command-line entry point.

    spawnnet collect  --config desk
    spawnnet cache    --config desk
    spawnnet train    --config desk --seed 0 --out runs/desk
    spawnnet eval     --checkpoint runs/desk/checkpoints/<id>.pt
    spawnnet run      --config desk --seeds 0 1 2 --out runs/desk
    spawnnet compare  --config desk --methods spawnnet_d spawnnet lfs_aug_d frozen_cls --out runs/grid
    spawnnet heatmaps --checkpoint runs/desk/checkpoints/<id>.pt --out runs/desk/heatmaps
    spawnnet sweep    --config desk --counts 30 60 90 --out runs/sweep

Any config key can be overridden with ``--set section.key=value`` (values are
parsed as YAML).  Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from ..errors import ConfigError, SpawnNetError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("spawnnet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = yaml.safe_load(v)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse value for {k}: {e}") from None
    return out


def _config(args):
    from .config import ExperimentConfig

    return ExperimentConfig.load(args.config, parse_overrides(args.set))


def cmd_collect(args):
    from .runner import collect, demo_dir

    cfg = _config(args)
    trajs = collect(cfg, force=args.force)
    print(f"{len(trajs)} demonstrations ({sum(len(t) for t in trajs)} states) in {demo_dir(cfg)}")


def cmd_cache(args):
    from ..backbone import build_backbone
    from .runner import build_feature_cache, collect

    cfg = _config(args)
    trajs = collect(cfg)
    path = build_feature_cache(cfg, trajs, build_backbone(cfg.backbone_spec()))
    print(f"feature cache: {path}")


def cmd_train(args):
    from ..backbone import build_backbone
    from ..imitation.train import needs_backbone
    from ..policy import Policy
    from .runner import _unique_id, collect, save_checkpoint, train_policy

    cfg = _config(args)
    trajs = collect(cfg)
    backbone = build_backbone(cfg.backbone_spec()) if needs_backbone(Policy(cfg.policy_spec())) else None
    policy, metrics = train_policy(cfg, args.seed, trajs, backbone)
    out = Path(args.out)
    run_id = _unique_id(out, f"{cfg.method.replace(':', '-')}-{cfg.config_hash[:8]}-s{args.seed}")
    path = out / "checkpoints" / f"{run_id}.pt"
    save_checkpoint(path, policy, cfg)
    print(json.dumps({"checkpoint": str(path), "updates": len(metrics["loss"]),
                      "final_loss": metrics["loss"][-1] if metrics["loss"] else None}))


def cmd_eval(args):
    from ..backbone import build_backbone
    from ..imitation.train import needs_backbone
    from .runner import collect, evaluate_policy, load_checkpoint

    expected = _config(args) if args.config else None
    policy, cfg = load_checkpoint(args.checkpoint, expected)
    backbone = build_backbone(cfg.backbone_spec()) if needs_backbone(policy) else None
    report = evaluate_policy(cfg, policy, backbone, collect(cfg))
    print(json.dumps(report.to_dict(), indent=1))


def _print_rows(out_dir, name):
    print((Path(out_dir) / "tables" / f"{name}.txt").read_text(), end="")


def cmd_run(args):
    from .runner import run

    records = run(_config(args), args.seeds, args.out, workers=args.workers)
    _print_rows(args.out, "summary")
    failed = [r for r in records if not r.ok]
    for r in failed:
        log.error("%s failed: %s", r.run_id, r.error.splitlines()[0])
    if failed:
        raise RuntimeError(f"{len(failed)} of {len(records)} seeds failed")


def cmd_compare(args):
    from .config import ExperimentConfig
    from .runner import compare, method_configs

    overrides = parse_overrides(args.set)
    configs = [ExperimentConfig.load(c, overrides) for c in args.config]
    if args.methods:
        if len(configs) != 1:
            raise ConfigError("--methods expands a single --config")
        configs = method_configs(configs[0], args.methods)
    compare(configs, args.seeds, args.out, reuse=not args.no_reuse)
    _print_rows(args.out, "comparison")


def cmd_heatmaps(args):
    from ..backbone import build_backbone
    from ..imitation.data import collect_demos, load_trajectory
    from .heatmaps import emit_heatmaps
    from .runner import bench_instances, load_checkpoint, make_env, views

    expected = _config(args) if args.config else None
    policy, cfg = load_checkpoint(args.checkpoint, expected)
    if args.trajectory:
        traj = load_trajectory(args.trajectory)
    else:  # an expert episode on the first held-out instance
        heldout = [i for i in bench_instances(cfg) if i.split == "heldout"]
        traj = collect_demos(make_env(cfg), heldout[:1], 1, seed=args.seed, views=views(cfg), prefix="heldout")[0]
    view_size = 1.0 if args.view == 0 else cfg.category().wrist_window
    radius = cfg.category().grasp_radius / view_size * cfg.image_size
    summary = emit_heatmaps(policy, traj, args.out, build_backbone(cfg.backbone_spec()), view=args.view,
                            handle_radius_px=radius)
    print(json.dumps({k: v for k, v in summary.items() if k not in ("maps", "paths", "files")}, indent=1))


def cmd_sweep(args):
    from .runner import demo_sweep

    demo_sweep(_config(args), args.counts, args.seeds, args.out)
    _print_rows(args.out, "demo_sweep")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spawnnet", description=__doc__.split("\n\n")[0].strip() or None)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help, config=True, config_required=True, out=False, seeds=False):
        sp = sub.add_parser(name, help=help)
        if config:
            sp.add_argument("--config", required=config_required,
                            help="YAML file or preset name (desk, full)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        if out:
            sp.add_argument("--out", default="runs/latest", help="run directory")
        if seeds:
            sp.add_argument("--seeds", type=int, nargs="+", default=[0])
        sp.set_defaults(fn=fn)
        return sp

    add("collect", cmd_collect, "record scripted-expert demonstrations").add_argument("--force", action="store_true")
    add("cache", cmd_cache, "extract and store frozen-backbone features for the demonstrations")
    add("train", cmd_train, "train one policy and save a checkpoint", out=True).add_argument(
        "--seed", type=int, default=0)
    ev = add("eval", cmd_eval, "evaluate a checkpoint on seen and held-out instances", config_required=False)
    ev.add_argument("--checkpoint", required=True)
    r = add("run", cmd_run, "train and evaluate over seeds; writes records and a summary table",
            out=True, seeds=True)
    r.add_argument("--workers", type=int, default=1, help="seeds run in parallel processes")
    c = sub.add_parser("compare", help="tabulate several methods or configs on shared splits")
    c.add_argument("--config", nargs="+", required=True)
    c.add_argument("--methods", nargs="+", help="method tags to expand a single config into")
    c.add_argument("--set", action="append", metavar="KEY=VALUE")
    c.add_argument("--out", default="runs/compare")
    c.add_argument("--seeds", type=int, nargs="+", default=[0])
    c.add_argument("--no-reuse", action="store_true", help="retrain even if matching records exist")
    c.set_defaults(fn=cmd_compare)
    h = add("heatmaps", cmd_heatmaps, "write adapter feature-norm overlays for a trajectory",
            config_required=False)
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--trajectory", help="stored trajectory directory (default: fresh held-out expert episode)")
    h.add_argument("--out", default="runs/heatmaps")
    h.add_argument("--view", type=int, default=0)
    h.add_argument("--seed", type=int, default=0)
    s = add("sweep", cmd_sweep, "held-out success vs number of demonstrations", out=True, seeds=True)
    s.add_argument("--counts", type=int, nargs="+", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SpawnNetError, RuntimeError, OSError, ValueError, KeyError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
