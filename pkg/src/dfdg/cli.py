"""Command line entry point: ``dfdg <verb> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .data import DatasetError
from .models import ConfigurationError
from .server import MODES

log = logging.getLogger("dfdg")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config; flags below override it")
    p.add_argument("--profile", choices=["desk", "default"], default=None,
                   help="start from a built-in profile instead of a config file")
    p.add_argument("--dataset")
    p.add_argument("--data-root")
    p.add_argument("--max-train", type=int)
    p.add_argument("--max-test", type=int)
    p.add_argument("--num-clients", type=int)
    p.add_argument("--omega", type=float)
    p.add_argument("--sigma", type=int)
    p.add_argument("--rho", type=int)
    p.add_argument("--model-family")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--local-epochs", type=int)
    p.add_argument("--client-lr", type=float)
    p.add_argument("--outer-iters", type=int)
    p.add_argument("--noise-dim", type=int)
    p.add_argument("--merge")
    p.add_argument("--variant")
    p.add_argument("--partition-file")
    p.add_argument("--client-cache")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. server.beta_cd=0.5 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


FLAG_KEYS = {
    "dataset": "dataset", "data_root": "data_root", "max_train": "max_train", "max_test": "max_test",
    "num_clients": "num_clients", "omega": "omega", "sigma": "sigma", "rho": "rho",
    "model_family": "model_family", "seeds": "seeds", "local_epochs": "client.local_epochs",
    "client_lr": "client.learning_rate", "outer_iters": "server.outer_iters", "noise_dim": "server.noise_dim",
    "merge": "server.merge", "variant": "server.variant", "partition_file": "partition_file",
    "client_cache": "client_cache_dir", "out": "output_dir", "mode": "server.mode",
}


def build_config(args: argparse.Namespace) -> ex.ExperimentConfig:
    if args.config:
        cfg = ex.ExperimentConfig.load(args.config)
    elif args.profile == "default":
        cfg = ex.ExperimentConfig()
    else:
        cfg = ex.desk_profile()
    updates = {}
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            updates[key] = value
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        updates[key.strip()] = _parse_value(value)
    return cfg.with_updates(**updates) if updates else cfg


def cmd_partition(args, cfg) -> int:
    seed = cfg.seeds[0]
    fed = ex.partition_for(cfg, seed)
    out = Path(args.output or Path(cfg.output_dir) / f"partition_seed{seed}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    fed.save(out)
    print(f"wrote {out}: client sizes {fed.sizes()} (seed offset {fed.seed_offset})")
    return 0


def cmd_train_clients(args, cfg) -> int:
    if not cfg.client_cache_dir:
        cfg = cfg.with_updates(client_cache_dir=str(Path(cfg.output_dir) / "clients"))
    failed = 0
    for seed in cfg.seeds:
        try:
            fed = ex.train_clients(cfg, seed)
        except Exception as exc:
            log.error("seed %d: client training failed: %s", seed, exc)
            failed += 1
            continue
        print(f"seed {seed}: trained {len(fed.local_models)} clients -> {Path(cfg.client_cache_dir) / f'seed{seed}'}")
    return 0 if failed == 0 else 1


def _report(result: ex.ExperimentResult, out: Path) -> int:
    print(result.table.to_markdown())
    print(f"results under {out}")
    for key, group in result.outcomes.items():
        for o in group:
            if not o.ok:
                print(f"FAILED {key} seed {o.seed}: {o.error}", file=sys.stderr)
    return 0 if result.all_ok else 1


def cmd_run(args, cfg) -> int:
    name = args.name or cfg.mode.lower()
    return _report(ex.run_experiment(cfg, name), Path(cfg.output_dir) / name)


def cmd_compare(args, cfg) -> int:
    return _report(ex.compare_modes(cfg, args.modes, args.name), Path(cfg.output_dir) / args.name)


def cmd_ablate(args, cfg) -> int:
    values = [_parse_value(v) for v in args.values] if args.values else None
    name = args.name or f"ablate_{args.knob}"
    return _report(ex.ablate(cfg, args.knob, values, name), Path(cfg.output_dir) / name)


def cmd_plot(args, cfg) -> int:
    from .plots import emit_plots

    files = emit_plots(args.run_dir, args.output)
    for f in files:
        print(f)
    return 0 if files else 1


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfdg", description="One-shot federated learning with data-free distillation")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("partition", help="export the Dirichlet partition for the first seed")
    _add_common(p)
    p.add_argument("-o", "--output", help="partition JSON path")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train-clients", help="train and cache the local models")
    _add_common(p)
    p.set_defaults(func=cmd_train_clients)

    p = sub.add_parser("run", help="full pipeline for one mode over all seeds")
    _add_common(p)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--name", help="subdirectory of --out (default: the mode)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="several modes on the same partitions and seeds")
    _add_common(p)
    p.add_argument("--modes", nargs="+", choices=MODES, default=["DFDG", "DFAD", "FEDAVG_ONLY"])
    p.add_argument("--name", default="compare")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ablate", help="leave-one-out, merge operator, variant or beta sweeps")
    _add_common(p)
    p.add_argument("knob", choices=ex.ABLATION_KNOBS)
    p.add_argument("--values", nargs="+", help="override the knob's default grid")
    p.add_argument("--name")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="accuracy curves and generator sample grids")
    p.add_argument("run_dir")
    p.add_argument("-o", "--output", help="directory for the PNG files (default RUN_DIR/plots)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args) if args.verb != "plot" else None
        return args.func(args, cfg)
    except (ValueError, KeyError, DatasetError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
