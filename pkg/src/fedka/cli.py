"""Command-line interface.

Subcommands: ``run`` (one variant), ``sweep`` (several variants, shared
seed, comparison CSV), ``gen-data`` (write the synthetic domains as CSVs
plus a manifest), ``dump-features`` (encode domains with a saved model).
Flags override config-file values. Exit codes: 0 ok, 1 configuration
error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, override, parse_config
from .data import write_domain_csv, write_manifest
from .experiment import load_domains, run_experiment, safe_tag, sweep
from .federation import VARIANTS
from .metrics import dump_features
from .nn import load_model


def _load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    return override(
        cfg,
        seed=getattr(args, "seed", None),
        out=getattr(args, "out", None),
        variant=getattr(args, "variant", None),
    )


def _cmd_run(args) -> int:
    summary = run_experiment(_load_config(args))
    print(
        f"{summary['variant']}: max TTA {summary['max_tta_mean']:.4f} "
        f"± {summary['max_tta_std']:.4f} over {summary['replicates']} replicate(s)"
    )
    return 0


def _cmd_sweep(args) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    cfg = _load_config(args)
    for summary in sweep(cfg, variants or list(VARIANTS)):
        print(
            f"{summary['variant']}: max TTA {summary['max_tta_mean']:.4f} "
            f"± {summary['max_tta_std']:.4f}"
        )
    print(f"comparison table: {Path(cfg.out) / 'comparison.csv'}")
    return 0


def _cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    sources, target_train, target_test = load_domains(cfg, cfg.seed)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for ds in [*sources, target_train, target_test]:
        name = f"{safe_tag(ds.domain_id)}_{safe_tag(ds.role)}.csv"
        write_domain_csv(ds, out_dir / name)
        entries.append((ds.domain_id, name, ds.role))
    write_manifest(entries, out_dir / "manifest.csv")
    print(f"wrote {len(entries)} domain files and manifest to {out_dir}")
    return 0


def _cmd_dump_features(args) -> int:
    model = load_model(args.model)
    cfg = _load_config(args)
    sources, target_train, target_test = load_domains(cfg, cfg.seed)
    out_path = Path(args.out_file)
    dump_features(model.encoder, [*sources, target_train, target_test], out_path)
    print(f"wrote features to {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedka",
        description="Deterministic federated domain-generalization simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=str, default=None, help="config file path")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", type=str, default=None, help="output directory override")

    p_run = sub.add_parser("run", help="run one variant")
    common(p_run)
    p_run.add_argument("--variant", type=str, default=None, help="variant tag override")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="run several variants under one seed")
    common(p_sweep)
    p_sweep.add_argument(
        "--variants",
        type=str,
        default="",
        help=f"comma-separated tags (default: all of {', '.join(VARIANTS)})",
    )
    p_sweep.set_defaults(func=_cmd_sweep)

    p_gen = sub.add_parser("gen-data", help="write synthetic domain CSVs + manifest")
    common(p_gen)
    p_gen.set_defaults(func=_cmd_gen_data)

    p_dump = sub.add_parser("dump-features", help="encode domains with a saved model")
    common(p_dump)
    p_dump.add_argument("--model", type=str, required=True, help="model .npz path")
    p_dump.add_argument(
        "--out-file", type=str, default="features.csv", help="output CSV path"
    )
    p_dump.set_defaults(func=_cmd_dump_features)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
