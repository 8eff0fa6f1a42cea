"""Command-line entry point: ``unrn {generate,train,ablate,hist}``.

Configuration comes from an optional YAML mapping of :class:`TrainConfig`
keys (``--config``), then from ``--key=value`` flags, which win. Exit codes:
0 success, 2 configuration error, 3 degenerate clustering.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .encoder import ModelParams, encode
from .pipeline import (ABLATION_COLUMNS, LADDERS, DegenerateClusteringError, TrainConfig, clustering_stage,
                       compute_uncertainty, field_types, run_ablation, run_experiment,
                       uncertainty_histogram)
from .synth import WRONG, generate_eval_split, generate_scenario, label_pseudo_correctness, write_csv

EXIT_OK, EXIT_CONFIG, EXIT_DEGENERATE = 0, 2, 3
HIST_COLUMNS = ("bin_lo", "bin_hi", "count_correct", "count_wrong", "density_correct", "density_wrong")


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(key: str, value, types: dict[str, type]):
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = types[key]
    try:
        if kind is bool:
            return value if isinstance(value, bool) else _parse_bool(value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if kind is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {value!r} (expected {kind.__name__})") from None


def load_config(path: str | None, overrides: dict[str, str] | None = None) -> TrainConfig:
    """Defaults, then the YAML file, then explicit overrides; validated."""
    types = field_types()
    values = {}
    if path:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a key-value mapping")
        values.update({k: _coerce(k, v, types) for k, v in data.items()})
    for k, v in (overrides or {}).items():
        values[k] = _coerce(k, v, types)
    config = TrainConfig(**values)
    try:
        config.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return config


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unrn", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML file of config keys")
        group = p.add_argument_group("config overrides")
        for f in fields(TrainConfig):
            group.add_argument(f"--{f.name}", dest=f"set_{f.name}", metavar="VALUE", default=None)
        return p

    g = common(sub.add_parser("generate", help="write the scenario as CSV"))
    g.add_argument("--out", required=True)

    t = common(sub.add_parser("train", help="run one experiment"))
    t.add_argument("--out-dir", required=True)

    a = common(sub.add_parser("ablate", help="run an ablation ladder"))
    a.add_argument("--ladder", choices=sorted(LADDERS), default="components")
    a.add_argument("--rows", help="comma-separated subset of ladder row names")
    a.add_argument("--seeds", default="0", help="comma-separated seeds")
    a.add_argument("--out", required=True)

    h = sub.add_parser("hist", help="uncertainty histogram from a train checkpoint")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--bins", type=int, default=None)
    h.add_argument("--out", required=True)
    return parser


def _overrides(args) -> dict[str, str]:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("set_") and v is not None}


def save_checkpoint(path, config: TrainConfig, state) -> None:
    np.savez(path, config=json.dumps(asdict(config), sort_keys=True),
             **{f"student_{k}": v for k, v in zip("w1 b1 w2 b2".split(), state.student.arrays())},
             **{f"teacher_{k}": v for k, v in zip("w1 b1 w2 b2".split(), state.teacher.arrays())},
             source_classifier=state.source_classifier)


def load_checkpoint(path):
    with np.load(path) as data:
        config = load_config(None, {k: v for k, v in json.loads(str(data["config"])).items()})
        student = ModelParams(*(data[f"student_{k}"] for k in ("w1", "b1", "w2", "b2")))
        teacher = ModelParams(*(data[f"teacher_{k}"] for k in ("w1", "b1", "w2", "b2")))
        return config, student, teacher, data["source_classifier"]


def checkpoint_histogram(path, bins: int | None = None) -> list[dict]:
    """Re-cluster the target set with the saved teacher and histogram u by correctness."""
    config, student, teacher, src_centers = load_checkpoint(path)
    _, target = generate_scenario(config.scenario())
    pseudo, ref_bank = clustering_stage(teacher, target, config, src_centers)
    tags = label_pseudo_correctness(target.true_ids, pseudo)
    mask = tags != "outlier"
    u, _ = compute_uncertainty(config, ref_bank, encode(student, target.x[mask]), encode(teacher, target.x[mask]))
    return uncertainty_histogram(u, tags[mask] == WRONG, bins or config.hist_bins)


def _strict_json(obj):
    """NaN is not valid JSON; emit null instead."""
    if isinstance(obj, dict):
        return {k: _strict_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_strict_json(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _write_rows(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _run(args) -> None:
    if args.command == "hist":
        _write_rows(args.out, HIST_COLUMNS, checkpoint_histogram(args.checkpoint, args.bins))
        return
    config = load_config(args.config, _overrides(args))
    if args.command == "generate":
        source, target = generate_scenario(config.scenario())
        write_csv(args.out, source, target, replace(generate_eval_split(config.scenario()), domain="target_test"))
    elif args.command == "train":
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report, state = run_experiment(config, return_state=True)
        (out / "report.json").write_text(json.dumps(_strict_json(report), indent=2, sort_keys=True, allow_nan=False) + "\n")
        save_checkpoint(out / "checkpoint.npz", config, state)
    elif args.command == "ablate":
        ladder = LADDERS[args.ladder]
        if args.rows:
            wanted = [r.strip() for r in args.rows.split(",")]
            unknown = set(wanted) - {name for name, _ in ladder}
            if unknown:
                raise ConfigError(f"unknown ladder rows {sorted(unknown)}")
            ladder = [(name, o) for name, o in ladder if name in wanted]
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"bad seed list {args.seeds!r}") from None
        if not seeds:
            raise ConfigError("at least one seed is required")
        _write_rows(args.out, ABLATION_COLUMNS, run_ablation(config, ladder, seeds))


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateClusteringError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
