"""Command-line entry point.

One binary with subcommands; every run takes an optional JSON config
plus dotted --key value overrides (flags win over the file). Exit codes:
0 success, 2 usage, 3 config, 4 io, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np
import torch

from .adapter import AdapterConfig, similarity_dump
from .backbone import (
    BackboneConfig,
    attention_scores,
    init_random_backbone,
    load_checkpoint,
    save_checkpoint,
    tensor_shapes,
)
from .data import DatasetSpec, load_benchmark, write_benchmark, write_token_csv
from .errors import (
    ConfigError,
    ConfigMismatch,
    IOFormatError,
    NumericError,
    PointBridgeError,
    UsageError,
)
from .pointcloud import AugmentConfig, normalize_to_unit_sphere, read_cloud
from .projection import save_pe_table
from .tokenizer import TokenSet, TokenizerConfig, tokenize_batch
from .training import (
    ABLATION_TABLES,
    ExperimentConfig,
    TrainConfig,
    TrainableSet,
    desk_experiment,
    evaluate,
    init_trainables,
    pipeline_logits,
    probe_experiment,
    reference_experiment,
    run_ablation,
    toy_experiment,
    train,
)
from . import checkpoint as ckpt

PRESETS = {
    "desk": desk_experiment,
    "probe": probe_experiment,
    "toy": lambda mode="plane2d", **kw: toy_experiment(),
    "reference": lambda mode="line1d", **kw: reference_experiment(mode),
}

_SECTION_TYPES = {
    "backbone": BackboneConfig,
    "tokenizer": TokenizerConfig,
    "adapter": AdapterConfig,
    "train": TrainConfig,
    "augment": AugmentConfig,
}
_SCALAR_KEYS = ("n_classes", "fps_to")


def _coerce_value(text: str):
    """Parse an override value: JSON literal if possible, else raw text."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_overrides(extra: list[str]) -> dict:
    """Turn trailing ["--a.b", "1", ...] pairs into a nested dict."""
    out: dict = {}
    i = 0
    while i < len(extra):
        flag = extra[i]
        if not flag.startswith("--") or len(flag) == 2:
            raise UsageError(f"expected --key value overrides, got {flag!r}")
        if i + 1 >= len(extra):
            raise UsageError(f"override {flag!r} is missing a value")
        keys = flag[2:].split(".")
        node = out
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {flag!r} conflicts with a scalar")
        node[keys[-1]] = _coerce_value(extra[i + 1])
        i += 2
    return out


def _check_fields(cls, values: dict, where: str, usage: bool) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            msg = (
                f"unknown field {key!r} in {where}; "
                f"choices: {', '.join(sorted(known))}"
            )
            raise UsageError(msg) if usage else ConfigMismatch(msg)


def _tuplify(cls, values: dict) -> dict:
    """JSON lists become the tuples the dataclasses expect."""
    out = dict(values)
    for f in dataclasses.fields(cls):
        if f.name in out and isinstance(out[f.name], list):
            out[f.name] = tuple(out[f.name])
    return out


def _rebuild_section(current, cls, patch, where: str, usage: bool):
    """Apply a dict patch onto a dataclass instance, or replace with None."""
    if patch is None:
        return None
    if not isinstance(patch, dict):
        raise (UsageError if usage else ConfigMismatch)(
            f"{where} must be an object or null, got {patch!r}"
        )
    _check_fields(cls, patch, where, usage)
    patch = _tuplify(cls, patch)
    if current is None:
        return cls(**patch)
    return dataclasses.replace(current, **_tuplify(cls, patch))


def _apply_patch(exp: ExperimentConfig, patch: dict, usage: bool) -> ExperimentConfig:
    """Merge one layer of config (file or flag overrides) onto an experiment."""
    for key, value in patch.items():
        if key in ("preset", "mode"):
            continue
        if key in _SECTION_TYPES:
            section = _rebuild_section(
                getattr(exp, key), _SECTION_TYPES[key], value, key, usage
            )
            exp = dataclasses.replace(exp, **{key: section})
        elif key in _SCALAR_KEYS:
            exp = dataclasses.replace(exp, **{key: value})
        else:
            msg = (
                f"unknown config key {key!r}; choices: "
                f"{', '.join(list(_SECTION_TYPES) + list(_SCALAR_KEYS))}, preset, mode"
            )
            raise UsageError(msg) if usage else ConfigMismatch(msg)
    return exp


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.isfile(path):
        raise IOFormatError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise IOFormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise IOFormatError(f"{path}: config root must be an object")
    return cfg


def build_experiment(
    config_path: str | None, overrides: dict, seed: int | None
) -> ExperimentConfig:
    """Resolve preset -> config file -> flag overrides -> --seed."""
    cfg = _load_config_file(config_path)
    preset = overrides.get("preset", cfg.get("preset", "desk"))
    mode = overrides.get("mode", cfg.get("mode", "line1d"))
    if preset not in PRESETS:
        raise ConfigMismatch(
            f"unknown preset {preset!r}; choices: {', '.join(sorted(PRESETS))}"
        )
    exp = PRESETS[preset](mode)
    exp = _apply_patch(exp, cfg, usage=False)
    exp = _apply_patch(exp, overrides, usage=True)
    if seed is not None:
        exp = dataclasses.replace(exp, train=dataclasses.replace(exp.train, seed=seed))
    return exp


def _experiment_to_dict(exp: ExperimentConfig) -> dict:
    return dataclasses.asdict(exp)


def _experiment_from_run(run_dir: str, seed: int | None) -> ExperimentConfig:
    path = os.path.join(run_dir, "config.json")
    if not os.path.isfile(path):
        raise IOFormatError(f"run directory {run_dir} has no config.json")
    cfg = _load_config_file(path)
    exp = ExperimentConfig(
        backbone=BackboneConfig(**_tuplify(BackboneConfig, cfg["backbone"])),
        tokenizer=TokenizerConfig(**_tuplify(TokenizerConfig, cfg["tokenizer"])),
        adapter=(
            AdapterConfig(**_tuplify(AdapterConfig, cfg["adapter"]))
            if cfg.get("adapter")
            else None
        ),
        train=TrainConfig(**cfg["train"]),
        n_classes=cfg.get("n_classes", 5),
        augment=(
            AugmentConfig(**_tuplify(AugmentConfig, cfg["augment"]))
            if cfg.get("augment")
            else None
        ),
        fps_to=cfg.get("fps_to"),
    )
    if seed is not None:
        exp = dataclasses.replace(exp, train=dataclasses.replace(exp.train, seed=seed))
    return exp


def _load_trainables(path: str) -> TrainableSet:
    _, arrays = ckpt.read_archive(path)
    return TrainableSet({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})


def _bundle_for(exp: ExperimentConfig, backbone_path: str | None):
    if backbone_path is not None:
        return load_checkpoint(backbone_path)
    return init_random_backbone(exp.backbone, seed=exp.train.seed)


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_gen_data(args, overrides: dict) -> int:
    cfg = _load_config_file(args.config)
    cfg.update(overrides)
    _check_fields(DatasetSpec, cfg, "dataset spec", usage=False)
    cfg = _tuplify(DatasetSpec, cfg)
    if args.seed is not None:
        cfg["seed"] = args.seed
    spec = DatasetSpec(**cfg)
    write_benchmark(spec, args.out)
    n_files = (spec.n_train + spec.n_test) * len(spec.classes)
    print(f"wrote {n_files} clouds + manifest to {args.out}")
    return 0


def _cmd_train(args, overrides: dict) -> int:
    exp = build_experiment(args.config, overrides, args.seed)
    dataset = load_benchmark(args.data)
    bundle = _bundle_for(exp, args.backbone)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump(_experiment_to_dict(exp), fh, sort_keys=True, indent=1)
        fh.write("\n")
    save_checkpoint(bundle, os.path.join(args.out, "backbone.zip"))
    tset, metrics = train(
        dataset, bundle, exp, metrics_path=os.path.join(args.out, "metrics.csv")
    )
    tset.save(os.path.join(args.out, "trainables.zip"))
    print(f"final_accuracy={metrics.final_accuracy!r} ratio={metrics.ratio!r}")
    return 0


def _cmd_eval(args, overrides: dict) -> int:
    if overrides:
        raise UsageError("eval takes no overrides; edit the run config instead")
    exp = _experiment_from_run(args.run, args.seed)
    dataset = load_benchmark(args.data)
    bundle = load_checkpoint(os.path.join(args.run, "backbone.zip"))
    tset = _load_trainables(os.path.join(args.run, "trainables.zip"))
    acc = evaluate(dataset, bundle, tset, exp)
    print(f"accuracy={acc!r}")
    return 0


def _cmd_ablate(args, overrides: dict) -> int:
    if overrides:
        raise UsageError("ablate configures cells itself; only flags apply")
    dataset = load_benchmark(args.data)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    run_ablation(args.table, dataset, args.out, seeds=seeds, epochs=args.epochs)
    print(f"wrote {args.table} ablation to {args.out}")
    return 0


def _cmd_params(args, overrides: dict) -> int:
    exp = build_experiment(args.config, overrides, args.seed)
    tset = init_trainables(exp)
    trainable = tset.count()
    frozen = sum(int(np.prod(s)) for s in tensor_shapes(exp.backbone).values())
    total = trainable + frozen
    print(f"trainable={trainable} total={total} ratio={trainable / total!r}")
    return 0


def _cmd_inspect(args, overrides: dict) -> int:
    exp = build_experiment(args.config, overrides, args.seed) if args.run is None else (
        _experiment_from_run(args.run, args.seed)
    )
    cloud = normalize_to_unit_sphere(read_cloud(args.cloud))
    if args.run is not None:
        bundle = load_checkpoint(os.path.join(args.run, "backbone.zip"))
        tset = _load_trainables(os.path.join(args.run, "trainables.zip"))
    else:
        bundle = _bundle_for(exp, args.backbone)
        tset = init_trainables(exp)
    dtype = bundle.tensors["cls.token"].dtype
    points = torch.tensor(cloud.points, dtype=dtype)[None]
    from .training import _prepare_points

    points = _prepare_points(points, exp)
    tokens = tokenize_batch(points, exp.tokenizer, tset.subset("tokenizer."))
    proj_cfg = exp.projection_config()
    if exp.train.pe_mode == "virtual_projection":
        from .projection import assign_positional_encoding, make_view_basis

        tokens, _ = assign_positional_encoding(
            tokens, make_view_basis(proj_cfg), proj_cfg, bundle.pe
        )
    from .backbone import forward

    coords = tokens.coords[0].numpy()
    block = exp.backbone.n_blocks - 1 if args.block is None else args.block
    os.makedirs(args.out, exist_ok=True)
    single = TokenSet(tokens.features[0], tokens.coords[0])
    with torch.no_grad():
        scores = attention_scores(bundle, single, block)
        point_feats, summary = forward(bundle, tokens)
        labels = similarity_dump(summary[0], point_feats[0], args.clusters)
    write_token_csv(os.path.join(args.out, "attention.csv"), coords, scores.numpy())
    write_token_csv(
        os.path.join(args.out, "similarity.csv"), coords, labels, value_name="label"
    )
    print(f"wrote attention.csv and similarity.csv to {args.out}")
    return 0


def _cmd_export_pe(args, overrides: dict) -> int:
    exp = build_experiment(args.config, overrides, args.seed)
    bundle = _bundle_for(exp, args.backbone)
    save_pe_table(args.out, bundle.pe)
    print(f"wrote PE table to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_common(sub: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--seed", type=int, help="override the run seed")
    sub.add_argument(
        "--threads",
        type=int,
        default=1,
        help="torch thread count; 1 (default) is bit-reproducible",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointbridge",
        description="Point clouds through frozen 1D/2D transformers.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="write a procedural benchmark")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(fn=_cmd_gen_data)

    p = subs.add_parser("train", help="train adapters + head on a benchmark")
    p.add_argument("--data", required=True, help="benchmark directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--backbone", help="frozen checkpoint; default random init")
    _add_common(p)
    p.set_defaults(fn=_cmd_train)

    p = subs.add_parser("eval", help="evaluate a finished run")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True, help="directory written by train")
    _add_common(p, config=False)
    p.set_defaults(fn=_cmd_eval)

    p = subs.add_parser("ablate", help="train every cell of one ablation table")
    p.add_argument("--table", required=True, choices=ABLATION_TABLES)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--seeds", default="0", help="comma-separated seed list")
    p.add_argument("--epochs", type=int, help="override epochs per cell")
    _add_common(p, config=False)
    p.set_defaults(fn=_cmd_ablate)

    p = subs.add_parser("params", help="print the trainable parameter report")
    _add_common(p)
    p.set_defaults(fn=_cmd_params)

    p = subs.add_parser("inspect", help="dump attention and similarity CSVs")
    p.add_argument("--cloud", required=True, help="input .a2pc cloud")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--run", help="finished run directory (trained weights)")
    p.add_argument("--backbone", help="frozen checkpoint; default random init")
    p.add_argument("--block", type=int, default=None, help="attention block")
    p.add_argument("--clusters", type=int, default=3, help="similarity clusters")
    _add_common(p)
    p.set_defaults(fn=_cmd_inspect)

    p = subs.add_parser("export-pe", help="write the PE table archive")
    p.add_argument("--out", required=True)
    p.add_argument("--backbone", help="frozen checkpoint; default random init")
    _add_common(p)
    p.set_defaults(fn=_cmd_export_pe)

    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    overrides = _parse_overrides(extra)
    torch.set_num_threads(max(1, args.threads))
    return args.fn(args, overrides)


def main(argv: list[str] | None = None) -> int:
    try:
        return run(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except (IOFormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 5
    except PointBridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
