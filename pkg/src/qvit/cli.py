"""Command-line entry point: ``qvit <command>``.

Reports go to stdout as JSON; progress and errors go to stderr. Exit status
is 0 on success, 1 on a runtime failure and 2 on invalid input.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import jsonschema

from . import data, resources, sampling, training, verify
from .circuit import Circuit, CircuitError
from .model import ConfigError, NetworkConfig, load_checkpoint, param_shapes

log = logging.getLogger("qvit")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _print(doc):
    print(json.dumps(doc, indent=2, sort_keys=True))


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# run config


def run_config_schema() -> dict:
    num = {"type": "number"}
    integer = {"type": "integer"}
    props = {
        "arch": {"enum": ["ortho_patchwise", "ortho_transformer", "compound_transformer", "classical_vit", "ortho_fnn"]},
        "layout": {"enum": ["pyramid", "butterfly", "x", "backslash"]},
        "d": {"type": "integer", "minimum": 2},
        "layers": {"type": "integer", "minimum": 1},
        "hidden": {"type": ["integer", "null"], "minimum": 1},
        "grid": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
        "image_shape": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
        "num_classes": {"type": "integer", "minimum": 2},
        "attn_norm": {"enum": ["softmax", "l1", "none"]},
        "positional": {"enum": ["shared", "per_token"]},
        "det_flip": {"type": "boolean"},
        "dataset": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "lr_milestones": {"type": "array", "items": integer},
        "lr_gamma": num,
        "max_train": {"type": ["integer", "null"], "minimum": 1},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "out_dir": {"type": "string"},
    }
    missing = {f.name for f in dataclasses.fields(NetworkConfig)} - set(props)
    assert not missing, missing
    return {"type": "object", "properties": props, "required": ["arch", "dataset"], "additionalProperties": False}


def parse_run_config(doc: dict) -> tuple[NetworkConfig, list[int], str]:
    """Validate a run config document; raises ConfigError before any compute."""
    try:
        jsonschema.validate(doc, run_config_schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {path}: {exc.message}") from exc
    doc = dict(doc)
    seeds = doc.pop("seeds", [doc.get("seed", 0)])
    out_dir = doc.pop("out_dir", "runs")
    try:
        entry = data.manifest_entry(doc["dataset"])
    except data.UnknownDatasetError as exc:
        raise ConfigError(str(exc)) from exc
    doc.setdefault("num_classes", entry["num_classes"])
    doc.setdefault("image_shape", [28, 28, entry["channels"]])
    return NetworkConfig.from_dict(doc), seeds, out_dir


# ---------------------------------------------------------------------------
# commands


def cmd_fetch(args) -> int:
    try:
        entry = data.manifest_entry(args.dataset)
    except data.UnknownDatasetError as exc:
        _err(str(exc))
        return EXIT_USAGE
    cached = data.is_cached(args.dataset, args.data_dir)
    if cached:
        print(f"{args.dataset}: cached at {data.archive_path(args.dataset, args.data_dir)}", file=sys.stderr)
    try:
        path = data.fetch(args.dataset, root=args.data_dir, retries=args.retries)
        ds = data.parse_npz(path, args.dataset, entry["num_classes"])
    except data.DataError as exc:
        _err(str(exc))
        return EXIT_FAIL
    _print({"dataset": ds.id, "path": str(path), "cached": cached, "num_classes": ds.num_classes,
            "channels": ds.channels, "splits": {k: len(v) for k, v in ds.splits.items()},
            "class_counts": {k: [int((v.labels == c).sum()) for c in range(ds.num_classes)]
                             for k, v in ds.splits.items()}})
    return EXIT_OK


def cmd_resources(args) -> int:
    archs = resources.RESOURCE_ARCHS if args.arch == "all" else (args.arch,)
    try:
        rows = [resources.arch_resources(a, args.layout, args.patches, args.dim, args.layers) for a in archs]
    except ValueError as exc:
        _err(str(exc))
        return EXIT_USAGE
    _print({"layout_census": resources.layout_census(), "architectures": rows,
            "settings": {"layout": args.layout, "patches": args.patches, "dim": args.dim, "layers": args.layers}})
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        doc = json.loads(Path(args.config).read_text())
        cfg, seeds, out_dir = parse_run_config(doc)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    out_root = Path(args.out or out_dir)
    try:
        dataset = data.load_dataset(cfg.dataset, args.data_dir)
    except data.DataError as exc:
        _err(str(exc))
        return EXIT_FAIL
    summary = training.train_seeds(cfg, seeds, out_root, jobs=args.jobs,
                                   dataset=dataset if args.jobs <= 1 else None,
                                   resume=args.resume, data_root=args.data_dir)
    _print(summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        cfg, arrays, _ = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        _err(f"cannot read checkpoint: {exc}")
        return EXIT_USAGE
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    shapes = param_shapes(cfg)
    if set(params) != set(shapes) or any(params[k].shape != tuple(s) for k, s in shapes.items()):
        _err("checkpoint parameters do not match its config")
        return EXIT_USAGE
    try:
        dataset = data.load_dataset(cfg.dataset, args.data_dir)
    except data.DataError as exc:
        _err(str(exc))
        return EXIT_FAIL
    metrics = training.evaluate(params, cfg, dataset[args.split])
    _print({"checkpoint": str(args.checkpoint), "split": args.split, "auc": metrics["auc"], "acc": metrics["acc"]})
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run(args.scope, seed=args.seed)
    for r in results:
        print(r.line(), file=sys.stderr)
    _print({"scope": args.scope, "passed": all(r.passed for r in results),
            "checks": [{"name": r.name, "tolerance": r.tolerance, "worst": r.worst, "passed": r.passed,
                        "seconds": r.seconds} for r in results]})
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_sample_demo(args) -> int:
    if args.shots < 1:
        _err("shots must be a positive integer")
        return EXIT_USAGE
    try:
        circuit = Circuit.from_json(Path(args.circuit).read_text()) if args.circuit else sampling.rbs_demo_circuit()
        result = sampling.sample(circuit, args.shots, args.seed, args.input_bits)
    except (OSError, ValueError, KeyError, CircuitError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    print(result.to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qvit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fetch", help="download and verify a dataset archive")
    f.add_argument("dataset")
    f.add_argument("--data-dir", default=None, help=f"cache directory (default ${data.DATA_ENV} or ~/.cache/qvit)")
    f.add_argument("--retries", type=int, default=3)
    f.set_defaults(func=cmd_fetch)

    r = sub.add_parser("resources", help="gate and parameter counts")
    r.add_argument("--arch", default="all", choices=("all",) + resources.RESOURCE_ARCHS)
    r.add_argument("--layout", default="butterfly")
    r.add_argument("--patches", type=int, default=16)
    r.add_argument("--dim", type=int, default=16)
    r.add_argument("--layers", type=int, default=4)
    r.set_defaults(func=cmd_resources)

    t = sub.add_parser("train", help="train every seed listed in a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--out", default=None)
    t.add_argument("--resume", action="store_true", help="continue from each run's last.ckpt")
    t.add_argument("--data-dir", default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics of a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=data.SPLITS)
    e.add_argument("--data-dir", default=None)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="oracle-equivalence and invariant checks")
    v.add_argument("--scope", default="all", choices=verify.SCOPES + ("all",))
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("sample-demo", help="sample a circuit given as JSON")
    s.add_argument("--circuit", default=None, help="circuit JSON file (default: RBS(pi/4) demo)")
    s.add_argument("--shots", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--input-bits", default=None)
    s.set_defaults(func=cmd_sample_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
