"""Command-line entry point.

    milblock gen-data --config c.json --out DIR [--seed S]
    milblock train    --config c.json --out DIR [--seed S]
    milblock eval     --checkpoint F --data DIR --out metrics.json
    milblock explain  --checkpoint F --data DIR --bag ID --class K --out DIR
    milblock selftest

Exit codes: 0 success, 1 validation error (bad flags, config, files), 2 runtime failure.
"""

import argparse
import json
import logging
import os
import sys

from . import __version__
from .data import SyntheticSpec, generate, load_dataset, save_dataset, split
from .errors import ValidationError
from .explain import export_heatmap, grad_map, prob_map, selection_map
from .head import MilConfig
from .metrics import dumps17
from .rng import RandomStream
from .selftest import run_all
from .training import TrainConfig, evaluate, fit, load_checkpoint, save_checkpoint

log = logging.getLogger("milblock")

TOP_KEYS = {"data", "model", "train", "output"}
DATA_KEYS = {"synthetic", "path", "val_path", "train_fraction"}
MODEL_KEYS = {"ordering", "pooling", "k_fraction", "n_classes", "dim", "encoder"}
ENCODER_KEYS = {"hidden", "dim"}


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _reject_unknown(section: dict, allowed, where):
    if not isinstance(section, dict):
        raise ValidationError(f"config section {where!r} must be an object")
    for key in section:
        if key not in allowed:
            raise ValidationError(f"unknown config key: {where}.{key}" if where else f"unknown config key: {key}")


def load_run_config(path, seed=None) -> dict:
    """Parse and validate a run config. ``seed`` overrides every seed in it."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    _reject_unknown(cfg, TOP_KEYS, "")
    data = cfg.get("data")
    if data is None:
        raise ValidationError("config key data is required")
    _reject_unknown(data, DATA_KEYS, "data")
    if ("synthetic" in data) == ("path" in data):
        raise ValidationError("config key data needs exactly one of data.synthetic or data.path")
    if "synthetic" in data:
        syn = dict(data["synthetic"])
        if seed is not None:
            syn["seed"] = seed
        try:
            data["synthetic"] = SyntheticSpec.from_dict(syn)
        except TypeError as exc:
            raise ValidationError(f"data.synthetic: {exc}") from exc
    for key in ("path", "val_path"):
        if key in data and not os.path.isfile(os.path.join(data[key], "manifest.json")):
            raise ValidationError(f"data.{key}: no dataset manifest under {data[key]!r}")
    frac = data.get("train_fraction", 0.8)
    if not isinstance(frac, (int, float)) or not 0.0 < frac < 1.0:
        raise ValidationError("data.train_fraction must be in (0, 1)")
    data["train_fraction"] = float(frac)

    model = cfg.get("model", {})
    _reject_unknown(model, MODEL_KEYS, "model")
    if model.get("encoder") is not None:
        _reject_unknown(model["encoder"], ENCODER_KEYS, "model.encoder")
    train = dict(cfg.get("train", {}))
    if seed is not None:
        train["seed"] = seed
    try:
        cfg["train"] = TrainConfig.from_dict(train)
    except TypeError as exc:
        raise ValidationError(f"train: {exc}") from exc
    cfg["model"] = model
    cfg["seed_override"] = seed
    return cfg


def _mil_config(model_cfg: dict, dataset) -> MilConfig:
    enc = model_cfg.get("encoder")
    if dataset.mode == "images":
        if not enc:
            raise ValidationError("model.encoder is required for an images dataset")
        dim = int(enc.get("dim", model_cfg.get("dim", 16)))
    else:
        if enc:
            raise ValidationError("model.encoder is only valid with an images dataset")
        dim = dataset.dim
        if "dim" in model_cfg and model_cfg["dim"] != dim:
            raise ValidationError(f"model.dim = {model_cfg['dim']} but the dataset has D={dim}")
    n_classes = int(model_cfg.get("n_classes", 1 if dataset.n_classes == 2 else dataset.n_classes))
    if max(n_classes, 2) != dataset.n_classes:
        raise ValidationError(f"model.n_classes = {n_classes} does not fit a {dataset.n_classes}-class dataset")
    return MilConfig(model_cfg.get("ordering", "I1"), model_cfg.get("pooling", "topk"),
                     float(model_cfg.get("k_fraction", 0.25)), n_classes, dim)


def _require_inputs(args):
    if not os.path.isfile(args.checkpoint):
        raise ValidationError(f"checkpoint {args.checkpoint!r} not found")
    if not os.path.isfile(os.path.join(args.data, "manifest.json")):
        raise ValidationError(f"no dataset manifest under {args.data!r}")


def _out_dir(args, cfg=None):
    out = args.out or (cfg or {}).get("output")
    if not out:
        raise ValidationError("an output location is required (--out)")
    return out


# -- subcommands ---------------------------------------------------------------------


def cmd_gen_data(args):
    cfg = load_run_config(args.config, args.seed)
    spec = cfg["data"].get("synthetic")
    if spec is None:
        raise ValidationError("gen-data needs data.synthetic in the config")
    out = _out_dir(args, cfg)
    dataset = generate(spec)
    save_dataset(dataset, out)
    info = {"bags": len(dataset), "mode": dataset.mode, "n_classes": dataset.n_classes,
            "seed": spec.seed, "seed_override": cfg["seed_override"]}
    print(json.dumps(info))
    return 0


def cmd_train(args):
    cfg = load_run_config(args.config, args.seed)
    out = _out_dir(args, cfg)
    data, tcfg = cfg["data"], cfg["train"]
    if "synthetic" in data:
        dataset = generate(data["synthetic"])
    else:
        dataset = load_dataset(data["path"])
    if "val_path" in data:
        train_set, val_set = dataset, load_dataset(data["val_path"])
    else:
        split_seed = (tcfg.seed + 1) & ((1 << 64) - 1)
        train_set, val_set = split(dataset, data["train_fraction"], RandomStream(split_seed))
    mil = _mil_config(cfg["model"], dataset)
    expected_mode = "images" if dataset.mode == "images" else "bags"
    if tcfg.mode != expected_mode:
        raise ValidationError(f"train.mode is {tcfg.mode!r} but the dataset needs {expected_mode!r}")
    hidden = (cfg["model"].get("encoder") or {}).get("hidden")

    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "epochs.jsonl"), "w", encoding="utf-8") as fh:
        def on_epoch(entry):
            fh.write(dumps17(entry) + "\n")
        result = fit(train_set, val_set, mil, tcfg, hidden=hidden, on_epoch=on_epoch)

    meta = {"seed_override": cfg["seed_override"], "best_epoch": result.best_epoch}
    save_checkpoint(result.model, os.path.join(out, "model.ckpt"), seed=tcfg.seed,
                    epoch=result.best_epoch, metadata=meta)
    report = evaluate(result.model, val_set)
    report.update({"best_epoch": result.best_epoch, "seed": tcfg.seed, "seed_override": cfg["seed_override"],
                   "train_bags": len(train_set), "val_bags": len(val_set)})
    with open(os.path.join(out, "metrics.json"), "w", encoding="utf-8") as fh:
        fh.write(dumps17(report) + "\n")
    print(dumps17(report))
    return 0


def cmd_eval(args):
    _require_inputs(args)
    model, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    report = evaluate(model, dataset)
    text = dumps17(report)
    parent = os.path.dirname(args.out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    print(text)
    return 0


def cmd_explain(args):
    _require_inputs(args)
    model, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    model.check_dataset(dataset)
    bags = {b.id: b for b in dataset.bags}
    if args.bag not in bags:
        raise ValidationError(f"no bag with id {args.bag!r} in {args.data}")
    payload = bags[args.bag].payload
    maps = {}
    if model.config.ordering == "E":
        if model.config.pooling != "average":
            maps["selection"] = selection_map(model, payload)
    else:
        maps["probability"] = prob_map(model, payload, args.cls)
    maps["gradient"] = grad_map(model, payload, args.cls)
    os.makedirs(args.out, exist_ok=True)
    written = []
    for kind, hm in maps.items():
        stem = os.path.join(args.out, f"{args.bag}_{kind}")
        export_heatmap(hm, stem + ".pgm", "pgm")
        export_heatmap(hm, stem + ".csv", "csv", sidecar=False)
        written.append(stem + ".pgm")
    print(json.dumps({"bag": args.bag, "class_index": args.cls, "maps": written}))
    return 0


def cmd_selftest(args):
    failed = 0
    for name, passed, detail in run_all():
        print(json.dumps({"property": name, "result": "pass" if passed else "fail", "detail": detail}))
        failed += not passed
    return 0 if failed == 0 else 2


def build_parser():
    parser = _Parser(prog="milblock", description="Top-k MIL classification block")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="write explanation heatmaps for one bag")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bag", required=True)
    p.add_argument("--class", dest="cls", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("selftest", help="run the built-in property checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"a subcommand is required\n{parser.format_usage()}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2**64:
            raise ValidationError("--seed must be an unsigned 64-bit integer")
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())
