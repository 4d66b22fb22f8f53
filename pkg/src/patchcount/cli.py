"""Command-line surface: synth, train, eval, infer, gradcheck, attnmap.

Configuration comes from a JSON file validated against a closed schema,
with command-line flags taking precedence. Seeds are mandatory inputs
(defaulted, never wall-clock) so identical invocations produce identical
outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import evalviz, patchio
from .model import ModelConfig, grad_check_model
from .ndtensor import GraphError, ShapeError
from .optim import (CheckpointError, TrainConfig, load_checkpoint, train,
                    init_adam)
from . import model as model_mod

# closed schema: JSON key -> (target section, type)
_SCHEMA = {
    "image": ("model", int), "patch": ("model", int), "dim": ("model", int),
    "heads": ("model", int), "layers": ("model", int), "head": ("model", str),
    "hidden_dim": ("model", int), "attn_denominator": ("model", str),
    "final_ln": ("model", bool),
    "batch_size": ("train", int), "epochs": ("train", int),
    "seed": ("train", int), "lr": ("train", float),
    "weight_decay": ("train", float), "augment": ("train", bool),
    "standardize": ("train", bool), "checkpoint_every": ("train", int),
}

_MODEL_FIELD = {
    "image": "image_size", "patch": "patch_size", "dim": "dim",
    "heads": "heads", "layers": "layers", "head": "head_variant",
    "hidden_dim": "hidden_dim", "attn_denominator": "attn_denominator",
    "final_ln": "final_ln",
}

TOY_PROFILE = {"image": 64, "patch": 8, "dim": 64, "heads": 4, "layers": 2,
               "hidden_dim": 64, "batch_size": 8, "lr": 1e-2}


class ConfigError(ValueError):
    """Config file or override violates the schema."""


def parse_config(path=None, overrides=None):
    """Merge defaults <- JSON file <- overrides into model/train configs."""
    merged = {}
    if path is not None:
        with open(path) as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        merged.update(file_cfg)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value

    model_kwargs, train_kwargs = {}, {}
    for key, value in merged.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        section, typ = _SCHEMA[key]
        if typ is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
            raise ConfigError(
                f"config key {key!r} expects {typ.__name__}, got {value!r}")
        if section == "model":
            model_kwargs[_MODEL_FIELD[key]] = value
        else:
            train_kwargs[key] = value
    try:
        return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _overrides_from_args(args):
    out = {}
    if getattr(args, "profile", None) == "toy":
        out.update(TOY_PROFILE)
    for key in _SCHEMA:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def _add_config_flags(p, with_profile=True):
    p.add_argument("--config", help="JSON config file")
    if with_profile:
        p.add_argument("--profile", choices=["toy"],
                       help="named preset applied before other overrides")
    p.add_argument("--image", type=int, help="tile side in pixels")
    p.add_argument("--patch", type=int, help="patch size K")
    p.add_argument("--dim", type=int, help="embedding dimension D")
    p.add_argument("--heads", type=int, help="attention heads m")
    p.add_argument("--layers", type=int, help="encoder layers L")
    p.add_argument("--head", choices=["token", "gap"], help="regression head")
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--no-augment", dest="augment", action="store_false",
                   default=None)


def cmd_synth(args):
    region = (0.0, 1.0, 0.0, 1.0)
    if args.quadrant is not None:
        half = {(0): (0.0, 0.5, 0.0, 0.5), 1: (0.0, 0.5, 0.5, 1.0),
                2: (0.5, 1.0, 0.0, 0.5), 3: (0.5, 1.0, 0.5, 1.0)}
        region = half[args.quadrant]
    spec = patchio.SynthSpec(side=args.side, count_min=args.count_min,
                             count_max=args.count_max, dot_radius=args.radius,
                             noise_amp=args.noise, seed=args.seed, region=region)
    patchio.write_dataset(patchio.synth_generate(spec, args.n), args.out)
    print(f"wrote\t{args.n} images to {args.out}")
    return 0


def cmd_train(args):
    cfg, tcfg = parse_config(args.config, _overrides_from_args(args))
    pairs = patchio.load_dataset(args.data)
    eval_pairs = patchio.load_dataset(args.eval_data) if args.eval_data else None
    log = evalviz.ConvergenceLog(args.log) if args.log else None

    def on_epoch(epoch, loss):
        if log is None:
            return
        mae = float("nan")
        if eval_pairs is not None:
            _, _, mae, _ = evalviz.evaluate(eval_pairs, params_box[0], cfg,
                                            standardize=tcfg.standardize)
        log.record(epoch, loss, mae)

    params = model_mod.init_params(cfg, tcfg.seed)
    params_box = [params]
    state = init_adam(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    try:
        train(pairs, cfg, tcfg, params=params, state=state,
              epoch_callback=on_epoch, checkpoint_path=args.out)
    finally:
        if log is not None:
            log.close()
    print(f"checkpoint\t{args.out}")
    return 0


def cmd_eval(args):
    params, _, cfg = load_checkpoint(args.checkpoint)
    with open(os.path.join(args.data, "labels.tsv")) as fh:
        names = [line.split("\t")[0] for line in fh if line.strip()]
    pairs = patchio.load_dataset(args.data)
    preds, gts, mae, mse = evalviz.evaluate(pairs, params, cfg)
    if args.out:
        evalviz.write_eval_report(names, preds, gts, args.out)
    print(f"MAE\t{mae:.4f}")
    print(f"MSE\t{mse:.4f}")
    return 0


def cmd_infer(args):
    params, _, cfg = load_checkpoint(args.checkpoint)
    img = patchio.load_ppm(args.image)
    count = evalviz.predict_image(img, params, cfg)
    print(f"count\t{count:.4f}")
    return 0


def cmd_gradcheck(args):
    cfg, tcfg = parse_config(args.config, _overrides_from_args(args))
    variants = [cfg.head_variant] if args.head else ["gap", "token"]
    worst = 0.0
    for variant in variants:
        vcfg = ModelConfig(**{**_cfg_dict(cfg), "head_variant": variant})
        err = grad_check_model(vcfg, seed=tcfg.seed,
                               samples_per_param=args.samples, h=args.h)
        print(f"max_rel_err\t{variant}\t{err:.3e}")
        worst = max(worst, err)
    ok = worst < args.threshold
    print(f"gradcheck\t{'pass' if ok else 'fail'}\t{worst:.3e}")
    return 0 if ok else 1


def _cfg_dict(cfg):
    from dataclasses import asdict
    return asdict(cfg)


def cmd_attnmap(args):
    params, _, cfg = load_checkpoint(args.checkpoint)
    img = patchio.load_ppm(args.image)
    side = cfg.image_size
    if img.shape[:2] != (side, side):
        img = patchio.resize_bilinear(img, side, side)
    from .ndtensor import no_grad
    batch = patchio.make_batch([(img, 0.0)], cfg.patch_size)
    with no_grad():
        _, records = model_mod.forward(params, cfg, batch.data,
                                       record_attention=True)
    amap = evalviz.attention_map(records, cfg)
    evalviz.export_pgm(amap, args.out)
    print(f"attnmap\t{args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="patchcount",
                                description="Weakly-supervised transformer crowd counting")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dot-crowd dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--side", type=int, default=64)
    s.add_argument("--count-min", dest="count_min", type=int, default=0)
    s.add_argument("--count-max", dest="count_max", type=int, default=30)
    s.add_argument("--radius", type=float, default=2.0)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--quadrant", type=int, choices=[0, 1, 2, 3],
                   help="confine dots to one quadrant")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a PPM + labels.tsv dataset")
    _add_config_flags(t)
    t.add_argument("--data", required=True)
    t.add_argument("--eval-data", dest="eval_data")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="convergence TSV path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="TSV report path")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict the count for one PPM image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _add_config_flags(g)
    g.add_argument("--samples", type=int, default=8,
                   help="coordinates checked per parameter tensor")
    g.add_argument("--h", type=float, default=1e-3)
    g.add_argument("--threshold", type=float, default=5e-3)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("attnmap", help="export an attention map as PGM")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--image", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attnmap)

    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (ConfigError, CheckpointError, ShapeError, GraphError,
            patchio.PPMError, ValueError, OSError,
            FloatingPointError) as exc:
        print(f"error\t{exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
