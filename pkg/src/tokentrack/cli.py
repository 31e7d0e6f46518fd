"""Command-line surface: gen / train / track / eval / probe / flops / ablate.

Configuration comes from UTF-8 ``key = value`` files; command-line flags
override file values. Exit code 0 on success; errors print one
machine-parsable line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bench, checkpoint, synth, tracker
from .encoder import EncoderConfig
from .flops import attention_flops
from .memory import PROBE_HEADER
from .metrics import compute_metrics
from .tracker import TrackerConfig, TrackerModel

_ENCODER_KEYS = {"image_size", "patch_size", "embed_dim", "num_layers",
                 "num_heads", "mlp_ratio", "template_size", "channels"}
_INT_KEYS = _ENCODER_KEYS | {"reset_period", "capacity_multiplier",
                             "template_update_interval", "train_steps",
                             "train_sequences", "seed"}
_FLOAT_KEYS = {"lambda_iou", "lambda_l1", "lr_backbone", "lr_head",
               "weight_decay"}
_BOOL_KEYS = {"autoregressive", "hard_class_scores"}
_STR_KEYS = {"attention", "update", "scenario"}
_UPDATE_CODES = {"tcm": 0, "template": 1, "none": 2}
_ATTENTION_CODES = {"uni": 0, "bi": 1}


def parse_config_file(path):
    options = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            options[key] = value
    return options


def _coerce(key, value):
    if key in _INT_KEYS:
        return int(value)
    if key in _FLOAT_KEYS:
        return float(value)
    if key in _BOOL_KEYS:
        if isinstance(value, bool):
            return value
        return str(value).lower() in ("1", "true", "yes", "on")
    if key in _STR_KEYS:
        return str(value)
    raise KeyError(f"unknown config key '{key}'")


def build_tracker_config(options):
    enc_kwargs, trk_kwargs = {}, {}
    for key, value in options.items():
        if key in ("train_steps", "train_sequences", "seed", "scenario"):
            continue
        value = _coerce(key, value)
        if key in _ENCODER_KEYS:
            enc_kwargs[key] = value
        else:
            trk_kwargs[key] = value
    return TrackerConfig(encoder=EncoderConfig(**enc_kwargs), **trk_kwargs)


def _gather_options(args):
    options = {}
    if getattr(args, "config", None):
        options.update(parse_config_file(args.config))
    for key in (_INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS | _STR_KEYS):
        v = getattr(args, key, None)
        if v is not None:
            options[key] = v
    return options


# -- checkpoint wrapping: weights plus the scalar config ----------------------


def save_model(path, model):
    cfg = model.config
    enc = cfg.encoder
    entries = {name: p.data for name, p in model.named_parameters()}
    entries.update({name: b for name, b in model.named_buffers()})
    scalars = {
        **{k: getattr(enc, k) for k in _ENCODER_KEYS},
        "reset_period": cfg.reset_period,
        "capacity_multiplier": cfg.capacity_multiplier,
        "template_update_interval": cfg.template_update_interval,
        "lambda_iou": cfg.lambda_iou,
        "lambda_l1": cfg.lambda_l1,
        "lr_backbone": cfg.lr_backbone,
        "lr_head": cfg.lr_head,
        "weight_decay": cfg.weight_decay,
        "attention": _ATTENTION_CODES[cfg.attention],
        "update": _UPDATE_CODES[cfg.update],
        "autoregressive": int(cfg.autoregressive),
        "hard_class_scores": int(cfg.hard_class_scores),
    }
    for key, value in scalars.items():
        entries[f"config.{key}"] = np.array([value], dtype=np.float32)
    checkpoint.save(path, entries)


def load_model(path, overrides=None):
    entries = checkpoint.load(path)
    scalars = {k[len("config."):]: float(v[0]) for k, v in entries.items()
               if k.startswith("config.")}
    enc = EncoderConfig(**{k: int(scalars[k]) for k in _ENCODER_KEYS})
    cfg = TrackerConfig(
        encoder=enc,
        reset_period=int(scalars["reset_period"]),
        capacity_multiplier=int(scalars["capacity_multiplier"]),
        template_update_interval=int(scalars["template_update_interval"]),
        lambda_iou=scalars["lambda_iou"],
        lambda_l1=scalars["lambda_l1"],
        lr_backbone=scalars["lr_backbone"],
        lr_head=scalars["lr_head"],
        weight_decay=scalars["weight_decay"],
        attention={v: k for k, v in _ATTENTION_CODES.items()}[int(scalars["attention"])],
        update={v: k for k, v in _UPDATE_CODES.items()}[int(scalars["update"])],
        autoregressive=bool(scalars["autoregressive"]),
        hard_class_scores=bool(scalars["hard_class_scores"]),
    )
    for key, value in (overrides or {}).items():
        if key in _ENCODER_KEYS or key in ("train_steps", "train_sequences",
                                           "seed", "scenario"):
            continue  # architecture is fixed by the checkpoint
        setattr(cfg, key, _coerce(key, value))
    model = TrackerModel(cfg, seed=0)
    for name, p in model.named_parameters():
        p.data[...] = entries[name]
    for name, b in model.named_buffers():
        b[...] = entries[name]
    model.eval()
    return model


# -- subcommands ---------------------------------------------------------------


def cmd_gen(args):
    cfg = synth.scenario_config(args.scenario)
    if args.length:
        cfg.length = args.length
    for i in range(args.count):
        frames, boxes = synth.generate_sequence(cfg, seed=args.seed + i)
        out = args.out if args.count == 1 else os.path.join(args.out, f"seq{i:03d}")
        synth.save_sequence(out, frames, boxes)
    print(f"wrote {args.count} sequence(s) under {args.out}")
    return 0


def cmd_train(args):
    options = _gather_options(args)
    config = build_tracker_config(options)
    seed = int(options.get("seed", 0))
    steps = int(options.get("train_steps", 300))
    sequences = int(options.get("train_sequences", 0))
    scenario = str(options.get("scenario", "drift"))
    model = TrackerModel(config, seed=seed)
    if sequences:
        samples = bench.make_training_set(config, scenario=scenario,
                                          num_sequences=sequences, seed=seed)
    else:  # default: a fresh synthetic scene every optimizer step
        samples = bench.sample_stream(config, scenario=scenario, seed=seed)
    history = bench.train_model(model, samples, steps, config, seed=seed,
                                log_every=args.log_every)
    save_model(args.out, model)
    print(f"trained {steps} steps, final loss {history[-1]:.4f}, "
          f"checkpoint at {args.out}")
    return 0


def cmd_track(args):
    model = load_model(args.ckpt, overrides=_gather_options(args))
    frames, boxes = synth.load_sequence(args.seq)
    size = frames[0].shape[1]
    pred, confs, timings, trace = tracker.run_sequence(
        model, frames, boxes[0], model.config)
    synth.save_boxes(args.out, pred, size)
    trace_path = args.trace or (args.out + ".trace.jsonl")
    with open(trace_path, "w", encoding="utf-8") as fh:
        for rec in trace:
            fh.write(json.dumps(rec) + "\n")
    fps = len(timings) / sum(timings) if timings else 0.0
    print(f"tracked {len(pred)} frames at {fps:.1f} fps -> {args.out}")
    return 0


def cmd_eval(args):
    gt_path = os.path.join(args.gt, synth.GT_FILENAME)
    ppms = sorted(f for f in os.listdir(args.gt) if f.endswith(".ppm"))
    size = synth.read_ppm(os.path.join(args.gt, ppms[0])).shape[1]
    gt = synth.load_boxes(gt_path, size)
    pred = synth.load_boxes(args.pred, size)
    report = compute_metrics(pred, gt[1:])
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write("ao,sr50,sr75,auc\n")
        fh.write(f"{report.ao:.6f},{report.sr50:.6f},{report.sr75:.6f},"
                 f"{report.auc:.6f}\n")
    print(f"AO {report.ao:.4f}  SR0.5 {report.sr50:.4f}  "
          f"SR0.75 {report.sr75:.4f}  AUC {report.auc:.4f}")
    return 0


def cmd_probe(args):
    model = load_model(args.ckpt, overrides=_gather_options(args))
    frames, boxes = synth.load_sequence(args.seq)
    _, _, _, _, rows = tracker.run_sequence(
        model, frames, boxes[0], model.config, collect_probe=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(PROBE_HEADER + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")
    print(f"wrote {len(rows)} probe rows -> {args.out}")
    return 0


def cmd_flops(args):
    report = attention_flops(args.ns, args.nr, args.dim, args.layers, args.mode)
    print(f"mode={report.mode} scores_values={report.scores_values} "
          f"projections={report.projections} total={report.total}")
    return 0


def cmd_ablate(args):
    options = _gather_options(args)
    config = build_tracker_config(options)
    cells = None
    if args.grid:
        cells = []
        with open(args.grid, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                attention, update, ar = line.split()
                cells.append({"attention": attention, "update": update,
                              "autoregressive": ar.lower() in ("on", "true", "1")})
    seeds = range(args.seeds)
    rows = bench.run_ablation(config, cells=cells, seeds=seeds,
                              train_steps=int(options.get("train_steps", 150)),
                              scenario=str(options.get("scenario", "drift")))
    bench.write_ablation_csv(args.out, rows)
    print(f"wrote {len(rows)} ablation rows -> {args.out}")
    return 0


def _add_config_flags(p):
    p.add_argument("--config", help="key = value config file")
    for key in sorted(_INT_KEYS):
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=int)
    for key in sorted(_FLOAT_KEYS):
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=float)
    for key in sorted(_BOOL_KEYS):
        p.add_argument(f"--{key.replace('_', '-')}", dest=key)
    for key in sorted(_STR_KEYS):
        p.add_argument(f"--{key.replace('_', '-')}", dest=key)


def build_parser():
    parser = argparse.ArgumentParser(prog="tokentrack")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic sequence")
    p.add_argument("--scenario", required=True, choices=sorted(synth.SCENARIOS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--length", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a tracker on synthetic data")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run a checkpoint over a sequence")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seq", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="export per-token importance CSV")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seq", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("flops", help="analytic attention MAC counts")
    p.add_argument("--ns", type=int, required=True)
    p.add_argument("--nr", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--mode", choices=("uni", "bi"), required=True)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("ablate", help="train/evaluate the ablation grid")
    _add_config_flags(p)
    p.add_argument("--grid", help="file with 'attention update on|off' lines")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # single-line machine-parsable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
