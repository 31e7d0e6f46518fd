"""Desk-scale training, evaluation, and ablation orchestration."""

from __future__ import annotations

import csv

import numpy as np

from . import synth, tracker
from .metrics import compute_metrics
from .tracker import TrackerModel, TrainSample, crop_template, make_optimizer

# the six-cell (attention, update, autoregressive) comparison grid
ABLATION_GRID = [
    {"attention": "bi", "update": "none", "autoregressive": False},
    {"attention": "uni", "update": "none", "autoregressive": False},
    {"attention": "uni", "update": "template", "autoregressive": False},
    {"attention": "uni", "update": "tcm", "autoregressive": False},
    {"attention": "uni", "update": "template", "autoregressive": True},
    {"attention": "uni", "update": "tcm", "autoregressive": True},
]


def _sample_from_sequence(config, frames, boxes, rng, frames_per_sample):
    max_start = len(frames) - frames_per_sample - 1
    t0 = int(rng.integers(0, max_start + 1))
    crop, crop_box = crop_template(frames[t0], boxes[t0],
                                   config.encoder.template_size)
    idx = range(t0 + 1, t0 + 1 + frames_per_sample)
    return TrainSample(
        template_frame=crop,
        template_box=crop_box,
        search_frames=[frames[i] for i in idx],
        search_boxes=[boxes[i] for i in idx],
    )


def make_training_set(config, scenario="drift", num_sequences=8, seed=0,
                      frames_per_sample=4):
    """Build (template + ordered search frames) samples from synthetic videos."""
    samples = []
    for s in range(num_sequences):
        cfg = synth.scenario_config(scenario)
        cfg.length = max(cfg.length, frames_per_sample + 1)
        frames, boxes = synth.generate_sequence(cfg, seed=seed * 1000 + s)
        rng = np.random.default_rng(seed * 1000 + s + 500_000)
        samples.append(_sample_from_sequence(config, frames, boxes, rng,
                                             frames_per_sample))
    return samples


def sample_stream(config, scenario="drift", seed=0, frames_per_sample=4):
    """Endless fresh training samples, a new synthetic video each draw.

    Fresh data every step prevents the tracker from memorizing sequences
    instead of learning to match search patches against the reference.
    """
    rng = np.random.default_rng(seed)
    s = 0
    while True:
        cfg = synth.scenario_config(scenario)
        cfg.length = max(frames_per_sample + 6, 12)  # short clips train faster
        frames, boxes = synth.generate_sequence(cfg, seed=seed * 1_000_000 + s)
        yield _sample_from_sequence(config, frames, boxes, rng, frames_per_sample)
        s += 1


def train_model(model, samples, steps, config=None, seed=0, log_every=0):
    """Run a fixed number of optimizer steps.

    ``samples`` is either a list (cycled at random) or an iterator of
    TrainSamples (consumed in order, e.g. from ``sample_stream``).
    """
    config = config or model.config
    opt = make_optimizer(model, config)
    rng = np.random.default_rng(seed)
    model.train()
    history = []
    for step_i in range(steps):
        if isinstance(samples, list):
            sample = samples[int(rng.integers(0, len(samples)))]
        else:
            sample = next(samples)
        loss = tracker.train_step(model, sample, opt, config)
        history.append(loss)
        if log_every and (step_i + 1) % log_every == 0:
            recent = float(np.mean(history[-log_every:]))
            print(f"step {step_i + 1}/{steps}  loss {recent:.4f}")
    model.eval()
    return history


def evaluate_suite(model, config=None, scenario="drift", seeds=range(20),
                   length=None):
    """Mean AO (plus per-sequence reports) over held-out synthetic sequences."""
    config = config or model.config
    reports = []
    for s in seeds:
        cfg = synth.scenario_config(scenario)
        if length is not None:
            cfg.length = length
        frames, boxes = synth.generate_sequence(cfg, seed=900_000 + s)
        pred, _, timings, _ = tracker.run_sequence(model, frames, boxes[0], config)
        reports.append(compute_metrics(pred, boxes[1:], timings))
    mean_ao = float(np.mean([r.ao for r in reports]))
    return mean_ao, reports


def static_box_baseline(scenario="drift", seeds=range(20), length=None):
    """AO of a predictor that always repeats the initial box."""
    aos = []
    for s in seeds:
        cfg = synth.scenario_config(scenario)
        if length is not None:
            cfg.length = length
        _, boxes = synth.generate_sequence(cfg, seed=900_000 + s)
        pred = [boxes[0]] * (len(boxes) - 1)
        aos.append(compute_metrics(pred, boxes[1:]).ao)
    return float(np.mean(aos))


def run_ablation(config, cells=None, seeds=range(5), train_steps=150,
                 train_sequences=0, scenario="drift", eval_seeds=range(8),
                 eval_length=None, log=print):
    """Train/evaluate every grid cell with identical data and seeds.

    Cells sharing an attention mode share one trained model per seed (the
    update and autoregressive switches are inference-time protocol), which
    keeps the budgets matched while making a 30-cell grid tractable.
    ``train_sequences=0`` streams a fresh scene per step; a positive value
    trains on that many fixed sequences instead.
    """
    cells = cells if cells is not None else ABLATION_GRID
    rows = []
    for seed in seeds:
        trained = {}
        for attention in sorted({c["attention"] for c in cells}):
            train_cfg = _cell_config(config, {"attention": attention,
                                              "update": "tcm",
                                              "autoregressive": True})
            model = TrackerModel(train_cfg, seed=seed)
            if train_sequences:
                samples = make_training_set(train_cfg, scenario=scenario,
                                            num_sequences=train_sequences,
                                            seed=seed)
            else:
                samples = sample_stream(train_cfg, scenario=scenario, seed=seed)
            train_model(model, samples, train_steps, train_cfg, seed=seed)
            trained[attention] = model
        for cell in cells:
            cfg = _cell_config(config, cell)
            model = trained[cell["attention"]]
            ao, _ = evaluate_suite(model, cfg, scenario=scenario,
                                   seeds=eval_seeds, length=eval_length)
            row = dict(cell)
            row.update({"seed": seed, "ao": ao})
            rows.append(row)
            if log:
                log(f"seed {seed}  {cell['attention']:>3}/{cell['update']:>8}/"
                    f"ar={'on' if cell['autoregressive'] else 'off'}  AO {ao:.3f}")
    return rows


def _cell_config(base, cell):
    cfg = tracker.TrackerConfig(**{
        k: getattr(base, k) for k in base.__dataclass_fields__})
    cfg.attention = cell["attention"]
    cfg.update = cell["update"]
    cfg.autoregressive = cell["autoregressive"]
    return cfg


def write_ablation_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["attention", "update", "autoregressive", "seed", "ao"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
