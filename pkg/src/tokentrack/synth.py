"""Synthetic moving-object sequences with ground truth.

Frames are (3, H, W) float arrays in [0, 1], quantized through 8-bit at
generation time so in-memory sequences and PPM round-trips are
bit-identical. Three named scenarios stress different tracker failure
modes: appearance drift, similar distractors, and scheduled occlusion.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np

from .head import BBox

GT_FILENAME = "groundtruth.txt"


@dataclass
class SceneConfig:
    frame_size: int = 64
    length: int = 40
    target_size: int = 16
    velocity: float = 2.0            # pixels per frame
    drift_rate: float = 0.0          # appearance drift per frame, 0..~0.05
    num_distractors: int = 0
    distractor_similarity: float = 0.9
    occlusion_windows: list = field(default_factory=list)  # (start, end) frames
    background_cells: int = 8        # background texture coarseness

    def validate(self):
        margin = self.target_size
        if self.frame_size - 2 * margin <= 0:
            raise ValueError("target does not fit in the frame")
        if self.length < 1:
            raise ValueError("sequence length must be >= 1")


SCENARIOS = {
    "drift": SceneConfig(length=60, drift_rate=0.02, velocity=2.0,
                         num_distractors=1, distractor_similarity=0.9),
    "distractor": SceneConfig(length=40, num_distractors=2, velocity=2.0,
                              distractor_similarity=0.85),
    "occlude": SceneConfig(length=40, velocity=2.0,
                           occlusion_windows=[(15, 20)]),
}


def scenario_config(name):
    if name not in SCENARIOS:
        raise KeyError(f"unknown scenario '{name}' (have {sorted(SCENARIOS)})")
    cfg = SCENARIOS[name]
    return SceneConfig(**{k: getattr(cfg, k) for k in cfg.__dataclass_fields__})


_WHEEL_OFFSETS = np.array([0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0])


def wheel_color(phase):
    """Saturated color on a continuous RGB wheel at the given angle."""
    return (0.5 + 0.45 * np.sin(phase + _WHEEL_OFFSETS)).astype(np.float32)


class _Mover:
    """Bouncing constant-velocity object with a texture and a color-wheel hue.

    Appearance drift is a continuous rotation along the wheel, so the
    mismatch against a stale reference grows with staleness instead of
    saturating.
    """

    def __init__(self, rng, cfg, phase, omega, size):
        m = size / 2 + 2
        self.x = rng.uniform(m, cfg.frame_size - m)
        self.y = rng.uniform(m, cfg.frame_size - m)
        ang = rng.uniform(0, 2 * np.pi)
        self.vx = cfg.velocity * np.cos(ang)
        self.vy = cfg.velocity * np.sin(ang)
        self.size = size
        self.phase = phase
        self.omega = omega
        self.texture = rng.uniform(0.75, 1.0, size=(size, size)).astype(np.float32)
        self.lo = m
        self.hi = cfg.frame_size - m

    def advance(self):
        self.x += self.vx
        self.y += self.vy
        if self.x < self.lo or self.x > self.hi:
            self.vx = -self.vx
            self.x = min(max(self.x, self.lo), self.hi)
        if self.y < self.lo or self.y > self.hi:
            self.vy = -self.vy
            self.y = min(max(self.y, self.lo), self.hi)

    def color(self, t):
        return wheel_color(self.phase + self.omega * t)

    def paint(self, img, t):
        s = self.size
        x0 = int(round(self.x - s / 2))
        y0 = int(round(self.y - s / 2))
        col = self.color(t)
        patch = self.texture[None, :, :] * col[:, None, None]
        img[:, y0:y0 + s, x0:x0 + s] = patch
        return x0, y0

    def box(self, frame_size):
        s = self.size
        x0 = round(self.x - s / 2)
        y0 = round(self.y - s / 2)
        return BBox(x0 / frame_size, y0 / frame_size, s / frame_size, s / frame_size)


def generate_sequence(cfg, seed):
    """Deterministic frames + ground-truth boxes for one (cfg, seed)."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    n = cfg.frame_size

    # static low-contrast textured background
    cells = cfg.background_cells
    coarse = rng.uniform(0.25, 0.55, size=(3, cells, cells)).astype(np.float32)
    background = np.kron(coarse, np.ones((n // cells, n // cells), dtype=np.float32))

    target_phase = rng.uniform(0, 2 * np.pi)
    target = _Mover(rng, cfg, target_phase, 2 * np.pi * cfg.drift_rate,
                    cfg.target_size)

    # distractors hold the target's *initial* appearance (up to similarity),
    # so stale references match them better than the drifted target
    distractors = []
    for _ in range(cfg.num_distractors):
        offset = (1.0 - cfg.distractor_similarity) * np.pi
        phase = target_phase + offset * rng.choice([-1.0, 1.0])
        distractors.append(_Mover(rng, cfg, phase, 0.0, cfg.target_size))

    frames, boxes = [], []
    for t in range(cfg.length):
        img = background.copy()
        for d in distractors:
            d.paint(img, t)
        x0, y0 = target.paint(img, t)
        for start, end in cfg.occlusion_windows:
            if start <= t <= end:
                # occluder bar in background tones across the target
                s = cfg.target_size
                bar = np.array([0.4, 0.4, 0.4], dtype=np.float32)
                img[:, y0:y0 + s, max(0, x0 - 2):x0 + s + 2] = bar[:, None, None]
        img = np.clip(img, 0.0, 1.0)
        img = (np.round(img * 255.0).astype(np.uint8).astype(np.float32) / 255.0)
        frames.append(img)
        boxes.append(target.box(n))
        target.advance()
        for d in distractors:
            d.advance()
    return frames, boxes


# -- on-disk format (binary PPM frames + one "x,y,w,h" line per frame) --------


def write_ppm(path, frame):
    c, h, w = frame.shape
    data = np.round(np.clip(frame, 0, 1) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if not m:
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    pixels = np.frombuffer(blob[m.end():m.end() + w * h * 3], dtype=np.uint8)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0


def save_sequence(out_dir, frames, boxes):
    os.makedirs(out_dir, exist_ok=True)
    size = frames[0].shape[1]
    for i, frame in enumerate(frames):
        write_ppm(os.path.join(out_dir, f"{i:06d}.ppm"), frame)
    with open(os.path.join(out_dir, GT_FILENAME), "w", encoding="utf-8") as fh:
        for b in boxes:
            fh.write(f"{b.x * size:.2f},{b.y * size:.2f},"
                     f"{b.w * size:.2f},{b.h * size:.2f}\n")


def load_sequence(seq_dir):
    names = sorted(f for f in os.listdir(seq_dir) if f.endswith(".ppm"))
    frames = [read_ppm(os.path.join(seq_dir, f)) for f in names]
    boxes = load_boxes(os.path.join(seq_dir, GT_FILENAME), frames[0].shape[1])
    return frames, boxes


def load_boxes(path, frame_size):
    boxes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            x, y, w, h = (float(v) for v in line.split(","))
            boxes.append(BBox(x / frame_size, y / frame_size,
                              w / frame_size, h / frame_size))
    return boxes


def save_boxes(path, boxes, frame_size):
    with open(path, "w", encoding="utf-8") as fh:
        for b in boxes:
            fh.write(f"{b.x * frame_size:.2f},{b.y * frame_size:.2f},"
                     f"{b.w * frame_size:.2f},{b.h * frame_size:.2f}\n")
