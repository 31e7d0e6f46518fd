"""Autoregressive tracking state machine.

Template and search frames take the identical path: encode against the
current reference bank, predict, stamp the tokens with class evidence, and
fold them into the bank. The template is just the frame the bank is
initialized from, with ground-truth-derived class scores standing in for a
prediction that does not exist yet.

Ablation switches: attention "uni" | "bi", update "tcm" | "template" |
"none", and autoregressive on/off (off re-extracts bank-bound features
with an empty reference context, the traditional re-encode strategy).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import memory
from . import tensor as T
from .checkpoint import load as load_checkpoint
from .checkpoint import save as save_checkpoint
from .encoder import Encoder, EncoderConfig
from .head import BBox, PredictionHead, decode_box, total_loss
from .memory import ClassEmbeddings, ReferenceBank
from .nn import Module
from .optim import AdamW
from .tensor import Graph, Tensor, no_grad


@dataclass
class TrackerConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    reset_period: int = 400
    capacity_multiplier: int = 2
    attention: str = "uni"            # "uni" | "bi"
    update: str = "tcm"               # "tcm" | "template" | "none"
    autoregressive: bool = True
    hard_class_scores: bool = False   # threshold C at 0.5 before memory use
    template_update_interval: int = 25
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0
    lr_backbone: float = 4e-5
    lr_head: float = 4e-4
    weight_decay: float = 1e-4

    @property
    def bank_capacity(self):
        return self.capacity_multiplier * self.encoder.num_search_tokens


class TrackerModel(Module):
    def __init__(self, config, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config = config
        self.encoder = Encoder(config.encoder, rng)
        self.head = PredictionHead(config.encoder.embed_dim, rng)
        self.embeds = ClassEmbeddings(config.encoder.embed_dim, rng)

    def save(self, path):
        entries = {name: p.data for name, p in self.named_parameters()}
        entries.update({name: b for name, b in self.named_buffers()})
        save_checkpoint(path, entries)

    def load(self, path):
        entries = load_checkpoint(path)
        for name, p in self.named_parameters():
            p.data[...] = entries[name]
        for name, b in self.named_buffers():
            b[...] = entries[name]
        return self


def make_optimizer(model, config):
    backbone = model.encoder.parameters()
    rest = model.head.parameters() + model.embeds.parameters()
    return AdamW(
        [
            {"params": backbone, "lr": config.lr_backbone},
            {"params": rest, "lr": config.lr_head},
        ],
        weight_decay=config.weight_decay,
    )


@dataclass
class TrackState:
    bank: ReferenceBank
    frame_id: int
    last_box: BBox
    reset_period: int
    initial_tokens: Tensor = None      # frozen template tokens for the
    initial_provenance: tuple = None   # template-update ablation
    resets: int = 0
    last_reset_frame: int = -1


@dataclass
class TrainSample:
    template_frame: np.ndarray
    template_box: BBox
    search_frames: list
    search_boxes: list


def cells_in_box(box, grid_shape):
    """Binary per-cell map: 1 where the cell center falls inside the box."""
    hg, wg = grid_shape
    ys = (np.arange(hg) + 0.5) / hg
    xs = (np.arange(wg) + 0.5) / wg
    inside_y = (ys >= box.y) & (ys <= box.y + box.h)
    inside_x = (xs >= box.x) & (xs <= box.x + box.w)
    c = (inside_y[:, None] & inside_x[None, :]).astype(np.float32)
    if c.sum() == 0:
        j = min(int(box.cx * wg), wg - 1)
        i = min(int(box.cy * hg), hg - 1)
        c[i, j] = 1.0
    return c.reshape(-1)


def crop_template(frame, box, template_size):
    """Cut a template-sized window centered on the box, clamped in-bounds.

    Returns the crop and the box re-expressed in crop coordinates.
    """
    _, h, w = frame.shape
    cx, cy = box.cx * w, box.cy * h
    x0 = int(round(cx - template_size / 2.0))
    y0 = int(round(cy - template_size / 2.0))
    x0 = min(max(x0, 0), w - template_size)
    y0 = min(max(y0, 0), h - template_size)
    crop = np.ascontiguousarray(frame[:, y0:y0 + template_size, x0:x0 + template_size])
    bx = (box.x * w - x0) / template_size
    by = (box.y * h - y0) / template_size
    bw = box.w * w / template_size
    bh = box.h * h / template_size
    eps = 1e-4
    bx = min(max(bx, 0.0), 1.0 - eps)
    by = min(max(by, 0.0), 1.0 - eps)
    bw = min(max(bw, eps), 1.0 - bx)
    bh = min(max(bh, eps), 1.0 - by)
    return crop, BBox(bx, by, bw, bh)


def _encode_for_bank(model, frame, box_or_probs, config, reference=None):
    """Encode a frame and stamp its tokens for bank entry.

    ``box_or_probs`` is either a BBox (derive cell scores from geometry, the
    t=0 boundary condition) or a per-token probability vector.
    """
    out = model.encoder.encode(frame, reference, mode=config.attention)
    gh = frame.shape[1] // config.encoder.patch_size
    gw = frame.shape[2] // config.encoder.patch_size
    if isinstance(box_or_probs, BBox):
        c = cells_in_box(box_or_probs, (gh, gw))
    else:
        c = box_or_probs
    if config.hard_class_scores and not isinstance(c, Tensor):
        c = (np.asarray(c) > 0.5).astype(np.float32)
    s_prime = memory.integrate(out.search_tokens, c, model.embeds)
    return out, s_prime


def init(model, template_frame, template_box, config=None):
    """Start a track: encode the template with an empty bank, fill the bank."""
    config = config or model.config
    if not (0.0 <= template_box.x and 0.0 <= template_box.y
            and template_box.w > 0 and template_box.h > 0
            and template_box.x + template_box.w <= 1.0 + 1e-6
            and template_box.y + template_box.h <= 1.0 + 1e-6):
        raise ValueError(f"invalid template box {template_box}")
    out, s_prime = _encode_for_bank(model, template_frame, template_box, config)
    n0 = s_prime.shape[0]
    bank = ReferenceBank.from_frame_tokens(
        s_prime, frame_id=0, grid=out.grid,
        capacity_max=config.bank_capacity, target_len=n0)
    return TrackState(
        bank=bank,
        frame_id=0,
        last_box=template_box,
        reset_period=config.reset_period,
        initial_tokens=s_prime,
        initial_provenance=(bank.source_frame.copy(), bank.cell_row.copy(),
                            bank.cell_col.copy()),
    )


def _forward_step(model, state, frame, config):
    """One frame through the shared encode/predict/memory path.

    Used verbatim by inference stepping and the training unroll; returns the
    head output so the caller can decode or attach a loss.
    """
    bank = state.bank
    reference = bank.tokens if len(bank) > 0 else None
    out = model.encoder.encode(frame, reference, mode=config.attention)
    gh = frame.shape[1] // config.encoder.patch_size
    gw = frame.shape[2] // config.encoder.patch_size
    head_out = model.head(out.search_tokens, (gh, gw))
    box, confidence = decode_box(head_out)
    state.frame_id += 1
    cls_probs = np.ascontiguousarray(head_out.cls.data.reshape(-1), dtype=np.float64)
    cls_probs = np.clip(cls_probs, 0.0, 1.0)

    if config.update == "tcm":
        memory.accumulate_importance(bank, out.cross_attention, cls_probs)
        if config.hard_class_scores:
            c = (cls_probs > 0.5).astype(np.float32)
        else:
            c = T.reshape(head_out.cls, (gh * gw,))
        if config.autoregressive:
            s_base = out.search_tokens
        else:
            fresh = model.encoder.encode(frame, None, mode=config.attention)
            s_base = fresh.search_tokens
        s_prime = memory.integrate(s_base, c, model.embeds)
        memory.update_bank(bank, s_prime, state.frame_id, out.grid)
    elif config.update == "template":
        if state.frame_id % config.template_update_interval == 0:
            crop, crop_box = crop_template(frame, box, config.encoder.template_size)
            ref = bank.tokens if (config.autoregressive and len(bank) > 0) else None
            dyn_out, dyn_tokens = _encode_for_bank(model, crop, crop_box, config,
                                                   reference=ref)
            bank.tokens = T.concat([state.initial_tokens, dyn_tokens], axis=0)
            src0, row0, col0 = state.initial_provenance
            n_dyn = dyn_tokens.shape[0]
            bank.source_frame = np.concatenate(
                [src0, np.full(n_dyn, state.frame_id, dtype=np.int64)])
            bank.cell_row = np.concatenate(
                [row0, np.array([rc[0] for rc in dyn_out.grid], dtype=np.int64)])
            bank.cell_col = np.concatenate(
                [col0, np.array([rc[1] for rc in dyn_out.grid], dtype=np.int64)])
            bank.importance = np.zeros(len(bank), dtype=np.float32)
    # update == "none": the bank stays as initialized

    bank.frames_since_reset += 1
    reset_happened = False
    if bank.frames_since_reset >= state.reset_period:
        memory.reset_importance(bank)
        state.resets += 1
        state.last_reset_frame = state.frame_id
        reset_happened = True

    state.last_box = box
    return head_out, out, box, confidence, reset_happened


def step(model, state, frame, config=None):
    """Track one frame; returns (box, confidence, state)."""
    config = config or model.config
    with no_grad():
        _, _, box, confidence, _ = _forward_step(model, state, frame, config)
    return box, confidence, state


def train_step(model, sample, opt, config=None):
    """One optimizer update over a template + 4-search-frame unroll.

    Gradients flow through the bank tokens across the whole unroll; the
    importance accumulators stay gradient-free bookkeeping.
    """
    config = config or model.config
    with Graph() as graph:
        state = init(model, sample.template_frame, sample.template_box, config)
        losses = []
        for frame, gt in zip(sample.search_frames, sample.search_boxes):
            head_out, _, _, _, _ = _forward_step(model, state, frame, config)
            losses.append(total_loss(head_out, gt,
                                     lambda_iou=config.lambda_iou,
                                     lambda_l1=config.lambda_l1))
        loss = T.concat([T.reshape(l, (1,)) for l in losses], axis=0).mean()
        loss_val = float(loss.item())
        if not np.isfinite(loss_val):
            raise T.NumericError(f"training loss is not finite: {loss_val}")
        graph.backward(loss)
    opt.step()
    opt.zero_grad()
    return loss_val


def run_sequence(model, frames, init_box, config=None, collect_probe=False):
    """Track a whole sequence from its first frame and ground-truth box.

    Returns (boxes, confidences, per-frame seconds, trace records) where
    the trace carries confidence, bank size, and reset events per frame.
    """
    config = config or model.config
    if len(frames) == 0:
        raise ValueError("run_sequence needs at least one frame")
    with no_grad():
        crop, crop_box = crop_template(frames[0], init_box,
                                       config.encoder.template_size)
        state = init(model, crop, crop_box, config)
    state.last_box = init_box
    boxes, confidences, timings, trace, probe_rows = [], [], [], [], []
    if collect_probe:
        probe_rows.extend(state.bank.snapshot_rows(0))
    for frame in frames[1:]:
        t0 = time.perf_counter()
        with no_grad():
            _, _, box, conf, reset_happened = _forward_step(model, state, frame, config)
        timings.append(time.perf_counter() - t0)
        boxes.append(box)
        confidences.append(conf)
        trace.append({
            "frame_id": state.frame_id,
            "confidence": conf,
            "bank_size": len(state.bank),
            "reset": reset_happened,
        })
        if collect_probe:
            probe_rows.extend(state.bank.snapshot_rows(state.frame_id))
    if collect_probe:
        return boxes, confidences, timings, trace, probe_rows
    return boxes, confidences, timings, trace
