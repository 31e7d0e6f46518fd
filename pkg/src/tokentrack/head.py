"""Prediction head over the search-token grid, box decoding, and losses.

The head reshapes tokens into a feature map and runs three small FCN
branches (classification, sub-cell offset, normalized size), each a stack
of Conv-BN-ReLU blocks with a 1x1 projection and a sigmoid. Training uses
penalty-reduced focal loss on a Gaussian heat map plus L1 and generalized
IoU on the box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import ShapeError, Tensor

HEAD_DEPTH = 3  # Conv-BN-ReLU blocks per branch
FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
LAMBDA_IOU = 2.0
LAMBDA_L1 = 5.0
_EPS = 1e-6


@dataclass
class BBox:
    """Axis-aligned box, normalized [0,1] coordinates, top-left + size."""
    x: float
    y: float
    w: float
    h: float

    @property
    def cx(self):
        return self.x + self.w / 2.0

    @property
    def cy(self):
        return self.y + self.h / 2.0

    def as_array(self):
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def iou(self, other):
        ix = max(0.0, min(self.x + self.w, other.x + other.w) - max(self.x, other.x))
        iy = max(0.0, min(self.y + self.h, other.y + other.h) - max(self.y, other.y))
        inter = ix * iy
        union = self.w * self.h + other.w * other.h - inter
        return inter / union if union > 0 else 0.0


@dataclass
class HeadOutput:
    cls: Tensor      # (Hg, Wg), sigmoid probabilities
    offset: Tensor   # (2, Hg, Wg): x then y sub-cell offsets
    size: Tensor     # (2, Hg, Wg): normalized w then h

    @property
    def grid_shape(self):
        return self.cls.shape


class _Branch(Module):
    def __init__(self, dim, out_ch, rng):
        super().__init__()
        self._blocks = []
        for i in range(HEAD_DEPTH):
            conv = Conv2d(dim, dim, 3, rng)
            bn = BatchNorm2d(dim)
            setattr(self, f"conv{i}", conv)
            setattr(self, f"bn{i}", bn)
            self._blocks.append((conv, bn))
        self.out = Conv2d(dim, out_ch, 1, rng)

    def __call__(self, x):
        for conv, bn in self._blocks:
            x = T.relu(bn(conv(x)))
        return T.sigmoid(self.out(x))


class PredictionHead(Module):
    def __init__(self, dim, rng):
        super().__init__()
        self.dim = dim
        self.cls = _Branch(dim, 1, rng)
        self.offset = _Branch(dim, 2, rng)
        self.size = _Branch(dim, 2, rng)

    def __call__(self, s, grid_shape):
        hg, wg = grid_shape
        ns, d = s.shape
        if ns != hg * wg:
            raise ShapeError(f"{ns} tokens do not tile a {hg}x{wg} grid")
        fmap = T.reshape(T.transpose(s, (1, 0)), (d, hg, wg))
        return HeadOutput(
            cls=T.reshape(self.cls(fmap), (hg, wg)),
            offset=self.offset(fmap),
            size=self.size(fmap),
        )


def decode_box(head):
    """Argmax cell plus its offsets and size; ties go to smaller row, then column."""
    cls = head.cls.data
    hg, wg = cls.shape
    flat = int(np.argmax(cls))  # row-major argmax = required tie-break
    i, j = divmod(flat, wg)
    ox = float(head.offset.data[0, i, j])
    oy = float(head.offset.data[1, i, j])
    w = float(head.size.data[0, i, j])
    h = float(head.size.data[1, i, j])
    cx = (j + ox) / wg
    cy = (i + oy) / hg
    x = min(max(cx - w / 2.0, 0.0), 1.0)
    y = min(max(cy - h / 2.0, 0.0), 1.0)
    w = max(min(w, 1.0 - x), _EPS)
    h = max(min(h, 1.0 - y), _EPS)
    return BBox(x, y, w, h), float(cls[i, j])


def gaussian_target(gt, grid_shape):
    """Heat map with an exact 1 at the center cell and a Gaussian falloff.

    The Gaussian radius follows the box's smaller side in cells (floor 1),
    with sigma = radius / 3.
    """
    hg, wg = grid_shape
    j = min(int(gt.cx * wg), wg - 1)
    i = min(int(gt.cy * hg), hg - 1)
    radius = max(1, int(round(min(gt.w * wg, gt.h * hg) / 2.0)))
    sigma = radius / 3.0
    ys, xs = np.mgrid[0:hg, 0:wg]
    t = np.exp(-((xs - j) ** 2 + (ys - i) ** 2) / (2.0 * sigma * sigma))
    t[i, j] = 1.0
    return t.astype(np.float64), (i, j)


def focal_loss(cls, target):
    """Penalty-reduced pixelwise focal loss, normalized by positive count."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != cls.shape:
        raise ShapeError(f"target {t.shape} != cls {cls.shape}")
    pos = (t == 1.0)
    npos = int(pos.sum())
    if npos == 0:
        raise ValueError("focal loss target has no positive cell")
    p = T.clip(cls, _EPS, 1.0 - _EPS)
    pos_mask = Tensor(pos.astype(cls.dtype))
    neg_w = Tensor(((1.0 - t) ** FOCAL_BETA * ~pos).astype(cls.dtype))
    pos_term = ((1.0 - p) ** FOCAL_ALPHA) * T.log(p) * pos_mask
    neg_term = neg_w * (p ** FOCAL_ALPHA) * T.log(1.0 - p)
    return -(pos_term.sum() + neg_term.sum()) * (1.0 / npos)


def _box_elems(b):
    if isinstance(b, BBox):
        b = Tensor(b.as_array())
    if b.size != 4:
        raise ShapeError("box tensor must have 4 elements (x, y, w, h)")
    return [T.gather_rows(T.reshape(b, (4,)), [k]) for k in range(4)]


def giou_loss(pred, gt):
    """1 - GIoU for two boxes in (x, y, w, h) form; differentiable in both."""
    ax, ay, aw, ah = _box_elems(pred)
    bx, by, bw, bh = _box_elems(gt)
    for name, v in (("pred", (aw, ah)), ("gt", (bw, bh))):
        if float(v[0].data[0]) <= 0 or float(v[1].data[0]) <= 0:
            raise ValueError(f"{name} box has non-positive area")
    zero = Tensor(np.zeros(1, dtype=ax.dtype))
    ix = T.maximum(T.minimum(ax + aw, bx + bw) - T.maximum(ax, bx), zero)
    iy = T.maximum(T.minimum(ay + ah, by + bh) - T.maximum(ay, by), zero)
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    iou = inter / union
    ew = T.maximum(ax + aw, bx + bw) - T.minimum(ax, bx)
    eh = T.maximum(ay + ah, by + bh) - T.minimum(ay, by)
    enclose = ew * eh
    giou = iou - (enclose - union) / enclose
    return T.reshape(1.0 - giou, ())


def box_params_at(head, cell):
    """Offset and size tensors at one grid cell, kept on the graph."""
    i, j = cell
    hg, wg = head.grid_shape
    col = i * wg + j
    off = T.gather_rows(T.transpose(T.reshape(head.offset, (2, hg * wg)), (1, 0)), [col])
    size = T.gather_rows(T.transpose(T.reshape(head.size, (2, hg * wg)), (1, 0)), [col])
    return T.reshape(off, (2,)), T.reshape(size, (2,))


def decode_box_tensor(head):
    """Differentiable decode at the argmax cell (argmax itself is data-driven)."""
    hg, wg = head.grid_shape
    flat = int(np.argmax(head.cls.data))
    i, j = divmod(flat, wg)
    off, size = box_params_at(head, (i, j))
    ox, oy = [T.gather_rows(off, [k]) for k in range(2)]
    sw, sh = [T.gather_rows(size, [k]) for k in range(2)]
    cx = (ox + float(j)) * (1.0 / wg)
    cy = (oy + float(i)) * (1.0 / hg)
    return T.concat([cx - sw * 0.5, cy - sh * 0.5, sw, sh], axis=0)


def total_loss(head, gt, lambda_iou=LAMBDA_IOU, lambda_l1=LAMBDA_L1):
    """Focal classification + weighted GIoU + weighted L1 box regression.

    L1 compares the offset/size channels at the ground-truth center cell
    against their exact targets; GIoU scores the fully decoded box.
    """
    hg, wg = head.grid_shape
    target, (i, j) = gaussian_target(gt, (hg, wg))
    loss = focal_loss(head.cls, target)
    if lambda_iou:
        pred_box = decode_box_tensor(head)
        loss = loss + lambda_iou * giou_loss(pred_box, gt)
    if lambda_l1:
        off, size = box_params_at(head, (i, j))
        t_off = Tensor(np.array([gt.cx * wg - j, gt.cy * hg - i], dtype=head.cls.dtype))
        t_size = Tensor(np.array([gt.w, gt.h], dtype=head.cls.dtype))
        l1 = T.concat([T.abs_(off - t_off), T.abs_(size - t_size)], axis=0).mean()
        loss = loss + lambda_l1 * l1
    return T.reshape(loss, ())
