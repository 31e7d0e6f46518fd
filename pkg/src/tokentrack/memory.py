"""Reference token memory.

The bank holds post-encoder tokens from past frames together with a
per-token importance accumulator. Each tracking step adds
attention-weighted classification mass to the accumulators, prunes to the
top-k when capacity would overflow, stamps the new frame's tokens with
target/background evidence, and appends them.

Token features live in autodiff Tensors (gradients flow through them in a
training unroll); importance and provenance are gradient-free numpy
bookkeeping.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Module
from .tensor import ShapeError, Tensor

PROBE_HEADER = "frame_id,token_index,source_frame_id,cell_row,cell_col,importance"


class ClassEmbeddings(Module):
    """Learned target / background evidence vectors added to new bank tokens."""

    def __init__(self, dim, rng):
        super().__init__()
        self.target = Tensor((0.02 * rng.standard_normal(dim)).astype(np.float32),
                             requires_grad=True)
        self.background = Tensor((0.02 * rng.standard_normal(dim)).astype(np.float32),
                                 requires_grad=True)


class ReferenceBank:
    """Ordered token set with importance accumulators and provenance."""

    def __init__(self, tokens, source_frame, cell_row, cell_col,
                 capacity_max, target_len):
        n = tokens.shape[0]
        if not (len(source_frame) == len(cell_row) == len(cell_col) == n):
            raise ShapeError("provenance arrays must match token count")
        self.tokens = tokens
        self.importance = np.zeros(n, dtype=np.float32)
        self.source_frame = np.asarray(source_frame, dtype=np.int64)
        self.cell_row = np.asarray(cell_row, dtype=np.int64)
        self.cell_col = np.asarray(cell_col, dtype=np.int64)
        self.capacity_max = int(capacity_max)
        self.target_len = int(target_len)
        self.frames_since_reset = 0

    def __len__(self):
        return self.tokens.shape[0]

    @property
    def dim(self):
        return self.tokens.shape[1]

    @classmethod
    def from_frame_tokens(cls, tokens, frame_id, grid, capacity_max, target_len=None):
        rows = [rc[0] for rc in grid]
        cols = [rc[1] for rc in grid]
        n = tokens.shape[0]
        if target_len is None:
            target_len = n
        return cls(tokens, np.full(n, frame_id), rows, cols, capacity_max, target_len)

    def detach(self):
        """Cut the bank's token features out of any recorded graph."""
        self.tokens = self.tokens.detach()
        return self

    def snapshot_rows(self, frame_id):
        """Per-token probe rows: (frame_id, token_index, source, row, col, importance)."""
        return [
            (frame_id, i, int(self.source_frame[i]), int(self.cell_row[i]),
             int(self.cell_col[i]), float(self.importance[i]))
            for i in range(len(self))
        ]


def accumulate_importance(bank, cross_attention, cls_probs):
    """Add attention-weighted classification mass to each token's accumulator.

    For each layer the head-averaged attention column of a reference token
    is dotted with the per-search-token target probabilities; layer
    contributions are summed.
    """
    c = np.asarray(cls_probs, dtype=np.float64).reshape(-1)
    if c.size and (c.min() < 0.0 or c.max() > 1.0):
        raise ValueError("classification probabilities must lie in [0, 1]")
    nr = len(bank)
    delta = np.zeros(nr, dtype=np.float64)
    for a in cross_attention:
        a = np.asarray(a)
        if a.ndim != 3 or a.shape[1] != c.size or a.shape[2] != nr:
            raise ShapeError(f"attention block {a.shape} does not match "
                             f"Ns={c.size}, Nr={nr}")
        delta += a.mean(axis=0).T @ c
    bank.importance += delta.astype(np.float32)
    return delta.astype(np.float32)


def _topk_indices(bank, k):
    # largest W first; ties: most recent source frame, then smaller cell index
    cell_index = bank.cell_row * (bank.cell_col.max(initial=0) + 1) + bank.cell_col
    order = np.lexsort((cell_index, -bank.source_frame, -bank.importance.astype(np.float64)))
    return np.sort(order[:k])


def collect_topk(bank, k):
    """Prune the bank to the k most important tokens, keeping original order."""
    if not 1 <= k <= len(bank):
        raise ValueError(f"k={k} out of range for bank of {len(bank)} tokens")
    keep = _topk_indices(bank, k)
    bank.tokens = T.gather_rows(bank.tokens, keep)
    bank.importance = bank.importance[keep]
    bank.source_frame = bank.source_frame[keep]
    bank.cell_row = bank.cell_row[keep]
    bank.cell_col = bank.cell_col[keep]
    return bank


def integrate(s, c, embeds):
    """Stamp each search token with class evidence: S + C*E_t + (1-C)*E_b."""
    if isinstance(c, np.ndarray):
        c = Tensor(c.astype(np.float32))
    if c.size != s.shape[0]:
        raise ShapeError(f"classification map size {c.size} != token count {s.shape[0]}")
    cc = T.reshape(c, (c.size, 1))
    return s + cc * embeds.target + (1.0 - cc) * embeds.background


def update_bank(bank, s_prime, frame_id, grid):
    """Append a frame's integrated tokens, pruning first if capacity would overflow."""
    ns = s_prime.shape[0]
    if ns == 0:
        return bank
    if len(grid) != ns:
        raise ShapeError("grid map must cover every appended token")
    if len(bank) + ns > bank.capacity_max:
        collect_topk(bank, bank.target_len)
    bank.tokens = T.concat([bank.tokens, s_prime], axis=0)
    bank.importance = np.concatenate([bank.importance, np.zeros(ns, dtype=np.float32)])
    bank.source_frame = np.concatenate(
        [bank.source_frame, np.full(ns, frame_id, dtype=np.int64)])
    bank.cell_row = np.concatenate(
        [bank.cell_row, np.array([rc[0] for rc in grid], dtype=np.int64)])
    bank.cell_col = np.concatenate(
        [bank.cell_col, np.array([rc[1] for rc in grid], dtype=np.int64)])
    if len(bank) > bank.capacity_max:
        raise RuntimeError("bank exceeded capacity after update")
    return bank


def reset_importance(bank):
    """Zero the accumulators and the reset clock; tokens and provenance stay."""
    bank.importance = np.zeros(len(bank), dtype=np.float32)
    bank.frames_since_reset = 0
    return bank
