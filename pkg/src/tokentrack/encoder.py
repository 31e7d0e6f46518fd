"""Patch embedding plus a stack of unidirectional-attention transformer layers.

Each layer lets search-token queries attend over the concatenation of
reference and search keys/values, softmax-normalized jointly, while the
reference tokens pass through every layer unchanged. The reference-column
block of the attention is exported per layer and head for the token memory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Mlp, Module
from .tensor import ShapeError, Tensor


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    template_size: int = 32
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ShapeError("image_size must be divisible by patch_size")
        if self.template_size % self.patch_size:
            raise ShapeError("template_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ShapeError("embed_dim must be divisible by num_heads")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def template_grid(self):
        return self.template_size // self.patch_size

    @property
    def num_search_tokens(self):
        return self.grid * self.grid


@dataclass
class EncodeOutput:
    """Search tokens plus the per-layer, per-head search-to-reference attention."""
    search_tokens: Tensor                       # (Ns, d)
    cross_attention: list                       # L arrays of shape (M, Ns, Nr)
    grid: list                                  # token index -> (row, col)
    score_macs: int = 0                         # QK^T multiply-accumulates
    value_macs: int = 0                         # A V multiply-accumulates


def _split_heads(x, num_heads):
    n, d = x.shape
    dk = d // num_heads
    return T.transpose(T.reshape(x, (n, num_heads, dk)), (1, 0, 2))


def _merge_heads(x):
    m, n, dk = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (n, m * dk))


class AttentionLayer(Module):
    """Pre-norm transformer block with joint reference+search key/value space."""

    def __init__(self, dim, num_heads, mlp_ratio, rng):
        super().__init__()
        self.num_heads = num_heads
        self.scale = 1.0 / np.sqrt(dim // num_heads)
        self.norm1 = LayerNorm(dim)
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng)

    def __call__(self, s, r=None, mode="uni"):
        """Returns (s_out, a_ref, r_out).

        ``a_ref`` is the (num_heads, Ns, Nr) post-softmax attention from
        search rows to reference columns, detached to plain f32. In "uni"
        mode ``r_out`` is ``r`` itself, untouched; in "bi" mode reference
        rows are updated like any other row.
        """
        nr = 0 if r is None else r.shape[0]
        if mode == "bi" and nr > 0:
            return self._joint(s, r)
        ns, dim = s.shape
        hs = self.norm1(s)
        if nr > 0:
            if r.shape[1] != dim:
                raise ShapeError(f"reference dim {r.shape[1]} != search dim {dim}")
            hr = self.norm1(r)
            k = T.concat([self.k(hr), self.k(hs)], axis=0)
            v = T.concat([self.v(hr), self.v(hs)], axis=0)
        else:
            k = self.k(hs)
            v = self.v(hs)
        q = _split_heads(self.q(hs), self.num_heads)
        kh = _split_heads(k, self.num_heads)
        vh = _split_heads(v, self.num_heads)
        attn = T.softmax_rows(T.matmul(q, T.transpose(kh, (0, 2, 1))) * self.scale)
        out = self.proj(_merge_heads(T.matmul(attn, vh)))
        s = s + out
        s = s + self.mlp(self.norm2(s))
        a_ref = np.ascontiguousarray(attn.data[:, :, :nr], dtype=np.float32)
        return s, a_ref, r

    def _joint(self, s, r):
        # bidirectional ablation path: one self-attention over [R; S]
        nr, ns = r.shape[0], s.shape[0]
        x = T.concat([r, s], axis=0)
        h = self.norm1(x)
        q = _split_heads(self.q(h), self.num_heads)
        kh = _split_heads(self.k(h), self.num_heads)
        vh = _split_heads(self.v(h), self.num_heads)
        attn = T.softmax_rows(T.matmul(q, T.transpose(kh, (0, 2, 1))) * self.scale)
        out = self.proj(_merge_heads(T.matmul(attn, vh)))
        x = x + out
        x = x + self.mlp(self.norm2(x))
        r_out = T.gather_rows(x, np.arange(nr))
        s_out = T.gather_rows(x, np.arange(nr, nr + ns))
        a_ref = np.ascontiguousarray(attn.data[:, nr:, :nr], dtype=np.float32)
        return s_out, a_ref, r_out


class Encoder(Module):
    """Shared backbone for template and search frames."""

    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        c = config
        patch_dim = c.channels * c.patch_size * c.patch_size
        self.patch_embed = Linear(patch_dim, c.embed_dim, rng)
        self.pos_embed = Tensor(
            (0.02 * rng.standard_normal((c.grid * c.grid, c.embed_dim))).astype(np.float32),
            requires_grad=True)
        self._layers = []
        for j in range(1, c.num_layers + 1):
            layer = AttentionLayer(c.embed_dim, c.num_heads, c.mlp_ratio, rng)
            setattr(self, f"layer{j}", layer)
            self._layers.append(layer)

    def patch_tokens(self, frame):
        """Embed a (C,H,W) frame into grid tokens with positional embeddings.

        Smaller frames (templates) reuse the top-left sub-grid of the
        positional table.
        """
        c = self.config
        ch, h, w = frame.shape
        if h % c.patch_size or w % c.patch_size:
            raise ShapeError(f"frame {h}x{w} not divisible by patch size {c.patch_size}")
        gh, gw = h // c.patch_size, w // c.patch_size
        if gh > c.grid or gw > c.grid:
            raise ShapeError(f"frame grid {gh}x{gw} exceeds configured {c.grid}x{c.grid}")
        p = c.patch_size
        patches = (np.asarray(frame, dtype=np.float32)
                   .reshape(ch, gh, p, gw, p)
                   .transpose(1, 3, 0, 2, 4)
                   .reshape(gh * gw, ch * p * p))
        tokens = self.patch_embed(Tensor(patches))
        idx = np.array([row * c.grid + col for row in range(gh) for col in range(gw)])
        tokens = tokens + T.gather_rows(self.pos_embed, idx)
        grid = [(row, col) for row in range(gh) for col in range(gw)]
        return tokens, grid

    def encode(self, frame, reference=None, mode="uni"):
        """Run the full stack; every layer sees the same reference tokens."""
        s, grid = self.patch_tokens(frame)
        c = self.config
        ns = s.shape[0]
        nr = 0 if reference is None else reference.shape[0]
        cross = []
        r = reference
        for layer in self._layers:
            s, a_ref, r = layer(s, r, mode=mode)
            cross.append(a_ref)
        if mode == "bi" and nr > 0:
            macs_per_layer = (nr + ns) * (nr + ns) * c.embed_dim
        else:
            macs_per_layer = ns * (nr + ns) * c.embed_dim
        return EncodeOutput(
            search_tokens=s,
            cross_attention=cross,
            grid=grid,
            score_macs=macs_per_layer * c.num_layers,
            value_macs=macs_per_layer * c.num_layers,
        )
