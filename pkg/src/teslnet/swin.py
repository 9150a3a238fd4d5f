"""Windowed multi-head self-attention with shifted windows.

A feature map is treated as a token grid (one token per spatial position,
dimension C). Two consecutive blocks run plain-window then shifted-window
attention; the shifted pass cyclically rolls the map and suppresses
cross-boundary pairs with an additive -1e9 mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import LayerNormChannels, Module, kaiming_uniform
from .nn_ops import conv2d_same
from .tensor import Param, ShapeError, Tensor

NEG_INF = -1e9


@dataclass
class WindowGrid:
    """Flattened non-overlapping M x M windows of a rolled feature map."""

    tokens: Tensor  # [N * num_windows, M*M, C]
    batch: int
    height: int
    width: int
    window: int
    shift: int

    @property
    def num_windows(self) -> int:
        return (self.height // self.window) * (self.width // self.window)


def _check_divisible(h: int, w: int, m: int):
    if h % m or w % m:
        raise ShapeError(f"spatial extents ({h}, {w}) not divisible by window {m}")


def window_partition(x: Tensor, m: int, shift: int = 0) -> WindowGrid:
    """Roll by (-shift, -shift) then tile into M x M token windows."""
    n, c, h, w = x.shape
    _check_divisible(h, w, m)
    if shift not in (0, m // 2):
        raise ValueError(f"shift must be 0 or {m // 2}, got {shift}")
    if shift:
        x = T.roll(x, (-shift, -shift), (2, 3))
    t = x.transpose(0, 2, 3, 1)                                   # NHWC
    t = t.reshape(n, h // m, m, w // m, m, c)
    t = t.transpose(0, 1, 3, 2, 4, 5)
    tokens = t.reshape(n * (h // m) * (w // m), m * m, c)
    return WindowGrid(tokens, n, h, w, m, shift)


def window_merge(wg: WindowGrid) -> Tensor:
    """Inverse of window_partition, including the un-roll."""
    n, h, w, m, c = wg.batch, wg.height, wg.width, wg.window, wg.tokens.shape[-1]
    t = wg.tokens.reshape(n, h // m, w // m, m, m, c)
    t = t.transpose(0, 1, 3, 2, 4, 5)
    t = t.reshape(n, h, w, c).transpose(0, 3, 1, 2)
    if wg.shift:
        t = T.roll(t, (wg.shift, wg.shift), (2, 3))
    return t


def relative_index_map(m: int) -> np.ndarray:
    """[M^2, M^2] lookup into a (2M-1)^2 bias table, by (drow, dcol) offset."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij"), axis=0)
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]       # [2, M^2, M^2]
    return (rel[0] + m - 1) * (2 * m - 1) + (rel[1] + m - 1)


def shift_attention_mask(h: int, w: int, m: int, shift: int) -> np.ndarray:
    """[num_windows, M^2, M^2] additive mask for shifted-window attention.

    Tokens originating from different pre-shift regions get -1e9 so no
    attention mass crosses the cyclic seam.
    """
    _check_divisible(h, w, m)
    img = np.zeros((h, w))
    cnt = 0
    slices = (slice(0, -m), slice(-m, -shift), slice(-shift, None))
    for hs in slices:
        for ws in slices:
            img[hs, ws] = cnt
            cnt += 1
    img = np.roll(img, (-shift, -shift), axis=(0, 1))
    wins = img.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    diff = wins[:, :, None] - wins[:, None, :]
    return np.where(diff != 0, NEG_INF, 0.0)


class WindowAttention(Module):
    """Multi-head attention within windows, with learned relative position bias."""

    def __init__(self, c: int, heads: int, m: int, rng: np.random.Generator,
                 dtype=np.float32):
        if c % heads:
            raise ShapeError(f"channels {c} not divisible by heads {heads}")
        self.wq = Param(kaiming_uniform(rng, (c, c), c, dtype))
        self.wk = Param(kaiming_uniform(rng, (c, c), c, dtype))
        self.wv = Param(kaiming_uniform(rng, (c, c), c, dtype))
        self.wo = Param(kaiming_uniform(rng, (c, c), c, dtype))
        self.bias_table = Param(np.zeros((heads, (2 * m - 1) ** 2), dtype=dtype))
        self.rel_index = relative_index_map(m)
        self.heads = heads
        self.dim = c
        self.head_dim = c // heads
        self.window = m

    def forward(self, wg: WindowGrid, mask: np.ndarray | None = None) -> WindowGrid:
        b, t, c = wg.tokens.shape
        if c != self.dim:
            raise ShapeError(f"token dim {c} does not match attention dim {self.dim}")
        heads, d = self.heads, self.head_dim

        def split_heads(x):
            return x.reshape(b, t, heads, d).transpose(0, 2, 1, 3)

        q = split_heads(wg.tokens @ self.wq)
        k = split_heads(wg.tokens @ self.wk)
        v = split_heads(wg.tokens @ self.wv)

        logits = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d))
        bias = T.take_lastdim(self.bias_table, self.rel_index)       # [heads, T, T]
        logits = logits + bias.reshape(1, heads, t, t)
        if mask is not None:
            nw = wg.num_windows
            if mask.shape != (nw, t, t):
                raise ShapeError(f"mask shape {mask.shape} != {(nw, t, t)}")
            logits = logits.reshape(b // nw, nw, heads, t, t) + Tensor(
                mask[None, :, None].astype(logits.dtype))
            logits = logits.reshape(b, heads, t, t)
        attn = T.softmax_lastdim(logits)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, c)
        out = out @ self.wo
        return WindowGrid(out, wg.batch, wg.height, wg.width, wg.window, wg.shift)


class TokenMLP(Module):
    """Position-wise two-layer MLP (1x1 convs) with GELU, expansion x4."""

    def __init__(self, c: int, ratio: int, rng: np.random.Generator, dtype=np.float32):
        hidden = ratio * c
        self.fc1 = Param(kaiming_uniform(rng, (hidden, c, 1, 1), c, dtype))
        self.b1 = Param(np.zeros(hidden, dtype=dtype))
        self.fc2 = Param(kaiming_uniform(rng, (c, hidden, 1, 1), hidden, dtype))
        self.b2 = Param(np.zeros(c, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        y = conv2d_same(x, self.fc1) + self.b1.reshape(1, -1, 1, 1)
        y = T.gelu(y)
        return conv2d_same(y, self.fc2) + self.b2.reshape(1, -1, 1, 1)


class SwinBlockPair(Module):
    """Two consecutive blocks: plain-window then shifted-window attention,
    each followed by an MLP, all sublayers residual with pre-norm."""

    def __init__(self, c: int, heads: int, m: int, rng: np.random.Generator,
                 mlp_ratio: int = 4, dtype=np.float32):
        self.ln1a = LayerNormChannels(c, dtype=dtype)
        self.attn_plain = WindowAttention(c, heads, m, rng, dtype=dtype)
        self.ln2a = LayerNormChannels(c, dtype=dtype)
        self.mlp_a = TokenMLP(c, mlp_ratio, rng, dtype=dtype)
        self.ln1b = LayerNormChannels(c, dtype=dtype)
        self.attn_shift = WindowAttention(c, heads, m, rng, dtype=dtype)
        self.ln2b = LayerNormChannels(c, dtype=dtype)
        self.mlp_b = TokenMLP(c, mlp_ratio, rng, dtype=dtype)
        self.window = m
        self.shift = m // 2

    def _attend(self, x: Tensor, attn: WindowAttention, shift: int) -> Tensor:
        n, c, h, w = x.shape
        wg = window_partition(x, self.window, shift)
        mask = shift_attention_mask(h, w, self.window, shift) if shift else None
        return window_merge(attn.forward(wg, mask))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self._attend(self.ln1a.forward(x), self.attn_plain, 0)
        x = x + self.mlp_a.forward(self.ln2a.forward(x))
        x = x + self._attend(self.ln1b.forward(x), self.attn_shift, self.shift)
        x = x + self.mlp_b.forward(self.ln2b.forward(x))
        return x
