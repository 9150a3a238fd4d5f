"""Convolutional LSTM cell and the bidirectional skip-fusion wrapper.

Gate transforms are same-padding convolutions over the channel
concatenation [h, x]; the bidirectional fuse runs one cell forward and one
over the reversed sequence, concatenating the two final hidden states.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .layers import Module, kaiming_uniform
from .nn_ops import conv2d_same
from .tensor import Param, ShapeError, Tensor


@dataclass
class ConvLSTMState:
    h: Tensor  # hidden state [N, C_hidden, H, W]
    c: Tensor  # cell state, same shape


class ConvLSTMCell(Module):
    """Input/forget/output/candidate gates, each a 3x3 conv over [h, x]."""

    def __init__(self, c_in: int, c_hidden: int, rng: np.random.Generator,
                 k: int = 3, dtype=np.float32):
        cat = c_in + c_hidden
        fan = cat * k * k
        self.w_i = Param(kaiming_uniform(rng, (c_hidden, cat, k, k), fan, dtype))
        self.w_f = Param(kaiming_uniform(rng, (c_hidden, cat, k, k), fan, dtype))
        self.w_o = Param(kaiming_uniform(rng, (c_hidden, cat, k, k), fan, dtype))
        self.w_c = Param(kaiming_uniform(rng, (c_hidden, cat, k, k), fan, dtype))
        self.b_i = Param(np.zeros(c_hidden, dtype=dtype))
        self.b_f = Param(np.zeros(c_hidden, dtype=dtype))
        self.b_o = Param(np.zeros(c_hidden, dtype=dtype))
        self.b_c = Param(np.zeros(c_hidden, dtype=dtype))
        self.c_in = c_in
        self.c_hidden = c_hidden

    def zero_state(self, n: int, h: int, w: int, dtype) -> ConvLSTMState:
        z = np.zeros((n, self.c_hidden, h, w), dtype=dtype)
        return ConvLSTMState(Tensor(z.copy()), Tensor(z.copy()))

    def step(self, state: ConvLSTMState, x: Tensor) -> ConvLSTMState:
        if state.h.shape[2:] != x.shape[2:] or x.shape[1] != self.c_in:
            raise ShapeError(
                f"convlstm step shape mismatch: state {state.h.shape}, input {x.shape}")
        z = T.concat([state.h, x], axis=1)
        # one fused convolution for all four gates, then channel slices
        w_all = T.concat([self.w_i, self.w_f, self.w_o, self.w_c], axis=0)
        b_all = T.concat([self.b_i, self.b_f, self.b_o, self.b_c], axis=0)
        pre = conv2d_same(z, w_all) + b_all.reshape(1, -1, 1, 1)
        ch = self.c_hidden
        i = T.sigmoid(T.narrow(pre, 1, 0, ch))
        f = T.sigmoid(T.narrow(pre, 1, ch, ch))
        o = T.sigmoid(T.narrow(pre, 1, 2 * ch, ch))
        c_tilde = T.tanh(T.narrow(pre, 1, 3 * ch, ch))
        c = f * state.c + i * c_tilde
        h = o * T.tanh(c)
        return ConvLSTMState(h, c)

    def run(self, seq: Sequence[Tensor]) -> ConvLSTMState:
        n, _, h, w = seq[0].shape
        state = self.zero_state(n, h, w, seq[0].dtype)
        for x in seq:
            state = self.step(state, x)
        return state


def bi_convlstm_fuse(fwd: ConvLSTMCell, bwd: ConvLSTMCell,
                     seq: Sequence[Tensor]) -> Tensor:
    """Run forward over seq and backward over reversed seq; concatenate the
    final hidden states along channels -> [N, 2 * C_hidden, H, W]."""
    if len(seq) == 0:
        raise ValueError("bi_convlstm_fuse needs a nonempty sequence")
    shapes = {t.shape for t in seq}
    if len(shapes) != 1:
        raise ShapeError(f"sequence elements disagree in shape: {sorted(shapes)}")
    h_fwd = fwd.run(list(seq)).h
    h_bwd = bwd.run(list(reversed(seq))).h
    return T.concat([h_fwd, h_bwd], axis=1)


class BiConvLSTM(Module):
    """Paired forward/backward cells used at one skip connection."""

    def __init__(self, c_in: int, c_hidden: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.fwd = ConvLSTMCell(c_in, c_hidden, rng, dtype=dtype)
        self.bwd = ConvLSTMCell(c_in, c_hidden, rng, dtype=dtype)

    def fuse(self, seq: Sequence[Tensor]) -> Tensor:
        return bi_convlstm_fuse(self.fwd, self.bwd, seq)
