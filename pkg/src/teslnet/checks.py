"""Named finite-difference suites for every differentiable op, runnable from
the command line and reused by the acceptance tests.

Each suite builds a small float64 instance with a fixed seed and returns the
max relative error between tape and central-difference gradients.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import nn_ops, tensor as T
from .convlstm import ConvLSTMCell, bi_convlstm_fuse
from .gradcheck import grad_check, grad_check_wrt
from .layers import BatchNorm, DWSConv, LayerNormChannels, TransposedConv
from .model import PRESETS, TeslNet, TeslNetConfig
from .swin import (SwinBlockPair, WindowAttention, shift_attention_mask,
                   window_merge, window_partition)
from .tensor import Tensor
from .train import loss_fn

F64 = np.float64
THRESHOLD = 1e-4


def _rng():
    return np.random.default_rng(1234)


def _randn(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _check_layer(make_loss, layer, extra=()) -> float:
    errs = [grad_check_wrt(make_loss, p) for p in layer.params()]
    errs += [grad_check_wrt(make_loss, t) for t in extra]
    return max(errs)


def check_matmul() -> float:
    rng = _rng()
    a, b = _randn(rng, 3, 4), _randn(rng, 4, 2)
    e1 = grad_check_wrt(lambda: (T.matmul(a, b) * _randn(_rng(), 3, 2)).sum(), a)
    e2 = grad_check_wrt(lambda: (T.matmul(a, b) * _randn(_rng(), 3, 2)).sum(), b)
    return max(e1, e2)


def check_softmax() -> float:
    x = _randn(_rng(), 3, 5)
    w = _rng().standard_normal((3, 5))
    return grad_check(lambda v: (T.softmax_lastdim(v) * Tensor(w)).sum(), x)


def _pointwise(op) -> Callable[[], float]:
    def run():
        x = _randn(_rng(), 4, 7)
        w = _rng().standard_normal((4, 7))
        return grad_check(lambda v: (op(v) * Tensor(w)).sum(), x)
    return run


def check_maxpool() -> float:
    x = _randn(_rng(), 2, 3, 8, 8)
    w = _rng().standard_normal((2, 3, 4, 4))
    return grad_check(lambda v: (nn_ops.maxpool2x2(v) * Tensor(w)).sum(), x)


def check_dws_conv() -> float:
    rng = _rng()
    layer = DWSConv(3, 4, rng, dtype=F64)
    x = _randn(rng, 2, 3, 6, 6)
    w = rng.standard_normal((2, 4, 6, 6))
    return _check_layer(lambda: (layer.forward(x) * Tensor(w)).sum(), layer, extra=(x,))


def check_batchnorm() -> float:
    rng = _rng()
    layer = BatchNorm(3, dtype=F64)
    x = _randn(rng, 2, 3, 4, 4)
    w = rng.standard_normal((2, 3, 4, 4))
    return _check_layer(lambda: (layer.forward(x, training=True) * Tensor(w)).sum(),
                        layer, extra=(x,))


def check_layernorm() -> float:
    rng = _rng()
    layer = LayerNormChannels(5, dtype=F64)
    x = _randn(rng, 2, 5, 3, 3)
    w = rng.standard_normal((2, 5, 3, 3))
    return _check_layer(lambda: (layer.forward(x) * Tensor(w)).sum(), layer, extra=(x,))


def check_transposed_conv() -> float:
    rng = _rng()
    layer = TransposedConv(3, 2, rng, dtype=F64)
    x = _randn(rng, 2, 3, 4, 4)
    w = rng.standard_normal((2, 2, 8, 8))
    return _check_layer(lambda: (layer.forward(x) * Tensor(w)).sum(), layer, extra=(x,))


def check_window_attention() -> float:
    rng = _rng()
    m, c = 4, 8
    attn = WindowAttention(c, heads=2, m=m, rng=rng, dtype=F64)
    attn.bias_table.data = rng.standard_normal(attn.bias_table.shape) * 0.1
    x = _randn(rng, 1, c, 8, 8)
    w = rng.standard_normal((1, c, 8, 8))
    mask = shift_attention_mask(8, 8, m, m // 2)

    def loss():
        wg = window_partition(x, m, m // 2)
        return (window_merge(attn.forward(wg, mask)) * Tensor(w)).sum()

    return _check_layer(loss, attn, extra=(x,))


def check_swin_pair() -> float:
    rng = _rng()
    c, m = 8, 4
    block = SwinBlockPair(c, heads=4, m=m, rng=rng, dtype=F64)
    x = _randn(rng, 1, c, 16, 16)
    w = rng.standard_normal((1, c, 16, 16))
    return _check_layer(lambda: (block.forward(x) * Tensor(w)).sum(), block, extra=(x,))


def check_convlstm_step() -> float:
    rng = _rng()
    cell = ConvLSTMCell(2, 2, rng, dtype=F64)
    x = _randn(rng, 1, 2, 4, 4)
    w = rng.standard_normal((1, 2, 4, 4))

    def loss():
        state = cell.zero_state(1, 4, 4, np.float64)
        return (cell.step(state, x).h * Tensor(w)).sum()

    return _check_layer(loss, cell, extra=(x,))


def check_bi_convlstm() -> float:
    rng = _rng()
    fwd = ConvLSTMCell(2, 2, rng, dtype=F64)
    bwd = ConvLSTMCell(2, 2, rng, dtype=F64)
    a, b = _randn(rng, 1, 2, 4, 4), _randn(rng, 1, 2, 4, 4)
    w = rng.standard_normal((1, 4, 4, 4))

    def loss():
        return (bi_convlstm_fuse(fwd, bwd, [a, b]) * Tensor(w)).sum()

    errs = [grad_check_wrt(loss, p) for p in fwd.params() + bwd.params()]
    errs += [grad_check_wrt(loss, a), grad_check_wrt(loss, b)]
    return max(errs)


def _loss_check(kind: str) -> Callable[[], float]:
    def run():
        rng = _rng()
        p = Tensor(rng.uniform(0.05, 0.95, (1, 1, 4, 4)))
        gt = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64)
        return grad_check(lambda v: loss_fn(v, gt, kind), p)
    return run


def _tiny_net() -> tuple[TeslNet, Tensor]:
    cfg = TeslNetConfig(height=32, width=32, widths=(4, 8), window=4,
                        heads=4, seed=7)
    net = TeslNet(cfg, dtype=F64)
    x = Tensor(_rng().random((1, 3, 32, 32)))
    return net, x


def check_teslnet(sample: int = 256) -> float:
    """End-to-end check on a 1x3x32x32 input: a deterministic sample of
    input pixels plus entries of every parameter.

    Uses a smaller step than the layer suites: at full-net depth a 1e-5
    perturbation of an early weight routinely pushes some ReLU input or
    max-pool tie across its kink, which central differences cannot resolve.
    """
    net, x = _tiny_net()
    gt = (_rng().random((1, 1, 32, 32)) > 0.5).astype(np.float64)

    def loss():
        return loss_fn(net.forward(x, training=True), gt, "bce+dice")

    errs = [grad_check_wrt(loss, x, epsilon=1e-7, sample=sample)]
    for i, p in enumerate(net.params()):
        errs.append(grad_check_wrt(loss, p, epsilon=1e-7, sample=8, seed=i))
    return max(errs)


SUITES: dict[str, Callable[[], float]] = {
    "matmul": check_matmul,
    "softmax": check_softmax,
    "relu": _pointwise(T.relu),
    "gelu": _pointwise(T.gelu),
    "sigmoid": _pointwise(T.sigmoid),
    "tanh": _pointwise(T.tanh),
    "maxpool": check_maxpool,
    "dws_conv": check_dws_conv,
    "batchnorm": check_batchnorm,
    "layernorm": check_layernorm,
    "transposed_conv": check_transposed_conv,
    "window_attention": check_window_attention,
    "swin_pair": check_swin_pair,
    "convlstm_step": check_convlstm_step,
    "bi_convlstm": check_bi_convlstm,
    "loss_bce": _loss_check("bce"),
    "loss_dice": _loss_check("dice"),
    "loss_bce_dice": _loss_check("bce+dice"),
    "teslnet": check_teslnet,
}


def run_suite(scope: str = "all", extra=None) -> dict[str, float]:
    suites = dict(SUITES)
    if extra:
        suites.update(extra)
    if scope != "all":
        if scope not in suites:
            raise KeyError(f"unknown gradcheck scope {scope!r}; "
                           f"choose from {sorted(suites)} or 'all'")
        suites = {scope: suites[scope]}
    return {name: fn() for name, fn in suites.items()}
