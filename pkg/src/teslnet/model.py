"""The full segmentation network: two-stage depthwise-separable encoder with
window-attention refinement after each pool, mirrored decoder with
bidirectional ConvLSTM skip fusion, sigmoid head.

Composition per stage: DWS conv -> ReLU -> batch norm (activation before
normalization, deliberately).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .convlstm import BiConvLSTM
from .layers import BatchNorm, DWSConv, Module, TransposedConv, kaiming_uniform
from .nn_ops import conv2d_same, maxpool2x2
from .swin import SwinBlockPair
from .tensor import Param, ShapeError, Tensor

MAGIC = b"TESLW001"


class ConfigError(ValueError):
    pass


class WeightFormatError(ValueError):
    pass


class FingerprintError(ValueError):
    pass


@dataclass
class TeslNetConfig:
    height: int = 256
    width: int = 256
    in_channels: int = 3
    widths: tuple[int, int] = (32, 64)
    window: int = 8
    heads: int = 4
    mlp_ratio: int = 4
    seed: int = 42

    def validate(self):
        for name, v in (("height", self.height), ("width", self.width)):
            if v % 4:
                raise ConfigError(f"{name}={v} not divisible by 4")
        for scale in (2, 4):
            for name, v in (("height", self.height), ("width", self.width)):
                if (v // scale) % self.window:
                    raise ConfigError(
                        f"{name}/{scale}={v // scale} not divisible by window {self.window}")
        c1, c2 = self.widths
        for c in (c1, c2):
            if c % self.heads:
                raise ConfigError(f"width {c} not divisible by heads {self.heads}")
        if c2 != 2 * c1:
            raise ConfigError(f"stage-2 width must double stage 1, got {self.widths}")

    def fingerprint(self) -> str:
        """Hash of the architecture-defining fields.

        The init seed is excluded: it only picks the starting weights, so two
        nets that differ solely in seed can exchange weight files.
        """
        fields = {k: v for k, v in asdict(self).items() if k != "seed"}
        blob = json.dumps(fields, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PRESETS = {
    "paper": TeslNetConfig(),
    "desk": TeslNetConfig(height=64, width=64, widths=(8, 16), window=4, heads=4),
}


class TeslNet(Module):
    def __init__(self, config: TeslNetConfig, dtype=np.float32):
        config.validate()
        self.config = config
        c1, c2 = config.widths
        m, heads, ratio = config.window, config.heads, config.mlp_ratio
        rng = np.random.default_rng(config.seed)

        self.enc1a = DWSConv(config.in_channels, c1, rng, dtype=dtype)
        self.bn1a = BatchNorm(c1, dtype=dtype)
        self.enc1b = DWSConv(c1, c1, rng, dtype=dtype)
        self.bn1b = BatchNorm(c1, dtype=dtype)
        self.swin1 = SwinBlockPair(c1, heads, m, rng, mlp_ratio=ratio, dtype=dtype)
        self.enc2a = DWSConv(c1, c2, rng, dtype=dtype)
        self.bn2a = BatchNorm(c2, dtype=dtype)
        self.enc2b = DWSConv(c2, c2, rng, dtype=dtype)
        self.bn2b = BatchNorm(c2, dtype=dtype)
        self.swin2 = SwinBlockPair(c2, heads, m, rng, mlp_ratio=ratio, dtype=dtype)

        self.up1 = TransposedConv(c2, c2, rng, dtype=dtype)
        self.bn_up1 = BatchNorm(c2, dtype=dtype)
        self.fuse1 = BiConvLSTM(c2, c2, rng, dtype=dtype)
        self.dec1a = DWSConv(2 * c2, c2, rng, dtype=dtype)
        self.bn_d1a = BatchNorm(c2, dtype=dtype)
        self.dec1b = DWSConv(c2, c2, rng, dtype=dtype)
        self.bn_d1b = BatchNorm(c2, dtype=dtype)

        self.up2 = TransposedConv(c2, c1, rng, dtype=dtype)
        self.bn_up2 = BatchNorm(c1, dtype=dtype)
        self.fuse2 = BiConvLSTM(c1, c1, rng, dtype=dtype)
        self.dec2a = DWSConv(2 * c1, c1, rng, dtype=dtype)
        self.bn_d2a = BatchNorm(c1, dtype=dtype)
        self.dec2b = DWSConv(c1, c1, rng, dtype=dtype)
        self.bn_d2b = BatchNorm(c1, dtype=dtype)

        self.head_w = Param(kaiming_uniform(rng, (1, c1, 1, 1), c1, dtype))
        self.head_b = Param(np.zeros(1, dtype=dtype))

    def _block(self, conv: DWSConv, bn: BatchNorm, x: Tensor, training: bool) -> Tensor:
        return bn.forward(T.relu(conv.forward(x)), training)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        cfg = self.config
        if x.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
            raise ShapeError(
                f"input shape {x.shape} does not match config "
                f"(*, {cfg.in_channels}, {cfg.height}, {cfg.width})")

        c1 = self._block(self.enc1a, self.bn1a, x, training)
        c2 = self._block(self.enc1b, self.bn1b, c1, training)
        st1 = self.swin1.forward(maxpool2x2(c2))
        c3 = self._block(self.enc2a, self.bn2a, st1, training)
        c4 = self._block(self.enc2b, self.bn2b, c3, training)
        st2 = self.swin2.forward(maxpool2x2(c4))

        d1 = self.bn_up1.forward(T.relu(self.up1.forward(st2)), training)
        f1 = self.fuse1.fuse([c4, d1])
        d1 = self._block(self.dec1a, self.bn_d1a, f1, training)
        d1 = self._block(self.dec1b, self.bn_d1b, d1, training)

        d2 = self.bn_up2.forward(T.relu(self.up2.forward(d1)), training)
        f2 = self.fuse2.fuse([c2, d2])
        d2 = self._block(self.dec2a, self.bn_d2a, f2, training)
        d2 = self._block(self.dec2b, self.bn_d2b, d2, training)

        logits = conv2d_same(d2, self.head_w) + self.head_b.reshape(1, 1, 1, 1)
        return T.sigmoid(logits)


def parameter_count(net: TeslNet) -> int:
    return sum(p.size for p in net.params())


# -- weight serialization ----------------------------------------------
# Layout: MAGIC | u16 config-json length | config json | 16-byte fingerprint
# | u32 param count | per param: u16 name length, name, u8 rank, u32 dims,
# raw little-endian float32 values.

def save_weights(net: TeslNet) -> bytes:
    out = [MAGIC]
    cfg_json = json.dumps(asdict(net.config), sort_keys=True).encode()
    out.append(struct.pack("<H", len(cfg_json)))
    out.append(cfg_json)
    out.append(net.config.fingerprint().encode())
    named = list(net.named_params())
    out.append(struct.pack("<I", len(named)))
    for name, p in named:
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", p.data.ndim))
        out.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        out.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(out)


def _read(buf: bytes, offset: int, n: int) -> tuple[bytes, int]:
    if offset + n > len(buf):
        raise WeightFormatError(f"truncated weight data at byte {offset}")
    return buf[offset:offset + n], offset + n


def load_weights(net: TeslNet, blob: bytes):
    """Load serialized weights in place; refuses on config fingerprint mismatch."""
    magic, off = _read(blob, 0, len(MAGIC))
    if magic != MAGIC:
        raise WeightFormatError(f"bad magic {magic!r}")
    raw, off = _read(blob, off, 2)
    cfg_len = struct.unpack("<H", raw)[0]
    _, off = _read(blob, off, cfg_len)
    fp, off = _read(blob, off, 16)
    fp = fp.decode()
    if fp != net.config.fingerprint():
        raise FingerprintError(
            f"weight fingerprint {fp} does not match net config "
            f"fingerprint {net.config.fingerprint()}")
    raw, off = _read(blob, off, 4)
    count = struct.unpack("<I", raw)[0]
    params = dict(net.named_params())
    if count != len(params):
        raise WeightFormatError(f"file has {count} params, net has {len(params)}")
    for _ in range(count):
        raw, off = _read(blob, off, 2)
        nlen = struct.unpack("<H", raw)[0]
        raw, off = _read(blob, off, nlen)
        name = raw.decode()
        raw, off = _read(blob, off, 1)
        rank = raw[0]
        raw, off = _read(blob, off, 4 * rank)
        shape = struct.unpack(f"<{rank}I", raw)
        raw, off = _read(blob, off, 4 * int(np.prod(shape)))
        if name not in params:
            raise WeightFormatError(f"unknown parameter {name!r} in weight file")
        p = params[name]
        if shape != p.data.shape:
            raise WeightFormatError(
                f"parameter {name!r} shape {shape} != expected {p.data.shape}")
        p.data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(p.data.dtype)
        p.grad = np.zeros_like(p.data)


def config_from_weights(blob: bytes) -> TeslNetConfig:
    magic, off = _read(blob, 0, len(MAGIC))
    if magic != MAGIC:
        raise WeightFormatError(f"bad magic {magic!r}")
    raw, off = _read(blob, off, 2)
    cfg_len = struct.unpack("<H", raw)[0]
    raw, _ = _read(blob, off, cfg_len)
    d = json.loads(raw.decode())
    d["widths"] = tuple(d["widths"])
    return TeslNetConfig(**d)


def net_from_weights(blob: bytes) -> TeslNet:
    net = TeslNet(config_from_weights(blob))
    load_weights(net, blob)
    return net
