"""Feature extraction trunks.

Both encoders emit five feature maps at strides 2, 4, 8, 16 and 32 relative
to the input.  ``ResidualEncoder`` is a classic 18-layer residual network
(7x7 stem, four two-block stages); ``LiteEncoder`` is an inverted-residual
mobile trunk with squeeze-excitation gates on the wider blocks.

``Module`` is a minimal parameter container: anything reachable through
instance attributes (tensors, parameter structs, nested modules, lists and
dicts of those) shows up in ``named_params`` in construction order, which
keeps initialization and serialization deterministic.
"""

from __future__ import annotations

import numpy as np

from . import ops
from . import tensor as tt
from .ops import (BatchNormParams, Conv2dParams, DepthwiseParams,
                  batch_norm_params, conv_params, depthwise_params)
from .tensor import ContractViolation, Tensor

_STRUCT_FIELDS = {
    Conv2dParams: ("weight", "bias"),
    DepthwiseParams: ("weight", "bias"),
    BatchNormParams: ("gamma", "beta"),
}


class Module:
    """Parameter container with attribute-driven discovery."""

    def named_params(self, prefix: str = "") -> dict:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            if not name.startswith("_"):
                _collect_params(prefix + name, val, out)
        return out

    def named_state(self, prefix: str = "") -> dict:
        """Non-learnable arrays that still belong in a checkpoint
        (batch-norm running statistics)."""
        out: dict[str, np.ndarray] = {}
        for name, val in vars(self).items():
            if not name.startswith("_"):
                _collect_state(prefix + name, val, out)
        return out

    def param_count(self) -> int:
        return sum(t.data.size for t in self.named_params().values())


def _collect_params(key, val, out):
    if isinstance(val, Tensor):
        out[key] = val
    elif isinstance(val, Module):
        out.update(val.named_params(key + "."))
    elif type(val) in _STRUCT_FIELDS:
        for field in _STRUCT_FIELDS[type(val)]:
            t = getattr(val, field)
            if t is not None:
                out[f"{key}.{field}"] = t
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            _collect_params(f"{key}.{i}", item, out)
    elif isinstance(val, dict):
        for k, item in val.items():
            _collect_params(f"{key}.{k}", item, out)


def _collect_state(key, val, out):
    if isinstance(val, Module):
        out.update(val.named_state(key + "."))
    elif isinstance(val, BatchNormParams):
        out[key + ".running_mean"] = val.running_mean
        out[key + ".running_var"] = val.running_var
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            _collect_state(f"{key}.{i}", item, out)
    elif isinstance(val, dict):
        for k, item in val.items():
            _collect_state(f"{key}.{k}", item, out)


def _conv_bn(rng, c_in, c_out, k, stride=1):
    """Bias-free conv followed by batch norm (the bias would be redundant)."""
    return (conv_params(rng, c_in, c_out, k, stride=stride, bias=False),
            batch_norm_params(c_out))


class _BasicBlock(Module):
    """Two 3x3 conv+BN pairs with a residual connection; the shortcut is a
    strided 1x1 projection when the shape changes."""

    def __init__(self, rng, c_in, c_out, stride):
        self.conv1, self.bn1 = _conv_bn(rng, c_in, c_out, 3, stride)
        self.conv2, self.bn2 = _conv_bn(rng, c_out, c_out, 3)
        self.down = None
        if stride != 1 or c_in != c_out:
            self.down = _conv_bn(rng, c_in, c_out, 1, stride)

    def __call__(self, x, training):
        out = ops.relu(ops.batch_norm2d(ops.conv2d(x, self.conv1), self.bn1,
                                        training))
        out = ops.batch_norm2d(ops.conv2d(out, self.conv2), self.bn2, training)
        skip = x
        if self.down is not None:
            conv, bn = self.down
            skip = ops.batch_norm2d(ops.conv2d(x, conv), bn, training)
        return ops.relu(tt.add(out, skip))


class ResidualEncoder(Module):
    """18-layer residual trunk; returns features at strides 2..32.

    widths = (stem, stage1, stage2, stage3, stage4); the standard trunk is
    (64, 64, 128, 256, 512).
    """

    def __init__(self, rng, widths=(64, 64, 128, 256, 512), in_channels=3,
                 blocks_per_stage=2):
        stem, s1, s2, s3, s4 = widths
        self.stem_conv, self.stem_bn = _conv_bn(rng, in_channels, stem, 7, 2)
        self.stages = []
        c_prev = stem
        for c_out, stride in ((s1, 1), (s2, 2), (s3, 2), (s4, 2)):
            blocks = [_BasicBlock(rng, c_prev, c_out, stride)]
            for _ in range(blocks_per_stage - 1):
                blocks.append(_BasicBlock(rng, c_out, c_out, 1))
            self.stages.append(blocks)
            c_prev = c_out
        self.feature_channels = (stem, s1, s2, s3, s4)

    def __call__(self, x, training=False):
        x1 = ops.relu(ops.batch_norm2d(ops.conv2d(x, self.stem_conv),
                                       self.stem_bn, training))
        feats = [x1]
        x = ops.max_pool2d(x1, k=3, stride=2, pad=1)
        for blocks in self.stages:
            for block in blocks:
                x = block(x, training)
            feats.append(x)
        return feats


def residual_encoder_param_count(widths=(64, 64, 128, 256, 512),
                                 in_channels=3, blocks_per_stage=2) -> int:
    """Closed-form parameter count matching ResidualEncoder."""

    def conv_bn(ci, co, k):
        return ci * co * k * k + 2 * co

    stem, *stage_ch = widths
    total = conv_bn(in_channels, stem, 7)
    c_prev = stem
    for idx, c in enumerate(stage_ch):
        stride = 1 if idx == 0 else 2
        first = conv_bn(c_prev, c, 3) + conv_bn(c, c, 3)
        if stride != 1 or c_prev != c:
            first += conv_bn(c_prev, c, 1)
        total += first + (blocks_per_stage - 1) * 2 * conv_bn(c, c, 3)
        c_prev = c
    return total


# inverted-residual trunk -----------------------------------------------------

# rows: kernel, expansion width, output width, squeeze-excite, stride
_LITE_TABLE = (
    (3, 16, 16, False, 1),
    (3, 64, 24, False, 2),
    (3, 72, 24, False, 1),
    (5, 72, 40, True, 2),
    (5, 120, 40, True, 1),
    (5, 120, 40, True, 1),
    (3, 240, 80, False, 2),
    (3, 200, 80, False, 1),
    (3, 184, 80, False, 1),
    (3, 184, 80, False, 1),
    (3, 480, 112, True, 1),
    (3, 672, 112, True, 1),
    (5, 672, 160, True, 2),
    (5, 960, 160, True, 1),
    (5, 960, 160, True, 1),
)
# features are tapped after these rows (1-based), plus the stem for stride 2
_LITE_TAPS = (1, 3, 6, 12, 15)
_LITE_CHANNELS = (16, 24, 40, 112, 160)


class _SEGate(Module):
    """Squeeze-excitation: pooled features pass through a two-layer
    bottleneck and gate the channels.  Both projections are bias-free."""

    def __init__(self, rng, c, reduction=4):
        if c % reduction:
            raise ContractViolation(
                f"squeeze-excite width {c} not divisible by {reduction}")
        mid = c // reduction
        bound1 = 1.0 / np.sqrt(c)
        bound2 = 1.0 / np.sqrt(mid)
        self.fc1 = Tensor(rng.uniform(-bound1, bound1, (c, mid)),
                          requires_grad=True)
        self.fc2 = Tensor(rng.uniform(-bound2, bound2, (mid, c)),
                          requires_grad=True)

    def __call__(self, x):
        s = ops.global_avg_pool(x)
        g = ops.sigmoid(ops.fully_connected(
            ops.relu(ops.fully_connected(s, self.fc1)), self.fc2))
        return tt.mul_gate(x, g)


class _Bneck(Module):
    """Inverted residual: 1x1 expand, depthwise, optional SE, 1x1 project."""

    def __init__(self, rng, c_in, k, c_exp, c_out, se, stride):
        self.expand = None
        if c_exp != c_in:
            self.expand = _conv_bn(rng, c_in, c_exp, 1)
        self.dw = depthwise_params(rng, c_exp, k, stride=stride, bias=False)
        self.dw_bn = batch_norm_params(c_exp)
        self.se = _SEGate(rng, c_exp) if se else None
        self.project = _conv_bn(rng, c_exp, c_out, 1)
        self.residual = stride == 1 and c_in == c_out

    def __call__(self, x, training):
        out = x
        if self.expand is not None:
            conv, bn = self.expand
            out = ops.relu(ops.batch_norm2d(ops.conv2d(out, conv), bn, training))
        out = ops.relu(ops.batch_norm2d(ops.depthwise_conv2d(out, self.dw),
                                        self.dw_bn, training))
        if self.se is not None:
            out = self.se(out)
        conv, bn = self.project
        out = ops.batch_norm2d(ops.conv2d(out, conv), bn, training)
        if self.residual:
            out = tt.add(out, x)
        return out


class LiteEncoder(Module):
    """Mobile trunk; returns features with 16/24/40/112/160 channels at
    strides 2/4/8/16/32."""

    def __init__(self, rng, in_channels=3):
        self.stem_conv, self.stem_bn = _conv_bn(rng, in_channels, 16, 3, 2)
        self.blocks = []
        c_prev = 16
        for k, c_exp, c_out, se, stride in _LITE_TABLE:
            self.blocks.append(_Bneck(rng, c_prev, k, c_exp, c_out, se, stride))
            c_prev = c_out
        self.feature_channels = _LITE_CHANNELS

    def __call__(self, x, training=False):
        x = ops.relu(ops.batch_norm2d(ops.conv2d(x, self.stem_conv),
                                      self.stem_bn, training))
        feats = []
        for i, block in enumerate(self.blocks, start=1):
            x = block(x, training)
            if i in _LITE_TAPS:
                feats.append(x)
        return feats


def lite_encoder_param_count(in_channels=3, reduction=4) -> int:
    """Closed-form parameter count matching LiteEncoder."""
    total = in_channels * 16 * 9 + 2 * 16
    c_prev = 16
    for k, c_exp, c_out, se, _stride in _LITE_TABLE:
        n = 0
        if c_exp != c_prev:
            n += c_prev * c_exp + 2 * c_exp
        n += c_exp * k * k + 2 * c_exp
        if se:
            n += 2 * c_exp * c_exp // reduction
        n += c_exp * c_out + 2 * c_out
        total += n
        c_prev = c_out
    return total
