"""Depth and pose network assembly.

The depth decoder is a grid of nodes.  Column 0 holds the encoder features
e1..e5 (strides 2..32).  With dense skips enabled, aggregation nodes a_{i,j}
refine rows 1..3: each one fuses the row's encoder feature, every earlier
node in its row, and an upsampled feature from the row below.  The main
decoder chain d4..d0 then consumes the encoder feature of its level, the
completed aggregation row, and the upsampled previous chain node; d0 (full
resolution) sees only upsampled input.  Sigmoid disparity heads sit on
d0..d3, giving maps at full, 1/2, 1/4 and 1/8 resolution.

Every node is "concatenate inputs, then fuse".  Upsampling inputs pass
through their own 3x3 conv + ELU + 2x bilinear stage that halves the channel
count.  Three fusion styles exist, chosen per configuration for the chain
nodes (aggregation nodes always use the plain convolution):

- conv3x3: 3x3 convolution + ELU; parameters 9*C_in*C_out + C_out
- fse: channel attention (two bias-free projections, reduction r) followed
  by a 1x1 convolution + ELU; parameters (2/r)*C_in^2 + (C_in+1)*C_out
- se: the same attention followed by a 3x3 convolution + ELU; parameters
  (2/r)*C_in^2 + 9*C_in*C_out + C_out

``audit_params`` computes the full parameter budget from these closed forms
without allocating anything; the builders realize the same plan, and the
test suite holds the two equal.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from . import tensor as tt
from .encoders import (LiteEncoder, Module, ResidualEncoder,
                       lite_encoder_param_count,
                       residual_encoder_param_count)
from .ops import conv_params
from .tensor import ContractViolation, Tensor

ARCH_NAMES = ("hr-depth-res18", "hr-depth-lite", "baseline-unet")
FUSION_KINDS = ("conv3x3", "fse", "se")


class GraphBuildError(ContractViolation):
    """Raised when a decoder plan cannot be realized; names the node."""


@dataclass(frozen=True)
class ArchConfig:
    name: str
    encoder: str = "residual"                      # "residual" | "lite"
    enc_widths: tuple = (64, 64, 128, 256, 512)    # residual trunks only
    dec_widths: tuple = (16, 32, 64, 128, 256)     # d0..d4
    agg_width: int = 64
    fusion: str = "fse"
    dense_skip: bool = True
    scales: int = 4
    se_reduction: int = 4

    def __post_init__(self):
        if self.encoder not in ("residual", "lite"):
            raise ContractViolation(f"unknown encoder {self.encoder!r}")
        if self.fusion not in FUSION_KINDS:
            raise ContractViolation(f"unknown fusion {self.fusion!r}")
        if not 1 <= self.scales <= 4:
            raise ContractViolation("scales must lie in 1..4")
        if len(self.dec_widths) != 5:
            raise ContractViolation("dec_widths must list d0..d4")

    @property
    def enc_channels(self) -> tuple:
        if self.encoder == "lite":
            return (16, 24, 40, 112, 160)
        return self.enc_widths


def preset(name: str, fusion: str | None = None) -> ArchConfig:
    """Named configurations; `fusion` overrides the chain fusion style."""
    table = {
        "hr-depth-res18": ArchConfig(name="hr-depth-res18"),
        "hr-depth-lite": ArchConfig(
            name="hr-depth-lite", encoder="lite",
            dec_widths=(8, 16, 32, 64, 128), agg_width=16),
        "baseline-unet": ArchConfig(
            name="baseline-unet", fusion="conv3x3", dense_skip=False),
        # small trunks for fast functional runs
        "toy": ArchConfig(
            name="toy", enc_widths=(8, 8, 16, 32, 64),
            dec_widths=(4, 8, 16, 32, 48), agg_width=8),
        "toy-small": ArchConfig(
            name="toy-small", enc_widths=(4, 4, 8, 16, 32),
            dec_widths=(4, 4, 8, 16, 24), agg_width=4, fusion="conv3x3",
            dense_skip=False),
    }
    if name not in table:
        raise ContractViolation(f"unknown architecture {name!r}")
    cfg = table[name]
    if fusion is not None:
        cfg = replace(cfg, fusion=fusion)
    return cfg


# plan ------------------------------------------------------------------------

@dataclass(frozen=True)
class PlanInput:
    source: str            # "e1".."e5", "a<i><j>", or "d<i>"
    channels: int          # channels at the source
    upsample: bool = False # route through a dedicated up block

    @property
    def out_channels(self) -> int:
        return max(self.channels // 2, 1) if self.upsample else self.channels


@dataclass(frozen=True)
class NodePlan:
    name: str
    inputs: tuple
    c_out: int
    fusion: str

    @property
    def c_in(self) -> int:
        return sum(i.out_channels for i in self.inputs)


def fuse_param_count(fusion: str, c_in: int, c_out: int, reduction: int = 4) -> int:
    """Closed-form learnable-parameter count of one fusion block."""
    if fusion == "conv3x3":
        return 9 * c_in * c_out + c_out
    if fusion == "fse":
        return 2 * c_in * c_in // reduction + (c_in + 1) * c_out
    if fusion == "se":
        return 2 * c_in * c_in // reduction + 9 * c_in * c_out + c_out
    raise ContractViolation(f"unknown fusion {fusion!r}")


def up_param_count(c_in: int) -> int:
    c_out = max(c_in // 2, 1)
    return 9 * c_in * c_out + c_out


def head_param_count(c_in: int) -> int:
    return 9 * c_in + 1


def decoder_plan(cfg: ArchConfig) -> list:
    """Ordered node list; every node's inputs exist before it runs."""
    e = {f"e{i}": c for i, c in enumerate(cfg.enc_channels, start=1)}
    agg = cfg.agg_width
    nodes: list[NodePlan] = []
    width: dict[str, int] = dict(e)

    def inp(src, up=False):
        return PlanInput(source=src, channels=width[src], upsample=up)

    if cfg.dense_skip:
        for j in (1, 2, 3):
            for i in (1, 2, 3):
                if i + j > 4:
                    continue
                name = f"a{i}{j}"
                below = f"e{i + 1}" if j == 1 else f"a{i + 1}{j - 1}"
                inputs = [inp(f"e{i}")]
                inputs += [inp(f"a{i}{jj}") for jj in range(1, j)]
                inputs.append(inp(below, up=True))
                nodes.append(NodePlan(name=name, inputs=tuple(inputs),
                                      c_out=agg, fusion="conv3x3"))
                width[name] = agg

    row = {1: ("a11", "a12", "a13"), 2: ("a21", "a22"), 3: ("a31",)}
    prev = "e5"
    for i in (4, 3, 2, 1, 0):
        name = f"d{i}"
        inputs = []
        if i >= 1:
            inputs.append(inp(f"e{i}"))
        if cfg.dense_skip and i in row:
            inputs += [inp(a) for a in row[i]]
        inputs.append(inp(prev, up=True))
        nodes.append(NodePlan(name=name, inputs=tuple(inputs),
                              c_out=cfg.dec_widths[i], fusion=cfg.fusion))
        width[name] = cfg.dec_widths[i]
        prev = name

    for node in nodes:
        if node.fusion in ("fse", "se") and node.c_in % cfg.se_reduction:
            raise GraphBuildError(
                f"node {node.name}: fused width {node.c_in} is not divisible "
                f"by the attention reduction {cfg.se_reduction}")
    return nodes


# audit -----------------------------------------------------------------------

@dataclass
class AuditRow:
    name: str
    kind: str
    c_in: int
    c_out: int
    params: int


@dataclass
class AuditReport:
    arch: str
    rows: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(r.params for r in self.rows)

    def subtotal(self, kind: str) -> int:
        return sum(r.params for r in self.rows if r.kind == kind)

    def lines(self) -> list:
        out = [f"architecture {self.arch}",
               f"{'component':<28}{'kind':<10}{'in':>6}{'out':>6}{'params':>12}"]
        for r in self.rows:
            out.append(f"{r.name:<28}{r.kind:<10}{r.c_in:>6}{r.c_out:>6}"
                       f"{r.params:>12}")
        for kind in ("encoder", "up", "fuse", "head"):
            out.append(f"{'subtotal ' + kind:<50}{self.subtotal(kind):>12}")
        out.append(f"{'total':<50}{self.total:>12}")
        return out

    def kv_lines(self) -> list:
        """Machine-readable mirror of lines(): one key=value per row."""
        out = [f"arch={self.arch}"]
        out += [f"node.{r.name}={r.params}" for r in self.rows]
        out += [f"subtotal.{kind}={self.subtotal(kind)}"
                for kind in ("encoder", "up", "fuse", "head")]
        out.append(f"total={self.total}")
        return out


def audit_params(cfg: ArchConfig) -> AuditReport:
    """Parameter budget from closed forms alone; nothing is allocated."""
    report = AuditReport(arch=cfg.name)
    if cfg.encoder == "lite":
        enc = lite_encoder_param_count()
    else:
        enc = residual_encoder_param_count(cfg.enc_widths)
    report.rows.append(AuditRow("encoder", "encoder", 3,
                                cfg.enc_channels[-1], enc))
    for node in decoder_plan(cfg):
        for i in node.inputs:
            if i.upsample:
                report.rows.append(AuditRow(
                    f"up {i.source} -> {node.name}", "up",
                    i.channels, i.out_channels, up_param_count(i.channels)))
        report.rows.append(AuditRow(
            f"node {node.name}", "fuse", node.c_in, node.c_out,
            fuse_param_count(node.fusion, node.c_in, node.c_out,
                             cfg.se_reduction)))
    for s in range(cfg.scales):
        c = cfg.dec_widths[s]
        report.rows.append(AuditRow(f"disp {s}", "head", c, 1,
                                    head_param_count(c)))
    return report


# blocks ----------------------------------------------------------------------

class Conv3x3Fuse(Module):
    def __init__(self, rng, c_in, c_out):
        self.conv = conv_params(rng, c_in, c_out, 3)

    def __call__(self, x):
        return ops.elu(ops.conv2d(x, self.conv))


class _ChannelAttention(Module):
    """Pooled two-layer gate over channels (bias-free projections)."""

    def __init__(self, rng, c, reduction):
        if c % reduction:
            raise GraphBuildError(
                f"attention width {c} not divisible by {reduction}")
        mid = c // reduction
        b1, b2 = 1.0 / np.sqrt(c), 1.0 / np.sqrt(mid)
        self.fc1 = Tensor(rng.uniform(-b1, b1, (c, mid)), requires_grad=True)
        self.fc2 = Tensor(rng.uniform(-b2, b2, (mid, c)), requires_grad=True)

    def __call__(self, x):
        s = ops.global_avg_pool(x)
        g = ops.sigmoid(ops.fully_connected(
            ops.relu(ops.fully_connected(s, self.fc1)), self.fc2))
        return tt.mul_gate(x, g)


class FSEFuse(Module):
    """Attention over the concatenated skips, then a cheap 1x1 projection."""

    def __init__(self, rng, c_in, c_out, reduction=4):
        self.attend = _ChannelAttention(rng, c_in, reduction)
        self.proj = conv_params(rng, c_in, c_out, 1)

    def __call__(self, x):
        return ops.elu(ops.conv2d(self.attend(x), self.proj))


class SEPlusConvFuse(Module):
    """Attention followed by a full 3x3 fusion (ablation variant)."""

    def __init__(self, rng, c_in, c_out, reduction=4):
        self.attend = _ChannelAttention(rng, c_in, reduction)
        self.conv = conv_params(rng, c_in, c_out, 3)

    def __call__(self, x):
        return ops.elu(ops.conv2d(self.attend(x), self.conv))


def make_fuse(rng, fusion, c_in, c_out, reduction=4) -> Module:
    if fusion == "conv3x3":
        return Conv3x3Fuse(rng, c_in, c_out)
    if fusion == "fse":
        return FSEFuse(rng, c_in, c_out, reduction)
    if fusion == "se":
        return SEPlusConvFuse(rng, c_in, c_out, reduction)
    raise ContractViolation(f"unknown fusion {fusion!r}")


class UpBlock(Module):
    """3x3 conv + ELU + 2x bilinear upsample; halves the channel count."""

    def __init__(self, rng, c_in):
        self.conv = conv_params(rng, c_in, max(c_in // 2, 1), 3)

    def __call__(self, x):
        return ops.upsample2x(ops.elu(ops.conv2d(x, self.conv)))


class DispHead(Module):
    """3x3 conv to one channel, squashed to (0, 1)."""

    def __init__(self, rng, c_in):
        self.conv = conv_params(rng, c_in, 1, 3)

    def __call__(self, x):
        return ops.sigmoid(ops.conv2d(x, self.conv))


# networks --------------------------------------------------------------------

class DepthDecoder(Module):
    def __init__(self, rng, cfg: ArchConfig):
        self._plan = decoder_plan(cfg)
        self._scales = cfg.scales
        self.ups = {}
        self.fuses = {}
        for node in self._plan:
            for i in node.inputs:
                if i.upsample:
                    self.ups[f"{i.source}->{node.name}"] = UpBlock(rng, i.channels)
            self.fuses[node.name] = make_fuse(rng, node.fusion, node.c_in,
                                              node.c_out, cfg.se_reduction)
        self.heads = {str(s): DispHead(rng, cfg.dec_widths[s])
                      for s in range(cfg.scales)}

    def __call__(self, feats):
        values = {f"e{i}": f for i, f in enumerate(feats, start=1)}
        for node in self._plan:
            parts = []
            for i in node.inputs:
                v = values[i.source]
                if i.upsample:
                    v = self.ups[f"{i.source}->{node.name}"](v)
                parts.append(v)
            x = parts[0] if len(parts) == 1 else tt.concat(parts, axis=1)
            values[node.name] = self.fuses[node.name](x)
        return [self.heads[str(s)](values[f"d{s}"])
                for s in range(self._scales)]


class DepthNet(Module):
    """Encoder + dense-skip decoder; returns disparity maps finest-first at
    resolutions 1, 1/2, 1/4, 1/8 of the input."""

    def __init__(self, cfg: ArchConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        if cfg.encoder == "lite":
            self.encoder = LiteEncoder(rng)
        else:
            self.encoder = ResidualEncoder(rng, cfg.enc_widths)
        self.decoder = DepthDecoder(rng, cfg)

    def __call__(self, x, training=False):
        h, w = x.data.shape[2:]
        if h % 32 or w % 32:
            raise ContractViolation(
                f"input {h}x{w} must be divisible by 32 for the decoder "
                "to realign with the encoder features")
        return self.decoder(self.encoder(x, training))


class PoseNet(Module):
    """Relative camera motion from a concatenated frame pair.

    Outputs (b, 6): translation then rotation angles, scaled by 0.01 so the
    initial predictions stay near the identity.
    """

    def __init__(self, enc_widths=(64, 64, 128, 256, 512), seed: int = 0,
                 head_width: int = 256):
        rng = np.random.default_rng(seed)
        self.encoder = ResidualEncoder(rng, enc_widths, in_channels=6)
        c5 = enc_widths[-1]
        self.squeeze = conv_params(rng, c5, head_width, 1)
        self.conv1 = conv_params(rng, head_width, head_width, 3)
        self.conv2 = conv_params(rng, head_width, head_width, 3)
        self.out = conv_params(rng, head_width, 6, 1)

    def __call__(self, target, source, training=False):
        x = tt.concat([target, source], axis=1)
        feats = self.encoder(x, training)
        h = ops.relu(ops.conv2d(feats[-1], self.squeeze))
        h = ops.relu(ops.conv2d(h, self.conv1))
        h = ops.relu(ops.conv2d(h, self.conv2))
        h = ops.conv2d(h, self.out)
        return tt.mul_scalar(ops.global_avg_pool(h), 0.01)
