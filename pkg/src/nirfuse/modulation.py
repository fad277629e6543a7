"""Selective fusion of NIR and RGB feature maps.

A fusion module is a chain of modulation stages. Each stage looks at the
current (NIR, RGB) feature pair, predicts one logit map per stream, turns the
pair into complementary weights with a two-way softmax and rescales both
streams. After the last stage the two streams are summed:

    F_N, F_R  --global stage-->  Wg_N * F_N, Wg_R * F_R
              --local stage-->   Wl_N * (Wg_N * F_N) + Wl_R * (Wg_R * F_R)

The global stage ("gmm") uses only 1x1 convolutions and so sees one pixel at
a time; the local stage ("lmm") swaps each block's 1x1 convolution for a k x k
depthwise + 1x1 pointwise pair to look at a neighbourhood.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import ConvKernel, Tensor4

STAGE_KINDS = ("gmm", "lmm")
DEFAULT_ARRANGEMENT = ("gmm", "lmm")


def _per_channel(c: int, value: float, dtype) -> Tensor4:
    return Tensor4(np.full((1, c, 1, 1), value, dtype=dtype), requires_grad=True)


@dataclass
class Block1x1Params:
    conv: ConvKernel
    gamma: Tensor4
    beta: Tensor4
    alpha: Tensor4

    def named_parameters(self, prefix: str) -> list:
        return self.conv.named_parameters(f"{prefix}.conv") + [
            (f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta),
            (f"{prefix}.alpha", self.alpha)]

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters("")]

    @classmethod
    def init(cls, channels: int, rng, dtype=np.float64) -> "Block1x1Params":
        return cls(ConvKernel.init(channels, channels, 1, rng, dtype=dtype),
                   _per_channel(channels, 1.0, dtype), _per_channel(channels, 0.0, dtype),
                   _per_channel(channels, 0.25, dtype))


@dataclass
class BlockKxKParams:
    dw: ConvKernel
    pw: ConvKernel
    gamma: Tensor4
    beta: Tensor4
    alpha: Tensor4

    def named_parameters(self, prefix: str) -> list:
        return (self.dw.named_parameters(f"{prefix}.dw") + self.pw.named_parameters(f"{prefix}.pw")
                + [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta),
                   (f"{prefix}.alpha", self.alpha)])

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters("")]

    @classmethod
    def init(cls, channels: int, kernel_size: int, rng, dtype=np.float64) -> "BlockKxKParams":
        return cls(ConvKernel.init(channels, channels, kernel_size, rng, depthwise=True, dtype=dtype),
                   ConvKernel.init(channels, channels, 1, rng, dtype=dtype),
                   _per_channel(channels, 1.0, dtype), _per_channel(channels, 0.0, dtype),
                   _per_channel(channels, 0.25, dtype))


def block_1x1(x: Tensor4, p: Block1x1Params) -> Tensor4:
    """PReLU(LayerNorm(Conv1x1(x)))."""
    return T.prelu(T.layer_norm(T.conv2d(x, p.conv), p.gamma, p.beta), p.alpha)


def block_kxk(x: Tensor4, p: BlockKxKParams) -> Tensor4:
    """PReLU(LayerNorm(Conv1x1(DWConv_kxk(x))))."""
    return T.prelu(T.layer_norm(T.conv2d(T.dwconv2d(x, p.dw), p.pw), p.gamma, p.beta), p.alpha)


@dataclass
class _StageParams:
    entry: ConvKernel
    blocks: list
    exit: ConvKernel

    kind = ""

    @property
    def channels(self) -> int:
        """Feature channels C of each stream (the convolutions see 2C)."""
        return self.entry.in_channels // 2

    def named_parameters(self, prefix: str) -> list:
        out = self.entry.named_parameters(f"{prefix}.entry")
        for i, b in enumerate(self.blocks):
            out += b.named_parameters(f"{prefix}.block{i}")
        return out + self.exit.named_parameters(f"{prefix}.exit")

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters("")]


@dataclass
class GmmParams(_StageParams):
    kind = "gmm"

    @classmethod
    def init(cls, channels: int, n_blocks: int, rng, dtype=np.float64) -> "GmmParams":
        c2 = 2 * channels
        return cls(ConvKernel.init(c2, c2, 1, rng, dtype=dtype),
                   [Block1x1Params.init(c2, rng, dtype) for _ in range(n_blocks)],
                   ConvKernel.init(c2, c2, 1, rng, dtype=dtype))


@dataclass
class LmmParams(_StageParams):
    kind = "lmm"

    @property
    def kernel_size(self) -> int:
        return self.blocks[0].dw.size if self.blocks else 1

    @classmethod
    def init(cls, channels: int, n_blocks: int, kernel_size: int, rng,
             dtype=np.float64) -> "LmmParams":
        c2 = 2 * channels
        return cls(ConvKernel.init(c2, c2, 1, rng, dtype=dtype),
                   [BlockKxKParams.init(c2, kernel_size, rng, dtype) for _ in range(n_blocks)],
                   ConvKernel.init(c2, c2, 1, rng, dtype=dtype))


StageParams = Union[GmmParams, LmmParams]


@dataclass
class ModulationWeights:
    """Complementary per-channel, per-pixel weights of one stage."""

    w_n: Tensor4
    w_r: Tensor4


@dataclass
class SfmParams:
    stages: List[StageParams] = field(default_factory=list)

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("a fusion module needs at least one modulation stage")
        c = {s.channels for s in self.stages}
        if len(c) != 1:
            raise ShapeError(f"all modulation stages must share one channel count, got {sorted(c)}")

    @property
    def arrangement(self) -> tuple:
        return tuple(s.kind for s in self.stages)

    @property
    def channels(self) -> int:
        return self.stages[0].channels

    def named_parameters(self, prefix: str = "sfm") -> list:
        out = []
        for i, s in enumerate(self.stages):
            out += s.named_parameters(f"{prefix}.{s.kind}{i}")
        return out

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]


def _stage_weights(f_n: Tensor4, f_r: Tensor4, p: StageParams, block) -> ModulationWeights:
    if f_n.shape != f_r.shape:
        raise ShapeError(f"NIR features {f_n.shape} and RGB features {f_r.shape} differ in shape")
    if f_n.channels != p.channels:
        raise ShapeError(f"features have {f_n.channels} channels, "
                         f"modulation stage expects {p.channels}")
    h = T.conv2d(T.channel_concat(f_n, f_r), p.entry)
    for b in p.blocks:
        h = block(h, b)
    logits_n, logits_r = T.channel_split(T.conv2d(h, p.exit), p.channels)
    w_n, w_r = T.paired_softmax(logits_n, logits_r)
    return ModulationWeights(w_n, w_r)


def gmm_forward(f_n: Tensor4, f_r: Tensor4, p: GmmParams) -> ModulationWeights:
    return _stage_weights(f_n, f_r, p, block_1x1)


def lmm_forward(f_n: Tensor4, f_r: Tensor4, p: LmmParams) -> ModulationWeights:
    return _stage_weights(f_n, f_r, p, block_kxk)


def stage_forward(f_n: Tensor4, f_r: Tensor4, p: StageParams) -> ModulationWeights:
    if isinstance(p, LmmParams):
        return lmm_forward(f_n, f_r, p)
    return gmm_forward(f_n, f_r, p)


def sfm_forward(f_n: Tensor4, f_r: Tensor4, p: SfmParams, return_weights: bool = False):
    """Fuse NIR and RGB features.

    With ``return_weights`` the per-stage :class:`ModulationWeights` are
    returned as well, in stage order.
    """
    weights = []
    for stage in p.stages:
        w = stage_forward(f_n, f_r, stage)
        weights.append(w)
        f_n, f_r = T.ew_mul(w.w_n, f_n), T.ew_mul(w.w_r, f_r)
    fused = T.ew_add(f_n, f_r)
    return (fused, weights) if return_weights else fused


def sfm_init(channels: int, kernel_size: int = 5, blocks_gmm: int = 1, blocks_lmm: int = 1,
             arrangement: Sequence[str] = DEFAULT_ARRANGEMENT, seed: int = 0,
             rng: np.random.Generator | None = None, dtype=np.float64) -> SfmParams:
    """Build a fusion module; deterministic for a given seed (or generator)."""
    if channels < 1:
        raise ConfigError(f"channels must be >= 1, got {channels}")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError(f"local-stage kernel size must be odd, got {kernel_size}")
    arrangement = tuple(arrangement)
    if not arrangement:
        raise ConfigError("arrangement must name at least one stage")
    bad = [a for a in arrangement if a not in STAGE_KINDS]
    if bad:
        raise ConfigError(f"unknown modulation stage(s) {bad}; choose from {STAGE_KINDS}")
    if rng is None:
        rng = np.random.default_rng(seed)
    stages = []
    for kind in arrangement:
        if kind == "gmm":
            stages.append(GmmParams.init(channels, blocks_gmm, rng, dtype))
        else:
            stages.append(LmmParams.init(channels, blocks_lmm, kernel_size, rng, dtype))
    return SfmParams(stages)


def sfm_param_count(channels: int, kernel_size: int = 5, blocks_gmm: int = 1, blocks_lmm: int = 1,
                    arrangement: Sequence[str] = DEFAULT_ARRANGEMENT) -> int:
    """Closed-form parameter count of a fusion module."""
    c2 = 2 * channels
    conv1 = c2 * c2 + c2
    norm_act = 3 * c2
    total = 0
    for kind in arrangement:
        if kind == "gmm":
            block = conv1 + norm_act
            total += 2 * conv1 + blocks_gmm * block
        else:
            block = c2 * kernel_size ** 2 + c2 + conv1 + norm_act
            total += 2 * conv1 + blocks_lmm * block
    return total
