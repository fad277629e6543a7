"""Multi-scale two-encoder / one-decoder denoiser.

Topology for S scales with widths C_s = C0 * 2**(s-1):

    RGB  -> stem -> [blocks_1] -> pool,1x1 -> [blocks_2] -> ... -> [blocks_S]
    NIR  -> stem -> [blocks_1] -> pool,1x1 -> [blocks_2] -> ... -> [blocks_S]
                       |  fuse_1               |  fuse_2             |  fuse_S
    decoder:      [blocks_1] <- up,+ ...  [blocks_2] <- up,+ ...  [blocks_S]
                       |                       |
                 head_1 (+ noisy)        head_2 (+ noisy / 2)

``fusion_mode`` selects what "fuse" is: ``single`` (RGB features only, no
NIR branch), ``sum`` (F_N + F_R) or ``sfm`` (selective fusion). Each head is
a 3x3 convolution whose output is added to the noisy input downsampled to
that scale.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .modulation import DEFAULT_ARRANGEMENT, STAGE_KINDS, SfmParams, sfm_forward, sfm_init
from .tensor import ConvKernel, Tensor4

FUSION_MODES = ("single", "sum", "sfm")
# init gain of each residual branch's last conv and of the heads; plain He init
# compounds through the residual stacks and starts outputs far off the image range
BRANCH_GAIN = 0.1


@dataclass
class NetConfig:
    scales: int = 3
    base_channels: int = 32
    blocks_per_scale: int = 2
    fusion_mode: str = "sfm"
    sfm_per_scale: int = 1
    sfm_kernel_size: int = 5
    sfm_arrangement: tuple = DEFAULT_ARRANGEMENT
    sfm_blocks_gmm: int = 1
    sfm_blocks_lmm: int = 1
    supervise_coarsest: bool = False
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.sfm_arrangement = tuple(self.sfm_arrangement)
        self.validate()

    def validate(self) -> None:
        if self.scales < 2:
            raise ConfigError(f"scales must be >= 2, got {self.scales}")
        if self.base_channels < 1 or self.blocks_per_scale < 0:
            raise ConfigError("base_channels must be >= 1 and blocks_per_scale >= 0")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.sfm_per_scale < 1:
            raise ConfigError("sfm_per_scale must be >= 1")
        if self.sfm_kernel_size < 1 or self.sfm_kernel_size % 2 == 0:
            raise ConfigError(f"sfm_kernel_size must be odd, got {self.sfm_kernel_size}")
        if not self.sfm_arrangement or any(a not in STAGE_KINDS for a in self.sfm_arrangement):
            raise ConfigError(f"sfm_arrangement must be a non-empty list over {STAGE_KINDS}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def multiple(self) -> int:
        """Input height and width must be divisible by this."""
        return 2 ** (self.scales - 1)

    def channels(self, scale: int) -> int:
        """Feature width at 1-based ``scale``."""
        return self.base_channels * 2 ** (scale - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sfm_arrangement"] = list(self.sfm_arrangement)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown net config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ResBlock:
    """x + Conv3x3(PReLU(Conv3x3(x)))."""

    conv_a: ConvKernel
    alpha: Tensor4
    conv_b: ConvKernel

    def named_parameters(self, prefix: str) -> list:
        return (self.conv_a.named_parameters(f"{prefix}.conv_a") + [(f"{prefix}.alpha", self.alpha)]
                + self.conv_b.named_parameters(f"{prefix}.conv_b"))

    @classmethod
    def init(cls, c: int, rng, dtype) -> "ResBlock":
        return cls(ConvKernel.init(c, c, 3, rng, dtype=dtype),
                   Tensor4(np.full((1, c, 1, 1), 0.25, dtype=dtype), requires_grad=True),
                   ConvKernel.init(c, c, 3, rng, dtype=dtype, gain=BRANCH_GAIN))

    def __call__(self, x: Tensor4) -> Tensor4:
        return T.ew_add(x, T.conv2d(T.prelu(T.conv2d(x, self.conv_a), self.alpha), self.conv_b))


@dataclass
class Encoder:
    stem: ConvKernel
    blocks: List[List[ResBlock]]
    downs: List[ConvKernel]  # downs[i] maps scale i+1 -> i+2 after pooling

    def named_parameters(self, prefix: str) -> list:
        out = self.stem.named_parameters(f"{prefix}.stem")
        for s, stack in enumerate(self.blocks, start=1):
            for i, b in enumerate(stack):
                out += b.named_parameters(f"{prefix}.s{s}.block{i}")
            if s <= len(self.downs):
                out += self.downs[s - 1].named_parameters(f"{prefix}.s{s}.down")
        return out

    @classmethod
    def init(cls, in_channels: int, cfg: NetConfig, rng, dtype) -> "Encoder":
        stem = ConvKernel.init(cfg.channels(1), in_channels, 3, rng, dtype=dtype)
        blocks, downs = [], []
        for s in range(1, cfg.scales + 1):
            c = cfg.channels(s)
            blocks.append([ResBlock.init(c, rng, dtype) for _ in range(cfg.blocks_per_scale)])
            if s < cfg.scales:
                downs.append(ConvKernel.init(cfg.channels(s + 1), c, 1, rng, dtype=dtype))
        return cls(stem, blocks, downs)

    def __call__(self, image: Tensor4) -> List[Tensor4]:
        h = T.conv2d(image, self.stem)
        feats = []
        for s, stack in enumerate(self.blocks):
            for b in stack:
                h = b(h)
            feats.append(h)
            if s < len(self.downs):
                h = T.conv2d(T.downsample2x(h), self.downs[s])
        return feats


@dataclass
class Decoder:
    blocks: List[List[ResBlock]]
    ups: List[ConvKernel]  # ups[i] maps scale i+2 -> i+1 after nearest upsampling
    heads: List[ConvKernel]  # heads[i] emits the image at scale i+1

    def named_parameters(self, prefix: str) -> list:
        out = []
        for s, stack in enumerate(self.blocks, start=1):
            for i, b in enumerate(stack):
                out += b.named_parameters(f"{prefix}.s{s}.block{i}")
            if s <= len(self.ups):
                out += self.ups[s - 1].named_parameters(f"{prefix}.s{s}.up")
            if s <= len(self.heads):
                out += self.heads[s - 1].named_parameters(f"{prefix}.s{s}.head")
        return out

    @classmethod
    def init(cls, cfg: NetConfig, n_heads: int, rng, dtype) -> "Decoder":
        blocks, ups, heads = [], [], []
        for s in range(1, cfg.scales + 1):
            c = cfg.channels(s)
            blocks.append([ResBlock.init(c, rng, dtype) for _ in range(cfg.blocks_per_scale)])
            if s < cfg.scales:
                ups.append(ConvKernel.init(c, cfg.channels(s + 1), 1, rng, dtype=dtype))
            if s <= n_heads:
                heads.append(ConvKernel.init(3, c, 3, rng, dtype=dtype, gain=BRANCH_GAIN))
        return cls(blocks, ups, heads)

    def __call__(self, fused: Sequence[Tensor4], noisy: Sequence[Tensor4]) -> List[Tensor4]:
        outputs = [None] * len(self.heads)
        d = None
        for s in reversed(range(len(self.blocks))):
            d = fused[s] if d is None else T.ew_add(T.upsample2x(d, self.ups[s]), fused[s])
            for b in self.blocks[s]:
                d = b(d)
            if s < len(self.heads):
                outputs[s] = T.ew_add(noisy[s], T.conv2d(d, self.heads[s]))
        return outputs


@dataclass
class DenoiserNet:
    cfg: NetConfig
    rgb_encoder: Encoder
    nir_encoder: Optional[Encoder]
    fusions: List[List[SfmParams]]  # per scale; empty lists unless fusion_mode == "sfm"
    decoder: Decoder

    @property
    def n_outputs(self) -> int:
        return len(self.decoder.heads)

    def named_parameters(self) -> list:
        out = self.rgb_encoder.named_parameters("enc_rgb")
        if self.nir_encoder is not None:
            out += self.nir_encoder.named_parameters("enc_nir")
        for s, mods in enumerate(self.fusions, start=1):
            for i, m in enumerate(mods):
                out += m.named_parameters(f"fuse.s{s}.sfm{i}")
        return out + self.decoder.named_parameters("dec")

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return int(sum(t.data.size for t in self.parameters()))

    def sfm_param_count(self) -> int:
        return int(sum(t.data.size for mods in self.fusions for m in mods for t in m.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def net_init(cfg: NetConfig) -> DenoiserNet:
    """Instantiate a network; parameters depend only on ``cfg`` (including its seed)."""
    cfg.validate()
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    rgb = Encoder.init(3, cfg, rng, dtype)
    nir = Encoder.init(1, cfg, rng, dtype) if cfg.fusion_mode != "single" else None
    fusions = []
    for s in range(1, cfg.scales + 1):
        if cfg.fusion_mode == "sfm":
            fusions.append([sfm_init(cfg.channels(s), cfg.sfm_kernel_size, cfg.sfm_blocks_gmm,
                                     cfg.sfm_blocks_lmm, cfg.sfm_arrangement, rng=rng, dtype=dtype)
                            for _ in range(cfg.sfm_per_scale)])
        else:
            fusions.append([])
    n_heads = cfg.scales if cfg.supervise_coarsest else cfg.scales - 1
    dec = Decoder.init(cfg, n_heads, rng, dtype)
    return DenoiserNet(cfg, rgb, nir, fusions, dec)


def check_input_size(cfg: NetConfig, h: int, w: int) -> None:
    m = cfg.multiple
    if h % m or w % m:
        raise ShapeError(f"input {h}x{w} is not divisible by {m} (= 2**(scales-1)); "
                         f"crop to {h - h % m}x{w - w % m}")


def noisy_pyramid(i_r: Tensor4, levels: int) -> List[Tensor4]:
    out = [i_r]
    for _ in range(levels - 1):
        out.append(T.downsample2x(out[-1]))
    return out


def fuse(net: DenoiserNet, feats_n: Optional[Sequence[Tensor4]],
         feats_r: Sequence[Tensor4]) -> List[Tensor4]:
    mode = net.cfg.fusion_mode
    if mode == "single":
        return list(feats_r)
    if mode == "sum":
        return [T.ew_add(n, r) for n, r in zip(feats_n, feats_r)]
    fused = []
    for f_n, f_r, mods in zip(feats_n, feats_r, net.fusions):
        # extra modules per scale re-fuse the NIR features with the running result
        out = f_r
        for m in mods:
            out = sfm_forward(f_n, out, m)
        fused.append(out)
    return fused


def net_forward(net: DenoiserNet, i_r: Tensor4, i_n: Optional[Tensor4] = None) -> List[Tensor4]:
    """Return the output pyramid [I_1, I_2, ...]; I_1 is the full-resolution estimate."""
    cfg = net.cfg
    if i_r.channels != 3:
        raise ShapeError(f"RGB input must have 3 channels, got shape {i_r.shape}")
    check_input_size(cfg, i_r.shape[2], i_r.shape[3])
    feats_r = net.rgb_encoder(i_r)
    feats_n = None
    if cfg.fusion_mode != "single":
        if i_n is None:
            raise ShapeError(f"fusion_mode={cfg.fusion_mode!r} needs a NIR input")
        if i_n.channels != 1 or i_n.shape[0] != i_r.shape[0] or i_n.shape[2:] != i_r.shape[2:]:
            raise ShapeError(f"NIR input shape {i_n.shape} does not match RGB input {i_r.shape}")
        feats_n = net.nir_encoder(i_n)
    fused = fuse(net, feats_n, feats_r)
    return net.decoder(fused, noisy_pyramid(i_r, net.n_outputs))


def _conv_sites(net: DenoiserNet):
    """Yield (kernel, scale) for every convolution, scale being the resolution it runs at."""
    encs = [net.rgb_encoder] + ([net.nir_encoder] if net.nir_encoder is not None else [])
    for enc in encs:
        yield enc.stem, 1
        for s, stack in enumerate(enc.blocks, start=1):
            for b in stack:
                yield b.conv_a, s
                yield b.conv_b, s
        for i, d in enumerate(enc.downs):
            yield d, i + 2
    for s, mods in enumerate(net.fusions, start=1):
        for m in mods:
            for stage in m.stages:
                yield stage.entry, s
                for blk in stage.blocks:
                    if hasattr(blk, "dw"):
                        yield blk.dw, s
                        yield blk.pw, s
                    else:
                        yield blk.conv, s
                yield stage.exit, s
    dec = net.decoder
    for s, stack in enumerate(dec.blocks, start=1):
        for b in stack:
            yield b.conv_a, s
            yield b.conv_b, s
    for i, u in enumerate(dec.ups):
        yield u, i + 1
    for i, h in enumerate(dec.heads):
        yield h, i + 1


def conv_macs(kernel: ConvKernel, h: int, w: int) -> int:
    """Multiply-accumulates of one same-size convolution; bias counts as one MAC per output."""
    k2 = kernel.size ** 2
    b = 1 if kernel.bias is not None else 0
    if kernel.depthwise:
        return h * w * kernel.out_channels * (k2 + b)
    return h * w * kernel.out_channels * (kernel.in_channels * k2 + b)


def count_flops(net: DenoiserNet, input_shape: Sequence[int], sfm_only: bool = False) -> int:
    """Convolution multiply-accumulates for one forward pass.

    ``input_shape`` is (batch, channels, H, W) or (H, W). Normalization,
    activations and elementwise products are not counted.
    """
    shape = tuple(input_shape)
    batch, (h, w) = (shape[0], shape[2:]) if len(shape) == 4 else (1, shape)
    check_input_size(net.cfg, h, w)
    sfm_kernels = {id(t) for mods in net.fusions for m in mods for t in m.parameters()}
    total = 0
    for kernel, s in _conv_sites(net):
        if sfm_only and id(kernel.weight) not in sfm_kernels:
            continue
        f = 2 ** (s - 1)
        total += conv_macs(kernel, h // f, w // f)
    return batch * total
