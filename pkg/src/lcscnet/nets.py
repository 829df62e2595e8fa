"""The linear-compressing skip-connection network family.

A unit splits its output channels between a 1x1 linear-compressing branch
(carrying former features forward) and a 3x3 nonlinear branch (exploring new
features); a block chains units sharing one nonlinear ratio; the enhanced
block wraps a block with a long-term concatenation plus 1x1 bottleneck.  The
full network is: preliminary 3x3 feature extraction, a stack of blocks, and
one shared upsampling/reconstruction head producing an intermediate output
per block depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (ConvKernel, ShapeError, Tensor, concat_channels, conv2d,
                       he_uniform_kernel, nearest_upsample, pixel_shuffle, relu,
                       zeros_kernel)

HEAD_VARIANTS = ("nearest_stack", "sub_pixel")
SUPPORTED_SCALES = (2, 3, 4)


class ConfigError(ValueError):
    """Raised for invalid architecture configuration."""


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class NetworkConfig:
    """Complete architecture description.

    ``rho`` lists the nonlinear-channel fraction per block; ``rho * width``
    must be an integer for every entry (no silent rounding).
    """

    blocks: int = 2
    units_per_block: int = 3
    width: int = 16
    rho: tuple = (0.75, 0.5)
    enhanced: bool = False
    scale: int = 2
    head: str = "nearest_stack"
    fusion: bool = True
    residual_target: bool = True
    in_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rho", tuple(float(r) for r in self.rho))
        self.validate()

    def validate(self):
        if self.blocks < 1:
            raise ConfigError(f"blocks must be >= 1, got {self.blocks}")
        if self.units_per_block < 1:
            raise ConfigError(f"units_per_block must be >= 1, got {self.units_per_block}")
        if self.width < 1:
            raise ConfigError(f"width must be >= 1, got {self.width}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if len(self.rho) != self.blocks:
            raise ConfigError(f"rho list has {len(self.rho)} entries for {self.blocks} blocks")
        for r in self.rho:
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"rho value {r} outside [0, 1]")
            n2 = r * self.width
            if abs(n2 - round(n2)) > 1e-9:
                raise ConfigError(f"rho not integral: rho={r} times width={self.width} "
                                  f"gives {n2} nonlinear channels")
        if self.scale not in SUPPORTED_SCALES:
            raise ConfigError(f"scale must be one of {SUPPORTED_SCALES}, got {self.scale}")
        if self.head not in HEAD_VARIANTS:
            raise ConfigError(f"head must be one of {HEAD_VARIANTS}, got {self.head!r}")

    def split_channels(self, block_index: int) -> tuple[int, int]:
        """(linear n1, nonlinear n2) for one block."""
        n2 = int(round(self.rho[block_index] * self.width))
        return self.width - n2, n2

    def to_dict(self) -> dict:
        return {
            "blocks": self.blocks, "units_per_block": self.units_per_block,
            "width": self.width, "rho": list(self.rho), "enhanced": self.enhanced,
            "scale": self.scale, "head": self.head, "fusion": self.fusion,
            "residual_target": self.residual_target, "in_channels": self.in_channels,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{**d, "rho": tuple(d["rho"])})


# -- parameters ---------------------------------------------------------------


class LCSCUnitParams:
    """One unit's pair of kernels: 1x1 linear (n -> n1) and 3x3 nonlinear (n -> n2).

    Either kernel may be None for the degenerate all-linear / all-nonlinear
    splits; the populated output widths must sum to the input width.
    """

    def __init__(self, k_l: ConvKernel | None, k_nl: ConvKernel | None):
        if k_l is None and k_nl is None:
            raise ConfigError("unit needs at least one branch")
        if k_l is not None and k_l.ksize != 1:
            raise ConfigError("linear-compressing kernel must be 1x1")
        if k_nl is not None and k_nl.ksize != 3:
            raise ConfigError("nonlinear kernel must be 3x3")
        widths = {k.in_channels for k in (k_l, k_nl) if k is not None}
        if len(widths) != 1:
            raise ConfigError(f"branch input widths disagree: {sorted(widths)}")
        n = widths.pop()
        n1 = k_l.out_channels if k_l is not None else 0
        n2 = k_nl.out_channels if k_nl is not None else 0
        if n1 + n2 != n:
            raise ConfigError(f"unit output width {n1}+{n2} != input width {n}")
        self.k_l = k_l
        self.k_nl = k_nl
        self.width = n
        self.n1 = n1
        self.n2 = n2


@dataclass
class NearestStackHead:
    """Nearest-neighbour upsampling followed by conv-ReLU, conv-ReLU, conv."""

    scale: int
    convs: list  # three 3x3 kernels: n -> n, n -> n, n -> in_channels


@dataclass
class SubPixelHead:
    """3x3 conv into r^2 channel groups, then pixel shuffle (two x2 stages for x4)."""

    scale: int
    stages: list  # one 3x3 kernel per shuffle stage


@dataclass
class NetworkParams:
    pfe: ConvKernel
    blocks: list  # blocks[d] is the list of M LCSCUnitParams for block d
    bottlenecks: list | None  # one 1x1 (2n -> n) kernel per block when enhanced
    head: NearestStackHead | SubPixelHead
    fusion: "FusionParams | None" = field(default=None)

    def named_parameters(self):
        """(name, Tensor) pairs in a fixed serialisation order."""
        yield "pfe.weight", self.pfe.weight
        yield "pfe.bias", self.pfe.bias
        for d, units in enumerate(self.blocks):
            for m, unit in enumerate(units):
                if unit.k_l is not None:
                    yield f"block{d}.unit{m}.linear.weight", unit.k_l.weight
                    yield f"block{d}.unit{m}.linear.bias", unit.k_l.bias
                if unit.k_nl is not None:
                    yield f"block{d}.unit{m}.nonlinear.weight", unit.k_nl.weight
                    yield f"block{d}.unit{m}.nonlinear.bias", unit.k_nl.bias
        if self.bottlenecks is not None:
            for d, k in enumerate(self.bottlenecks):
                yield f"block{d}.bottleneck.weight", k.weight
                yield f"block{d}.bottleneck.bias", k.bias
        head_kernels = (self.head.convs if isinstance(self.head, NearestStackHead)
                        else self.head.stages)
        for i, k in enumerate(head_kernels):
            yield f"head.conv{i}.weight", k.weight
            yield f"head.conv{i}.bias", k.bias
        if self.fusion is not None:
            for i, k in enumerate(self.fusion.gates):
                yield f"fusion.gate{i}.weight", k.weight
                yield f"fusion.gate{i}.bias", k.bias

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.zero_grad()


def build_unit(rng, width: int, rho: float, dtype=np.float64) -> LCSCUnitParams:
    n2 = int(round(rho * width))
    n1 = width - n2
    k_l = he_uniform_kernel(rng, width, n1, 1, dtype) if n1 > 0 else None
    k_nl = he_uniform_kernel(rng, width, n2, 3, dtype) if n2 > 0 else None
    return LCSCUnitParams(k_l, k_nl)


def build_head(rng, config: NetworkConfig, dtype=np.float64):
    n, c, s = config.width, config.in_channels, config.scale
    if config.head == "nearest_stack":
        convs = [he_uniform_kernel(rng, n, n, 3, dtype),
                 he_uniform_kernel(rng, n, n, 3, dtype),
                 he_uniform_kernel(rng, n, c, 3, dtype)]
        return NearestStackHead(scale=s, convs=convs)
    if s == 4:
        stages = [he_uniform_kernel(rng, n, n * 4, 3, dtype),
                  he_uniform_kernel(rng, n, c * 4, 3, dtype)]
    else:
        stages = [he_uniform_kernel(rng, n, c * s * s, 3, dtype)]
    return SubPixelHead(scale=s, stages=stages)


def build_network(config: NetworkConfig, dtype=np.float64) -> NetworkParams:
    """Fresh parameters for a config: He-uniform weights, zero biases and gates."""
    from .fusion import FusionParams  # deferred: fusion builds on this module

    rng = np.random.default_rng(config.seed)
    pfe = he_uniform_kernel(rng, config.in_channels, config.width, 3, dtype)
    blocks = []
    for d in range(config.blocks):
        blocks.append([build_unit(rng, config.width, config.rho[d], dtype)
                       for _ in range(config.units_per_block)])
    bottlenecks = None
    if config.enhanced:
        bottlenecks = [he_uniform_kernel(rng, 2 * config.width, config.width, 1, dtype)
                       for _ in range(config.blocks)]
    head = build_head(rng, config, dtype)
    fusion = None
    if config.fusion:
        fusion = FusionParams.zero_init(config.blocks, config.in_channels, dtype)
    return NetworkParams(pfe=pfe, blocks=blocks, bottlenecks=bottlenecks,
                         head=head, fusion=fusion)


# -- forward passes -----------------------------------------------------------


def lcsc_unit_forward(params: LCSCUnitParams, y_in: Tensor) -> Tensor:
    """concat(linear 1x1 of input, nonlinear 3x3 of ReLU(input)); width preserved."""
    if y_in.shape[1] != params.width:
        raise ShapeError(f"unit expects {params.width} channels, got {y_in.shape[1]}")
    if params.k_nl is None:
        return conv2d(y_in, params.k_l, 0)
    if params.k_l is None:
        return conv2d(relu(y_in), params.k_nl, 1)
    linear = conv2d(y_in, params.k_l, 0)
    nonlinear = conv2d(relu(y_in), params.k_nl, 1)
    return concat_channels(linear, nonlinear)


def lcsc_block_forward(units, f_in: Tensor) -> Tensor:
    widths = {u.width for u in units}
    if len(widths) != 1:
        raise ShapeError(f"block units disagree on width: {sorted(widths)}")
    out = f_in
    for unit in units:
        out = lcsc_unit_forward(unit, out)
    return out


def e_lcsc_block_forward(units, bottleneck: ConvKernel, f_in: Tensor) -> Tensor:
    """bottleneck(concat(input, block(input))): the long-term-memory wrapper."""
    n = units[0].width
    if bottleneck.ksize != 1 or bottleneck.in_channels != 2 * n or bottleneck.out_channels != n:
        raise ShapeError(f"bottleneck must be 1x1 mapping {2 * n} -> {n} channels, "
                         f"got {bottleneck!r}")
    inner = lcsc_block_forward(units, f_in)
    return conv2d(concat_channels(f_in, inner), bottleneck, 0)


def pfe_forward(pfe: ConvKernel, i_in: Tensor) -> Tensor:
    return conv2d(i_in, pfe, 1)


def head_forward(head, f: Tensor) -> Tensor:
    if isinstance(head, NearestStackHead):
        x = nearest_upsample(f, head.scale)
        x = relu(conv2d(x, head.convs[0], 1))
        x = relu(conv2d(x, head.convs[1], 1))
        return conv2d(x, head.convs[2], 1)
    x = f
    for stage in head.stages:
        r = 2 if head.scale == 4 else head.scale
        x = pixel_shuffle(conv2d(x, stage, 1), r)
    return x


def feature_stack(params: NetworkParams, config: NetworkConfig, i_in: Tensor):
    """[F_0, F_1, ..., F_N]: extraction output then each block's output."""
    features = [pfe_forward(params.pfe, i_in)]
    for d in range(config.blocks):
        if config.enhanced:
            features.append(e_lcsc_block_forward(params.blocks[d], params.bottlenecks[d],
                                                 features[-1]))
        else:
            features.append(lcsc_block_forward(params.blocks[d], features[-1]))
    return features


def network_forward(params: NetworkParams, config: NetworkConfig, i_in: Tensor):
    """Returns (intermediate outputs Y_1..Y_N, final output).

    The single head is applied to every block's features (plus the initial
    features when enhanced); the final output is the adaptive fusion of the
    intermediates when fusion is configured, else the deepest one.
    """
    from .fusion import fuse

    features = feature_stack(params, config, i_in)
    f0 = features[0]
    intermediates = []
    for fd in features[1:]:
        head_in = fd + f0 if config.enhanced else fd
        intermediates.append(head_forward(params.head, head_in))
    if config.fusion:
        final, _ = fuse(intermediates, params.fusion)
    else:
        final = intermediates[-1]
    return intermediates, final


# -- structural identities ----------------------------------------------------


def lc_decomposition_check(k_l: ConvKernel, y: Tensor | np.ndarray, n1: int,
                           tol: float = 1e-5) -> bool:
    """Does the full 1x1 conv equal the sum of its two channel-split parts?

    The kernel's input channels split into the first ``n1`` (former linear
    features) and the rest (former nonlinear features); linearity makes the
    block-matrix identity exact up to float roundoff.
    """
    data = y.data if isinstance(y, Tensor) else np.asarray(y)
    w = k_l.weight.data
    if w.shape[2:] != (1, 1):
        raise ShapeError("decomposition check applies to 1x1 kernels")
    n = w.shape[1]
    if not 0 <= n1 <= n:
        raise ShapeError(f"split {n1} outside [0, {n}]")
    mat = w[:, :, 0, 0]
    full = np.einsum("oi,bihw->bohw", mat, data) + k_l.bias.data[None, :, None, None]
    part = np.einsum("oi,bihw->bohw", mat[:, :n1], data[:, :n1])
    part = part + np.einsum("oi,bihw->bohw", mat[:, n1:], data[:, n1:])
    part = part + k_l.bias.data[None, :, None, None]
    denom = max(float(np.abs(full).max()), 1e-12)
    return float(np.abs(full - part).max()) / denom < tol


def linear_chain_product_check(units, y1_l: Tensor | np.ndarray, tol: float = 1e-5) -> bool:
    """Chained all-linear units vs the single 1x1 conv of their matrix product.

    Requires every unit to be pure linear (no nonlinear branch) with zero
    bias; the effective channel matrix is the ordered product with the last
    unit's matrix leftmost.
    """
    data = y1_l.data if isinstance(y1_l, Tensor) else np.asarray(y1_l)
    mats = []
    for u in units:
        if u.k_nl is not None:
            raise ShapeError("chain product applies to all-linear units")
        if np.any(u.k_l.bias.data != 0):
            raise ShapeError("chain product requires zero biases")
        mats.append(u.k_l.weight.data[:, :, 0, 0])
    chained = data
    for m in mats:
        chained = np.einsum("oi,bihw->bohw", m, chained)
    product = mats[0]
    for m in mats[1:]:
        product = m @ product
    direct = np.einsum("oi,bihw->bohw", product, data)
    denom = max(float(np.abs(direct).max()), 1e-12)
    return float(np.abs(chained - direct).max()) / denom < tol
