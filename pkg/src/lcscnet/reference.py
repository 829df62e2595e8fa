"""Residual and densely-connected reference blocks for structural comparison.

These blocks exist to be compared against the linear-compressing units: the
dense block in its original all-pairs-skip form and its adjacent-skip
rewiring compute the same function, and the moved-bottleneck dense variant
re-labels directly into linear-compressing units.  Construction is also the
counting oracle behind the parameter-efficiency claims.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (ConvKernel, ShapeError, Tensor, concat_channels, conv2d,
                       he_uniform_kernel, relu)
from .nets import ConfigError, LCSCUnitParams, build_unit


# -- residual blocks ----------------------------------------------------------


@dataclass
class ResBlockParams:
    """Two 3x3 kernels in pre-activation arrangement (width preserved)."""

    conv1: ConvKernel
    conv2: ConvKernel

    def __post_init__(self):
        if self.conv1.in_channels != self.conv1.out_channels:
            raise ConfigError("residual block must preserve width")
        if self.conv2.in_channels != self.conv2.out_channels or \
                self.conv2.in_channels != self.conv1.in_channels:
            raise ConfigError("residual block kernels disagree on width")


def resblock_forward(params: ResBlockParams, y: Tensor) -> Tensor:
    """y + conv(relu(conv(relu(y))))."""
    if y.shape[1] != params.conv1.in_channels:
        raise ShapeError(f"block expects {params.conv1.in_channels} channels, "
                         f"got {y.shape[1]}")
    f = conv2d(relu(conv2d(relu(y), params.conv1, 1)), params.conv2, 1)
    return y + f


# -- dense blocks --------------------------------------------------------------


@dataclass
class DenseUnitParams:
    """One dense unit: ReLU + 3x3 conv growing the state, optional 1x1 bottleneck."""

    nl: ConvKernel
    bottleneck: ConvKernel | None = None

    @property
    def in_width(self) -> int:
        return self.bottleneck.in_channels if self.bottleneck else self.nl.in_channels

    @property
    def growth(self) -> int:
        return self.nl.out_channels


def dense_unit_forward(params: DenseUnitParams, y: Tensor) -> Tensor:
    """concat(state, new features); width grows by the growth rate."""
    if y.shape[1] != params.in_width:
        raise ShapeError(f"dense unit expects {params.in_width} channels, got {y.shape[1]}")
    x = conv2d(y, params.bottleneck, 0) if params.bottleneck else y
    return concat_channels(y, conv2d(relu(x), params.nl, 1))


@dataclass
class DenseBlockOriginal:
    """All-pairs form: every unit consumes the explicit list of former features."""

    units: list  # unit p: 3x3 kernel, (base + (p-1)*growth) -> growth channels


@dataclass
class DenseBlockAdjacent:
    """Adjacent-skip form: a single running concatenation carries the state."""

    units: list


def dense_block_original_forward(block: DenseBlockOriginal, y0: Tensor) -> Tensor:
    features = [y0]
    for kernel in block.units:
        stacked = features[0]
        for f in features[1:]:
            stacked = concat_channels(stacked, f)
        features.append(conv2d(relu(stacked), kernel, 1))
    out = features[0]
    for f in features[1:]:
        out = concat_channels(out, f)
    return out


def dense_block_adjacent_forward(block: DenseBlockAdjacent, y0: Tensor) -> Tensor:
    state = y0
    for kernel in block.units:
        state = concat_channels(state, conv2d(relu(state), kernel, 1))
    return state


def equivalence_a_to_b(block: DenseBlockOriginal) -> DenseBlockAdjacent:
    """Rewire all-pairs skips into the running-state form; weights unchanged.

    Former features enter each unit in creation order in both forms, so only
    the concatenation bookkeeping differs.
    """
    return DenseBlockAdjacent(units=list(block.units))


@dataclass
class MovedBottleneckUnit:
    """Constant-width dense unit: the bottleneck compresses the carried state."""

    bottleneck: ConvKernel  # 1x1, k -> b
    nl: ConvKernel  # 3x3, k -> growth


@dataclass
class MovedBottleneckBlock:
    units: list

    @property
    def width(self) -> int:
        return self.units[0].bottleneck.in_channels


def moved_bottleneck_forward(block: MovedBottleneckBlock, y: Tensor) -> Tensor:
    state = y
    for u in block.units:
        carried = conv2d(state, u.bottleneck, 0)
        explored = conv2d(relu(state), u.nl, 1)
        state = concat_channels(carried, explored)
    return state


def equivalence_d_to_e(block: MovedBottleneckBlock):
    """Re-label a moved-bottleneck block as linear-compressing units.

    Requires state width k == bottleneck width b + growth k0 so the state
    width is conserved; the bottleneck becomes the linear branch and the
    nonlinear mapping becomes the exploring branch, weights untouched.
    """
    units = []
    for u in block.units:
        k = u.bottleneck.in_channels
        b = u.bottleneck.out_channels
        k0 = u.nl.out_channels
        if k != b + k0:
            raise ConfigError(f"state width {k} != bottleneck {b} + growth {k0}")
        if u.nl.in_channels != k:
            raise ConfigError("nonlinear branch must read the full state")
        units.append(LCSCUnitParams(u.bottleneck, u.nl))
    return units


# -- comparison suite -----------------------------------------------------------


@dataclass
class ComparisonSuite:
    """Equal-depth cores plus their exact weight counts (biases excluded)."""

    lcsc_units: list
    res_blocks: list
    bdense_units: list
    bcdense_blocks: list  # list of (units, compression kernel) per block
    param_counts: dict


def _weight_count(kernels) -> int:
    return int(sum(k.weight.data.size for k in kernels if k is not None))


def build_comparison_suite(width: int, depth: int, bc_blocks: int = 3,
                           seed: int = 0) -> ComparisonSuite:
    """Four same-depth cores: ResNet, B-DenseNet, BC-DenseNet, basic LCSC.

    ``depth`` counts nonlinear 3x3 layers.  The LCSC core uses an even
    linear/nonlinear split, paired with dense growth rate width/2 and
    bottleneck output equal to the full width; the residual core stacks
    depth/2 two-conv blocks.
    """
    if width % 2:
        raise ConfigError(f"width must be even, got {width}")
    if depth % 2:
        raise ConfigError(f"depth must be even, got {depth}")
    if depth % bc_blocks:
        raise ConfigError(f"depth {depth} not divisible into {bc_blocks} blocks")
    rng = np.random.default_rng(seed)
    growth = width // 2

    lcsc_units = [build_unit(rng, width, 0.5) for _ in range(depth)]

    res_blocks = [ResBlockParams(he_uniform_kernel(rng, width, width, 3),
                                 he_uniform_kernel(rng, width, width, 3))
                  for _ in range(depth // 2)]

    bdense_units = []
    for p in range(1, depth + 1):
        in_width = width + (p - 1) * growth
        bdense_units.append(DenseUnitParams(
            nl=he_uniform_kernel(rng, width, growth, 3),
            bottleneck=he_uniform_kernel(rng, in_width, width, 1)))

    bcdense_blocks = []
    per_block = depth // bc_blocks
    for _ in range(bc_blocks):
        units = []
        for p in range(1, per_block + 1):
            in_width = width + (p - 1) * growth
            units.append(DenseUnitParams(
                nl=he_uniform_kernel(rng, width, growth, 3),
                bottleneck=he_uniform_kernel(rng, in_width, width, 1)))
        end_width = width + per_block * growth
        compression = he_uniform_kernel(rng, end_width, width, 1)
        bcdense_blocks.append((units, compression))

    counts = {
        "lcsc": sum(_weight_count([u.k_l, u.k_nl]) for u in lcsc_units),
        "resnet": sum(_weight_count([b.conv1, b.conv2]) for b in res_blocks),
        "bdense": sum(_weight_count([u.nl, u.bottleneck]) for u in bdense_units),
        "bcdense": sum(sum(_weight_count([u.nl, u.bottleneck]) for u in units)
                       + _weight_count([comp])
                       for units, comp in bcdense_blocks),
    }
    return ComparisonSuite(lcsc_units=lcsc_units, res_blocks=res_blocks,
                           bdense_units=bdense_units, bcdense_blocks=bcdense_blocks,
                           param_counts=counts)
