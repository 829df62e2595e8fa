"""Reconstruction quality metrics and parameter/compute accounting.

PSNR and SSIM follow the luminance-plane conventions used across the
super-resolution literature (unit dynamic range, border shave, 11x11
Gaussian window).  The accounting side produces exact weight counts, the
closed-form unit-count ratios against residual and dense baselines, and
multiply-accumulate totals at a stated high-resolution output size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .nets import ConfigError, NetworkConfig


class MetricError(ValueError):
    """Raised when metric inputs are unusable."""


# -- quality ---------------------------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray, shave: int = 0) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] planes; inf when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"psnr inputs disagree: {a.shape} vs {b.shape}")
    if shave:
        if min(a.shape[:2]) <= 2 * shave:
            raise MetricError(f"shave {shave} consumes the whole {a.shape} plane")
        a = a[shave:-shave, shave:-shave]
        b = b[shave:-shave, shave:-shave]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = sliding_window_view(x, len(kernel), axis=0) @ kernel
    return sliding_window_view(out, len(kernel), axis=1) @ kernel


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local structural similarity on luminance planes (range 1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"ssim inputs disagree: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise MetricError(f"ssim expects 2-D luminance planes, got {a.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise MetricError(f"plane {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu1 = _filter_valid(a, w)
    mu2 = _filter_valid(b, w)
    s11 = _filter_valid(a * a, w) - mu1 * mu1
    s22 = _filter_valid(b * b, w) - mu2 * mu2
    s12 = _filter_valid(a * b, w) - mu1 * mu2
    num = (2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


# -- unit-level counting oracles ----------------------------------------------------


def lcsc_unit_weight_count(n1: int, n2: int, k: int = 3) -> int:
    """Weights of one linear-compressing unit: (n1+n2) in, split n1/n2 out."""
    n = n1 + n2
    return n * n1 + k * k * n * n2


def resnet_unit_weight_count(n_in: int, n_out: int, k: int = 3) -> int:
    """Weights of one plain k x k convolution, the residual-unit building block."""
    return n_in * n_out * k * k


def split_unit_weight_count(n_in: int, n_out, k: int, rho0):
    """Weights of an abstract unit splitting n_out into linear/nonlinear parts."""
    return n_in * (1 - rho0) * n_out + k * k * n_in * rho0 * n_out


def dense_unit_weight_count(p: int, n1: int, n2: int, k: int = 3) -> int:
    """Weights of the p-th bottlenecked dense unit in the matched pairing."""
    return p * n2 * n1 + k * k * n1 * n2


# -- ratio formulas ---------------------------------------------------------------


def param_ratio_lr(rho0, k: int):
    """Unit-weight ratio against a plain k x k convolution: rho0 + (1-rho0)/k^2.

    Exact for rational inputs (pass fractions.Fraction to avoid rounding).
    """
    if not 0 <= rho0 <= 1:
        raise ConfigError(f"rho0 must lie in [0, 1], got {rho0}")
    if k < 1:
        raise ConfigError(f"kernel size must be >= 1, got {k}")
    return rho0 + (1 - rho0) / k ** 2


def param_ratio_ld(L: int, rho0, k: int, blocks: int = 1):
    """Network-weight ratio against the matched bottlenecked dense stack.

    ``blocks`` > 1 gives the block-compressed variant, substituting L/blocks
    for L.  Undefined at the degenerate splits rho0 in {0, 1}.
    """
    if L < 1:
        raise ConfigError(f"depth must be >= 1, got {L}")
    if not 0 < rho0 < 1:
        raise ConfigError(f"rho0 must lie strictly inside (0, 1), got {rho0}")
    if k < 1:
        raise ConfigError(f"kernel size must be >= 1, got {k}")
    eff = L / blocks if blocks > 1 else L
    return 2 / (2 * k ** 2 + eff + 1) * (1 / rho0 + k ** 2 / (1 - rho0))


# -- network accounting --------------------------------------------------------------


@dataclass
class CostRow:
    label: str
    params: int
    mult_adds: int


@dataclass
class CostReport:
    """Per-module breakdown; totals are the row sums by construction."""

    hr_size: tuple
    include_bias: bool
    rows: list = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def mult_adds(self) -> int:
        return sum(r.mult_adds for r in self.rows)

    def render(self) -> str:
        width = max([len(r.label) for r in self.rows] + [len("total")])
        lines = [f"{'module':<{width}}  {'params':>12}  {'mult&adds':>16}"]
        for r in self.rows:
            lines.append(f"{r.label:<{width}}  {r.params:>12,}  {r.mult_adds:>16,}")
        lines.append(f"{'total':<{width}}  {self.params:>12,}  {self.mult_adds:>16,}")
        lines.append(f"(mult&adds at {self.hr_size[0]}x{self.hr_size[1]} output, "
                     f"bias {'included' if self.include_bias else 'excluded'})")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"hr_size": list(self.hr_size), "include_bias": self.include_bias,
                "params": self.params, "mult_adds": self.mult_adds,
                "rows": [{"label": r.label, "params": r.params, "mult_adds": r.mult_adds}
                         for r in self.rows]}


def _conv_cost(n_in: int, n_out: int, k: int, positions: int, include_bias: bool):
    weights = n_in * n_out * k * k
    params = weights + (n_out if include_bias else 0)
    return params, params * positions


def conv_stack_cost(layers, positions: int, include_bias: bool = True) -> CostRow:
    """Aggregate cost of plain (in, out, k) conv layers all run at one grid size."""
    params = 0
    ops = 0
    for n_in, n_out, k in layers:
        p, o = _conv_cost(n_in, n_out, k, positions, include_bias)
        params += p
        ops += o
    return CostRow("conv_stack", params, ops)


def cost_report(config: NetworkConfig, hr_size=(1280, 720),
                include_bias: bool = True) -> CostReport:
    """Exact parameter and multiply-accumulate accounting for one architecture.

    Layers running in low-resolution space count hr_pixels / scale^2
    positions.  The shared head's weights appear once; its repeated
    application to every intermediate output and the fusion gates appear as
    separate rows so either bookkeeping of the fused total can be read off.
    """
    hr_positions = hr_size[0] * hr_size[1]
    lr_positions = hr_positions // (config.scale * config.scale)
    report = CostReport(hr_size=tuple(hr_size), include_bias=include_bias)
    n, c = config.width, config.in_channels

    p, o = _conv_cost(c, n, 3, lr_positions, include_bias)
    report.rows.append(CostRow("pfe", p, o))

    unit_params = 0
    unit_ops = 0
    for d in range(config.blocks):
        n1, n2 = config.split_channels(d)
        for _ in range(config.units_per_block):
            if n1:
                p, o = _conv_cost(n, n1, 1, lr_positions, include_bias)
                unit_params += p
                unit_ops += o
            if n2:
                p, o = _conv_cost(n, n2, 3, lr_positions, include_bias)
                unit_params += p
                unit_ops += o
    report.rows.append(CostRow("blocks", unit_params, unit_ops))

    if config.enhanced:
        p, o = _conv_cost(2 * n, n, 1, lr_positions, include_bias)
        report.rows.append(CostRow("bottlenecks", p * config.blocks, o * config.blocks))

    head_params = 0
    head_ops = 0
    if config.head == "nearest_stack":
        for n_in, n_out in ((n, n), (n, n), (n, c)):
            p, o = _conv_cost(n_in, n_out, 3, hr_positions, include_bias)
            head_params += p
            head_ops += o
    else:
        if config.scale == 4:
            stages = (((n, 4 * n), lr_positions), ((n, 4 * c), lr_positions * 4))
        else:
            stages = (((n, c * config.scale ** 2), lr_positions),)
        for (n_in, n_out), pos in stages:
            p, o = _conv_cost(n_in, n_out, 3, pos, include_bias)
            head_params += p
            head_ops += o
    report.rows.append(CostRow("head", head_params, head_ops))

    if config.fusion and config.blocks > 1:
        report.rows.append(CostRow("head_extra_outputs", 0, head_ops * (config.blocks - 1)))
        p, o = _conv_cost(2 * c, c, 1, hr_positions, include_bias)
        gates = config.blocks - 1
        report.rows.append(CostRow("fusion_gates", p * gates, o * gates))

    return report


def count_params(config: NetworkConfig, include_bias: bool = True) -> CostReport:
    return cost_report(config, include_bias=include_bias)


def mult_adds(config: NetworkConfig, hr_size=(1280, 720), include_bias: bool = True) -> int:
    return cost_report(config, hr_size=hr_size, include_bias=include_bias).mult_adds
