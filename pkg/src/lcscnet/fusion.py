"""Adaptive element-wise fusion of the intermediate outputs.

The fused image is built progressively: starting from the shallowest output,
each step gates the running blend against the next output with a per-pixel
sigmoid weight, so the result is always a convex combination of everything
seen so far.  The equivalent closed-form weight tensor of each output falls
out of the gate values and is kept on a trace for inspection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .autodiff import (ConvKernel, ShapeError, Tensor, concat_channels, conv2d,
                       sigmoid, zeros_kernel)


@dataclass
class FusionParams:
    """The N-1 gate kernels, each 1x1 mapping 2c -> c channels."""

    gates: list

    @classmethod
    def zero_init(cls, n_outputs: int, channels: int, dtype=np.float64) -> "FusionParams":
        # Zero gates start every blend at an even 50/50 split.
        return cls(gates=[zeros_kernel(2 * channels, channels, 1, dtype)
                          for _ in range(n_outputs - 1)])

    def validate_for(self, n_outputs: int, channels: int):
        if len(self.gates) != n_outputs - 1:
            raise ShapeError(f"{len(self.gates)} gates cannot fuse {n_outputs} outputs")
        for g in self.gates:
            if g.ksize != 1 or g.in_channels != 2 * channels or g.out_channels != channels:
                raise ShapeError(f"gate must be 1x1 mapping {2 * channels} -> {channels} "
                                 f"channels, got {g!r}")


@dataclass
class FusionTrace:
    """Gate activations and the per-output weight tensors they induce."""

    alphas: list  # N-1 arrays, each strictly inside (0, 1)
    weights: list  # N arrays in [0, 1] summing to one elementwise


def fuse(outputs, params: FusionParams):
    """Progressively blend the outputs; returns (fused tensor, trace).

    Each step concatenates (running blend, next output) in that order, gates
    through a 1x1 conv + sigmoid, and updates blend = alpha*blend +
    (1-alpha)*next.
    """
    if not outputs:
        raise ShapeError("fuse needs at least one output")
    shapes = {o.shape for o in outputs}
    if len(shapes) != 1:
        raise ShapeError(f"fuse inputs disagree on shape: {sorted(shapes)}")
    n = len(outputs)
    channels = outputs[0].shape[1]
    params.validate_for(n, channels)

    m = outputs[0]
    if n == 1:
        return m, FusionTrace(alphas=[], weights=[np.ones_like(m.data)])
    alphas = []
    for i in range(n - 1):
        gate_in = concat_channels(m, outputs[i + 1])
        alpha = sigmoid(conv2d(gate_in, params.gates[i], 0))
        alphas.append(alpha)
        m = alpha * m + (1.0 - alpha) * outputs[i + 1]
    trace = FusionTrace(alphas=[a.data.copy() for a in alphas],
                        weights=derive_weights([a.data for a in alphas], n))
    return m, trace


def derive_weights(alphas, n: int):
    """Closed-form weight of each output given the gate activations.

    The first output's weight is the product of all gates; output k keeps
    (1 - alpha_{k-1}) times the gates applied after it; the last output's
    weight is the final gate's complement.  The weights telescope to one.
    """
    if len(alphas) != n - 1:
        raise ShapeError(f"{len(alphas)} gate activations cannot weight {n} outputs")
    if n == 1:
        return [np.ones((1, 1, 1, 1))]
    alphas = [np.asarray(a) for a in alphas]

    # suffix[k] = prod_{i=k..n-2} alphas[i], suffix[n-1] = 1
    suffix = [np.ones_like(alphas[0]) for _ in range(n)]
    for k in range(n - 2, -1, -1):
        suffix[k] = alphas[k] * suffix[k + 1]
    weights = [suffix[0]]
    for k in range(2, n):
        weights.append((1.0 - alphas[k - 2]) * suffix[k - 1])
    weights.append(1.0 - alphas[n - 2])
    return weights


def export_weight_maps(trace: FusionTrace, directory, prefix: str = "weight") -> list:
    """Write each weight map as an 8-bit grayscale PNG, [0,1] -> [0,255].

    Maps with batch or channel extent > 1 export the first batch item,
    channel 0.  Returns the written paths.
    """
    from pathlib import Path

    out_dir = Path(directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, w in enumerate(trace.weights, start=1):
        plane = np.asarray(w)
        if plane.ndim == 4:
            plane = plane[0, 0]
        quantised = np.clip(np.rint(plane * 255.0), 0, 255).astype(np.uint8)
        path = out_dir / f"{prefix}_{k:02d}.png"
        Image.fromarray(quantised, mode="L").save(path)
        paths.append(path)
    return paths
