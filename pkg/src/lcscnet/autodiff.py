"""Dense 4-D tensors with reverse-mode automatic differentiation.

Everything downstream (network forwards, fusion, losses) is composed from the
primitives in this module: 2-D cross-correlation, ReLU, sigmoid, channel
concatenation, nearest-neighbour upsampling, pixel shuffle, and elementwise
arithmetic.  Each primitive records its inputs on the output node; calling
``backward`` on a scalar loss replays the recorded graph in reverse
topological order, visiting each node exactly once and accumulating
gradients into ``Tensor.grad``.

Conventions:
  * convolution means cross-correlation (no kernel flip), stride fixed at 1
  * ReLU's gradient at exactly 0 is 0
  * tensors are immutable values once created; ``grad`` is the only
    mutated field
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Configuration error raised when operand shapes are incompatible."""


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff."""

    def __init__(self, data, parents=(), backward_fn=None, dtype=None, op=""):
        self.data = _as_float_array(data, dtype)
        self.grad = np.zeros_like(self.data)
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad[...] = 0

    def detach(self) -> np.ndarray:
        return self.data.copy()

    def backward(self):
        backward(self)

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            if self.shape != other.shape:
                raise ShapeError(f"add: shapes {self.shape} and {other.shape} differ")
            out = Tensor(self.data + other.data, (self, other))

            def _bwd(g):
                self.grad += g
                other.grad += g

        else:
            out = Tensor(self.data + other, (self,))

            def _bwd(g):
                self.grad += g

        out._backward_fn = _bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, (self,))

        def _bwd(g):
            self.grad -= g

        out._backward_fn = _bwd
        return out

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return self + (-other)
        return self + (-other)

    def __rsub__(self, other):
        # float - Tensor, used for gate complements like 1 - alpha
        out = Tensor(other - self.data, (self,))

        def _bwd(g):
            self.grad -= g

        out._backward_fn = _bwd
        return out

    def __mul__(self, other):
        if isinstance(other, Tensor):
            if self.shape != other.shape:
                raise ShapeError(f"mul: shapes {self.shape} and {other.shape} differ")
            out = Tensor(self.data * other.data, (self, other))

            def _bwd(g):
                self.grad += g * other.data
                other.grad += g * self.data

        else:
            out = Tensor(self.data * other, (self,))

            def _bwd(g):
                self.grad += g * other

        out._backward_fn = _bwd
        return out

    __rmul__ = __mul__

    # -- activations and reductions --------------------------------------

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def abs(self) -> "Tensor":
        out = Tensor(np.abs(self.data), (self,), op="abs")

        def _bwd(g):
            self.grad += g * np.sign(self.data)

        out._backward_fn = _bwd
        return out

    def sum(self) -> "Tensor":
        out = Tensor(self.data.sum(), (self,))

        def _bwd(g):
            self.grad += g

        out._backward_fn = _bwd
        return out

    def mean(self) -> "Tensor":
        n = self.data.size
        out = Tensor(self.data.mean(), (self,))

        def _bwd(g):
            self.grad += g / n

        out._backward_fn = _bwd
        return out

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def backward(loss: Tensor):
    """Propagate gradients from a scalar loss through the recorded graph.

    Every reachable node's ``grad`` receives its accumulated adjoint;
    parameters that never fed the loss keep their zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")

    # Iterative post-order walk: deep unrolled graphs must not hit the
    # interpreter recursion limit.
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad += np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


# -- unary primitives ------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0), (x,), op="relu")

    def _bwd(g):
        x.grad += g * (x.data > 0)

    out._backward_fn = _bwd
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic, clamped to the open interval (0, 1)."""
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ed = np.exp(d[~pos])
    s[~pos] = ed / (1.0 + ed)
    fi = np.finfo(d.dtype)
    # Saturated values round to exactly 0 or 1; pull them back inside so the
    # convex-combination invariants hold for every finite input.
    np.clip(s, fi.tiny, 1.0 - fi.epsneg, out=s)
    out = Tensor(s, (x,))

    def _bwd(g):
        x.grad += g * s * (1.0 - s)

    out._backward_fn = _bwd
    return out


# -- convolution -----------------------------------------------------------


class ConvKernel:
    """Weights and bias for one convolution layer.

    ``weight`` has shape (out_channels, in_channels, kh, kw) with kh, kw in
    {1, 3}; ``bias`` has shape (out_channels,) and may be all-zero.
    """

    def __init__(self, weight, bias=None):
        w = weight if isinstance(weight, Tensor) else Tensor(weight)
        if w.data.ndim != 4:
            raise ShapeError(f"kernel weight must be 4-D, got shape {w.shape}")
        oc, ic, kh, kw = w.shape
        if kh not in (1, 3) or kw not in (1, 3):
            raise ShapeError(f"kernel size must be 1x1 or 3x3, got {kh}x{kw}")
        if oc < 1:
            raise ShapeError("kernel needs at least one output channel")
        if bias is None:
            bias = np.zeros(oc, dtype=w.dtype)
        b = bias if isinstance(bias, Tensor) else Tensor(bias, dtype=w.dtype)
        if b.shape != (oc,):
            raise ShapeError(f"bias shape {b.shape} does not match {oc} output channels")
        self.weight = w
        self.bias = b

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def ksize(self) -> int:
        return self.weight.shape[2]

    @property
    def same_padding(self) -> int:
        return self.ksize // 2

    def __repr__(self):
        oc, ic, kh, kw = self.weight.shape
        return f"ConvKernel({ic}->{oc}, {kh}x{kw})"


def he_uniform_kernel(rng: np.random.Generator, in_channels: int, out_channels: int,
                      ksize: int, dtype=np.float64) -> ConvKernel:
    """Kernel with uniform He initialisation and zero bias."""
    fan_in = in_channels * ksize * ksize
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(out_channels, in_channels, ksize, ksize))
    return ConvKernel(Tensor(w.astype(dtype)))


def zeros_kernel(in_channels: int, out_channels: int, ksize: int, dtype=np.float64) -> ConvKernel:
    return ConvKernel(Tensor(np.zeros((out_channels, in_channels, ksize, ksize), dtype=dtype)))


def identity_kernel_1x1(channels: int, dtype=np.float64) -> ConvKernel:
    w = np.eye(channels, dtype=dtype).reshape(channels, channels, 1, 1)
    return ConvKernel(Tensor(w))


def _im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = h + 2 * pad - kh + 1
    ow = w + 2 * pad - kw + 1
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + oh, j:j + ow]
    return cols.reshape(b, c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, pad: int) -> np.ndarray:
    b, c, h, w = x_shape
    oh = h + 2 * pad - kh + 1
    ow = w + 2 * pad - kw + 1
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + oh, j:j + ow] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad:-pad, pad:-pad]
    return xp


def conv2d(x: Tensor, kernel: ConvKernel, padding: int | None = None) -> Tensor:
    """Cross-correlate ``x`` (B, C, H, W) with the kernel, stride 1 plus bias.

    ``padding=None`` keeps the spatial size (0 for 1x1, 1 for 3x3).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D, got shape {x.shape}")
    if padding is None:
        padding = kernel.same_padding
    b, c, h, w = x.shape
    oc, ic, kh, kw = kernel.weight.shape
    if c != ic:
        raise ShapeError(f"conv2d: input has {c} channels ({x.shape}) but kernel "
                         f"expects {ic} ({tuple(kernel.weight.shape)})")
    weight, bias = kernel.weight, kernel.bias
    cols = _im2col(x.data, kh, kw, padding)
    wm = weight.data.reshape(oc, ic * kh * kw)
    out_flat = wm @ cols  # (b, oc, oh*ow) by broadcasting over the batch
    out_flat += bias.data[None, :, None]
    oh = h + 2 * padding - kh + 1
    ow = w + 2 * padding - kw + 1
    out = Tensor(out_flat.reshape(b, oc, oh, ow), (x, weight, bias))

    def _bwd(g):
        gm = g.reshape(b, oc, oh * ow)
        weight.grad += np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        bias.grad += g.sum(axis=(0, 2, 3))
        dcols = np.matmul(wm.T, gm)
        x.grad += _col2im(dcols, x.shape, kh, kw, padding)

    out._backward_fn = _bwd
    return out


# -- structural primitives -------------------------------------------------


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two feature maps along the channel axis, ``a`` first."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects 4-D tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} "
                         "disagree outside the channel axis")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1), (a, b))

    def _bwd(g):
        a.grad += g[:, :ca]
        b.grad += g[:, ca:]

    out._backward_fn = _bwd
    return out


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    """Replicate every pixel into a factor x factor cell."""
    if factor < 2:
        raise ShapeError(f"upsample factor must be >= 2, got {factor}")
    b, c, h, w = x.shape
    expanded = np.broadcast_to(x.data[:, :, :, None, :, None], (b, c, h, factor, w, factor))
    out = Tensor(expanded.reshape(b, c, h * factor, w * factor).copy(), (x,))

    def _bwd(g):
        x.grad += g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5))

    out._backward_fn = _bwd
    return out


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space: (B, C*r^2, H, W) -> (B, C, rH, rW).

    Output channel c at cell offset (dy, dx) reads input channel
    c*r^2 + dy*r + dx; checkpoint portability depends on this ordering.
    """
    b, c, h, w = x.shape
    if c % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by r^2={r * r}")
    co = c // (r * r)
    y = x.data.reshape(b, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    out = Tensor(y.reshape(b, co, h * r, w * r).copy(), (x,))

    def _bwd(g):
        gg = g.reshape(b, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
        x.grad += gg.reshape(b, c, h, w)

    out._backward_fn = _bwd
    return out


def space_to_depth(data: np.ndarray, r: int) -> np.ndarray:
    """Inverse of ``pixel_shuffle`` on raw arrays; used by tests and checks."""
    b, c, hh, ww = data.shape
    if hh % r or ww % r:
        raise ShapeError(f"space_to_depth: spatial dims {hh}x{ww} not divisible by {r}")
    h, w = hh // r, ww // r
    y = data.reshape(b, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
    return y.reshape(b, c * r * r, h, w)


def kink_margin(node: Tensor) -> float:
    """Smallest |argument| feeding any ReLU or abs in the graph below ``node``.

    Finite-difference checks are only well-posed when perturbations cannot
    cross a subgradient kink; callers filter probe points by this margin.
    """
    margin = np.inf
    visited = set()
    stack = [node]
    while stack:
        n = stack.pop()
        if id(n) in visited:
            continue
        visited.add(id(n))
        if n.op in ("relu", "abs") and n._parents:
            arg = n._parents[0].data
            if arg.size:
                margin = min(margin, float(np.abs(arg).min()))
        stack.extend(n._parents)
    return margin


# -- finite differences ------------------------------------------------------


def numeric_gradient(loss_fn, array: np.ndarray, coords=None, step: float = 1e-4):
    """Central finite differences of ``loss_fn()`` w.r.t. entries of ``array``.

    ``array`` is perturbed in place and restored; ``coords`` limits the check
    to a subset of flat indices (all entries when None).  Returns a list of
    (flat_index, derivative) pairs.
    """
    flat = array.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    grads = []
    for idx in coords:
        orig = flat[idx]
        flat[idx] = orig + step
        f_plus = loss_fn()
        flat[idx] = orig - step
        f_minus = loss_fn()
        flat[idx] = orig
        grads.append((idx, (f_plus - f_minus) / (2.0 * step)))
    return grads


def gradient_error(forward_fn, tensors, coords_per_tensor=None, step: float = 1e-4,
                   rng: np.random.Generator | None = None) -> float:
    """Worst relative mismatch between recorded and finite-difference gradients.

    ``forward_fn`` rebuilds the graph from the live ``tensors`` and returns
    the scalar loss node.  The analytic gradient comes from one backward
    pass; finite differences re-evaluate the forward only.  Relative error
    uses max(1, |analytic|, |numeric|) in the denominator so near-zero
    gradients are compared absolutely.
    """
    for t in tensors:
        t.zero_grad()
    backward(forward_fn())
    analytic = [t.grad.copy() for t in tensors]

    def value():
        return float(forward_fn().item())

    worst = 0.0
    for t, a in zip(tensors, analytic):
        size = t.data.size
        if coords_per_tensor is None or coords_per_tensor >= size:
            coords = range(size)
        else:
            coords = (rng or np.random.default_rng()).choice(
                size, size=coords_per_tensor, replace=False)
        for idx, num in numeric_gradient(value, t.data, coords, step):
            ana = a.reshape(-1)[idx]
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
    return worst
