"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

The engine implements exactly the operation set the segmentation network
needs, nothing more.  Conventions, fixed globally:

* feature maps are channel-last ``(H, W, C)`` row-major float64 arrays;
* every forward op validates shapes explicitly and raises ``ValueError``
  on mismatch -- the only broadcasting allowed is scalar*tensor and
  per-channel vector*tensor;
* any NaN/Inf produced by a forward op raises ``NonFiniteError``;
* the tape is built per forward pass and freed after ``backward()``.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "add",
    "sub",
    "elementwise_mul",
    "matmul",
    "transpose2d",
    "reshape",
    "relu",
    "softmax_channels",
    "concat_channels",
    "concat_rows",
    "slice_channels",
    "take_row",
    "tile_spatial",
    "global_mean",
    "gather_pixels",
    "column_sums",
    "reciprocal",
    "sum_all",
    "mean_all",
    "conv2d",
    "bilinear_resize",
    "cross_entropy_2d",
    "sgd_momentum_step",
    "zero_grad",
]


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (evaluation fast path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_finite(data):
    if not np.isfinite(data).all():
        raise NonFiniteError("non-finite value in forward computation")


class Tensor:
    """N-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        _check_finite(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        """Reverse-mode sweep from a scalar output.

        Visits each tape node exactly once in reverse topological order and
        accumulates gradients into every ``requires_grad`` ancestor.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return elementwise_mul(self, other)

    def __rmul__(self, other):
        return elementwise_mul(self, other)

    def __neg__(self):
        return elementwise_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _from_op(data, parents, backward=None):
    _check_finite(data)
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    out.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
    out.grad = None
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _vector_mate(a_shape, b):
    """Classify the second operand: 'same', 'scalar', 'channel', or error."""
    if b.shape == a_shape:
        return "same"
    if b.size == 1:
        return "scalar"
    if b.ndim == 1 and len(a_shape) >= 2 and a_shape[-1] == b.shape[0]:
        return "channel"
    raise ValueError(f"incompatible shapes {a_shape} and {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        y = a.data + float(b)
        return _from_op(y, (a,), lambda g: _accum(a, g))
    kind = _vector_mate(a.data.shape, b.data)
    y = a.data + b.data

    def bwd(g):
        _accum(a, g)
        if kind == "same":
            _accum(b, g)
        elif kind == "scalar":
            _accum(b, g.sum().reshape(b.data.shape))
        else:
            _accum(b, g.reshape(-1, b.data.shape[0]).sum(axis=0))

    return _from_op(y, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, elementwise_mul(b, -1.0))
    return add(a, -float(b))


def elementwise_mul(a: Tensor, b) -> Tensor:
    """Hadamard product; also covers scalar and per-channel vector scaling."""
    if not isinstance(b, Tensor):
        s = float(b)
        return _from_op(a.data * s, (a,), lambda g: _accum(a, g * s))
    kind = _vector_mate(a.data.shape, b.data)
    y = a.data * b.data

    def bwd(g):
        _accum(a, g * b.data)
        if kind == "same":
            _accum(b, g * a.data)
        elif kind == "scalar":
            _accum(b, (g * a.data).sum().reshape(b.data.shape))
        else:
            _accum(b, (g * a.data).reshape(-1, b.data.shape[0]).sum(axis=0))

    return _from_op(y, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shapes {a.data.shape} @ {b.data.shape}")
    y = a.data @ b.data

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _from_op(y, (a, b), bwd)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError("transpose2d expects a 2-D tensor")
    return _from_op(a.data.T, (a,), lambda g: _accum(a, g.T))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ValueError(f"cannot reshape {a.data.shape} to {shape}")
    old = a.data.shape
    return _from_op(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(old)))


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)
    mask = a.data > 0

    return _from_op(y, (a,), lambda g: _accum(a, g * mask))


def softmax_channels(a: Tensor) -> Tensor:
    """Softmax along the last axis (channels of an (H, W, C) map).

    Computed with max subtraction; per-position outputs sum to 1.
    """
    if a.data.ndim < 1 or a.data.shape[-1] < 1:
        raise ValueError("softmax_channels needs a non-empty last axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, y * (g - dot))

    return _from_op(y, (a,), bwd)


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate (H, W, C_i) maps along the channel axis."""
    if len(tensors) < 2:
        raise ValueError("concat_channels needs at least two inputs")
    hw = tensors[0].data.shape[:-1]
    for t in tensors:
        if t.data.ndim != tensors[0].data.ndim or t.data.shape[:-1] != hw:
            raise ValueError("concat_channels spatial shape mismatch")
    y = np.concatenate([t.data for t in tensors], axis=-1)
    widths = [t.data.shape[-1] for t in tensors]

    def bwd(g):
        off = 0
        for t, w in zip(tensors, widths):
            _accum(t, g[..., off : off + w])
            off += w

    return _from_op(y, tensors, bwd)


def concat_rows(*tensors: Tensor) -> Tensor:
    """Stack 2-D (N_i, C) sample blocks along the first axis."""
    if len(tensors) == 1:
        t = tensors[0]
        return _from_op(t.data, (t,), lambda g: _accum(t, g))
    c = tensors[0].data.shape[-1]
    for t in tensors:
        if t.data.ndim != 2 or t.data.shape[1] != c:
            raise ValueError("concat_rows column mismatch")
    y = np.concatenate([t.data for t in tensors], axis=0)
    heights = [t.data.shape[0] for t in tensors]

    def bwd(g):
        off = 0
        for t, n in zip(tensors, heights):
            _accum(t, g[off : off + n])
            off += n

    return _from_op(y, tensors, bwd)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    c = a.data.shape[-1]
    if not (0 <= start < stop <= c):
        raise ValueError(f"channel slice [{start}:{stop}] out of range for C={c}")
    y = a.data[..., start:stop]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        _accum(a, full)

    return _from_op(y, (a,), bwd)


def take_row(a: Tensor, i: int) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError("take_row expects a 2-D tensor")
    i = int(i)
    y = a.data[i]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[i] = g
        _accum(a, full)

    return _from_op(y, (a,), bwd)


def tile_spatial(v: Tensor, height: int, width: int) -> Tensor:
    """Broadcast a C-vector to a constant (H, W, C) map."""
    if v.data.ndim != 1:
        raise ValueError("tile_spatial expects a 1-D vector")
    if height < 1 or width < 1:
        raise ValueError("non-positive tile size")
    y = np.broadcast_to(v.data, (height, width, v.data.shape[0]))

    return _from_op(y, (v,), lambda g: _accum(v, g.sum(axis=(0, 1))))


def global_mean(a: Tensor) -> Tensor:
    """Spatial mean of an (H, W, C) map, returned as a C-vector."""
    if a.data.ndim != 3:
        raise ValueError("global_mean expects an (H, W, C) tensor")
    h, w, _ = a.data.shape
    y = a.data.mean(axis=(0, 1))

    def bwd(g):
        _accum(a, np.broadcast_to(g / (h * w), a.data.shape))

    return _from_op(y, (a,), bwd)


def gather_pixels(a: Tensor, index) -> Tensor:
    """Select feature vectors at flat spatial positions: (H, W, C) -> (N, C)."""
    if a.data.ndim != 3:
        raise ValueError("gather_pixels expects an (H, W, C) tensor")
    h, w, c = a.data.shape
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ValueError("gather_pixels needs a non-empty 1-D index")
    if idx.min() < 0 or idx.max() >= h * w:
        raise ValueError("gather_pixels index out of range")
    flat = a.data.reshape(h * w, c)
    y = flat[idx]

    def bwd(g):
        acc = np.zeros((h * w, c))
        np.add.at(acc, idx, g)
        _accum(a, acc.reshape(h, w, c))

    return _from_op(y, (a,), bwd)


def column_sums(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError("column_sums expects a 2-D tensor")
    n = a.data.shape[0]
    y = a.data.sum(axis=0)

    def bwd(g):
        _accum(a, np.broadcast_to(g, (n, g.shape[0])))

    return _from_op(y, (a,), bwd)


def reciprocal(a: Tensor) -> Tensor:
    y = 1.0 / a.data

    def bwd(g):
        _accum(a, -g * y * y)

    return _from_op(y, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    y = np.asarray(a.data.sum())

    def bwd(g):
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _from_op(y, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    y = np.asarray(a.data.mean())

    def bwd(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape))

    return _from_op(y, (a,), bwd)


# ---------------------------------------------------------------------------
# Convolution.  im2col gather indices and col2im scatter indices depend only
# on geometry, so both are cached across calls.
# ---------------------------------------------------------------------------

_gather_cache: dict = {}
_scatter_cache: dict = {}


def _conv_gather_index(hp, wp, kh, kw, stride, dilation):
    key = (hp, wp, kh, kw, stride, dilation)
    hit = _gather_cache.get(key)
    if hit is None:
        out_h = (hp - dilation * (kh - 1) - 1) // stride + 1
        out_w = (wp - dilation * (kw - 1) - 1) // stride + 1
        if out_h < 1 or out_w < 1:
            raise ValueError("convolution output would be empty")
        ys = (stride * np.arange(out_h))[:, None, None, None]
        xs = (stride * np.arange(out_w))[None, :, None, None]
        us = (dilation * np.arange(kh))[None, None, :, None]
        vs = (dilation * np.arange(kw))[None, None, None, :]
        idx = ((ys + us) * wp + (xs + vs)).reshape(out_h * out_w, kh * kw)
        hit = (np.ascontiguousarray(idx), out_h, out_w)
        _gather_cache[key] = hit
    return hit


def _conv_scatter_index(hp, wp, kh, kw, stride, dilation, cin):
    key = (hp, wp, kh, kw, stride, dilation, cin)
    hit = _scatter_cache.get(key)
    if hit is None:
        idx, _, _ = _conv_gather_index(hp, wp, kh, kw, stride, dilation)
        hit = (idx.ravel()[:, None] * cin + np.arange(cin)).ravel()
        _scatter_cache[key] = hit
    return hit


def conv2d(
    x: Tensor,
    kernel: Tensor,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D convolution of an (H, W, Cin) map with a (kh, kw, Cin, Cout) kernel.

    Forward runs as an im2col gather followed by one matmul; the backward
    pass scatters column gradients back with a cached bincount index.
    Output spatial size is ``(H + 2*padding - dilation*(kh-1) - 1)//stride + 1``.
    """
    if x.data.ndim != 3:
        raise ValueError("conv2d input must be (H, W, Cin)")
    if kernel.data.ndim != 4:
        raise ValueError("conv2d kernel must be (kh, kw, Cin, Cout)")
    h, w, cin = x.data.shape
    kh, kw, kcin, cout = kernel.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernel size must be odd")
    if kcin != cin:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel {kcin}")
    if padding < 0 or stride < 1 or dilation < 1:
        raise ValueError("conv2d needs padding >= 0, stride >= 1, dilation >= 1")

    p = padding
    xp = np.pad(x.data, ((p, p), (p, p), (0, 0))) if p else x.data
    hp, wp = h + 2 * p, w + 2 * p
    idx, oh, ow = _conv_gather_index(hp, wp, kh, kw, stride, dilation)
    cols = xp.reshape(hp * wp, cin)[idx].reshape(oh * ow, kh * kw * cin)
    w2 = kernel.data.reshape(kh * kw * cin, cout)
    y = (cols @ w2).reshape(oh, ow, cout)

    def bwd(g):
        g2 = g.reshape(oh * ow, cout)
        if kernel.requires_grad:
            _accum(kernel, (cols.T @ g2).reshape(kernel.data.shape))
        if x.requires_grad:
            gcols = (g2 @ w2.T).ravel()
            flat_idx = _conv_scatter_index(hp, wp, kh, kw, stride, dilation, cin)
            acc = np.bincount(flat_idx, weights=gcols, minlength=hp * wp * cin)
            acc = acc.reshape(hp, wp, cin)
            _accum(x, acc[p : p + h, p : p + w] if p else acc)

    return _from_op(y, (x, kernel), bwd)


# ---------------------------------------------------------------------------
# Bilinear resize (corner-aligned) as separable interpolation matrices.
# ---------------------------------------------------------------------------

_interp_cache: dict = {}


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    key = (n_in, n_out)
    mat = _interp_cache.get(key)
    if mat is None:
        mat = np.zeros((n_out, n_in))
        if n_in == 1 or n_out == 1:
            mat[:, 0] = 1.0
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
            lo = np.minimum(pos.astype(np.int64), n_in - 2)
            frac = pos - lo
            rows = np.arange(n_out)
            mat[rows, lo] = 1.0 - frac
            mat[rows, lo + 1] += frac
        _interp_cache[key] = mat
    return mat


def _separable_apply(ah, aw, x):
    t = np.tensordot(ah, x, axes=(1, 0))          # (oh, W, C)
    return np.tensordot(aw, t, axes=(1, 1)).transpose(1, 0, 2)


def bilinear_resize(a: Tensor, out_h: int, out_w: int) -> Tensor:
    """Corner-aligned bilinear resample of an (H, W, C) map.

    Exact identity when the target size equals the source size.
    """
    if a.data.ndim != 3:
        raise ValueError("bilinear_resize expects an (H, W, C) tensor")
    if out_h < 1 or out_w < 1:
        raise ValueError("non-positive target size for resize")
    h, w, _ = a.data.shape
    ah = _interp_matrix(h, out_h)
    aw = _interp_matrix(w, out_w)
    y = _separable_apply(ah, aw, a.data)

    def bwd(g):
        _accum(a, _separable_apply(ah.T, aw.T, g))

    return _from_op(y, (a,), bwd)


def cross_entropy_2d(logits: Tensor, target) -> Tensor:
    """Mean pixel-wise cross-entropy of (H, W, 2) logits against a binary mask."""
    if logits.data.ndim != 3 or logits.data.shape[-1] != 2:
        raise ValueError("cross_entropy_2d expects (H, W, 2) logits")
    tgt = np.asarray(target)
    if tgt.shape != logits.data.shape[:2]:
        raise ValueError(
            f"target shape {tgt.shape} != logits spatial shape {logits.data.shape[:2]}"
        )
    if not np.isin(tgt, (0, 1)).all():
        raise ValueError("target values must be 0 or 1")
    tgt = tgt.astype(np.int64)

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    lse = np.log(e.sum(axis=-1))
    picked = np.take_along_axis(z, tgt[..., None], axis=-1)[..., 0]
    y = np.asarray((lse - picked).mean())
    npix = tgt.size

    def bwd(g):
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, tgt[..., None], 1.0, axis=-1)
        _accum(logits, (g / npix) * (probs - onehot))

    return _from_op(y, (logits,), bwd)


def sgd_momentum_step(params, velocities, lr: float, momentum: float) -> None:
    """One SGD step with classical momentum: v <- m*v + g, w <- w - lr*v."""
    for p, v in zip(params, velocities):
        v *= momentum
        if p.grad is not None:
            v += p.grad
        p.data -= lr * v


def zero_grad(params) -> None:
    for p in params:
        p.grad = None
