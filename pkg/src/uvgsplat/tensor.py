"""Small reverse-mode autodiff engine on dense numpy arrays.

Design constraints:
  * float64 by default (gradient checks need the headroom); float32 is an
    opt-in speed mode via set_default_dtype.
  * no broadcasting beyond scalar <-> tensor; shapes must match exactly,
    reshape explicitly.
  * the graph is write-once: calling backward() a second time on the same
    root raises TapeConsumedError.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; message names the axis."""


class TapeConsumedError(RuntimeError):
    """Raised when backward() is invoked twice on the same root."""


_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype):
    """Switch the engine between float64 (default) and float32."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


def _as_array(data):
    return np.ascontiguousarray(np.asarray(data, dtype=_DEFAULT_DTYPE))


class Tensor:
    """A dense array plus an optional grad buffer and recorded parents."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def from_op(data, parents, backward):
        """Record a primitive op node.

        `backward` receives the output gradient (ndarray) and must call
        `p.accumulate(g)` on each parent that requires grad.
        """
        out = Tensor(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- bookkeeping -----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- backward --------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {self.shape}")
        if self._consumed:
            raise TapeConsumedError("backward already ran on this root; rebuild the graph")
        self._consumed = True

        # Topological order; every node's parents precede it.
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -other) if isinstance(other, Tensor) else add(self, -float(other))

    def __rsub__(self, other):
        return add(-self, float(other))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def reshape(self, *shape):
        return reshape(self, shape)


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        for ax, (m, n) in enumerate(zip(a.data.shape, b.data.shape)):
            if m != n:
                raise ShapeError(f"{op}: axis {ax} differs ({m} vs {n})")
        raise ShapeError(f"{op}: rank mismatch {a.data.shape} vs {b.data.shape}")


def constant(data):
    return Tensor(data)


def parameter(data):
    return Tensor(data, requires_grad=True)


# -- elementwise primitives ------------------------------------------------


def add(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        data = a.data + c

        def backward(g):
            a.accumulate(g)

        return Tensor.from_op(data, (a,), backward)
    _check_same_shape(a, b, "add")
    data = a.data + b.data

    def backward(g):
        a.accumulate(g)
        b.accumulate(g)

    return Tensor.from_op(data, (a, b), backward)


def scale(a, c):
    c = float(c)
    data = a.data * c

    def backward(g):
        a.accumulate(g * c)

    return Tensor.from_op(data, (a,), backward)


def mul(a, b):
    if not isinstance(b, Tensor):
        return scale(a, b)
    if b.data.size == 1 and a.data.size != 1:
        return _mul_scalar_tensor(a, b)
    if a.data.size == 1 and b.data.size != 1:
        return _mul_scalar_tensor(b, a)
    _check_same_shape(a, b, "mul")
    data = a.data * b.data

    def backward(g):
        a.accumulate(g * b.data)
        b.accumulate(g * a.data)

    return Tensor.from_op(data, (a, b), backward)


def _mul_scalar_tensor(a, s):
    data = a.data * s.data.reshape(-1)[0]

    def backward(g):
        a.accumulate(g * s.data.reshape(-1)[0])
        s.accumulate(np.sum(g * a.data).reshape(s.data.shape))

    return Tensor.from_op(data, (a, s), backward)


def div(a, b):
    _check_same_shape(a, b, "div")
    data = a.data / b.data

    def backward(g):
        a.accumulate(g / b.data)
        b.accumulate(-g * a.data / (b.data * b.data))

    return Tensor.from_op(data, (a, b), backward)


def exp(a):
    data = np.exp(a.data)

    def backward(g):
        a.accumulate(g * data)

    return Tensor.from_op(data, (a,), backward)


def log(a):
    data = np.log(a.data)

    def backward(g):
        a.accumulate(g / a.data)

    return Tensor.from_op(data, (a,), backward)


def sqrt(a):
    data = np.sqrt(a.data)

    def backward(g):
        a.accumulate(g * (0.5 / data))

    return Tensor.from_op(data, (a,), backward)


def square(a):
    data = a.data * a.data

    def backward(g):
        a.accumulate(g * (2.0 * a.data))

    return Tensor.from_op(data, (a,), backward)


def absval(a):
    data = np.abs(a.data)

    def backward(g):
        a.accumulate(g * np.sign(a.data))

    return Tensor.from_op(data, (a,), backward)


def sigmoid(a):
    # evaluated on the non-positive side only, so exp never overflows
    z = np.exp(-np.abs(a.data))
    data = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g):
        a.accumulate(g * data * (1.0 - data))

    return Tensor.from_op(data, (a,), backward)


def softplus(a):
    data = np.logaddexp(0.0, a.data)

    def backward(g):
        a.accumulate(g / (1.0 + np.exp(-a.data)))

    return Tensor.from_op(data, (a,), backward)


def leaky_relu(a, slope=0.01):
    factor = np.where(a.data > 0.0, 1.0, slope)
    data = a.data * factor

    def backward(g):
        a.accumulate(g * factor)

    return Tensor.from_op(data, (a,), backward)


# -- structural primitives --------------------------------------------------


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    old = a.data.shape
    data = a.data.reshape(shape)

    def backward(g):
        a.accumulate(g.reshape(old))

    return Tensor.from_op(data, (a,), backward)


def concat(tensors, axis=0):
    datas = [t.data for t in tensors]
    data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t.accumulate(g[tuple(sl)])

    return Tensor.from_op(data, tuple(tensors), backward)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis."""
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = a.data[sl].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        a.accumulate(full)

    return Tensor.from_op(data, (a,), backward)


def permute(a, axes):
    axes = tuple(int(x) for x in axes)
    inv = np.argsort(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        a.accumulate(g.transpose(inv))

    return Tensor.from_op(data, (a,), backward)


def take_rows(a, index):
    """Gather rows of a 2-D tensor by a fixed index array."""
    index = np.asarray(index, dtype=np.int64)
    data = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a.accumulate(full)

    return Tensor.from_op(data, (a,), backward)


def reduce_sum(a):
    data = np.array(np.sum(a.data))

    def backward(g):
        a.accumulate(np.full_like(a.data, np.asarray(g).reshape(())[()]))

    return Tensor.from_op(data, (a,), backward)


def reduce_mean(a):
    n = a.data.size
    data = np.array(np.sum(a.data) / n)

    def backward(g):
        a.accumulate(np.full_like(a.data, np.asarray(g).reshape(())[()] / n))

    return Tensor.from_op(data, (a,), backward)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul: operands must be 2-D")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: inner axis differs ({a.data.shape[1]} vs {b.data.shape[0]})"
        )
    data = a.data @ b.data

    def backward(g):
        a.accumulate(g @ b.data.T)
        b.accumulate(a.data.T @ g)

    return Tensor.from_op(data, (a, b), backward)


def l2norm(a):
    """Scalar Euclidean norm of all elements."""
    n = np.sqrt(np.sum(a.data * a.data))
    data = np.array(n)

    def backward(g):
        denom = max(n, 1e-300)
        a.accumulate(np.asarray(g).reshape(())[()] * a.data / denom)

    return Tensor.from_op(data, (a,), backward)


def normalize_channels(a, eps=1e-8):
    """Normalize axis 0 to unit length per remaining-index fiber.

    For a [C, ...] tensor, each fiber a[:, i, j, ...] is scaled to unit
    Euclidean norm. Raises on fibers whose norm is below eps (degenerate).
    """
    norms = np.sqrt(np.sum(a.data * a.data, axis=0, keepdims=True))
    if np.any(norms < eps):
        idx = np.unravel_index(int(np.argmin(norms)), norms.shape)
        raise ValueError(f"normalize_channels: fiber norm < {eps} at index {idx[1:]}")
    unit = a.data / norms

    def backward(g):
        dot = np.sum(g * unit, axis=0, keepdims=True)
        a.accumulate((g - unit * dot) / norms)

    return Tensor.from_op(unit, (a,), backward)


def instance_norm(a, eps=1e-5):
    """Standardize each channel of a [C, H, W] tensor over its spatial extent.

    Each channel is shifted to zero mean and scaled to unit variance, which
    keeps activation magnitudes bounded regardless of how the upstream
    weights drift during optimization.
    """
    if a.data.ndim != 3:
        raise ShapeError(f"instance_norm: expected [C, H, W], got {a.data.shape}")
    mean = a.data.mean(axis=(1, 2), keepdims=True)
    var = a.data.var(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mean) * inv

    def backward(g):
        gm = g.mean(axis=(1, 2), keepdims=True)
        gy = (g * y).mean(axis=(1, 2), keepdims=True)
        a.accumulate(inv * (g - gm - y * gy))

    return Tensor.from_op(y, (a,), backward)


# -- convolution ------------------------------------------------------------

_COL_INDEX_CACHE = {}


def _im2col_indices(c_in, h, w, k, stride, padding):
    key = (c_in, h, w, k, stride, padding)
    hit = _COL_INDEX_CACHE.get(key)
    if hit is not None:
        return hit
    hp, wp = h + 2 * padding, w + 2 * padding
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    # index into the padded, flattened [c_in, hp, wp] array
    c = np.repeat(np.arange(c_in), k * k).reshape(-1, 1)
    ky, kx = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    ky = np.tile(ky.reshape(-1), c_in).reshape(-1, 1)
    kx = np.tile(kx.reshape(-1), c_in).reshape(-1, 1)
    oy, ox = np.meshgrid(np.arange(h_out), np.arange(w_out), indexing="ij")
    oy = (oy.reshape(-1) * stride).reshape(1, -1)
    ox = (ox.reshape(-1) * stride).reshape(1, -1)
    idx = c * (hp * wp) + (ky + oy) * wp + (kx + ox)
    out = (idx.astype(np.int64), h_out, w_out, hp, wp)
    _COL_INDEX_CACHE[key] = out
    return out


def conv2d(x, kernel, stride=1, padding=0, bias=None):
    """2-D convolution (cross-correlation), NCHW without the batch axis.

    x: [C_in, H, W]; kernel: [C_out, C_in, k, k]; optional bias [C_out].
    Output spatial size is (H + 2*padding - k)//stride + 1.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d: input must be [C,H,W], got rank {x.data.ndim}")
    if kernel.data.ndim != 4:
        raise ShapeError("conv2d: kernel must be [C_out,C_in,k,k]")
    c_in, h, w = x.data.shape
    c_out, kc_in, k, k2 = kernel.data.shape
    if k != k2:
        raise ShapeError(f"conv2d: kernel not square ({k}x{k2})")
    if kc_in != c_in:
        raise ShapeError(f"conv2d: channel axis differs (input {c_in}, kernel {kc_in})")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(
            f"conv2d: kernel {k}x{k} larger than padded input {h}x{w}")

    idx, h_out, w_out, hp, wp = _im2col_indices(c_in, h, w, k, stride, padding)
    if padding:
        xp = np.zeros((c_in, hp, wp), dtype=x.data.dtype)
        xp[:, padding:-padding, padding:-padding] = x.data
    else:
        xp = x.data
    cols = xp.reshape(-1)[idx]  # [c_in*k*k, h_out*w_out]
    kmat = kernel.data.reshape(c_out, -1)
    data = (kmat @ cols).reshape(c_out, h_out, w_out)
    if bias is not None:
        if bias.data.shape != (c_out,):
            raise ShapeError(f"conv2d: bias must be [{c_out}]")
        data = data + bias.data.reshape(-1, 1, 1)

    def backward(g):
        gf = g.reshape(c_out, -1)
        kernel.accumulate((gf @ cols.T).reshape(kernel.data.shape))
        if bias is not None:
            bias.accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad:
            dcols = kmat.T @ gf
            flat = np.bincount(
                idx.reshape(-1), weights=dcols.reshape(-1), minlength=c_in * hp * wp
            ).astype(x.data.dtype)
            dxp = flat.reshape(c_in, hp, wp)
            if padding:
                dxp = dxp[:, padding:-padding, padding:-padding]
            x.accumulate(dxp)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor.from_op(data, parents, backward)


def upsample_nearest(x, factor=2):
    """Nearest-neighbour upsampling of a [C,H,W] tensor."""
    if x.data.ndim != 3:
        raise ShapeError("upsample_nearest: input must be [C,H,W]")
    data = x.data.repeat(factor, axis=1).repeat(factor, axis=2)
    c, h, w = x.data.shape

    def backward(g):
        x.accumulate(
            g.reshape(c, h, factor, w, factor).sum(axis=(2, 4))
        )

    return Tensor.from_op(data, (x,), backward)


# -- verification -----------------------------------------------------------


def grad_check(fn, point, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    fn maps a Tensor to a scalar Tensor. Error per coordinate is
    |analytic - fd| / max(1e-8, |fd|); the max over coordinates is returned.
    """
    p = Tensor(point.data.copy() if isinstance(point, Tensor) else point,
               requires_grad=True)
    out = fn(p)
    if out.data.size != 1:
        raise ShapeError("grad_check: function must return a scalar")
    out.backward()
    analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).copy()
    if not np.all(np.isfinite(analytic)):
        bad = np.unravel_index(int(np.argmin(np.isfinite(analytic))), analytic.shape)
        raise FloatingPointError(f"grad_check: non-finite analytic gradient at {bad}")

    flat = p.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = fn(Tensor(p.data)).item()
        flat[i] = orig - eps
        f_minus = fn(Tensor(p.data)).item()
        flat[i] = orig
        fd = (f_plus - f_minus) / (2.0 * eps)
        if not np.isfinite(fd):
            raise FloatingPointError(f"grad_check: non-finite difference at coordinate {i}")
        err = abs(analytic.reshape(-1)[i] - fd) / max(1e-8, abs(fd))
        worst = max(worst, err)
    return worst
