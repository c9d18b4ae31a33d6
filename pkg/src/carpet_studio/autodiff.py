"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the transfer methods actually differentiate through are
implemented: elementwise arithmetic, matmul, reductions, 2-D convolution,
average pooling, nearest upsampling, bilinear resizing, bilinear grid
sampling, and a handful of activations.  Gradients follow the dtype of the
forward data, so float64 graphs can be used for finite-difference checks
while production loops run in float32.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """A node in the computation graph wrapping an ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this node; ``grad`` defaults to ones."""
        if grad is None:
            grad = np.ones_like(self.data)
        order = []
        seen = set()

        def visit(node):
            stack = [(node, False)]
            while stack:
                n, done = stack.pop()
                if done:
                    order.append(n)
                    continue
                if id(n) in seen:
                    continue
                seen.add(id(n))
                stack.append((n, True))
                for p in n._parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))

        visit(self)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        other = as_tensor(other)
        return mul(self, pow_(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return pow_(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def item(self):
        return float(self.data)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after a broadcast forward op."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._make(out_data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._make(out_data, (a, b), backward)


def pow_(a, p):
    a = as_tensor(a)
    out_data = a.data ** p

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1))

    return Tensor._make(out_data, (a,), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._make(out_data, (a, b), backward)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g, dtype=a.dtype))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return Tensor._make(out_data, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape):
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return Tensor._make(out_data, (a,), backward)


def transpose(a, axes=None):
    a = as_tensor(a)
    out_data = a.data.transpose(axes)

    def backward(g):
        if a.requires_grad:
            if axes is None:
                a._accumulate(g.transpose())
            else:
                a._accumulate(g.transpose(np.argsort(axes)))

    return Tensor._make(out_data, (a,), backward)


def getitem(a, idx):
    a = as_tensor(a)
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

    return Tensor._make(out_data, (a,), backward)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return Tensor._make(out_data, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return Tensor._make(out_data, (a,), backward)


def sqrt(a):
    return pow_(a, 0.5)


def clip01(a):
    """Clamp to [0,1]; gradient passes only where the value was in range."""
    a = as_tensor(a)
    out_data = np.clip(a.data, 0.0, 1.0)
    mask = (a.data >= 0.0) & (a.data <= 1.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return Tensor._make(out_data, (a,), backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return Tensor._make(out_data, tuple(tensors), backward)


# -- convolution and spatial ops ---------------------------------------------
#
# Spatial tensors are channels-last (H, W, C): im2col windows then copy as
# nearly contiguous rows and the conv gemm emits the next layer's layout
# directly, which is what keeps the numpy encoder fast.


def _im2col(x, k, stride, pad):
    """x: (H,W,C) -> (H_out*W_out, k*k*C) patch matrix plus output dims."""
    h, w, c = x.shape
    if pad:
        x = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    h_out = (x.shape[0] - k) // stride + 1
    w_out = (x.shape[1] - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(0, 1))
    win = win[::stride, ::stride]  # (H_out, W_out, C, k, k)
    col = win.transpose(0, 1, 3, 4, 2).reshape(h_out * w_out, k * k * c)
    return col, h_out, w_out


def conv_forward(x, w, b=None, stride=1, pad=1):
    """Plain-numpy convolution: x (H,W,C_in), w (k,k,C_in,C_out) -> (H',W',C_out).

    Shift-and-gemm formulation: one gemm per kernel offset over views of the
    padded input, avoiding im2col gather copies.
    """
    k, _, c_in, c_out = w.shape
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
    hp, wp, _ = xp.shape
    h_out = (hp - k) // stride + 1
    w_out = (wp - k) // stride + 1
    x2 = xp.reshape(-1, c_in)
    y = np.zeros((h_out, w_out, c_out), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            t = (x2 @ w[ki, kj]).reshape(hp, wp, c_out)
            y += t[ki:ki + stride * h_out:stride, kj:kj + stride * w_out:stride]
    if b is not None:
        y += b
    return y


def conv2d(x, w, b=None, stride=1, pad=1):
    """2-D convolution on a single image: x (H,W,C_in), w (k,k,C_in,C_out)."""
    x, w = as_tensor(x), as_tensor(w)
    k, _, c_in, c_out = w.shape
    out_data = conv_forward(x.data, w.data, None if b is None else as_tensor(b).data,
                            stride=stride, pad=pad)
    h_out, w_out, _ = out_data.shape
    if b is not None:
        b = as_tensor(b)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g_mat = g.reshape(-1, c_out)
        if b is not None and b.requires_grad:
            b._accumulate(g_mat.sum(axis=0))
        if w.requires_grad:
            col, _, _ = _im2col(x.data, k, stride, pad)
            w._accumulate((col.T @ g_mat).reshape(w.shape))
        if x.requires_grad:
            if stride == 1:
                # input gradient is a full correlation with rotated kernels
                w_rot = np.ascontiguousarray(w.data[::-1, ::-1].transpose(0, 1, 3, 2))
                x._accumulate(conv_forward(g, w_rot, stride=1, pad=k - 1 - pad))
                return
            w_mat = w.data.reshape(-1, c_out)
            dcol = g_mat @ w_mat.T  # (H_out*W_out, k*k*C_in)
            dcol = dcol.reshape(h_out, w_out, k, k, c_in)
            h, wd, c = x.shape
            dxp = np.zeros((h + 2 * pad, wd + 2 * pad, c), dtype=x.dtype)
            for ki in range(k):
                for kj in range(k):
                    dxp[ki:ki + stride * h_out:stride, kj:kj + stride * w_out:stride] += (
                        dcol[:, :, ki, kj]
                    )
            if pad:
                dxp = dxp[pad:-pad, pad:-pad]
            x._accumulate(dxp)

    return Tensor._make(out_data, parents, backward)


def avg_pool2d(x, k=2):
    """Non-overlapping k x k average pooling; trailing rows/cols dropped."""
    x = as_tensor(x)
    h, w, c = x.shape
    ho, wo = h // k, w // k
    trimmed = x.data[:ho * k, :wo * k]
    out_data = trimmed.reshape(ho, k, wo, k, c).mean(axis=(1, 3))

    def backward(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            dx[:ho * k, :wo * k] = np.repeat(np.repeat(g, k, axis=0), k, axis=1) / (k * k)
            x._accumulate(dx)

    return Tensor._make(out_data, (x,), backward)


def upsample_nearest(x, k=2):
    x = as_tensor(x)
    out_data = np.repeat(np.repeat(x.data, k, axis=0), k, axis=1)

    def backward(g):
        if x.requires_grad:
            h, w, c = x.shape
            x._accumulate(g.reshape(h, k, w, k, c).sum(axis=(1, 3)))

    return Tensor._make(out_data, (x,), backward)


def resample_matrix(n_src, n_dst, dtype=np.float64):
    """Row-stochastic bilinear resampling matrix (n_dst x n_src), half-pixel centers."""
    m = np.zeros((n_dst, n_src), dtype=dtype)
    if n_src == 1:
        m[:, 0] = 1.0
        return m
    scale = n_src / n_dst
    src = (np.arange(n_dst, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_src - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = src - lo
    m[np.arange(n_dst), lo] += 1.0 - frac
    m[np.arange(n_dst), hi] += frac
    return m


def resize_bilinear(x, h_out, w_out):
    """Bilinear resize over the first two axes of an (H,W,C) tensor."""
    x = as_tensor(x)
    h, w, c = x.shape
    if (h, w) == (h_out, w_out):
        return x * 1.0
    rh = resample_matrix(h, h_out, dtype=x.dtype)
    rw = resample_matrix(w, w_out, dtype=x.dtype)

    def fwd(a):
        t = np.tensordot(rh, a, axes=(1, 0))  # (h_out, W, C)
        return np.tensordot(rw, t, axes=(1, 1)).transpose(1, 0, 2)

    out_data = fwd(x.data)

    def backward(g):
        if x.requires_grad:
            t = np.tensordot(rh.T, g, axes=(1, 0))  # (h, w_out, C)
            x._accumulate(np.tensordot(rw.T, t, axes=(1, 1)).transpose(1, 0, 2))

    return Tensor._make(out_data, (x,), backward)


def grid_sample_bilinear(x, ys, xs):
    """Sample x (H,W,C) at fractional coordinates (ys, xs), clamped to edges.

    ys/xs are constant coordinate arrays of identical shape; the output has
    shape ys.shape + (C,).  Differentiable with respect to x only.
    """
    x = as_tensor(x)
    h, w, c = x.shape
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1.0)
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(x.dtype)[..., None]
    fx = (xs - x0).astype(x.dtype)[..., None]
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out_data = (
        x.data[y0, x0] * w00
        + x.data[y0, x1] * w01
        + x.data[y1, x0] * w10
        + x.data[y1, x1] * w11
    )

    def backward(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        np.add.at(dx, (y0, x0), g * w00)
        np.add.at(dx, (y0, x1), g * w01)
        np.add.at(dx, (y1, x0), g * w10)
        np.add.at(dx, (y1, x1), g * w11)
        x._accumulate(dx)

    return Tensor._make(out_data, (x,), backward)
