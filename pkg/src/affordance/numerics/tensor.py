"""Reverse-mode differentiation on a single-use tape.

Every op takes :class:`Tensor` (or plain arrays, treated as constants),
computes its float64 output with numpy, and, when a tape is active on any
input, records a closure that pushes the output gradient to its parents.

Broadcasting is not supported except for adding a bias row over the batch
axis (:func:`linear`, :func:`add_bias`).
"""
import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tape:
    """Forward-ordered record of ops; :meth:`backward` may run once."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def record(self, out, parents, backward):
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self.nodes.append((out, parents, backward))

    def backward(self, output, grad=None):
        """Propagate ``grad`` (default ones) from ``output`` to every leaf.

        Leaf gradients accumulate into ``Tensor.grad``; parameter tensors
        created by :class:`~affordance.numerics.params.ParameterSet` write
        straight into the set's flat gradient buffer.
        """
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        self.consumed = True
        if grad is None:
            grad = np.ones_like(output.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != output.data.shape:
            raise ShapeError(
                f"output gradient shape {grad.shape} != output shape {output.data.shape}"
            )
        output._accumulate(grad)
        for out, parents, fn in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for parent, g in zip(parents, grads):
                if g is not None and parent.requires_grad:
                    parent._accumulate(g)
            if not out.is_leaf:
                out.grad = None
        self.nodes = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "tape", "name")

    def __init__(self, data, requires_grad=False, tape=None, name=None):
        data = np.asarray(data, dtype=np.float64)
        if not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.tape = tape
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite output from {op}")
    tape = None
    for p in parents:
        if p.requires_grad and p.tape is not None:
            tape = p.tape
            break
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.is_leaf = tape is None
    out.requires_grad = tape is not None
    out.tape = tape
    out.name = op
    if tape is not None:
        tape.record(out, parents, backward)
    return out


def _check_2d(x, op):
    if x.data.ndim != 2:
        raise ShapeError(f"{op} expects a 2-D tensor, got shape {x.shape}")


# --------------------------------------------------------------------------
# dense ops

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_2d(a, "matmul")
    _check_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), backward, "matmul")


def add_bias(x, b):
    """(n, d) + (d,) with the bias broadcast over rows."""
    x, b = as_tensor(x), as_tensor(b)
    _check_2d(x, "add_bias")
    if b.data.shape != (x.shape[1],):
        raise ShapeError(f"bias shape {b.shape} does not match width {x.shape[1]}")

    def backward(g):
        return g, g.sum(axis=0)

    return _result(x.data + b.data, (x, b), backward, "add_bias")


def linear(x, w, b):
    """Affine layer ``x @ w + b`` with ``w`` stored as (in, out)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _check_2d(x, "linear")
    if w.data.ndim != 2 or w.shape[0] != x.shape[1]:
        raise ShapeError(f"linear weight {w.shape} incompatible with input {x.shape}")
    if b.data.shape != (w.shape[1],):
        raise ShapeError(f"linear bias {b.shape} incompatible with weight {w.shape}")
    xd, wd = x.data, w.data

    def backward(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _result(xd @ wd + b.data, (x, w, b), backward, "linear")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes differ: {a.shape} vs {b.shape}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x, c):
    """Multiply by a python/numpy scalar constant."""
    x = as_tensor(x)
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def affine_const(x, mult, offset):
    """``x * mult + offset`` with constant arrays shaped like a row of ``x``."""
    x = as_tensor(x)
    mult = np.asarray(mult, dtype=np.float64)
    offset = np.asarray(offset, dtype=np.float64)
    if mult.shape != x.shape[-1:] or offset.shape != x.shape[-1:]:
        raise ShapeError(f"affine_const constants must have shape {x.shape[-1:]}")
    return _result(x.data * mult + offset, (x,), lambda g: (g * mult,), "affine_const")


def add_const(x, c):
    x = as_tensor(x)
    return _result(x.data + c, (x,), lambda g: (g,), "add_const")


def weighted_sum(tensors, weights):
    """Sum of ``w_i * x_i`` over same-shaped tensors, accumulated in order."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("weighted_sum of nothing")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"weighted_sum shapes differ: {shape} vs {t.shape}")
    weights = [float(w) for w in weights]
    out = weights[0] * tensors[0].data
    for w, t in zip(weights[1:], tensors[1:]):
        out = out + w * t.data

    def backward(g):
        return tuple(w * g for w in weights)

    return _result(out, tuple(tensors), backward, "weighted_sum")


# --------------------------------------------------------------------------
# elementwise nonlinearities

def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def softplus(x):
    """log(1 + exp(x)), computed without overflow; strictly positive."""
    x = as_tensor(x)
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * xd))
    return _result(out, (x,), lambda g: (g * sig,), "softplus")


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def square(x):
    x = as_tensor(x)
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


# --------------------------------------------------------------------------
# reductions and shape ops

def sum_all(x):
    x = as_tensor(x)
    shape = x.shape
    return _result(np.array(x.data.sum()), (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),), "sum_all")


def mean_rows(x):
    """(n, d) -> (d,) mean over the first axis."""
    x = as_tensor(x)
    _check_2d(x, "mean_rows")
    n = x.shape[0]

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _result(x.data.mean(axis=0), (x,), backward, "mean_rows")


def mean_scalars(xs):
    """Mean of 0-d tensors."""
    xs = [as_tensor(x) for x in xs]
    for x in xs:
        if x.data.shape != ():
            raise ShapeError("mean_scalars expects 0-d tensors")
    n = len(xs)
    total = 0.0
    for x in xs:
        total = total + x.data
    return _result(np.array(total / n), tuple(xs),
                   lambda g: tuple(g / n for _ in xs), "mean_scalars")


def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _result(out, (x,), lambda g: (g.reshape(old),), "reshape")


def repeat_rows(x, n):
    """(d,) -> (n, d) by stacking ``n`` copies."""
    x = as_tensor(x)
    if x.data.ndim != 1:
        raise ShapeError(f"repeat_rows expects a vector, got {x.shape}")
    out = np.tile(x.data, (n, 1))
    return _result(out, (x,), lambda g: (g.sum(axis=0),), "repeat_rows")


def concat_cols(parts):
    """Concatenate 2-D tensors with equal row counts along axis 1."""
    parts = [as_tensor(p) for p in parts]
    for p in parts:
        _check_2d(p, "concat_cols")
    rows = parts[0].shape[0]
    if any(p.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols row counts differ")
    widths = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=1),
                   tuple(parts), backward, "concat_cols")


def take_cols(x, start, stop):
    x = as_tensor(x)
    _check_2d(x, "take_cols")
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"column range [{start},{stop}) outside width {x.shape[1]}")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _result(x.data[:, start:stop].copy(), (x,), backward, "take_cols")


def broadcast_scalar(x, shape):
    """0-d or (1,) tensor -> constant-filled tensor of ``shape``."""
    x = as_tensor(x)
    if x.data.size != 1:
        raise ShapeError(f"broadcast_scalar expects a single value, got {x.shape}")
    old = x.shape
    out = np.full(shape, x.data.reshape(()))
    return _result(out, (x,), lambda g: (np.array(g.sum()).reshape(old),),
                   "broadcast_scalar")


# --------------------------------------------------------------------------
# convolution

def conv2d(x, w, b, stride=1, pad=0):
    """Cross-correlation of (N, Cin, H, W) with kernels (Cout, Cin, k, k)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"invalid stride {stride} or padding {pad}")
    n, cin, h, wd = x.shape
    cout, cin_w, k, k2 = w.shape
    if cin_w != cin or k != k2:
        raise ShapeError(f"conv2d kernel {w.shape} incompatible with input {x.shape}")
    if b.data.shape != (cout,):
        raise ShapeError(f"conv2d bias {b.shape} must be ({cout},)")
    if k > h + 2 * pad or k > wd + 2 * pad:
        raise ShapeError(f"kernel {k} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    ho = kernels.conv_out_size(h, k, stride, pad)
    wo = kernels.conv_out_size(wd, k, stride, pad)
    cols = kernels.im2col(x.data, k, stride, pad)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat, cols) + b.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)
    xshape = x.shape

    def backward(g):
        gm = g.reshape(n, cout, ho * wo)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gb = gm.sum(axis=(0, 2))
        gcols = np.matmul(wmat.T, gm)
        gx = kernels.col2im(gcols, xshape, k, stride, pad)
        return gx, gw, gb

    return _result(out, (x, w, b), backward, "conv2d")


def deconv2d(x, w, b, stride=1, pad=0):
    """Transposed convolution: (N, Cin, H, W) with kernels (Cin, Cout, k, k).

    Output extent is ``(H - 1) * stride - 2 * pad + k``; this is the exact
    adjoint of :func:`conv2d` with the same geometry.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"deconv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"invalid stride {stride} or padding {pad}")
    n, cin, h, wd = x.shape
    cin_w, cout, k, k2 = w.shape
    if cin_w != cin or k != k2:
        raise ShapeError(f"deconv2d kernel {w.shape} incompatible with input {x.shape}")
    if b.data.shape != (cout,):
        raise ShapeError(f"deconv2d bias {b.shape} must be ({cout},)")
    ho = (h - 1) * stride - 2 * pad + k
    wo = (wd - 1) * stride - 2 * pad + k
    if ho < 1 or wo < 1:
        raise ShapeError("deconv2d output would be empty")
    wmat = w.data.reshape(cin, cout * k * k)
    xm = x.data.reshape(n, cin, h * wd)
    cols = np.matmul(wmat.T, xm)
    out_shape = (n, cout, ho, wo)
    out = kernels.col2im(cols, out_shape, k, stride, pad) + b.data[None, :, None, None]

    def backward(g):
        gcols = kernels.im2col(g, k, stride, pad)
        gx = np.matmul(wmat, gcols).reshape(x.shape)
        gw = np.matmul(xm, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _result(out, (x, w, b), backward, "deconv2d")


# --------------------------------------------------------------------------
# losses

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def gaussian_nll(mu, sigma, y):
    """Mean Gaussian negative log density of constant targets ``y``."""
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    y = np.asarray(y, dtype=np.float64)
    if mu.shape != sigma.shape or mu.shape != y.shape:
        raise ShapeError(f"nll shapes differ: mu {mu.shape}, sigma {sigma.shape}, y {y.shape}")
    s = sigma.data
    if np.any(s <= 0):
        raise ValueError("sigma must be strictly positive")
    n = y.size
    z = (y - mu.data) / s
    val = np.array(HALF_LOG_2PI + np.mean(np.log(s) + 0.5 * z * z))

    def backward(g):
        g = float(g)
        gmu = -g * z / s / n
        gsig = g * (1.0 - z * z) / s / n
        return gmu, gsig

    return _result(val, (mu, sigma), backward, "gaussian_nll")


def mse(pred, y):
    pred = as_tensor(pred)
    y = np.asarray(y, dtype=np.float64)
    if pred.shape != y.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {y.shape}")
    diff = pred.data - y
    n = y.size
    return _result(np.array(np.mean(diff * diff)), (pred,),
                   lambda g: (2.0 * float(g) * diff / n,), "mse")
