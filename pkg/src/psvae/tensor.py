"""Dense tensors with reverse-mode automatic differentiation.

Values are stored as numpy arrays (float32 by default, float64 available for
tight gradient checking). Every differentiable operation records its parents
and an adjoint closure on the output tensor; ``backward`` walks that record
in reverse topological order. Graph construction and replay are fully
deterministic, so identical seeds and inputs reproduce forward values and
gradients bit for bit within one precision mode.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NumericError

# Floor applied to logarithm and division arguments.
EPS_CLAMP = 1e-12

_ALLOWED_DTYPES = (np.float32, np.float64)


def resolve_dtype(precision):
    """Map a precision tag ('f32' or 'f64') or numpy dtype to a dtype object."""
    if precision in ("f32", "float32"):
        return np.float32
    if precision in ("f64", "float64"):
        return np.float64
    dt = np.dtype(precision)
    if dt.type not in _ALLOWED_DTYPES:
        raise ContractError(f"unsupported precision {precision!r}")
    return dt.type


class Tensor:
    """An n-dimensional real array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        """A view of the same values with no graph attached."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.grad is not None})"

    # -- arithmetic sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)


def parameter(data, dtype=np.float32):
    """A leaf tensor that participates in gradient accumulation."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._prev = tuple(parents)
        out._backward = backward_fn
        out._op = op
    else:
        out._prev = ()
        out._backward = None
        out._op = op
    return out


def _accumulate(t, g):
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad


def _require_finite(arr, op):
    # Fast path: NaN/inf propagate through the sum. A non-finite sum can also
    # come from overflow of finite entries, so confirm before raising.
    if not np.isfinite(np.sum(arr)):
        if not np.isfinite(arr).all():
            raise NumericError(f"{op}: non-finite input")


def _check_same_dtype(a, b, op):
    if a.dtype != b.dtype:
        raise DimensionError(
            f"{op}: mixed precisions {a.dtype} and {b.dtype}; cast explicitly"
        )


# -- elementwise ops ---------------------------------------------------------


def add(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)
    _check_same_dtype(a, b, "add")
    out_data = a.data + b.data

    def _bw():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    out = _node(out_data, (a, b), _bw, "add")
    return out


def sub(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)
    _check_same_dtype(a, b, "sub")
    out_data = a.data - b.data

    def _bw():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    out = _node(out_data, (a, b), _bw, "sub")
    return out


def mul(a, b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)
    _check_same_dtype(a, b, "mul")
    out_data = a.data * b.data

    def _bw():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    out = _node(out_data, (a, b), _bw, "mul")
    return out


def neg(a):
    def _bw():
        if a.requires_grad:
            _accumulate(a, -out.grad)

    out = _node(-a.data, (a,), _bw, "neg")
    return out


def div(a, b):
    """Elementwise division; denominator magnitude floored at EPS_CLAMP."""
    a = a if isinstance(a, Tensor) else _as_tensor(a, b.dtype)
    b = b if isinstance(b, Tensor) else _as_tensor(b, a.dtype)
    _check_same_dtype(a, b, "div")
    denom = np.where(np.abs(b.data) < EPS_CLAMP, np.copysign(EPS_CLAMP, b.data), b.data)
    out_data = a.data / denom

    def _bw():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / denom, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (denom * denom), b.shape))

    out = _node(out_data, (a, b), _bw, "div")
    return out


def power(a, p):
    p = float(p)
    out_data = a.data**p

    def _bw():
        if a.requires_grad:
            _accumulate(a, out.grad * p * a.data ** (p - 1.0))

    out = _node(out_data, (a,), _bw, "pow")
    return out


def exp(a):
    out_data = np.exp(a.data)

    def _bw():
        if a.requires_grad:
            _accumulate(a, out.grad * out_data)

    out = _node(out_data, (a,), _bw, "exp")
    return out


def log(a):
    """Natural log with the argument floored at EPS_CLAMP."""
    safe = np.maximum(a.data, EPS_CLAMP)
    out_data = np.log(safe)

    def _bw():
        if a.requires_grad:
            _accumulate(a, out.grad / safe)

    out = _node(out_data, (a,), _bw, "log")
    return out


def sqrt(a):
    out_data = np.sqrt(np.maximum(a.data, 0.0))

    def _bw():
        if a.requires_grad:
            _accumulate(a, out.grad / np.maximum(2.0 * out_data, EPS_CLAMP))

    out = _node(out_data, (a,), _bw, "sqrt")
    return out


def relu(a):
    _require_finite(a.data, "relu")
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0.0).astype(a.dtype, copy=False)

    def _bw():
        if a.requires_grad:
            _accumulate(a, out.grad * mask)

    out = _node(out_data, (a,), _bw, "relu")
    return out


def sigmoid(a):
    _require_finite(a.data, "sigmoid")
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def _bw():
        if a.requires_grad:
            _accumulate(a, out.grad * out_data * (1.0 - out_data))

    out = _node(out_data, (a,), _bw, "sigmoid")
    return out


def softmax(a, axis=-1):
    """Softmax along ``axis``, computed with max subtraction."""
    _require_finite(a.data, "softmax")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def _bw():
        if a.requires_grad:
            g = out.grad
            inner = np.sum(g * out_data, axis=axis, keepdims=True)
            _accumulate(a, out_data * (g - inner))

    out = _node(out_data, (a,), _bw, "softmax")
    return out


# -- shape ops ----------------------------------------------------------------


def reshape(a, shape):
    out_data = a.data.reshape(shape)

    def _bw():
        if a.requires_grad:
            _accumulate(a, out.grad.reshape(a.shape))

    out = _node(out_data, (a,), _bw, "reshape")
    return out


def tensor_sum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw():
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                ax = axis if isinstance(axis, tuple) else (axis,)
                shape = list(a.shape)
                for i in sorted(x % a.ndim for x in ax):
                    shape[i] = 1
                g = g.reshape(shape)
            _accumulate(a, np.broadcast_to(g, a.shape))

    out = _node(np.asarray(out_data), (a,), _bw, "sum")
    return out


# -- linear algebra -----------------------------------------------------------


def matmul(a, b):
    _check_same_dtype(a, b, "matmul")
    if a.ndim == 1 and b.ndim == 2:
        if a.shape[0] != b.shape[0]:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
        out_data = a.data @ b.data

        def _bw():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, g @ b.data.T)
            if b.requires_grad:
                _accumulate(b, np.outer(a.data, g))

    elif a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
        out_data = a.data @ b.data

        def _bw():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, g @ b.data.T)
            if b.requires_grad:
                _accumulate(b, a.data.T @ g)

    elif a.ndim == 2 and b.ndim == 1:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
        out_data = a.data @ b.data

        def _bw():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, np.outer(g, b.data))
            if b.requires_grad:
                _accumulate(b, a.data.T @ g)

    else:
        raise DimensionError(f"matmul: unsupported ranks {a.ndim} and {b.ndim}")

    out = _node(out_data, (a, b), _bw, "matmul")
    return out


def dense(x, weight, bias):
    """Affine map ``x @ weight + bias`` for a vector or a batch of vectors."""
    if weight.ndim != 2 or bias.ndim != 1:
        raise DimensionError("dense: weight must be rank 2 and bias rank 1")
    n_in = x.shape[-1]
    if n_in != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise DimensionError(
            f"dense: input width {n_in}, weight {weight.shape}, bias {bias.shape}"
        )
    return add(matmul(x, weight), bias)


# -- convolution --------------------------------------------------------------


def _conv_geometry(h, w, kh, kw, stride, padding):
    """Output extents and zero padding for a forward convolution."""
    if padding == "valid":
        if kh > h or kw > w:
            raise DimensionError(
                f"conv2d: kernel {kh}x{kw} exceeds input {h}x{w} with valid padding"
            )
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        return oh, ow, (0, 0, 0, 0)
    if padding == "same":
        oh = -(-h // stride)
        ow = -(-w // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - w, 0)
        # Extra pixel goes on the high side when the total is odd.
        return oh, ow, (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    raise ContractError(f"padding must be 'same' or 'valid', got {padding!r}")


def _im2col(xp, kh, kw, stride):
    """[N,Hp,Wp,C] -> ([N*OH*OW, kh*kw*C], OH, OW)."""
    n, hp, wp, c = xp.shape
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # [N, OH, OW, C, kh, kw]
    oh, ow = windows.shape[1], windows.shape[2]
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols, n, hp, wp, c, kh, kw, stride, oh, ow):
    """Adjoint of _im2col: scatter-add columns back onto the padded canvas."""
    acc = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    blocks = cols.reshape(n, oh, ow, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            acc[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += blocks[
                :, :, :, i, j
            ]
    return acc


def _check_conv_args(x, kernel, stride):
    if kernel.ndim != 4:
        raise DimensionError(f"conv kernel must be rank 4, got {kernel.ndim}")
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv input must be rank 3 or 4, got {x.ndim}")
    if not isinstance(stride, int) or stride < 1:
        raise ContractError(f"stride must be a positive int, got {stride!r}")


def conv2d(x, kernel, stride=1, padding="valid"):
    """Cross-correlation of ``x`` [H,W,Cin] or [N,H,W,Cin] with [kh,kw,Cin,Cout]."""
    _check_same_dtype(x, kernel, "conv2d")
    _check_conv_args(x, kernel, stride)
    kh, kw, cin, cout = kernel.shape
    batched = x.ndim == 4
    if x.shape[-1] != cin:
        raise DimensionError(
            f"conv2d: input has {x.shape[-1]} channels, kernel expects {cin}"
        )
    xb = x.data if batched else x.data[None]
    n, h, w, _ = xb.shape
    oh, ow, (pt, pb, pl, pr) = _conv_geometry(h, w, kh, kw, stride, padding)
    xp = np.pad(xb, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else xb
    cols, oh2, ow2 = _im2col(xp, kh, kw, stride)
    kcol = kernel.data.reshape(kh * kw * cin, cout)
    out_flat = cols @ kcol
    out_data = out_flat.reshape(n, oh2, ow2, cout)
    if not batched:
        out_data = out_data[0]

    def _bw():
        g = out.grad if batched else out.grad[None]
        gflat = g.reshape(n * oh2 * ow2, cout)
        if kernel.requires_grad:
            _accumulate(kernel, (cols.T @ gflat).reshape(kernel.shape))
        if x.requires_grad:
            gcols = gflat @ kcol.T
            gxp = _col2im(gcols, n, xp.shape[1], xp.shape[2], cin, kh, kw, stride, oh2, ow2)
            gx = gxp[:, pt : pt + h, pl : pl + w, :]
            _accumulate(x, gx if batched else gx[0])

    out = _node(out_data, (x, kernel), _bw, "conv2d")
    return out


def conv2d_transpose(y, kernel, stride=1, padding="valid"):
    """Adjoint of :func:`conv2d` in its input, exposed as a forward layer.

    The kernel keeps the forward layout [kh,kw,Cin,Cout]: the input here has
    Cout channels and the result has Cin channels. Output extents are
    (OH-1)*stride+kh for valid padding and OH*stride for same padding, so
    conv2d maps the result back onto the input grid.
    """
    _check_same_dtype(y, kernel, "conv2d_transpose")
    _check_conv_args(y, kernel, stride)
    kh, kw, cin, cout = kernel.shape
    batched = y.ndim == 4
    if y.shape[-1] != cout:
        raise DimensionError(
            f"conv2d_transpose: input has {y.shape[-1]} channels, kernel emits from {cout}"
        )
    yb = y.data if batched else y.data[None]
    n, oh, ow, _ = yb.shape
    if padding == "valid":
        h = (oh - 1) * stride + kh
        w = (ow - 1) * stride + kw
    else:
        h = oh * stride
        w = ow * stride
    oh2, ow2, (pt, pb, pl, pr) = _conv_geometry(h, w, kh, kw, stride, padding)
    if (oh2, ow2) != (oh, ow):  # pragma: no cover - geometry is self-consistent
        raise DimensionError("conv2d_transpose: inconsistent geometry")
    kcol = kernel.data.reshape(kh * kw * cin, cout)
    ycols = yb.reshape(n * oh * ow, cout) @ kcol.T
    acc = _col2im(ycols, n, h + pt + pb, w + pl + pr, cin, kh, kw, stride, oh, ow)
    out_data = acc[:, pt : pt + h, pl : pl + w, :]
    if not batched:
        out_data = out_data[0]

    def _bw():
        g = out.grad if batched else out.grad[None]
        gp = np.pad(g, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else g
        gcols, _, _ = _im2col(gp, kh, kw, stride)
        if y.requires_grad:
            gy = (gcols @ kcol).reshape(n, oh, ow, cout)
            _accumulate(y, gy if batched else gy[0])
        if kernel.requires_grad:
            gk = gcols.T @ yb.reshape(n * oh * ow, cout)
            _accumulate(kernel, gk.reshape(kernel.shape))

    out = _node(out_data, (y, kernel), _bw, "conv2d_transpose")
    return out


def upsample2x_nearest(x):
    """Repeat every pixel into a 2x2 block along the spatial axes."""
    if x.ndim not in (3, 4):
        raise DimensionError(f"upsample2x_nearest: rank 3 or 4 input, got {x.ndim}")
    hax = 1 if x.ndim == 4 else 0
    out_data = np.repeat(np.repeat(x.data, 2, axis=hax), 2, axis=hax + 1)

    def _bw():
        if x.requires_grad:
            g = out.grad
            if x.ndim == 4:
                n, h2, w2, c = g.shape
                g = g.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))
            else:
                h2, w2, c = g.shape
                g = g.reshape(h2 // 2, 2, w2 // 2, 2, c).sum(axis=(1, 3))
            _accumulate(x, g)

    out = _node(out_data, (x,), _bw, "upsample2x")
    return out


# -- reverse pass -------------------------------------------------------------


class GradTape:
    """Ordered record of the primitive ops reachable from a scalar root.

    Construction performs a deterministic depth-first topological sort;
    ``replay`` runs the recorded adjoints in reverse, and ``release`` drops
    the graph links so the memory can be reclaimed.
    """

    def __init__(self, root):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in reversed(node._prev):
                if id(child) not in visited:
                    stack.append((child, False))
        self._order = order

    def __len__(self):
        return len(self._order)

    def replay(self):
        for node in reversed(self._order):
            if node._backward is not None:
                node._backward()

    def release(self):
        for node in self._order:
            node._prev = ()
            node._backward = None


def backward(loss):
    """Populate ``grad`` on every reachable requires_grad tensor.

    The loss must be a scalar. The recorded graph is consumed: a second call
    on the same loss finds no adjoints to replay.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any requires_grad tensor")
    tape = GradTape(loss)
    loss.grad = np.ones_like(loss.data)
    tape.replay()
    tape.release()
