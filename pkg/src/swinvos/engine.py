"""Dense tensor arithmetic with reverse-mode differentiation.

A ``Tensor`` wraps a row-major numpy array (f32 or f64). Differentiable
operations record onto the active ``Tape`` (define-by-run, rebuilt every
forward pass); ``backward`` replays the tape in reverse and accumulates
gradients onto every ``Parameter`` that was touched. Tensors are immutable
values; a tape and its parameters follow a single-writer contract.
"""

import math

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, UsageError

DEFAULT_DTYPE = np.float32
_SUPPORTED_DTYPES = (np.float32, np.float64)

# Enabled by the test suite and by `swinvos gradcheck`; verifies that every
# op keeps finite inputs finite. Off by default to keep big reads cheap.
_FINITE_CHECKS = False


def set_finite_checks(enabled):
    """Toggle per-op NaN/Inf detection. Returns the previous setting."""
    global _FINITE_CHECKS
    previous = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return previous


def _checked(data):
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError("operation produced a non-finite value")
    return data


class Tensor:
    """Immutable dense array value; the universal carrier of the package."""

    __slots__ = ("data", "param", "watched")

    def __init__(self, data, dtype=None):
        if dtype is None and not (isinstance(data, (np.ndarray, np.generic))
                                  and data.dtype in _SUPPORTED_DTYPES):
            dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _SUPPORTED_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.param = None
        self.watched = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    if dtype is None and isinstance(value, (int, float)):
        # keep python scalars exact; binary ops narrow them to the partner dtype
        dtype = np.float64
    return Tensor(value, dtype=dtype)


class Parameter:
    """A trainable tensor with gradient and Adam moment slots.

    ``grad``, ``adam_m`` and ``adam_v`` are allocated lazily so that a
    full-scale model can be instantiated for inspection without tripling
    its memory footprint. All four arrays share one shape.
    """

    __slots__ = ("value", "grad", "adam_m", "adam_v", "step_count", "name")

    def __init__(self, value, name=""):
        self.value = np.asarray(value)
        if self.value.dtype not in _SUPPORTED_DTYPES:
            self.value = self.value.astype(DEFAULT_DTYPE)
        self.grad = None
        self.adam_m = None
        self.adam_v = None
        self.step_count = 0
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def tensor(self):
        """Wrap the current value for use in a forward pass."""
        t = Tensor(self.data_view())
        t.param = self
        tape = _active_tape()
        if tape is not None:
            t.watched = True
            tape._touch(self)
        return t

    def data_view(self):
        return self.value

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def astype(self, dtype):
        """Return a copy of this parameter in another dtype (optimizer state dropped)."""
        return Parameter(self.value.astype(dtype), name=self.name)


class _Node:
    __slots__ = ("out_ref", "inputs", "backward_fn", "grad")

    def __init__(self, out_ref, inputs, backward_fn):
        self.out_ref = out_ref
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.grad = None


_TAPE_STACK = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Append-only record of one forward pass; reversal order is valid for backprop."""

    def __init__(self):
        self.nodes = []
        self.parameters = []
        self._param_ids = set()
        self._node_by_out = {}

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _touch(self, param):
        if id(param) not in self._param_ids:
            self._param_ids.add(id(param))
            self.parameters.append(param)

    def _record(self, out, inputs, backward_fn):
        node = _Node(out, inputs, backward_fn)
        self.nodes.append(node)
        self._node_by_out[id(out)] = node
        return node


def _record_op(out_data, inputs, backward_fn):
    """Wrap ``out_data`` and record the op if any input is watched."""
    out = Tensor(_checked(out_data))
    tape = _active_tape()
    if tape is not None and any(t.watched for t in inputs):
        out.watched = True
        tape._record(out, inputs, backward_fn)
    return out


def backward(loss, tape):
    """Reverse-traverse ``tape`` from scalar ``loss``; populate Parameter grads.

    Gradient slots of every touched parameter are zero-initialized first, so
    repeated backward calls do not leak accumulation across passes.
    """
    if loss.shape != ():
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    for p in tape.parameters:
        p.grad = np.zeros_like(p.value)
    seed = tape._node_by_out.get(id(loss))
    if seed is None:
        if loss.param is not None:
            loss.param.grad = np.ones_like(loss.param.value)
            return
        raise UsageError("loss tensor was not recorded on this tape")
    seed.grad = np.ones((), dtype=loss.dtype)
    for node in reversed(tape.nodes):
        if node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for t, g in zip(node.inputs, grads):
            if g is None or not t.watched:
                continue
            if t.param is not None:
                t.param.grad += g
            else:
                producer = tape._node_by_out.get(id(t))
                if producer is None:
                    continue
                if producer.grad is None:
                    producer.grad = g
                else:
                    producer.grad = producer.grad + g
        node.grad = None


# ---------------------------------------------------------------------------
# helpers

def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_operands(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.dtype != b.dtype:
        # Promote plain python/int constants silently; mixing f32/f64 tensors
        # is almost always a bug, so only widen zero-ndim constants.
        if a.ndim == 0 and a.param is None and not a.watched:
            a = Tensor(a.data.astype(b.dtype))
        elif b.ndim == 0 and b.param is None and not b.watched:
            b = Tensor(b.data.astype(a.dtype))
        else:
            raise DimensionError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    a, b = _binary_operands(a, b)
    out = a.data + b.data

    def bwd(g):
        return (_unbroadcast(g, a.shape) if a.watched else None,
                _unbroadcast(g, b.shape) if b.watched else None)

    return _record_op(out, (a, b), bwd)


def sub(a, b):
    a, b = _binary_operands(a, b)
    out = a.data - b.data

    def bwd(g):
        return (_unbroadcast(g, a.shape) if a.watched else None,
                _unbroadcast(-g, b.shape) if b.watched else None)

    return _record_op(out, (a, b), bwd)


def mul(a, b):
    a, b = _binary_operands(a, b)
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape) if a.watched else None,
                _unbroadcast(g * a.data, b.shape) if b.watched else None)

    return _record_op(out, (a, b), bwd)


def div(a, b):
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.watched else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.watched else None
        return ga, gb

    return _record_op(out, (a, b), bwd)


def neg(a):
    a = as_tensor(a)
    return _record_op(-a.data, (a,), lambda g: (-g,))


def maximum(a, b):
    """Elementwise max; at ties the gradient routes to the first operand."""
    a, b = _binary_operands(a, b)
    out = np.maximum(a.data, b.data)

    def bwd(g):
        first = a.data >= b.data
        ga = _unbroadcast(g * first, a.shape) if a.watched else None
        gb = _unbroadcast(g * ~first, b.shape) if b.watched else None
        return ga, gb

    return _record_op(out, (a, b), bwd)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record_op(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _record_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _record_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clamp(a, lo, hi):
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record_op(out, (a,), lambda g: (g * inside,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Tanh-approximation GELU, applied elementwise."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        return (g * d,)

    return _record_op(out, (a,), bwd)


# ---------------------------------------------------------------------------
# structural ops

def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _record_op(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _record_op(out, (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.watched:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                pieces.append(np.ascontiguousarray(g[tuple(idx)]))
            else:
                pieces.append(None)
        return pieces

    return _record_op(out, tuple(tensors), bwd)


def getitem(a, key):
    """Basic (slice/ellipsis/int) indexing; gradient scatters into zeros."""
    a = as_tensor(a)
    out = a.data[key]

    def bwd(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return _record_op(np.ascontiguousarray(out), (a,), bwd)


def pad(a, widths):
    """Zero-pad; ``widths`` is a (before, after) pair per axis."""
    a = as_tensor(a)
    out = np.pad(a.data, widths)
    slices = tuple(slice(b, b + n) for (b, _), n in zip(widths, a.shape))
    return _record_op(out, (a,), lambda g: (np.ascontiguousarray(g[slices]),))


def roll(a, shifts, axes):
    """Toroidal roll; exact inverse is roll with negated shifts."""
    a = as_tensor(a)
    shifts = tuple(int(s) for s in shifts)
    axes = tuple(axes)
    out = np.roll(a.data, shifts, axis=axes)
    inv = tuple(-s for s in shifts)
    return _record_op(out, (a,), lambda g: (np.roll(g, inv, axis=axes),))


def take(a, indices, axis):
    """Gather along ``axis`` with an integer index array.

    The gradient scatter-adds back to the gathered positions; positions
    never selected receive zero gradient (straight-through on the gather).
    """
    a = as_tensor(a)
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[axis]):
        raise DimensionError(
            f"take indices out of range for axis {axis} with extent {a.shape[axis]}")
    out = np.take(a.data, indices, axis=axis)

    def bwd(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        key = (slice(None),) * axis + (indices,)
        np.add.at(full, key, g)
        return (full,)

    return _record_op(out, (a,), bwd)


def take_along(a, indices, axis):
    """np.take_along_axis with scatter-add gradient."""
    a = as_tensor(a)
    indices = np.asarray(indices)
    out = np.take_along_axis(a.data, indices, axis=axis)

    def bwd(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        grids = list(np.indices(indices.shape, sparse=True))
        grids[axis] = indices
        np.add.at(full, tuple(grids), g)
        return (full,)

    return _record_op(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(g.dtype, copy=True),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(g.dtype, copy=True),)

    return _record_op(out, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        count = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    """Batched matrix product; leading extents must match or broadcast from 1."""
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as err:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from err

    def bwd(g):
        ga = gb = None
        if a.watched:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.watched:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record_op(out, (a, b), bwd)


def softmax(a, axis):
    """Exp-normalize along ``axis`` with max subtraction for stability."""
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise DimensionError(f"softmax along empty axis {axis} of shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record_op(out, (a,), bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    x = as_tensor(x)
    gamma = gamma.tensor() if isinstance(gamma, Parameter) else as_tensor(gamma)
    beta = beta.tensor() if isinstance(beta, Parameter) else as_tensor(beta)
    dim = x.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise DimensionError(
            f"layer_norm affine extents {gamma.shape}/{beta.shape} do not match last axis {dim}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gx = ggamma = gbeta = None
        reduce_axes = tuple(range(g.ndim - 1))
        if gamma.watched:
            ggamma = (g * xhat).sum(axis=reduce_axes)
        if beta.watched:
            gbeta = g.sum(axis=reduce_axes)
        if x.watched:
            gy = g * gamma.data
            gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                        - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _record_op(out, (x, gamma, beta), bwd)


def conv2d(x, w, b=None):
    """3x3 cross-correlation, stride 1, zero padding 1 (the decoder shape).

    x: [C_in, H, W]; w: [C_out, C_in, 3, 3]; b: [C_out] or None.
    """
    x = as_tensor(x)
    w = w.tensor() if isinstance(w, Parameter) else as_tensor(w)
    if b is not None:
        b = b.tensor() if isinstance(b, Parameter) else as_tensor(b)
    if x.ndim != 3 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d expects [C,H,W] x and [Co,Ci,3,3] kernel, got {x.shape}, {w.shape}")
    cin, h, wd = x.shape
    cout = w.shape[0]
    if w.shape[1] != cin:
        raise DimensionError(f"conv2d channel mismatch: input {cin} vs kernel {w.shape[1]}")
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((cout, h * wd), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            patch = xp[:, dy:dy + h, dx:dx + wd].reshape(cin, h * wd)
            out += w.data[:, :, dy, dx] @ patch
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(cout, h, wd)

    def bwd(g):
        g2 = g.reshape(cout, h * wd)
        gx = gw = gb = None
        if b is not None and b.watched:
            gb = g2.sum(axis=1)
        if w.watched:
            gw = np.zeros_like(w.data)
        if x.watched:
            gxp = np.zeros_like(xp)
        for dy in range(3):
            for dx in range(3):
                patch = xp[:, dy:dy + h, dx:dx + wd].reshape(cin, h * wd)
                if w.watched:
                    gw[:, :, dy, dx] = g2 @ patch.T
                if x.watched:
                    gxp[:, dy:dy + h, dx:dx + wd] += (w.data[:, :, dy, dx].T @ g2).reshape(cin, h, wd)
        if x.watched:
            gx = np.ascontiguousarray(gxp[:, 1:-1, 1:-1])
        if b is None:
            return gx, gw
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _record_op(out, inputs, bwd)


def _interp_matrix(n_src, n_dst, dtype):
    """Dense 1-D bilinear interpolation matrix, align-corners=false."""
    m = np.zeros((n_dst, n_src), dtype=dtype)
    scale = n_src / n_dst
    for i in range(n_dst):
        src = (i + 0.5) * scale - 0.5
        lo = math.floor(src)
        frac = src - lo
        lo_c = min(max(lo, 0), n_src - 1)
        hi_c = min(max(lo + 1, 0), n_src - 1)
        m[i, lo_c] += 1.0 - frac
        m[i, hi_c] += frac
    return m


def bilinear_upsample(x, target):
    """Bilinear resize of [C, H, W] to [C, H', W'], align-corners=false."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"bilinear_upsample expects [C,H,W], got {x.shape}")
    th, tw = target
    if th <= 0 or tw <= 0:
        raise DimensionError(f"bilinear_upsample target must be positive, got {target}")
    _, h, w = x.shape
    if th < h or tw < w:
        raise DimensionError(f"bilinear_upsample cannot shrink {x.shape[1:]} to {target}")
    if (th, tw) == (h, w):
        return x
    mr = _interp_matrix(h, th, x.dtype.type)  # [H', H]
    mc = _interp_matrix(w, tw, x.dtype.type)  # [W', W]
    # rows first: [C,H,W] -> [C,H',W], then columns: -> [C,H',W']
    y = matmul(Tensor(mr), x)
    y = matmul(y, Tensor(mc.T))
    return y


# ---------------------------------------------------------------------------
# optimizer

def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update over ``params`` (gradients must be populated)."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for p in params:
        if p.grad is None:
            raise UsageError(f"parameter {p.name or '<unnamed>'} has no gradient")
        if p.adam_m is None:
            p.adam_m = np.zeros_like(p.value)
            p.adam_v = np.zeros_like(p.value)
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1 - beta1) * p.grad
        p.adam_v *= beta2
        p.adam_v += (1 - beta2) * (p.grad * p.grad)
        mhat = p.adam_m / (1 - beta1 ** t)
        vhat = p.adam_v / (1 - beta2 ** t)
        p.value -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.value.dtype, copy=False)


# ---------------------------------------------------------------------------
# initialization and module plumbing

def trunc_normal(rng, shape, std=0.02, dtype=DEFAULT_DTYPE):
    """Zero-mean normal truncated to +-2 std, resampling rejected draws."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class Module:
    """Minimal parameter container; children discovered by attribute scan."""

    def named_parameters(self, prefix=""):
        out = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}" if prefix else key
            out.extend(_collect(name, val))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def _collect(name, val):
    if isinstance(val, Parameter):
        return [(name, val)]
    if isinstance(val, Module):
        return val.named_parameters(prefix=name + ".")
    if isinstance(val, (list, tuple)):
        out = []
        for i, item in enumerate(val):
            out.extend(_collect(f"{name}.{i}", item))
        return out
    return []


class Linear(Module):
    """Affine map on the last axis: y = x W + b."""

    def __init__(self, in_dim, out_dim, rng, bias=True, dtype=DEFAULT_DTYPE):
        self.weight = Parameter(trunc_normal(rng, (in_dim, out_dim), dtype=dtype))
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype)) if bias else None

    def __call__(self, x):
        y = matmul(x, self.weight.tensor())
        if self.bias is not None:
            y = add(y, self.bias.tensor())
        return y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=DEFAULT_DTYPE):
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, eps=self.eps)


class Conv3x3(Module):
    def __init__(self, in_ch, out_ch, rng, dtype=DEFAULT_DTYPE):
        self.weight = Parameter(trunc_normal(rng, (out_ch, in_ch, 3, 3), dtype=dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias)


# ---------------------------------------------------------------------------
# finite-difference checking

def finite_difference(fn, arrays, h=1e-5):
    """Central-difference gradients of scalar ``fn(*arrays)`` w.r.t. each array."""
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = fn(*arrays)
            flat[i] = orig - h
            lo = fn(*arrays)
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * h)
        grads.append(g)
    return grads


def gradcheck(fn, arrays, h=1e-5, tol=1e-5):
    """Compare taped gradients of ``fn`` against central differences (f64).

    ``fn`` maps Tensors to a scalar Tensor. Returns (ok, worst_rel_err).
    Relative error is |analytic - numeric| / max(1, |numeric|) per element.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    params = [Parameter(a.copy()) for a in arrays]
    with Tape() as tape:
        loss = fn(*[p.tensor() for p in params])
    backward(loss, tape)
    analytic = [p.grad for p in params]

    def scalar_fn(*arrs):
        value = fn(*[Tensor(a) for a in arrs])
        return float(value.data)

    numeric = finite_difference(scalar_fn, [p.value for p in params], h=h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.abs(n))
        rel = np.abs(a - n) / denom
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    return worst <= tol, worst
