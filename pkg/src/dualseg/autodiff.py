"""Minimal 64-bit tensor engine with reverse-mode automatic differentiation.

Operations are recorded on a thread-local tape in construction order; a
single backward pass walks the tape in reverse and accumulates gradients into
every reachable leaf. The tape is freed after backward, so each forward pass
builds a fresh graph. No broadcasting beyond scalar-with-tensor is allowed:
shape alignment is done explicitly through reshape/repeat.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

# Argument guard for ln/log2/div: keeps every loss finite. Coincides in value
# with the epsilon added inside the entropy formula, but serves a different
# purpose and is applied by clamping.
EPS_NUM = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(RuntimeError):
    """Backward invariant violated (non-scalar loss, freed graph, ...)."""


class _TapeState(threading.local):
    def __init__(self):
        self.nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self.generation = 0
        self.grad_enabled = True


_STATE = _TapeState()


class no_grad:
    """Context manager: run forwards without recording to the tape."""

    def __enter__(self):
        self._prev = _STATE.grad_enabled
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


class Tensor:
    """N-dimensional float64 array, optionally tracked by the tape."""

    __slots__ = ("data", "requires_grad", "grad", "_gen")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._gen = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # arithmetic sugar; scalars are the only permitted mixed-shape operands
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axes=None):
        return reduce_sum(self, axes)

    def mean(self, axes=None):
        return reduce_mean(self, axes)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: Sequence[Tensor], bwd: Callable[[np.ndarray], None]) -> Tensor:
    if _STATE.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._gen = _STATE.generation
        _STATE.nodes.append((out, bwd))
    return out


def _accumulate(t: Tensor, g: np.ndarray, own: bool = False):
    """Add g into t's gradient. own=True is the caller's promise that g's
    memory is exclusively ours, so it may be adopted without a copy;
    pass own=False for anything aliasing an upstream gradient."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if own else np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise operations


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "add")
        out = Tensor(a.data + b.data)

        def bwd(g):
            _accumulate(a, g)
            _accumulate(b, g)

        return _record(out, (a, b), bwd)
    c = float(b)
    out = Tensor(a.data + c)

    def bwd(g):
        _accumulate(a, g)

    return _record(out, (a,), bwd)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "sub")
        out = Tensor(a.data - b.data)

        def bwd(g):
            _accumulate(a, g)
            _accumulate(b, -g, own=True)

        return _record(out, (a, b), bwd)
    c = float(b)
    out = Tensor(a.data - c)

    def bwd(g):
        _accumulate(a, g)

    return _record(out, (a,), bwd)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "mul")
        out = Tensor(a.data * b.data)
        a_data, b_data = a.data, b.data

        def bwd(g):
            _accumulate(a, g * b_data, own=True)
            _accumulate(b, g * a_data, own=True)

        return _record(out, (a, b), bwd)
    c = float(b)
    out = Tensor(a.data * c)

    def bwd(g):
        _accumulate(a, g * c, own=True)

    return _record(out, (a,), bwd)


def div(a, b) -> Tensor:
    """Division with the denominator clamped away from zero by EPS_NUM."""
    a = _as_tensor(a)
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "div")
        safe = np.where(np.abs(b.data) < EPS_NUM, np.copysign(EPS_NUM, b.data), b.data)
        out = Tensor(a.data / safe)
        a_data = a.data
        live = np.abs(b.data) >= EPS_NUM

        def bwd(g):
            _accumulate(a, g / safe, own=True)
            _accumulate(b, np.where(live, -g * a_data / (safe * safe), 0.0), own=True)

        return _record(out, (a, b), bwd)
    c = float(b)
    safe_c = c if abs(c) >= EPS_NUM else (EPS_NUM if c >= 0 else -EPS_NUM)
    out = Tensor(a.data / safe_c)

    def bwd(g):
        _accumulate(a, g / safe_c, own=True)

    return _record(out, (a,), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)

    def bwd(g):
        _accumulate(a, -g, own=True)

    return _record(out, (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    val = np.exp(a.data)
    out = Tensor(val)

    def bwd(g):
        _accumulate(a, g * val, own=True)

    return _record(out, (a,), bwd)


def ln(a) -> Tensor:
    """Natural log of the argument clamped below at EPS_NUM."""
    a = _as_tensor(a)
    safe = np.maximum(a.data, EPS_NUM)
    out = Tensor(np.log(safe))
    live = a.data > EPS_NUM

    def bwd(g):
        _accumulate(a, np.where(live, g / safe, 0.0), own=True)

    return _record(out, (a,), bwd)


_LN2 = float(np.log(2.0))


def log2(a) -> Tensor:
    """Base-2 log of the argument clamped below at EPS_NUM."""
    a = _as_tensor(a)
    safe = np.maximum(a.data, EPS_NUM)
    out = Tensor(np.log2(safe))
    live = a.data > EPS_NUM

    def bwd(g):
        _accumulate(a, np.where(live, g / (safe * _LN2), 0.0), own=True)

    return _record(out, (a,), bwd)


def clamp_min(a, floor: float) -> Tensor:
    a = _as_tensor(a)
    floor = float(floor)
    out = Tensor(np.maximum(a.data, floor))
    live = a.data > floor

    def bwd(g):
        _accumulate(a, np.where(live, g, 0.0), own=True)

    return _record(out, (a,), bwd)


def sqrt(a) -> Tensor:
    """sqrt via exp(0.5 ln x); inherits the ln argument guard."""
    return exp(mul(ln(a), 0.5))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    """x where x > 0, else slope*x. Fused equivalent of
    clamp_min(x, 0)*(1-slope) + slope*x."""
    a = _as_tensor(a)
    pos = a.data > 0
    out = Tensor(np.where(pos, a.data, slope * a.data))

    def bwd(g):
        _accumulate(a, np.where(pos, g, slope * g), own=True)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(ax) for ax in axes)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise ShapeError(f"duplicate axes in {axes}")
    return tuple(sorted(norm))


def _reduce(a, axes, mean: bool) -> Tensor:
    a = _as_tensor(a)
    axes_n = _normalize_axes(axes, a.data.ndim)
    count = 1
    for ax in axes_n:
        count *= a.shape[ax]
    val = np.mean(a.data, axis=axes_n) if mean else np.sum(a.data, axis=axes_n)
    out = Tensor(val)
    in_shape = a.shape

    def bwd(g):
        gg = g
        for ax in axes_n:
            gg = np.expand_dims(gg, ax)
        gg = np.broadcast_to(gg, in_shape)
        _accumulate(a, gg / count if mean else gg.copy(), own=True)

    return _record(out, (a,), bwd)


def reduce_sum(a, axes=None) -> Tensor:
    return _reduce(a, axes, mean=False)


def reduce_mean(a, axes=None) -> Tensor:
    return _reduce(a, axes, mean=True)


# ---------------------------------------------------------------------------
# softmax


def softmax(logits, class_axis: int) -> Tensor:
    """Numerically stable softmax (max-subtraction) along class_axis."""
    a = _as_tensor(logits)
    ndim = a.data.ndim
    if not -ndim <= class_axis < ndim:
        raise ShapeError(f"axis {class_axis} out of range for {ndim}-d tensor")
    ax = class_axis % ndim
    shifted = a.data - np.max(a.data, axis=ax, keepdims=True)
    e = np.exp(shifted)
    p = e / np.sum(e, axis=ax, keepdims=True)
    out = Tensor(p)

    def bwd(g):
        inner = np.sum(p * g, axis=ax, keepdims=True)
        _accumulate(a, p * (g - inner), own=True)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# structural operations


def select(a, axis: int, index: int) -> Tensor:
    """Slice one index along axis; the axis is removed from the shape."""
    a = _as_tensor(a)
    ndim = a.data.ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    ax = axis % ndim
    if not 0 <= index < a.shape[ax]:
        raise ShapeError(f"index {index} out of range for axis {ax} of extent {a.shape[ax]}")
    out = Tensor(np.take(a.data, index, axis=ax))
    in_shape = a.shape

    def bwd(g):
        gg = np.zeros(in_shape)
        sl = [slice(None)] * len(in_shape)
        sl[ax] = index
        gg[tuple(sl)] = g
        _accumulate(a, gg, own=True)

    return _record(out, (a,), bwd)


def repeat(a, axis: int, n: int) -> Tensor:
    """Tile a size-1 axis n times (the explicit alignment primitive)."""
    a = _as_tensor(a)
    ndim = a.data.ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    ax = axis % ndim
    if a.shape[ax] != 1:
        raise ShapeError(f"repeat requires extent 1 on axis {ax}, got shape {a.shape}")
    out = Tensor(np.repeat(a.data, n, axis=ax))

    def bwd(g):
        _accumulate(a, np.sum(g, axis=ax, keepdims=True), own=True)

    return _record(out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    out = Tensor(a.data.reshape(shape))
    in_shape = a.shape

    def bwd(g):
        _accumulate(a, g.reshape(in_shape))

    return _record(out, (a,), bwd)


def concat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    ndim = ts[0].data.ndim
    ax = axis % ndim
    base = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != ndim or other[:ax] + other[ax + 1:] != base[:ax] + base[ax + 1:]:
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {ax}")
    out = Tensor(np.concatenate([t.data for t in ts], axis=ax))
    extents = [t.shape[ax] for t in ts]

    def bwd(g):
        start = 0
        for t, ext in zip(ts, extents):
            sl = [slice(None)] * ndim
            sl[ax] = slice(start, start + ext)
            _accumulate(t, g[tuple(sl)])
            start += ext

    return _record(out, tuple(ts), bwd)


# ---------------------------------------------------------------------------
# 3D convolution


def _conv_out_extent(ext: int, k: int, stride: int, padding: int) -> int:
    return (ext + 2 * padding - k) // stride + 1


def _im2col(padded: np.ndarray, k: int, stride: int, out_ext: tuple[int, int, int]) -> np.ndarray:
    c = padded.shape[0]
    ox, oy, oz = out_ext
    col = np.empty((c, k, k, k, ox, oy, oz))
    for dx in range(k):
        for dy in range(k):
            for dz in range(k):
                col[:, dx, dy, dz] = padded[
                    :,
                    dx : dx + ox * stride : stride,
                    dy : dy + oy * stride : stride,
                    dz : dz + oz * stride : stride,
                ]
    return col.reshape(c * k * k * k, ox * oy * oz)


# column matrices beyond this spill out of cache, where per-(dx,dy) chunking wins
_COL_CHUNK_BYTES = 32 * 1024 * 1024


def _pad_spatial(x: np.ndarray, p: int) -> np.ndarray:
    """Zero-pad the three trailing axes of [C, X, Y, Z] by p on each side."""
    if p == 0:
        return x
    c, xx, yy, zz = x.shape
    out = np.zeros((c, xx + 2 * p, yy + 2 * p, zz + 2 * p))
    out[:, p:-p, p:-p, p:-p] = x
    return out


def _conv_gemm(padded: np.ndarray, kernels: np.ndarray, k: int) -> np.ndarray:
    """Stride-1 correlation of padded [C, PX, PY, PZ] with kernels
    [C_out, C, k, k, k], returned as [C_out, N]."""
    c = padded.shape[0]
    ox, oy, oz = (e - k + 1 for e in padded.shape[1:])
    n = ox * oy * oz
    if c * k ** 3 * n * 8 <= _COL_CHUNK_BYTES:
        col = _im2col(padded, k, 1, (ox, oy, oz))
        return kernels.reshape(kernels.shape[0], -1) @ col
    out = np.zeros((kernels.shape[0], n))
    chunk = np.empty((c, k, ox, oy, oz))
    for dx in range(k):
        for dy in range(k):
            for dz in range(k):
                chunk[:, dz] = padded[:, dx : dx + ox, dy : dy + oy, dz : dz + oz]
            w = np.ascontiguousarray(kernels[:, :, dx, dy, :]).reshape(-1, c * k)
            out += w @ chunk.reshape(c * k, n)
    return out


def _conv_kernel_grad(padded: np.ndarray, g_mat: np.ndarray, k: int,
                      out_ext: tuple[int, int, int], stride: int) -> np.ndarray:
    """Gradient w.r.t. kernels: correlate the input columns with the output
    gradient, chunked like the forward pass when the columns are large."""
    c = padded.shape[0]
    ox, oy, oz = out_ext
    n = ox * oy * oz
    c_out = g_mat.shape[0]
    if c * k ** 3 * n * 8 <= _COL_CHUNK_BYTES:
        col = _im2col(padded, k, stride, out_ext)
        return (g_mat @ col.T).reshape(c_out, c, k, k, k)
    dk = np.empty((c_out, c, k, k, k))
    chunk = np.empty((c, k, ox, oy, oz))
    for dx in range(k):
        for dy in range(k):
            for dz in range(k):
                chunk[:, dz] = padded[
                    :,
                    dx : dx + ox * stride : stride,
                    dy : dy + oy * stride : stride,
                    dz : dz + oz * stride : stride,
                ]
            dk[:, :, dx, dy, :] = (g_mat @ chunk.reshape(c * k, n).T).reshape(c_out, c, k)
    return dk


def conv3d(inp, kernels, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation of [C_in,X,Y,Z] with kernels [C_out,C_in,k,k,k]."""
    inp = _as_tensor(inp)
    kernels = _as_tensor(kernels)
    if inp.data.ndim != 4 or kernels.data.ndim != 5:
        raise ShapeError(f"conv3d expects 4-d input and 5-d kernels, got {inp.shape} and {kernels.shape}")
    c_out, c_in, k, k2, k3 = kernels.shape
    if not (k == k2 == k3):
        raise ShapeError(f"conv3d kernels must be cubic, got {kernels.shape}")
    if inp.shape[0] != c_in:
        raise ShapeError(f"conv3d channel mismatch: input has {inp.shape[0]} channels, kernels expect {c_in}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv3d: invalid stride {stride} or padding {padding}")
    ext = inp.shape[1:]
    out_ext = tuple(_conv_out_extent(e, k, stride, padding) for e in ext)
    if any(o < 1 for o in out_ext):
        raise ShapeError(f"conv3d: no valid kernel placement for input {inp.shape}, kernel {k}, "
                         f"stride {stride}, padding {padding}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv3d bias shape {bias.shape} != ({c_out},)")

    padded = _pad_spatial(inp.data, padding)
    col = None  # kept for the kernel gradient when it fits in cache
    if k == 1 and stride == 1 and padding == 0:
        k_mat = kernels.data.reshape(c_out, c_in)
        val = (k_mat @ inp.data.reshape(c_in, -1)).reshape(c_out, *out_ext)
    elif stride == 1:
        n_out = out_ext[0] * out_ext[1] * out_ext[2]
        if c_in * k ** 3 * n_out * 8 <= _COL_CHUNK_BYTES:
            col = _im2col(padded, k, 1, out_ext)
            val = (kernels.data.reshape(c_out, -1) @ col).reshape(c_out, *out_ext)
        else:
            val = _conv_gemm(padded, kernels.data, k).reshape(c_out, *out_ext)
    else:
        col = _im2col(padded, k, stride, out_ext)
        val = (kernels.data.reshape(c_out, -1) @ col).reshape(c_out, *out_ext)
    if bias is not None:
        val += bias.data[:, None, None, None]
    out = Tensor(val)
    pad_shape = padded.shape
    in_shape = inp.shape
    parents = (inp, kernels) if bias is None else (inp, kernels, bias)

    def bwd(g):
        g_mat = g.reshape(c_out, -1)
        if bias is not None:
            _accumulate(bias, g_mat.sum(axis=1), own=True)
        if k == 1 and stride == 1 and padding == 0:
            flat = inp.data.reshape(c_in, -1)
            _accumulate(kernels, (g_mat @ flat.T).reshape(kernels.shape), own=True)
            if inp.requires_grad:
                _accumulate(inp, (kernels.data.reshape(c_out, c_in).T @ g_mat).reshape(in_shape),
                            own=True)
            return
        if col is not None:
            _accumulate(kernels, (g_mat @ col.T).reshape(kernels.shape), own=True)
        else:
            _accumulate(kernels, _conv_kernel_grad(padded, g_mat, k, out_ext, stride), own=True)
        if not inp.requires_grad:
            return
        if stride == 1:
            # transposed convolution: correlate g (padded by k-1) with the
            # spatially flipped kernels, channel axes swapped
            gpad = _pad_spatial(g, k - 1)
            k_flip = np.ascontiguousarray(
                kernels.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            dpad = _conv_gemm(gpad, k_flip, k).reshape(pad_shape)
            if padding:
                dpad = dpad[:, padding:-padding, padding:-padding, padding:-padding]
            _accumulate(inp, dpad, own=True)
        else:
            # strided case: scatter-add the column gradient back into place
            dcol = (kernels.data.reshape(c_out, -1).T @ g_mat).reshape(c_in, k, k, k, *out_ext)
            dpad = np.zeros(pad_shape)
            ox, oy, oz = out_ext
            for dx in range(k):
                for dy in range(k):
                    for dz in range(k):
                        dpad[
                            :,
                            dx : dx + ox * stride : stride,
                            dy : dy + oy * stride : stride,
                            dz : dz + oz * stride : stride,
                        ] += dcol[:, dx, dy, dz]
            if padding:
                dpad = dpad[:, padding:-padding, padding:-padding, padding:-padding]
            _accumulate(inp, dpad, own=True)

    return _record(out, parents, bwd)


# ---------------------------------------------------------------------------
# backward and gradient checking


def backward(loss: Tensor):
    """Populate grads of every requires_grad leaf reachable from loss.

    Consumes the tape: a second backward without a fresh forward raises.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad; nothing to differentiate")
    if loss._gen >= 0 and loss._gen != _STATE.generation:
        raise GraphError("graph already freed: backward called twice without a new forward")
    loss.grad = np.ones_like(loss.data)
    for out, bwd in reversed(_STATE.nodes):
        if out.grad is not None:
            bwd(out.grad)
    _STATE.nodes.clear()
    _STATE.generation += 1


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |analytic - numeric| divided by
    max(1e-8, |analytic| + |numeric|).
    """
    x0 = np.array(x.data, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    y = f(leaf)
    if y.data.size != 1:
        raise GraphError(f"gradient_check requires a scalar-valued f, got shape {y.shape}")
    if not np.isfinite(y.data).all():
        raise ValueError("gradient_check: f(x) is not finite")
    backward(y)
    analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(x0)).item()
            flat[i] = orig - h
            fm = f(Tensor(x0)).item()
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
