"""Dense tensors and the fixed differentiable operation set.

Values are rank <= 4 numpy arrays in float32 (float64 is accepted for
high-precision checks). Every operation records just enough of a tape to
run reverse-mode backprop through the fixed set below -- this is not a
general autodiff engine. Reductions accumulate in float64 regardless of
the storage dtype.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, NumericalError, ShapeError, UsageError

# When enabled, every op asserts its output is finite. Toggle with
# set_debug_checks(); kept off by default for speed.
_DEBUG_CHECKS = False

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def set_debug_checks(enabled: bool) -> None:
    """Turn post-op NaN/Inf assertions on or off globally."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


class Tensor:
    """A rank <= 4 real array plus optional gradient tape bookkeeping.

    ``data`` is always C-contiguous (row-major). ``grad`` is lazily
    allocated by backward passes and accumulates across calls until
    explicitly cleared (the optimizer does this after each step).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
            arr = _contiguous(data)
        else:
            arr = _contiguous(np.asarray(data, dtype=np.dtype(dtype or np.float32)))
        _validate_array(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A constant tensor sharing this tensor's values."""
        return Tensor(self.data.copy())

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output, accumulating into .grad."""
        if self.data.size != 1:
            raise UsageError("backward() is only defined for scalar outputs")
        for node in reversed(_topo_order(self)):
            if node.grad is None:
                if node is self:
                    node.grad = np.ones_like(node.data)
                else:
                    continue  # unreachable from the output
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _contiguous(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would promote rank-0 arrays to rank 1
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


def _validate_array(arr: np.ndarray) -> None:
    if arr.dtype not in _FLOAT_DTYPES:
        raise ShapeError(f"tensors hold float32/float64 data, got {arr.dtype}")
    if arr.ndim > 4:
        raise ShapeError(f"tensors are rank <= 4, got rank {arr.ndim}")
    if arr.size == 0:
        raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = emitted
    stack = [root]
    while stack:
        node = stack.pop()
        st = state.get(id(node), 0)
        if st == 2:
            continue
        if st == 1:
            state[id(node)] = 2
            order.append(node)
            continue
        state[id(node)] = 1
        stack.append(node)
        for p in node._parents:
            if p.requires_grad and state.get(id(p), 0) == 0:
                stack.append(p)
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _contiguous(data)
    out.grad = None
    req = any(p.requires_grad for p in parents)
    out.requires_grad = req
    out._parents = tuple(parents) if req else ()
    out._backward = backward if req else None
    if _DEBUG_CHECKS and not np.all(np.isfinite(out.data)):
        raise NumericalError("operation produced a non-finite value")
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(t.data.dtype, copy=False)


def _result_dtype(*tensors: Tensor):
    return np.result_type(*(t.data.dtype for t in tensors))


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs matching shapes, got {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(out_data, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    out_data = a.data * a.data.dtype.type(factor)

    def backward(g):
        _accum(a, g * factor)

    return _make(out_data, (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise UsageError("concat needs at least one tensor")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, n in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + n)
            _accum(p, g[tuple(sl)])
            offset += n

    return _make(out_data, tuple(parts), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}) out of range for axis {axis} of {a.shape}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    out_data = a.data[tuple(sl)].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[tuple(sl)] = g
        _accum(a, full)

    return _make(out_data, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def mean_stack(parts: Sequence[Tensor], canonical_order: bool = False) -> Tensor:
    """Elementwise mean of same-shape tensors, accumulated in float64.

    With ``canonical_order`` the addends are sorted per element before
    summation, which makes the result bit-independent of argument order
    (used for averaging over support shots).
    """
    if not parts:
        raise UsageError("mean_stack needs at least one tensor")
    shape = parts[0].shape
    for p in parts:
        if p.shape != shape:
            raise ShapeError(f"mean_stack needs matching shapes, got {p.shape} vs {shape}")
    n = len(parts)
    stacked = np.stack([p.data.astype(np.float64, copy=False) for p in parts], axis=0)
    if canonical_order and n > 1:
        stacked = np.sort(stacked, axis=0)
    acc = np.zeros(shape, dtype=np.float64)
    for i in range(n):
        acc += stacked[i]
    out_data = (acc / n).astype(_result_dtype(*parts))

    def backward(g):
        share = g.astype(np.float64) / n
        for p in parts:
            _accum(p, share)

    return _make(out_data, tuple(parts), backward)


def weighted_sum(a: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar projection sum(a * weights); the gradient-check scalarizer."""
    if weights.shape != a.shape:
        raise ShapeError(f"weights shape {weights.shape} != tensor shape {a.shape}")
    w64 = weights.astype(np.float64, copy=False)
    out_data = np.array(np.sum(a.data.astype(np.float64) * w64), dtype=np.float64)

    def backward(g):
        _accum(a, float(g) * w64)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

# When set (by gradient checking), every relu appends its sign mask here so
# finite-difference probes that cross a kink can be detected and re-drawn.
_RELU_TRACE: list[bytes] | None = None


@contextmanager
def relu_trace():
    global _RELU_TRACE
    prev = _RELU_TRACE
    collected: list[bytes] = []
    _RELU_TRACE = collected
    try:
        yield collected
    finally:
        _RELU_TRACE = prev


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)
    # subgradient at exactly 0 is defined as 0
    mask = a.data > 0
    if _RELU_TRACE is not None:
        _RELU_TRACE.append(np.packbits(mask.reshape(-1)).tobytes())

    def backward(g):
        _accum(a, g * mask)

    return _make(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data.astype(np.float64, copy=False)
    t = np.exp(-np.abs(x))  # never overflows
    s = np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    # the exact sigmoid never reaches 0 or 1; keep the rounded output
    # inside the open interval of the storage dtype too
    dt = a.data.dtype
    out_data = np.clip(s.astype(dt), np.nextafter(dt.type(0), dt.type(1)),
                       np.nextafter(dt.type(1), dt.type(0)))

    def backward(g):
        _accum(a, g * (s * (1.0 - s)))

    return _make(out_data, (a,), backward)


def activation(a: Tensor, kind: str) -> Tensor:
    """Dispatch by name; kinds are "relu" and "sigmoid"."""
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise UsageError(f"unknown activation kind: {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = weight @ x (+ bias) for a vector x: (I,) x (O,I) -> (O,)."""
    if x.data.ndim != 1 or weight.data.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"linear needs (O,I) @ (I,), got {weight.shape} @ {x.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
    w64 = weight.data.astype(np.float64, copy=False)
    x64 = x.data.astype(np.float64, copy=False)
    y = w64 @ x64
    if bias is not None:
        y = y + bias.data.astype(np.float64, copy=False)
    parents = (x, weight) if bias is None else (x, weight, bias)
    out_data = y.astype(_result_dtype(*parents))

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        _accum(x, w64.T @ g64)
        _accum(weight, np.outer(g64, x64))
        if bias is not None:
            _accum(bias, g64)

    return _make(out_data, parents, backward)


def spatial_mean(a: Tensor) -> Tensor:
    """(C,H,W) -> (C,): per-channel global average pool."""
    if a.data.ndim != 3:
        raise ShapeError(f"spatial_mean expects (C,H,W), got {a.shape}")
    c, h, w = a.shape
    out_data = a.data.mean(axis=(1, 2), dtype=np.float64).astype(a.data.dtype)

    def backward(g):
        _accum(a, np.broadcast_to(g[:, None, None] / (h * w), a.shape))

    return _make(out_data, (a,), backward)


def channel_scale(a: Tensor, gate: Tensor) -> Tensor:
    """(C,H,W) rescaled per channel by a (C,) gate."""
    if a.data.ndim != 3 or gate.data.ndim != 1 or gate.shape[0] != a.shape[0]:
        raise ShapeError(f"channel_scale needs (C,H,W) and (C,), got {a.shape} and {gate.shape}")
    out_data = a.data * gate.data[:, None, None]

    def backward(g):
        _accum(a, g * gate.data[:, None, None])
        _accum(gate, np.sum(g.astype(np.float64) * a.data, axis=(1, 2)))

    return _make(out_data, (a, gate), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_cols(x64: np.ndarray, kh: int, kw: int, dilation: int, stride: int = 1):
    """Padded input and its (C,kh,kw,OH,OW) sliding-window view, "same" zero padding."""
    c, h, w = x64.shape
    if stride == 1:
        oh, ow = h, w
        ph = dilation * (kh - 1) // 2
        pw = dilation * (kw - 1) // 2
        pt, pl = ph, pw
        pb, pr = ph, pw
    else:
        oh = -(-h // stride)
        ow = -(-w // stride)
        ph = max((oh - 1) * stride + dilation * (kh - 1) + 1 - h, 0)
        pw = max((ow - 1) * stride + dilation * (kw - 1) + 1 - w, 0)
        pt, pb = ph // 2, ph - ph // 2
        pl, pr = pw // 2, pw - pw // 2
    xp = np.zeros((c, h + pt + pb, w + pl + pr), dtype=np.float64)
    xp[:, pt:pt + h, pl:pl + w] = x64
    s0, s1, s2 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, oh, ow),
        strides=(s0, s1 * dilation, s2 * dilation, s1 * stride, s2 * stride),
        writeable=False,
    )
    return xp, cols, (pt, pl)


def conv2d_raw(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray,
               dilation: int = 1, stride: int = 1) -> np.ndarray:
    """Forward-only "same"-padded cross-correlation in float64."""
    _, cols, _ = _conv_cols(x.astype(np.float64, copy=False),
                            kernel.shape[2], kernel.shape[3], dilation, stride)
    out = np.tensordot(kernel.astype(np.float64, copy=False), cols, axes=([1, 2, 3], [0, 1, 2]))
    return out + bias.astype(np.float64, copy=False)[:, None, None]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, dilation: int = 1) -> Tensor:
    """Dilated "same"-padded cross-correlation: (C,H,W) -> (O,H,W).

    Kernel layout is (O,C,kh,kw) with odd spatial extents; output spatial
    size always equals the input's.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) and (O,C,kh,kw), got {x.shape} and {kernel.shape}")
    o, ck, kh, kw = kernel.shape
    c, h, w = x.shape
    if ck != c:
        raise ShapeError(f"kernel expects {ck} input channels but input has {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel spatial extents must be odd, got {kh}x{kw}")
    if dilation < 1:
        raise UsageError(f"dilation must be >= 1, got {dilation}")
    if bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} != ({o},)")

    x64 = x.data.astype(np.float64, copy=False)
    k64 = kernel.data.astype(np.float64, copy=False)
    _, cols, _ = _conv_cols(x64, kh, kw, dilation)
    out64 = np.tensordot(k64, cols, axes=([1, 2, 3], [0, 1, 2]))
    out64 += bias.data.astype(np.float64, copy=False)[:, None, None]
    out_data = out64.astype(_result_dtype(x, kernel, bias))

    def backward(g):
        g64 = g.astype(np.float64, copy=False)
        _accum(bias, g64.sum(axis=(1, 2)))
        _accum(kernel, np.tensordot(g64, cols, axes=([1, 2], [3, 4])))
        if x.requires_grad:
            ph = dilation * (kh - 1) // 2
            pw = dilation * (kw - 1) // 2
            dxp = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i * dilation:i * dilation + h, j * dilation:j * dilation + w] += \
                        np.tensordot(k64[:, :, i, j], g64, axes=(0, 0))
            _accum(x, dxp[:, ph:ph + h, pw:pw + w])

    return _make(out_data, (x, kernel, bias), backward)


# ---------------------------------------------------------------------------
# bilinear resize
# ---------------------------------------------------------------------------

_INTERP_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _interp_axis(n_in: int, n_out: int):
    """Corner-aligned source indices (i0, i1) and lerp weights for one axis."""
    key = (n_in, n_out)
    cached = _INTERP_CACHE.get(key)
    if cached is not None:
        return cached
    if n_out == 1:
        coords = np.zeros(1)
    else:
        coords = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(coords).astype(np.intp), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = coords - i0
    _INTERP_CACHE[key] = (i0, i1, w)
    return i0, i1, w


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    i0, i1, w = _interp_axis(n_in, n_out)
    a = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(a, (rows, i0), 1.0 - w)
    np.add.at(a, (rows, i1), w)
    return a


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Corner-aligned bilinear interpolation to (C,out_h,out_w).

    The forward pass uses the lerp form a + w*(b - a), so constant inputs
    are preserved exactly and identity resizes are bit-exact.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_resize expects (C,H,W), got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise UsageError(f"output extents must be >= 1, got {out_h}x{out_w}")
    c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        out_data = x.data.copy()

        def backward_id(g):
            _accum(x, g)

        return _make(out_data, (x,), backward_id)

    x64 = x.data.astype(np.float64, copy=False)
    j0, j1, wx = _interp_axis(w, out_w)
    a = x64[:, :, j0]
    t = a + wx * (x64[:, :, j1] - a)  # (C,H,out_w)
    i0, i1, wy = _interp_axis(h, out_h)
    b = t[:, i0, :]
    out64 = b + wy[None, :, None] * (t[:, i1, :] - b)
    out_data = out64.astype(x.data.dtype)

    def backward(g):
        ay = _interp_matrix(h, out_h)
        ax = _interp_matrix(w, out_w)
        g64 = g.astype(np.float64, copy=False)
        _accum(x, np.einsum("ah,cab,bw->chw", ay, g64, ax, optimize=True))

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, target: np.ndarray | Tensor) -> Tensor:
    """Mean pixel-wise negative log softmax probability of the target class.

    Logits are (2,H,W) with channel 0 = background, 1 = foreground; the
    target is a binary (H,W) mask. Returns a float64 scalar tensor.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    t = np.squeeze(t)
    if logits.data.ndim != 3 or logits.shape[0] != 2:
        raise ShapeError(f"cross_entropy expects (2,H,W) logits, got {logits.shape}")
    if t.shape != logits.shape[1:]:
        raise ShapeError(f"target shape {t.shape} != logits spatial shape {logits.shape[1:]}")
    if not np.all((t == 0) | (t == 1)):
        raise DataError("target mask must contain only 0/1 values")
    fg = t == 1
    x = logits.data.astype(np.float64, copy=False)
    m = np.maximum(x[0], x[1])
    lse = m + np.log(np.exp(x[0] - m) + np.exp(x[1] - m))
    picked = np.where(fg, x[1], x[0])
    n_pix = t.size
    out_data = np.array(np.sum(lse - picked) / n_pix)

    def backward(g):
        z = x[1] - x[0]
        e = np.exp(-np.abs(z))
        p1 = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        d = np.empty_like(x)
        d[1] = p1 - fg
        d[0] = -d[1]
        _accum(logits, d * (float(g) / n_pix))

    return _make(out_data, (logits,), backward)


# ---------------------------------------------------------------------------
# channel attention
# ---------------------------------------------------------------------------

def channel_attention(x: Tensor, w_reduce: Tensor, b_reduce: Tensor,
                      w_restore: Tensor, b_restore: Tensor) -> Tensor:
    """Squeeze-excite gate: pool -> FC reduce -> relu -> FC restore -> sigmoid -> rescale.

    ``w_reduce`` is (C/r, C) and ``w_restore`` is (C, C/r) for reduction
    ratio r; both layers carry biases.
    """
    c = x.shape[0]
    if w_reduce.shape[1] != c or w_restore.shape[0] != c or w_reduce.shape[0] != w_restore.shape[1]:
        raise ShapeError(
            f"attention weights {w_reduce.shape}/{w_restore.shape} do not match {c} channels")
    pooled = spatial_mean(x)
    hidden = relu(linear(pooled, w_reduce, b_reduce))
    gate = sigmoid(linear(hidden, w_restore, b_restore))
    return channel_scale(x, gate)
