"""Dense tensor type with a tape-based reverse-mode differentiation core.

Tensors wrap row-major numpy arrays (float32 by default, float64 for the
gradient/oracle suites). Operations are plain functions; when executed while a
:class:`Tape` is active and any input is tracked, they append a record with a
closure computing the input adjoints. ``Tape.backward`` replays the records in
strict reverse execution order exactly once and accumulates gradients into the
``grad`` slot of every ``requires_grad`` leaf.

There is no general broadcasting: every operation has an explicit shape
contract, which keeps the naive oracles in the test-suite trivial to write.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, NumericsError
from . import kernels

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ConfigurationError(f"unsupported default dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the default dtype (used by the 64-bit suites)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """Dense N-d real array with an optional gradient slot.

    ``data`` is always a C-contiguous float numpy array. ``grad`` is either
    None or an ndarray of identical shape. Tensors are treated as immutable
    once created; all mutation goes through new operations.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(dtype if dtype is not None else _DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tracked = bool(requires_grad)

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

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flag})"

    # Small operator sugar; everything defers to the tape ops below.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def full(shape, value, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def assert_finite(t: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(t.data)):
        raise NumericsError(f"non-finite values in {what}")


# --------------------------------------------------------------------------- #
# Tape
# --------------------------------------------------------------------------- #

class TapeRecord:
    __slots__ = ("name", "inputs", "outputs", "backward")

    def __init__(self, name, inputs, outputs, backward):
        self.name = name
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed operations, replayable for adjoints.

    Use as a context manager around the forward computation, then call
    ``backward(loss)``. Records are traversed in strict reverse execution
    order exactly once.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            out_grads = [grads.get(id(o)) for o in rec.outputs]
            if all(g is None for g in out_grads):
                continue
            out_grads = [
                g if g is not None else np.zeros_like(o.data)
                for g, o in zip(out_grads, rec.outputs)
            ]
            in_grads = rec.backward(*out_grads)
            for t, g in zip(rec.inputs, in_grads):
                if g is None or not t._tracked:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
            for o in rec.outputs:
                grads.pop(id(o), None)
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad and id(t) in grads:
                    g = grads.pop(id(t))
                    t.grad = g if t.grad is None else t.grad + g
        if loss.requires_grad and id(loss) in grads:
            g = grads.pop(id(loss))
            loss.grad = g if loss.grad is None else loss.grad + g


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``."""
    tape.backward(loss)


def _record(name, inputs: Sequence[Tensor], outputs: Sequence[Tensor], backward_fn: Callable):
    tape = active_tape()
    if tape is None or not any(t._tracked for t in inputs):
        return
    for o in outputs:
        o._tracked = True
    tape.records.append(TapeRecord(name, tuple(inputs), tuple(outputs), backward_fn))


def _same_dtype(*ts: Tensor):
    d0 = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d0:
            raise DimensionError(f"dtype mismatch: {d0} vs {t.data.dtype}")
    return d0


# --------------------------------------------------------------------------- #
# Elementwise and structural operations
# --------------------------------------------------------------------------- #

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    _same_dtype(a, b)
    out = Tensor(a.data + b.data)
    _record("add", (a, b), (out,), lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes differ: {a.shape} vs {b.shape}")
    _same_dtype(a, b)
    out = Tensor(a.data - b.data)
    _record("sub", (a, b), (out,), lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")
    _same_dtype(a, b)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    _record("mul", (a, b), (out,), lambda g: (g * bd, g * ad))
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * a.data.dtype.type(s))
    _record("scale", (a,), (out,), lambda g: (g * s,))
    return out


def add_scalar(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data + a.data.dtype.type(float(s)))
    _record("add_scalar", (a,), (out,), lambda g: (g,))
    return out


def _sigmoid_np(xd: np.ndarray) -> np.ndarray:
    # stable: e^{-|x|}/(1+e^{-|x|}) on the negative side, 1/(1+e^{-x}) on the positive
    t = np.exp(-np.abs(xd))
    return np.where(xd >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    out = Tensor(s)
    _record("sigmoid", (x,), (out,), lambda g: (g * (s * (1.0 - s)),))
    return out


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid_np(xd)
    out = Tensor(xd * s)
    _record("silu", (x,), (out,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))
    return out


def exp(x: Tensor) -> Tensor:
    ex = np.exp(x.data)
    out = Tensor(ex)
    _record("exp", (x,), (out,), lambda g: (g * ex,))
    return out


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = Tensor(np.logaddexp(xd.dtype.type(0.0), xd))
    _record("softplus", (x,), (out,), lambda g: (g * _sigmoid_np(xd),))
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    orig = x.shape
    _record("reshape", (x,), (out,), lambda g: (g.reshape(orig),))
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(np.transpose(x.data, axes)))
    inv = tuple(int(i) for i in np.argsort(axes))
    _record("transpose", (x,), (out,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))
    return out


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    _same_dtype(*parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    _record("concat", tuple(parts), (out,), bwd)
    return out


def take_rows(x: Tensor, idx: np.ndarray, unique: bool = False) -> Tensor:
    """Row gather from a 2-d tensor: out[i] = x[idx[i]].

    ``unique=True`` asserts idx is a permutation-like index (each row taken at
    most once), enabling a scatter-assign backward instead of scatter-add.
    """
    if x.ndim != 2:
        raise DimensionError(f"take_rows expects 2-d input, got {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(x.data[idx])
    n_rows = x.shape[0]

    def bwd(g):
        gx = np.zeros((n_rows, g.shape[1]), dtype=g.dtype)
        if unique:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    _record("take_rows", (x,), (out,), bwd)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype))
    shp = x.shape
    _record("sum_all", (x,), (out,), lambda g: (np.full(shp, g, dtype=g.dtype),))
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor(np.asarray(x.data.sum(dtype=np.float64) / n, dtype=x.data.dtype))
    shp = x.shape
    _record("mean_all", (x,), (out,), lambda g: (np.full(shp, g / n, dtype=g.dtype),))
    return out


# --------------------------------------------------------------------------- #
# Linear algebra / neural ops
# --------------------------------------------------------------------------- #

def linear(x: Tensor, w: Tensor, b: "Tensor | None" = None) -> Tensor:
    """y = x @ w (+ b) over the trailing dimension of x."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: x trailing dim {x.shape[-1]} != w rows {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    _same_dtype(*( (x, w, b) if b is not None else (x, w) ))
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y2 = x2 @ w.data
    if b is not None:
        y2 = y2 + b.data
    out = Tensor(y2.reshape(*lead, w.shape[1]))
    wd = w.data

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(x2.shape).reshape(*lead, x.shape[-1])
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    _record("linear", (x, w, b) if b is not None else (x, w), (out,), bwd)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing dimension to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError("layer_norm affine shapes must equal trailing dim")
    _same_dtype(x, gamma, beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)
    gd = gamma.data

    def bwd(g):
        gxhat = g * gd
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    _record("layer_norm", (x, gamma, beta), (out,), bwd)
    return out


def _resolve_pad(pad, kh, kw):
    if pad == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigurationError("same-size conv2d requires odd kernel extents")
        return kh // 2, kw // 2
    if isinstance(pad, int):
        return pad, pad
    ph, pw = pad
    return int(ph), int(pw)


def _im2col(xp: np.ndarray, kh: int, kw: int):
    # xp: (B, C, Hp, Wp) padded input -> (B, H'*W', C*kh*kw)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x: Tensor, k: Tensor, b: "Tensor | None" = None, pad="same",
           depthwise: bool = False) -> Tensor:
    """Zero-padded 2-d cross-correlation.

    x: (C,h,w) or (B,C,h,w); k: (Cout,Cin,kh,kw), or (C,1,kh,kw) when
    depthwise.  pad is "same" or explicit (ph, pw) ints.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or k.ndim != 4:
        raise DimensionError("conv2d expects 3/4-d input and 4-d kernel")
    bsz, cin, h, w = xd.shape
    cout, kcin, kh, kw = k.shape
    ph, pw = _resolve_pad(pad, kh, kw)
    if depthwise:
        if cout != cin or kcin != 1:
            raise DimensionError(
                f"depthwise conv needs kernel ({cin},1,kh,kw), got {k.shape}")
    elif kcin != cin:
        raise DimensionError(f"conv2d kernel channels {kcin} != input channels {cin}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d bias shape {b.shape} != ({cout},)")

    cols = None
    if depthwise:
        yd = kernels.depthwise_conv2d(xd, np.ascontiguousarray(k.data[:, 0]), ph, pw)
        ho, wo = yd.shape[2], yd.shape[3]
    else:
        xpad = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        cols, ho, wo = _im2col(xpad, kh, kw)
        wmat = k.data.reshape(cout, cin * kh * kw)
        yd = (cols @ wmat.T).transpose(0, 2, 1).reshape(bsz, cout, ho, wo)
    if b is not None:
        yd = yd + b.data[None, :, None, None]
    out = Tensor(yd[0] if squeeze else yd)

    kd = k.data

    def bwd(g):
        g4 = g[None] if squeeze else g
        g4 = np.ascontiguousarray(g4)
        if depthwise:
            krot = np.ascontiguousarray(kd[:, 0, ::-1, ::-1])
            gx = kernels.depthwise_conv2d(g4, krot, kh - 1 - ph, kw - 1 - pw)
            gk = kernels.depthwise_conv2d_wgrad(
                np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))), g4, kh, kw)[:, None]
        else:
            # input grad: full correlation with the rotated, channel-swapped kernel
            krot = np.ascontiguousarray(
                kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gpad = np.pad(g4, ((0, 0), (0, 0), (kh - 1 - ph, kh - 1 - ph),
                               (kw - 1 - pw, kw - 1 - pw)))
            gcols, _, _ = _im2col(gpad, kh, kw)
            gx = (gcols @ krot.reshape(cin, cout * kh * kw).T) \
                .transpose(0, 2, 1).reshape(bsz, cin, h, w)
            # weight grad reuses the im2col matrix saved from the forward pass
            g2 = g4.reshape(bsz, cout, ho * wo)
            gk = np.einsum("bop,bpk->ok", g2, cols, optimize=True) \
                .reshape(cout, cin, kh, kw)
        gb = g4.sum(axis=(0, 2, 3)) if b is not None else None
        gx = gx[0] if squeeze else gx
        return (gx, gk, gb) if b is not None else (gx, gk)

    _record("conv2d", (x, k, b) if b is not None else (x, k), (out,), bwd)
    return out


def bilinear_sample(x: Tensor, p) -> Tensor:
    """Bilinear interpolation of x: (C,h,w) at real point p=(y, x).

    Corners falling outside the grid contribute zero, so samples fully
    outside [-1,h]x[-1,w] return exactly 0. Differentiable w.r.t. x.
    """
    if x.ndim != 3:
        raise DimensionError(f"bilinear_sample expects (C,h,w), got {x.shape}")
    py, px = float(p[0]), float(p[1])
    c, h, w = x.shape
    y0, x0 = int(np.floor(py)), int(np.floor(px))
    wy, wx = py - y0, px - x0
    taps = [
        (y0, x0, (1 - wy) * (1 - wx)),
        (y0, x0 + 1, (1 - wy) * wx),
        (y0 + 1, x0, wy * (1 - wx)),
        (y0 + 1, x0 + 1, wy * wx),
    ]
    taps = [(yy, xx, wt) for yy, xx, wt in taps if 0 <= yy < h and 0 <= xx < w]
    acc = np.zeros(c, dtype=x.data.dtype)
    for yy, xx, wt in taps:
        acc += x.data.dtype.type(wt) * x.data[:, yy, xx]
    out = Tensor(acc)

    def bwd(g):
        gx = np.zeros_like(x.data)
        for yy, xx, wt in taps:
            gx[:, yy, xx] += g * gx.dtype.type(wt)
        return (gx,)

    _record("bilinear_sample", (x,), (out,), bwd)
    return out


# --------------------------------------------------------------------------- #
# Reductions over feature grids
# --------------------------------------------------------------------------- #

def global_avg_pool(x: Tensor) -> Tensor:
    """(D,h,w) -> (D,): arithmetic mean over spatial positions."""
    if x.ndim != 3:
        raise DimensionError(f"global_avg_pool expects (D,h,w), got {x.shape}")
    d, h, w = x.shape
    out = Tensor(x.data.mean(axis=(1, 2)))
    _record("global_avg_pool", (x,), (out,),
            lambda g: (np.broadcast_to(g[:, None, None] / (h * w), (d, h, w)).astype(g.dtype),))
    return out


def gap_frames(x: Tensor) -> Tensor:
    """(T,D,h,w) -> (T,D): per-frame global average pooling."""
    if x.ndim != 4:
        raise DimensionError(f"gap_frames expects (T,D,h,w), got {x.shape}")
    t, d, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))
    _record("gap_frames", (x,), (out,),
            lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), (t, d, h, w)).astype(g.dtype),))
    return out


def sum_over_frames(x: Tensor) -> Tensor:
    """(T,D,h,w) -> (D,h,w): elementwise sum over the frame axis."""
    if x.ndim != 4:
        raise DimensionError(f"sum_over_frames expects (T,D,h,w), got {x.shape}")
    t = x.shape[0]
    out = Tensor(x.data.sum(axis=0))
    _record("sum_over_frames", (x,), (out,),
            lambda g: (np.broadcast_to(g[None], (t,) + g.shape).astype(g.dtype),))
    return out


def scale_channels(x: Tensor, m: Tensor) -> Tensor:
    """(T,D,h,w) scaled by per-frame channel weights m: (T,D)."""
    if x.ndim != 4 or m.shape != x.shape[:2]:
        raise DimensionError(f"scale_channels: {x.shape} vs {m.shape}")
    _same_dtype(x, m)
    out = Tensor(x.data * m.data[:, :, None, None])
    xd, md = x.data, m.data
    _record("scale_channels", (x, m), (out,),
            lambda g: (g * md[:, :, None, None], (g * xd).sum(axis=(2, 3))))
    return out


def add_channel_map(x: Tensor, e: Tensor) -> Tensor:
    """Add a (D,h,w) map to every frame of (T,D,h,w)."""
    if x.ndim != 4 or e.shape != x.shape[1:]:
        raise DimensionError(f"add_channel_map: {x.shape} vs {e.shape}")
    _same_dtype(x, e)
    out = Tensor(x.data + e.data[None])
    _record("add_channel_map", (x, e), (out,), lambda g: (g, g.sum(axis=0)))
    return out


def add_frame_vec(x: Tensor, e: Tensor) -> Tensor:
    """Add a per-frame channel vector (T,D) at every spatial position of (T,D,h,w)."""
    if x.ndim != 4 or e.shape != x.shape[:2]:
        raise DimensionError(f"add_frame_vec: {x.shape} vs {e.shape}")
    _same_dtype(x, e)
    out = Tensor(x.data + e.data[:, :, None, None])
    _record("add_frame_vec", (x, e), (out,), lambda g: (g, g.sum(axis=(2, 3))))
    return out


def add_row_vec(x: Tensor, v: Tensor) -> Tensor:
    """(T,D) + per-row scalar v: (T,) broadcast across columns."""
    if x.ndim != 2 or v.shape != (x.shape[0],):
        raise DimensionError(f"add_row_vec: {x.shape} vs {v.shape}")
    _same_dtype(x, v)
    out = Tensor(x.data + v.data[:, None])
    _record("add_row_vec", (x, v), (out,), lambda g: (g, g.sum(axis=1)))
    return out


def repeat_middle(x: Tensor, d: int) -> Tensor:
    """(L,N) -> (L,d,N) by repetition along a new middle axis."""
    if x.ndim != 2:
        raise DimensionError(f"repeat_middle expects (L,N), got {x.shape}")
    out = Tensor(np.ascontiguousarray(np.broadcast_to(x.data[:, None, :],
                                                      (x.shape[0], d, x.shape[1]))))
    _record("repeat_middle", (x,), (out,), lambda g: (g.sum(axis=1),))
    return out


def affine_broadcast(s: Tensor, b: Tensor) -> Tensor:
    """(L,1) + (D,) -> (L,D): shared per-token scalar plus per-channel bias."""
    if s.ndim != 2 or s.shape[1] != 1 or b.ndim != 1:
        raise DimensionError(f"affine_broadcast expects (L,1) and (D,), got {s.shape}, {b.shape}")
    _same_dtype(s, b)
    out = Tensor(s.data + b.data[None, :])
    _record("affine_broadcast", (s, b), (out,),
            lambda g: (g.sum(axis=1, keepdims=True), g.sum(axis=0)))
    return out


# --------------------------------------------------------------------------- #
# Modulated deformable convolution (fused kernel op)
# --------------------------------------------------------------------------- #

def _dcn_geometry(off: np.ndarray, kh: int, kw: int, h: int, w: int):
    """Bilinear corner indices/weights for every (frame, tap, y, x) position.

    Corners falling outside the grid get zero weight (and a zero validity
    flag), which realizes the zero-extension sampling convention.
    """
    t = off.shape[0]
    k2 = kh * kw
    taps = np.arange(k2)
    ry = (taps // kw - kh // 2).astype(off.dtype)
    rx = (taps % kw - kw // 2).astype(off.dtype)
    ys = np.arange(h, dtype=off.dtype)
    xs = np.arange(w, dtype=off.dtype)
    py = ys[None, None, :, None] + ry[None, :, None, None] + off[:, 0::2]
    px = xs[None, None, None, :] + rx[None, :, None, None] + off[:, 1::2]
    y0f = np.floor(py)
    x0f = np.floor(px)
    wy = py - y0f
    wx = px - x0f
    y0 = y0f.astype(np.int64)
    x0 = x0f.astype(np.int64)
    vy0 = (y0 >= 0) & (y0 < h)
    vy1 = (y0 + 1 >= 0) & (y0 + 1 < h)
    vx0 = (x0 >= 0) & (x0 < w)
    vx1 = (x0 + 1 >= 0) & (x0 + 1 < w)
    vmask = np.stack([vy0 & vx0, vy0 & vx1, vy1 & vx0, vy1 & vx1], axis=2) \
        .astype(off.dtype)
    wgt = np.stack([(1 - wy) * (1 - wx), (1 - wy) * wx,
                    wy * (1 - wx), wy * wx], axis=2).astype(off.dtype) * vmask
    iy0 = np.clip(y0, 0, h - 1).astype(np.int32)
    ix0 = np.clip(x0, 0, w - 1).astype(np.int32)
    return (np.ascontiguousarray(iy0), np.ascontiguousarray(ix0),
            np.ascontiguousarray(wgt), np.ascontiguousarray(wy.astype(off.dtype)),
            np.ascontiguousarray(wx.astype(off.dtype)), np.ascontiguousarray(vmask))


def deform_conv2d(x: Tensor, offsets: Tensor, modulation: Tensor,
                  weight: Tensor, bias: "Tensor | None" = None) -> Tensor:
    """Modulated deformable convolution over frames.

    x: (T,C,h,w); offsets: (T,2*K2,h,w) as (dy,dx) per tap; modulation:
    (T,K2,h,w); weight: (Cout,C,kh,kw) with K2 = kh*kw. Sampling uses
    zero-extended bilinear interpolation. Differentiable w.r.t. all inputs.
    """
    if x.ndim != 4:
        raise DimensionError(f"deform_conv2d expects (T,C,h,w), got {x.shape}")
    t, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    k2 = kh * kw
    if cin != c:
        raise DimensionError("deform_conv2d weight channels mismatch")
    if offsets.shape != (t, 2 * k2, h, w):
        raise DimensionError(f"offsets shape {offsets.shape} != {(t, 2 * k2, h, w)}")
    if modulation.shape != (t, k2, h, w):
        raise DimensionError(f"modulation shape {modulation.shape} != {(t, k2, h, w)}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError("deform_conv2d bias shape mismatch")

    xd = x.data
    mod = modulation.data
    iy0, ix0, wgt, wy, wx, vmask = _dcn_geometry(offsets.data, kh, kw, h, w)
    # bilinear samples with the modulation folded into the corner weights
    m_samples = kernels.dcn_sample(xd, iy0, ix0, wgt * mod[:, :, None])
    wmat = weight.data.reshape(cout, cin, k2).transpose(0, 2, 1).reshape(cout, k2 * cin)
    feat = m_samples.reshape(t, k2 * cin, h * w)
    yd = np.matmul(wmat[None], feat).reshape(t, cout, h, w)
    if bias is not None:
        yd = yd + bias.data[None, :, None, None]
    out = Tensor(yd)

    def bwd(g):
        g3 = np.ascontiguousarray(g.reshape(t, cout, h * w))
        gw = np.einsum("top,tkp->ok", g3, feat, optimize=True) \
            .reshape(cout, k2, cin).transpose(0, 2, 1).reshape(cout, cin, kh, kw)
        gfeat = np.ascontiguousarray(
            np.matmul(wmat.T[None], g3).reshape(t, k2, cin, h, w))
        gx = kernels.dcn_input_grad(gfeat, mod, iy0, ix0, wgt, h, w)
        goff, gmod = kernels.dcn_offset_mod_grad(
            xd, gfeat, mod, iy0, ix0, wy, wx, vmask)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        gk = np.ascontiguousarray(gw)
        if bias is not None:
            return gx, goff, gmod, gk, gb
        return gx, goff, gmod, gk

    ins = (x, offsets, modulation, weight) + ((bias,) if bias is not None else ())
    _record("deform_conv2d", ins, (out,), bwd)
    return out


def pad_spatial(x: Tensor, hp: int, wp: int) -> Tensor:
    """Zero-pad the bottom/right spatial edges of (T,D,h,w) to (T,D,hp,wp)."""
    t, d, h, w = x.shape
    if hp < h or wp < w:
        raise DimensionError(f"pad_spatial target {(hp, wp)} smaller than {(h, w)}")
    out = Tensor(np.pad(x.data, ((0, 0), (0, 0), (0, hp - h), (0, wp - w))))
    _record("pad_spatial", (x,), (out,),
            lambda g: (np.ascontiguousarray(g[:, :, :h, :w]),))
    return out


def crop_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """Crop (T,D,hp,wp) back to (T,D,h,w) from the top-left corner."""
    t, d, hp, wp = x.shape
    if h > hp or w > wp:
        raise DimensionError(f"crop_spatial target {(h, w)} larger than {(hp, wp)}")
    out = Tensor(np.ascontiguousarray(x.data[:, :, :h, :w]))

    def bwd(g):
        gx = np.zeros((t, d, hp, wp), dtype=g.dtype)
        gx[:, :, :h, :w] = g
        return (gx,)

    _record("crop_spatial", (x,), (out,), bwd)
    return out


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channel slice of (T,C,h,w) -> (T,stop-start,h,w)."""
    t, c, h, w = x.shape
    if not (0 <= start < stop <= c):
        raise DimensionError(f"slice_channels [{start}:{stop}] out of range for C={c}")
    out = Tensor(np.ascontiguousarray(x.data[:, start:stop]))

    def bwd(g):
        gx = np.zeros((t, c, h, w), dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    _record("slice_channels", (x,), (out,), bwd)
    return out


# --------------------------------------------------------------------------- #
# Finite differences
# --------------------------------------------------------------------------- #

def finite_diff_check(f, x: Tensor, eps: float = 1e-5, n_directions: int = 4,
                      rng: "np.random.Generator | None" = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a Tensor to a scalar Tensor. The check compares the analytic
    directional derivative <grad, v> against (f(x+eps*v)-f(x-eps*v))/(2*eps)
    for ``n_directions`` random unit directions (a Jacobian-vector probe).
    """
    rng = rng or np.random.default_rng(0)
    leaf = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(leaf)
    if y.data.size != 1:
        raise ContractError("finite_diff_check requires a scalar-valued function")
    if not np.isfinite(y.item()):
        raise NumericsError("non-finite function value at the check point")
    tape.backward(y)
    g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    worst = 0.0
    for _ in range(max(1, n_directions)):
        v = rng.standard_normal(x.shape)
        v /= max(np.linalg.norm(v), 1e-12)
        xp = Tensor(x.data + eps * v.astype(x.data.dtype))
        xm = Tensor(x.data - eps * v.astype(x.data.dtype))
        fp = f(xp).item()
        fm = f(xm).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericsError("non-finite function value during finite differencing")
        fd = (fp - fm) / (2.0 * eps)
        an = float((g * v).sum())
        denom = max(abs(fd), abs(an), 1e-8)
        worst = max(worst, abs(fd - an) / denom)
    return worst


def finite_diff_check_params(f, params: "list[Tensor]", eps: float = 1e-5,
                             n_directions: int = 2,
                             rng: "np.random.Generator | None" = None) -> float:
    """Directional finite-difference check of a scalar f() against the grads
    already accumulated on ``params`` (caller runs the tape). Returns the max
    relative error across parameters."""
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        for _ in range(max(1, n_directions)):
            v = rng.standard_normal(p.shape)
            v /= max(np.linalg.norm(v), 1e-12)
            base = p.data.copy()
            p.data = base + eps * v.astype(base.dtype)
            fp = f()
            p.data = base - eps * v.astype(base.dtype)
            fm = f()
            p.data = base
            fd = (fp - fm) / (2.0 * eps)
            an = float((g * v).sum())
            denom = max(abs(fd), abs(an), 1e-8)
            worst = max(worst, abs(fd - an) / denom)
    return worst


# --------------------------------------------------------------------------- #
# Serialization: u32 rank, u32 extents, little-endian f32 payload
# --------------------------------------------------------------------------- #

def write_tensor_blob(fp, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    fp.write(struct.pack("<I", arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fp.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor_blob(fp) -> np.ndarray:
    rank = struct.unpack("<I", fp.read(4))[0]
    shape = struct.unpack(f"<{rank}I", fp.read(4 * rank)) if rank else ()
    n = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fp.read(4 * n), dtype="<f4").reshape(shape)
    return data.astype(np.float32)
