"""Dense tensors with tape-based reverse-mode differentiation.

Ops executed while a :class:`Tape` is active are recorded in creation
order, which is already a topological order, so :meth:`Tape.backward` is a
single reverse sweep. Outside a tape the same ops run as plain numpy.

Broadcasting is deliberately narrow: operands of ``add``/``mul`` must have
equal shapes, or the right operand is a 1-D bias matching the trailing
axis, or a Python scalar.
"""
from __future__ import annotations

import struct
import threading
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

DEFAULT_DTYPE = np.float32
_local = threading.local()


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail_item(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _fail_item(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    arr = np.array(data, dtype=dtype or DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad, name=name)


class Tape:
    """Records op nodes ``(output, inputs, backward_fn)`` during a forward pass."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def backward(self, loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Gradients of scalar ``loss``; also stored on each leaf's ``.grad``.

        When ``leaves`` is given the returned map covers exactly those tensors,
        with zeros for any the loss does not depend on.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError("loss is not tracked on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = set()
        for out, inputs, fn in reversed(self.nodes):
            produced.add(id(out))
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=t.data.dtype)
                if gi.shape != t.shape:
                    raise ShapeError(f"gradient shape {gi.shape} for input {t.shape}")
                if id(t) in grads:
                    grads[id(t)] = grads[id(t)] + gi
                else:
                    grads[id(t)] = gi
        if leaves is None:
            leaves = [t for _, ins, _ in self.nodes for t in ins if t.requires_grad and id(t) not in produced]
            leaves = list({id(t): t for t in leaves}.values())
        result = {}
        for t in leaves:
            g = grads.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g
            result[t] = g
        return result


def current_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    tape = current_tape()
    if tape is None:
        raise RuntimeError("backward() called outside an active Tape")
    return tape.backward(loss, leaves)


def record_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of a custom op.

    ``backward_fn(grad_out)`` returns one gradient (or None) per input.
    """
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.nodes.append((out, tuple(inputs), backward_fn))
    return out


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _sum64(x: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    return np.sum(x, axis=axis, dtype=np.float64, keepdims=keepdims).astype(x.dtype)


def _bias_mode(a: Tensor, b) -> str:
    if not isinstance(b, Tensor):
        return "scalar" if np.ndim(b) == 0 else "const"
    if b.shape == a.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return "bias"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_bias(g: np.ndarray) -> np.ndarray:
    return _sum64(g.reshape(-1, g.shape[-1]), axis=0)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    mode = _bias_mode(a, b)
    if mode == "const" and np.shape(b) != a.shape:
        raise ShapeError(f"incompatible shapes {a.shape} and {np.shape(b)}")
    bt = b if isinstance(b, Tensor) else None
    bval = b.data if bt is not None else np.asarray(b, dtype=a.dtype)

    def bw(g):
        gb = None
        if bt is not None:
            gb = _reduce_bias(g) if mode == "bias" else g
        return g, gb

    inputs = (a, bt) if bt is not None else (a,)
    return record_op(a.data + bval, inputs, bw)


def neg(a: Tensor) -> Tensor:
    return record_op(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    mode = _bias_mode(a, b)
    if mode == "const" and np.shape(b) != a.shape:
        raise ShapeError(f"incompatible shapes {a.shape} and {np.shape(b)}")
    bt = b if isinstance(b, Tensor) else None
    bval = b.data if bt is not None else np.asarray(b, dtype=a.dtype)
    av = a.data

    def bw(g):
        ga = g * bval
        gb = None
        if bt is not None:
            gb = g * av
            if mode == "bias":
                gb = _reduce_bias(gb)
        return ga, gb

    inputs = (a, bt) if bt is not None else (a,)
    return record_op(av * bval, inputs, bw)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return record_op(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return record_op(np.log(x), (a,), lambda g: (g / x,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return record_op(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    return record_op(y, (a,), lambda g: (g * y * (1.0 - y),))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return record_op(y, (a,), lambda g: (np.where(y > 0, g / (2.0 * np.where(y > 0, y, 1.0)), 0.0),))


def l2norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; subgradient 0 where the norm is exactly 0."""
    x = a.data
    n = np.sqrt(_sum64(x * x, axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)

    def bw(g):
        return (np.expand_dims(g, axis) * np.where(n > 0, x / safe, 0.0),)

    return record_op(np.squeeze(n, axis=axis), (a,), bw)


def prelu(x: Tensor, slope: Tensor, axis: int = 1) -> Tensor:
    """max(0, x) + a * min(0, x); ``slope`` has one entry or one per ``axis`` position."""
    xv, av = x.data, slope.data
    if av.size == 1:
        a_b = av.reshape((1,) * xv.ndim)
    else:
        ax = axis % xv.ndim
        if av.shape != (xv.shape[ax],):
            raise ShapeError(f"prelu slope {av.shape} does not match axis {ax} of {xv.shape}")
        shape = [1] * xv.ndim
        shape[ax] = av.size
        a_b = av.reshape(shape)
    pos = xv > 0

    def bw(g):
        gx = g * np.where(pos, 1.0, a_b)
        gneg = g * np.where(pos, 0.0, xv)
        if av.size == 1:
            ga = _sum64(gneg).reshape(av.shape)
        else:
            other = tuple(i for i in range(xv.ndim) if i != axis % xv.ndim)
            ga = _sum64(gneg, axis=other)
        return gx, ga

    return record_op(np.where(pos, xv, a_b * xv).astype(xv.dtype), (x, slope), bw)


def dropout(x: Tensor, rate: float, train: bool, seed: int | None = None) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``rate`` is 0."""
    if not train or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = np.random.default_rng(seed).random(x.shape) >= rate
    scale = (keep / (1.0 - rate)).astype(x.dtype)
    return record_op(x.data * scale, (x,), lambda g: (g * scale,))


# -- shape ---------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from None
    return record_op(y, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if not axes else tuple(axes)
    inv = tuple(np.argsort(axes))
    return record_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def slice_(a: Tensor, key) -> Tensor:
    y = a.data[key]
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not (isinstance(k, (slice, int)) or k is Ellipsis):
            raise TypeError("only basic slicing is supported")
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[key] = g
        return (full,)

    return record_op(np.array(y, copy=True), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: {ref} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return record_op(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


# -- reductions ----------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    y = _sum64(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.dtype),)

    return record_op(y, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([shape[i] for i in axes]))
    y = (np.sum(a.data, axis=axis, dtype=np.float64, keepdims=keepdims) / n).astype(a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).astype(a.dtype),)

    return record_op(y, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return record_op(y, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    y = x - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return record_op(y, (a,), bw)


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., k) @ (k, n) -> (..., n); a 1-D right operand is treated as (k, 1) and squeezed."""
    b = _as_tensor(b, a)
    vec = b.ndim == 1
    bm = b.data[:, None] if vec else b.data
    if b.ndim > 2 or a.ndim < 1 or a.shape[-1] != bm.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape}")
    av = a.data
    y = av @ bm
    if vec:
        y = y[..., 0]

    def bw(g):
        gm = g[..., None] if vec else g
        ga = gm @ bm.T
        gb = av.reshape(-1, av.shape[-1]).T @ gm.reshape(-1, bm.shape[1])
        return ga, (gb[:, 0] if vec else gb)

    return record_op(y, (a, b), bw)


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """x (B, Cin, L), w (Cout, Cin, K) -> (B, Cout, (L + 2p - K) // stride + 1)."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d input {x.shape} and weight {w.shape}")
    B, Cin, L = x.shape
    Cout, _, K = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    Lp = xp.shape[2]
    if Lp < K:
        raise ShapeError(f"conv1d input length {L} (padded {Lp}) shorter than kernel {K}")
    win = sliding_window_view(xp, K, axis=2)[:, :, ::stride]  # B, Cin, Lout, K
    Lout = win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * Lout, Cin * K)
    wm = w.data.reshape(Cout, Cin * K)
    y = (cols @ wm.T).reshape(B, Lout, Cout)
    if bias is not None:
        y = y + bias.data
    y = np.ascontiguousarray(y.transpose(0, 2, 1))

    def bw(g):
        g2 = g.transpose(0, 2, 1).reshape(B * Lout, Cout)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ wm).reshape(B, Lout, Cin, K)
        gxp = np.zeros((B, Cin, Lp), dtype=x.dtype)
        for k in range(K):
            gxp[:, :, k:k + stride * (Lout - 1) + 1:stride] += gcols[:, :, :, k].transpose(0, 2, 1)
        gx = gxp[:, :, padding:padding + L] if padding else gxp
        gb = _sum64(g, axis=(0, 2)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, w, bias) if bias is not None else (x, w)
    return record_op(y, inputs, bw)


# -- normalisation ---------------------------------------------------------------

def _normalize_rows(x2: np.ndarray, eps: float):
    """Zero-mean unit-variance rows (population variance); returns xhat, 1/std."""
    mu = np.mean(x2, axis=1, dtype=np.float64, keepdims=True)
    var = np.mean((x2 - mu) ** 2, axis=1, dtype=np.float64, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return ((x2 - mu) * inv).astype(x2.dtype), inv.astype(x2.dtype)


def _normalize_rows_bw(gxhat: np.ndarray, xhat: np.ndarray, inv: np.ndarray) -> np.ndarray:
    m1 = np.mean(gxhat, axis=1, dtype=np.float64, keepdims=True)
    m2 = np.mean(gxhat * xhat, axis=1, dtype=np.float64, keepdims=True)
    return (inv * (gxhat - m1 - xhat * m2)).astype(gxhat.dtype)


def group_norm(x: Tensor, groups: int, eps: float = 1e-5,
               weight: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    """Normalise (B, C, ...) over each group of C/groups channels and all trailing positions."""
    B, C = x.shape[:2]
    if C % groups:
        raise ShapeError(f"{C} channels not divisible into {groups} groups")
    shape = x.shape
    xhat, inv = _normalize_rows(x.data.reshape(B * groups, -1), eps)
    xhat = xhat.reshape(shape)
    cshape = (1, C) + (1,) * (x.ndim - 2)
    y = xhat
    if weight is not None:
        y = y * weight.data.reshape(cshape)
    if bias is not None:
        y = y + bias.data.reshape(cshape)
    red = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        gxhat = g * weight.data.reshape(cshape) if weight is not None else g
        gx = _normalize_rows_bw(gxhat.reshape(B * groups, -1), xhat.reshape(B * groups, -1), inv)
        out = [gx.reshape(shape)]
        if weight is not None:
            out.append(_sum64(g * xhat, axis=red))
        if bias is not None:
            out.append(_sum64(g, axis=red))
        return tuple(out)

    inputs = (x,) + tuple(t for t in (weight, bias) if t is not None)
    return record_op(y.astype(x.dtype), inputs, bw)


def weight_standardize(w: Tensor, eps: float = 1e-5) -> Tensor:
    """Per output channel (axis 0): zero mean, unit variance over the fan-in."""
    shape = w.shape
    xhat, inv = _normalize_rows(w.data.reshape(shape[0], -1), eps)

    def bw(g):
        return (_normalize_rows_bw(g.reshape(shape[0], -1), xhat, inv).reshape(shape),)

    return record_op(xhat.reshape(shape), (w,), bw)


# -- recurrent -------------------------------------------------------------------

def gru_scan(xp: Tensor, w_hh: Tensor, b_hh: Tensor, reverse: bool = False) -> Tensor:
    """One GRU direction over time.

    ``xp`` (B, T, 3H) holds the precomputed input projections W_ih x_t + b_ih
    in gate order (reset, update, candidate). Returns hidden states (B, T, H)
    at their original time positions, with a zero initial state.
    """
    B, T, H3 = xp.shape
    H = H3 // 3
    if H3 != 3 * H or w_hh.shape != (H3, H) or b_hh.shape != (H3,):
        raise ShapeError(f"gru_scan xp {xp.shape}, w_hh {w_hh.shape}, b_hh {b_hh.shape}")
    X, W, bh = xp.data, w_hh.data, b_hh.data
    dt = X.dtype
    order = range(T - 1, -1, -1) if reverse else range(T)
    hs = np.zeros((B, T, H), dtype=dt)
    prev = np.zeros((B, T, H), dtype=dt)
    R = np.empty((B, T, H), dtype=dt)
    Z = np.empty((B, T, H), dtype=dt)
    N = np.empty((B, T, H), dtype=dt)
    HN = np.empty((B, T, H), dtype=dt)
    h = np.zeros((B, H), dtype=dt)
    for t in order:
        gh = h @ W.T + bh
        x = X[:, t]
        r = expit(x[:, :H] + gh[:, :H])
        z = expit(x[:, H:2 * H] + gh[:, H:2 * H])
        hn = gh[:, 2 * H:]
        n = np.tanh(x[:, 2 * H:] + r * hn)
        prev[:, t] = h
        h = (1.0 - z) * n + z * h
        hs[:, t], R[:, t], Z[:, t], N[:, t], HN[:, t] = h, r, z, n, hn

    def bw(g):
        dX = np.zeros_like(X)
        dW = np.zeros((H3, H), dtype=np.float64)
        db = np.zeros(H3, dtype=np.float64)
        dh = np.zeros((B, H), dtype=dt)
        for t in reversed(order):
            dh = dh + g[:, t]
            r, z, n, hn, hp = R[:, t], Z[:, t], N[:, t], HN[:, t], prev[:, t]
            dn = dh * (1.0 - z)
            dz = dh * (hp - n)
            da_n = dn * (1.0 - n * n)
            da_r = da_n * hn * r * (1.0 - r)
            da_z = dz * z * (1.0 - z)
            dgh = np.concatenate([da_r, da_z, da_n * r], axis=1)
            dX[:, t] = np.concatenate([da_r, da_z, da_n], axis=1)
            dW += dgh.T @ hp
            db += dgh.sum(axis=0)
            dh = dh * z + dgh @ W
        return dX, dW.astype(dt), db.astype(dt)

    return record_op(hs, (xp, w_hh, b_hh), bw)


# -- gradient checking -------------------------------------------------------------

def numeric_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    """Central finite differences of scalar ``fn`` in float64."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + h
            fp = fn(*[Tensor(x) for x in arrays]).item()
            a[idx] = orig - h
            fm = fn(*[Tensor(x) for x in arrays]).item()
            a[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def analytic_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*ts)
        grads = tape.backward(loss, ts)
    return [grads[t] for t in ts]


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3) -> float:
    """Max over inputs of ||analytic - numeric||_inf / max(||numeric||_inf, 1e-8)."""
    worst = 0.0
    for a, n in zip(analytic_grad(fn, arrays), numeric_grad(fn, arrays, h)):
        scale = max(np.max(np.abs(n)) if n.size else 0.0, 1e-8)
        err = np.max(np.abs(a - n)) / scale if n.size else 0.0
        worst = max(worst, float(err))
    return worst


# -- checkpoints -----------------------------------------------------------------

CKPT_MAGIC = b"TADCKPT\n"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, named: dict[str, Tensor | np.ndarray]) -> None:
    """Records of (name, shape, LE float32 payload) after a magic + version header."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(named)))
        for name in sorted(named):
            arr = named[name].data if isinstance(named[name], Tensor) else np.asarray(named[name])
            key = name.encode("utf-8")
            fh.write(struct.pack("<H", len(key)) + key)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if not blob.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a tensor checkpoint")
    pos = len(CKPT_MAGIC)
    version, count = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + klen].decode("utf-8")
        pos += klen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    return out
