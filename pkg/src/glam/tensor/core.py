"""Dense tensors over numpy with a reverse-mode gradient tape.

Operations record a node on the active :class:`Tape` when any input requires a
gradient. Outside a tape nothing is recorded, which is how inference and
imagination rollouts run without bookkeeping cost.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation's rules."""


class NumericGuardError(FloatingPointError):
    """Non-finite value encountered while strict mode is on."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, double backward, ...)."""


class _Settings:
    dtype = np.float32
    strict = False
    tape: "Tape | None" = None


_S = _Settings()


def get_dtype():
    return _S.dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype (e.g. ``np.float64`` for grad checks)."""
    prev = _S.dtype
    _S.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _S.dtype = prev


def set_precision(dtype) -> None:
    _S.dtype = np.dtype(dtype).type


@contextlib.contextmanager
def strict_mode(enabled: bool = True):
    prev = _S.strict
    _S.strict = enabled
    try:
        yield
    finally:
        _S.strict = prev


def is_strict() -> bool:
    return _S.strict


@contextlib.contextmanager
def no_grad():
    """Suspend recording on the active tape."""
    prev = _S.tape
    _S.tape = None
    try:
        yield
    finally:
        _S.tape = prev


class TapeNode:
    __slots__ = ("op", "out", "inputs", "backward", "tape")

    def __init__(self, op, out, inputs, backward, tape):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.tape = tape


class Tape:
    """Records primitive applications for one training step.

    Use as a context manager; call :meth:`backward` once on a scalar loss.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.consumed = False
        self._prev = None

    def __enter__(self):
        if self.consumed:
            raise TapeError("tape already consumed")
        self._prev = _S.tape
        _S.tape = self
        return self

    def __exit__(self, *exc):
        _S.tape = self._prev
        self._prev = None
        return False

    def _run(self, loss: "Tensor") -> dict[int, tuple["Tensor", np.ndarray]]:
        if self.consumed:
            raise TapeError("backward called twice on one tape")
        node = loss.tape_node
        if node is None or node.tape is not self:
            raise TapeError("loss was not produced under this tape")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        for nd in reversed(self.nodes):
            g = grads.pop(id(nd.out), None)
            if g is None:
                continue
            for t, gi in zip(nd.inputs, nd.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t.tape_node is None:
                    k = id(t)
                    if k in leaves:
                        leaves[k] = (t, leaves[k][1] + gi)
                    else:
                        leaves[k] = (t, gi)
                else:
                    k = id(t)
                    grads[k] = grads[k] + gi if k in grads else gi
        self.consumed = True
        self.nodes = []
        return leaves

    def backward(self, loss: "Tensor", params: Iterable["Tensor"] | None = None) -> dict[str, np.ndarray]:
        """Return ``{parameter name: gradient}``.

        When ``params`` is given every listed parameter appears in the map,
        with a zero gradient if the loss does not reach it.
        """
        leaves = self._run(loss)
        out: dict[str, np.ndarray] = {}
        for t, g in leaves.values():
            name = getattr(t, "name", None)
            if name is not None:
                out[name] = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
        if params is not None:
            for p in params:
                if p.name not in out:
                    out[p.name] = np.zeros_like(p.data)
        return out

    def grad(self, loss: "Tensor", inputs: Sequence["Tensor"]) -> list[np.ndarray]:
        """Gradients of ``loss`` wrt arbitrary leaf tensors (zeros if unreached)."""
        leaves = self._run(loss)
        res = []
        for t in inputs:
            hit = leaves.get(id(t))
            res.append(np.zeros_like(t.data) if hit is None else np.asarray(hit[1]).reshape(t.shape))
        return res


def backward(loss: "Tensor", params: Iterable["Tensor"] | None = None) -> dict[str, np.ndarray]:
    """Run reverse mode on the tape that produced ``loss``."""
    if loss.tape_node is None:
        raise TapeError("loss carries no tape node; was it computed under an active Tape?")
    return loss.tape_node.tape.backward(loss, params)


class Tensor:
    """Immutable n-d array, optionally participating in the active tape."""

    __slots__ = ("data", "requires_grad", "tape_node", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _S.dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.tape_node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return self.shape[0]

    # operators
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _guard(op: str, inputs: Sequence[Tensor]) -> None:
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise NumericGuardError(f"{op}: non-finite input of shape {t.shape}")


def record(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op``; add a tape node if needed.

    ``bwd(g)`` returns one gradient (or None) per input.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.tape_node = None
    tape = _S.tape
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                node = TapeNode(op, out, inputs, bwd, tape)
                tape.nodes.append(node)
                out.tape_node = node
                out.requires_grad = True
                break
    return out


def _prep(op: str, *xs) -> tuple[Tensor, ...]:
    ts = tuple(as_tensor(x) for x in xs)
    if _S.strict:
        _guard(op, ts)
    return ts


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(op: str, fn, a, b) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as err:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from err


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _prep("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", _binary("add", np.add, a, b), (a, b),
                  lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _prep("sub", a, b)
    sa, sb = a.shape, b.shape
    return record("sub", _binary("sub", np.subtract, a, b), (a, b),
                  lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _prep("mul", a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return record("mul", _binary("mul", np.multiply, a, b), (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _prep("div", a, b)
    ad, bd = a.data, b.data
    out = _binary("div", np.divide, a, b)

    def bwd(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return record("div", out, (a, b), bwd)


def neg(x) -> Tensor:
    (x,) = _prep("neg", x)
    return record("neg", -x.data, (x,), lambda g: (-g,))


def power(x, p: float) -> Tensor:
    (x,) = _prep("power", x)
    xd = x.data
    return record("power", xd ** p, (x,), lambda g: (g * p * xd ** (p - 1),))


def exp(x) -> Tensor:
    (x,) = _prep("exp", x)
    out = np.exp(x.data)
    return record("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    (x,) = _prep("log", x)
    xd = x.data
    return record("log", np.log(xd), (x,), lambda g: (g / xd,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow warnings
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def sigmoid(x) -> Tensor:
    (x,) = _prep("sigmoid", x)
    s = _sigmoid(x.data)
    return record("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def softplus(x) -> Tensor:
    (x,) = _prep("softplus", x)
    xd = x.data
    return record("softplus", np.logaddexp(0, xd).astype(xd.dtype, copy=False), (x,),
                  lambda g: (g * _sigmoid(xd),))


def silu(x) -> Tensor:
    (x,) = _prep("silu", x)
    xd = x.data
    s = _sigmoid(xd)
    return record("silu", xd * s, (x,), lambda g: (g * (s * (1 + xd * (1 - s))),))


def tanh(x) -> Tensor:
    (x,) = _prep("tanh", x)
    out = np.tanh(x.data)
    return record("tanh", out, (x,), lambda g: (g * (1 - out * out),))


def relu(x) -> Tensor:
    (x,) = _prep("relu", x)
    xd = x.data
    return record("relu", np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),))


def clamp_min(x, floor: float) -> Tensor:
    """``max(floor, x)``; the gradient is zero wherever the floor is active."""
    (x,) = _prep("clamp_min", x)
    xd = x.data
    return record("clamp_min", np.maximum(xd, floor).astype(xd.dtype, copy=False), (x,),
                  lambda g: (g * (xd > floor),))


def stop_gradient(x) -> Tensor:
    """Same values, detached from the tape."""
    x = as_tensor(x)
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.requires_grad = False
    out.tape_node = None
    return out


# ----------------------------------------------------------------- reductions


def sum_(x, axis=None, keepdims=False) -> Tensor:
    (x,) = _prep("sum", x)
    shape = x.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return record("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bwd)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), np.asarray(1.0 / n, dtype=x.dtype))


def softmax(x, axis: int = -1) -> Tensor:
    (x,) = _prep("softmax", x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return record("softmax", s, (x,),
                  lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    (x,) = _prep("log_softmax", x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", out, (x,), bwd)


def layer_norm(x, gain_offset=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; scale is ``1 + gain_offset`` so zero init is identity."""
    ins = [x] + [t for t in (gain_offset, bias) if t is not None]
    ts = _prep("layer_norm", *ins)
    x = ts[0]
    g_off = ts[1] if gain_offset is not None else None
    b = ts[-1] if bias is not None else None
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    scale = 1 + g_off.data if g_off is not None else None
    out = xhat * scale if scale is not None else xhat
    if b is not None:
        out = out + b.data
    if g_off is not None and g_off.shape[-1] != x.shape[-1]:
        raise ShapeError(f"layer_norm: gain shape {g_off.shape} vs input {x.shape}")

    def bwd(g):
        gx_hat = g * scale if scale is not None else g
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        res = [gx]
        lead = tuple(range(g.ndim - 1))
        if g_off is not None:
            res.append((g * xhat).sum(axis=lead))
        if b is not None:
            res.append(g.sum(axis=lead))
        return tuple(res)

    return record("layer_norm", out, tuple(ts), bwd)


# ------------------------------------------------------------------ structure


def matmul(a, b) -> Tensor:
    a, b = _prep("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError as err:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from err

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return record("matmul", out, (a, b), bwd)


def reshape(x, shape) -> Tensor:
    (x,) = _prep("reshape", x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: cannot reshape {old} into {shape}") from err
    return record("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    (x,) = _prep("transpose", x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def broadcast_to(x, shape) -> Tensor:
    (x,) = _prep("broadcast", x)
    old = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as err:
        raise ShapeError(f"broadcast: cannot broadcast {old} to {shape}") from err
    return record("broadcast", out, (x,), lambda g: (unbroadcast(g, old),))


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x, idx) -> Tensor:
    (x,) = _prep("slice", x)
    shape, dtype = x.shape, x.dtype
    adv = _is_advanced(idx)

    def bwd(g):
        gx = np.zeros(shape, dtype=dtype)
        if adv:
            np.add.at(gx, idx, g)
        else:
            gx[idx] = g
        return (gx,)

    return record("slice", x.data[idx], (x,), bwd)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    ts = _prep("concat", *xs)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from err
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return record("concat", out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    ts = _prep("stack", *xs)
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as err:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in ts]}") from err
    n = len(ts)
    return record("stack", out, ts,
                  lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def one_hot(indices, n: int) -> Tensor:
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"one_hot: index out of range [0, {n})")
    out = np.zeros(idx.shape + (n,), dtype=_S.dtype)
    np.put_along_axis(out, idx[..., None].astype(np.int64), 1.0, axis=-1)
    return Tensor(out)


def depthwise_conv1d(x, w) -> Tensor:
    """Valid depthwise convolution over axis 1: ``x (B, Lp, C)``, ``w (K, C)`` -> ``(B, Lp-K+1, C)``.

    Callers pre-pad on the left for causal use.
    """
    x, w = _prep("depthwise_conv1d", x, w)
    K = w.shape[0]
    if x.ndim != 3 or w.ndim != 2 or x.shape[-1] != w.shape[-1] or x.shape[1] < K:
        raise ShapeError(f"depthwise_conv1d: bad shapes {x.shape}, {w.shape}")
    xd, wd = x.data, w.data
    L = xd.shape[1] - K + 1
    out = xd[:, 0:L] * wd[0]
    for k in range(1, K):
        out = out + xd[:, k:k + L] * wd[k]

    def bwd(g):
        gx = gw = None
        if x.requires_grad:
            gx = np.zeros_like(xd)
            for k in range(K):
                gx[:, k:k + L] += g * wd[k]
        if w.requires_grad:
            gw = np.stack([(g * xd[:, k:k + L]).sum(axis=(0, 1)) for k in range(K)])
        return gx, gw

    return record("depthwise_conv1d", out, (x, w), bwd)


def linear_scan(a, b, h0=None, method: str = "parallel") -> Tensor:
    """``h_t = a_t * h_{t-1} + b_t`` along axis 1, ``h_{-1} = h0`` (zero if None).

    ``method`` is ``"parallel"`` (Hillis-Steele associative scan) or
    ``"sequential"``. The backward pass is the same recurrence run in reverse.
    """
    ins = (a, b) if h0 is None else (a, b, h0)
    ts = _prep("linear_scan", *ins)
    a, b = ts[0], ts[1]
    if a.shape != b.shape or a.ndim < 2:
        raise ShapeError(f"linear_scan: a {a.shape} and b {b.shape} must match")
    ad = a.data
    bd = b.data
    h0d = None if h0 is None else ts[2].data
    if h0d is not None and h0d.shape != (ad.shape[0],) + ad.shape[2:]:
        raise ShapeError(f"linear_scan: h0 {h0d.shape} does not match {a.shape}")
    if h0d is not None:
        bd = bd.copy()
        bd[:, 0] += ad[:, 0] * h0d
    h = scan_recurrence(ad, bd, method)

    def bwd(g):
        # lam_t = g_t + a_{t+1} lam_{t+1}
        a_next = np.zeros_like(ad)
        a_next[:, :-1] = ad[:, 1:]
        lam = scan_recurrence(a_next[:, ::-1], g[:, ::-1], method)[:, ::-1]
        h_prev = np.empty_like(h)
        h_prev[:, 1:] = h[:, :-1]
        h_prev[:, 0] = 0 if h0d is None else h0d
        res = [lam * h_prev, lam]
        if h0d is not None:
            res.append(ad[:, 0] * lam[:, 0])
        return tuple(res)

    return record("linear_scan", h, ts, bwd)


def scan_recurrence(a: np.ndarray, b: np.ndarray, method: str = "parallel") -> np.ndarray:
    """Inclusive scan of ``h_t = a_t h_{t-1} + b_t`` (``h_{-1} = 0``) along axis 1, on raw arrays."""
    L = a.shape[1]
    if method == "sequential":
        h = np.empty_like(b)
        acc = b[:, 0]
        h[:, 0] = acc
        for t in range(1, L):
            acc = a[:, t] * acc + b[:, t]
            h[:, t] = acc
        return h
    if method != "parallel":
        raise ValueError(f"unknown scan method {method!r}")
    # (a2, b2) o (a1, b1) = (a2 a1, a2 b1 + b2), doubling offsets
    A = a
    B = b
    off = 1
    while off < L:
        nB = B.copy()
        nB[:, off:] += A[:, off:] * B[:, :-off]
        if off * 2 < L:
            nA = A.copy()
            nA[:, off:] *= A[:, :-off]
            A = nA
        B = nB
        off *= 2
    return B if B is not b else b.copy()
