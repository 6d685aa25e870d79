"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Data lives in flat numpy arrays. Float32 is the working precision for
training; a float64 mode exists because central finite differences (used for
gradient checking) are unreliable at 32-bit precision. Every stochastic
choice flows through :class:`RngState`, a thin wrapper around the PCG64
generator, so identical seeds reproduce identical streams.

A Tensor is also its own computation-graph node: it records the tensors it
was derived from and a vector-Jacobian closure. ``backward`` walks the graph
once in reverse topological order and accumulates gradients additively into
the ``grad`` field of requires-grad leaves.
"""

from __future__ import annotations

import zlib
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_FLOAT_DTYPES = (np.float32, np.float64)

_default_dtype = np.float32
_grad_enabled = True


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in _FLOAT_DTYPES:
        raise ContractError(f"default dtype must be float32 or float64, got {dtype}")
    global _default_dtype
    _default_dtype = dtype


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the default dtype (float64 for gradient checks)."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextmanager
def no_grad():
    """Disable graph construction; forward values only."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class RngState:
    """Deterministic PCG64 stream identified by a 64-bit seed.

    Identical seeds produce identical streams across runs and platforms for
    the same build. ``child`` derives an independent stream so parallel work
    (e.g. per-subject synthetic generation) can partition the seed space.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, key) -> "RngState":
        if isinstance(key, str):
            key = zlib.crc32(key.encode("utf-8"))
        mixed = np.random.SeedSequence([self.seed, int(key)]).generate_state(1)[0]
        return RngState(int(mixed))

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def shuffle(self, x) -> None:
        self._gen.shuffle(x)

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


class Tensor:
    """Dense array plus the graph bookkeeping needed for backward().

    ``_parents`` and ``_vjp`` are set only on tensors produced by an
    operation while gradients are enabled; leaves have neither.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            data = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype.type in _FLOAT_DTYPES:
            pass
        else:
            data = np.asarray(data, dtype=_default_dtype)
        self.data: np.ndarray = data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self._op = ""

    @property
    def shape(self) -> tuple:
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self):
        tag = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar; all semantics live in the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _scalar_err(t: Tensor):
    raise ContractError(f"item() requires a scalar tensor, got shape {t.shape}")


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else _default_dtype))


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise suite


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _make(out, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    return _make(out, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return _make(out, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _make(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a, s: float) -> Tensor:
    """Multiply by a plain (non-differentiated) scalar."""
    a = _as_tensor(a)
    s = float(s)
    return _make(a.data * s, "scale", (a,), lambda g: (g * s,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def softplus(a) -> Tensor:
    """log(1 + e^x), computed stably."""
    a = _as_tensor(a)
    out = np.logaddexp(np.zeros((), dtype=a.dtype), a.data)

    def vjp(g):
        x = a.data
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * sig.astype(g.dtype),)

    return _make(out, "softplus", (a,), vjp)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    # np.maximum (not a masked where) so a NaN input stays a NaN output
    return _make(np.maximum(a.data, a.data.dtype.type(0)), "relu", (a,),
                 lambda g: (g * mask,))


def dropout(a, p: float, training: bool, rng: Optional[RngState] = None) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-p); identity in inference."""
    a = _as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode requires an RngState")
    keep = (rng.uniform(size=a.shape) >= p).astype(a.dtype)
    factor = keep / a.dtype.type(1.0 - p)
    return _make(a.data * factor, "dropout", (a,), lambda g: (g * factor,))


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), "transpose", (a,),
                 lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,),
                 lambda g: (g.reshape(old),))


def slice_rows(a, lo: int, hi: int) -> Tensor:
    """View rows [lo, hi) along the first axis."""
    a = _as_tensor(a)
    if not 0 <= lo <= hi <= a.shape[0]:
        raise DimensionError(f"row slice [{lo}, {hi}) outside axis of length {a.shape[0]}")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[lo:hi] = g
        return (full,)

    return _make(a.data[lo:hi], "slice", (a,), vjp)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat requires at least one tensor")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(out, "concat", ts, vjp)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(out, "sum", (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.shape[axis]

    def vjp(g):
        if axis is None:
            gg = np.broadcast_to(g, a.shape)
        else:
            gg = np.broadcast_to(g if keepdims else np.expand_dims(g, axis), a.shape)
        return ((gg / count).astype(a.dtype),)

    return _make(out, "mean", (a,), vjp)


def max_pool1d(a) -> Tensor:
    """Reduce the last (length) axis to a single maximum per channel."""
    a = _as_tensor(a)
    if a.ndim < 1:
        raise DimensionError("max_pool1d requires at least one axis")
    idx = a.data.argmax(axis=-1)
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros_like(a.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _make(out, "max_pool1d", (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and structured ops


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul requires matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(out, "matmul", (a, b), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; rows sum to 1 and stay strictly positive."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _make(out, "softmax", (a,), vjp)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Zero mean / unit variance over the last axis, then affine transform."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + a.dtype.type(eps))
    xhat = (a.data - mu) * inv_std
    out = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        ga = (dxhat - m1 - xhat * m2) * inv_std
        lead = tuple(range(g.ndim - 1))
        return (ga, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _make(out, "layer_norm", (a, gain, bias), vjp)


def conv1d(x, kernels, bias=None) -> Tensor:
    """1-D cross-correlation with zero "same" padding.

    ``x`` is (..., c_in, L), ``kernels`` is (c_out, c_in, k), and the output
    is (..., c_out, L). Padding is floor((k-1)/2) left / ceil((k-1)/2) right,
    which keeps the output length equal to L even when k > L.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if kernels.ndim != 3:
        raise DimensionError(f"conv1d kernels must be (c_out, c_in, k), got {kernels.shape}")
    c_out, c_in, k = kernels.shape
    if x.ndim < 2 or x.shape[-2] != c_in:
        raise DimensionError(
            f"conv1d input channels mismatch: input {x.shape} vs kernels {kernels.shape}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"conv1d bias must be ({c_out},), got {bias.shape}")
    if x.ndim > 3:
        raise DimensionError(f"conv1d supports at most one batch axis, got {x.shape}")
    batched = x.ndim == 3
    xd = x.data if batched else x.data[None]
    B, L = xd.shape[0], xd.shape[-1]
    left = (k - 1) // 2
    if k >= L:
        # wide kernel: every output position sees (almost) the whole input,
        # so materialise the dense (c_out*L) x (c_in*L) tap matrix instead of
        # an im2col buffer; work no longer grows with k
        out, vjp = _conv1d_dense(xd, kernels.data, bias, c_out, c_in, k, L, left)
    else:
        out, vjp = _conv1d_im2col(xd, kernels.data, bias, c_out, c_in, k, L, left)
    if bias is not None:
        out = out + bias.data[None, :, None]
    if not batched:
        out = out[0]

    def vjp_outer(g):
        g3 = g if batched else g[None]
        gx, gw = vjp(g3)
        if not batched:
            gx = gx[0]
        if bias is None:
            return (gx, gw)
        return (gx, gw, g3.sum(axis=(0, 2)))

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _make(out, "conv1d", parents, vjp_outer)


def _conv1d_im2col(xd, wd, bias, c_out, c_in, k, L, left):
    B = xd.shape[0]
    xpad = np.pad(xd, [(0, 0), (0, 0), (left, k - 1 - left)])
    # cols[b, i*k + t, pos] = xpad[b, i, pos + t]
    view = np.lib.stride_tricks.sliding_window_view(xpad, L, axis=-1)
    cols = np.ascontiguousarray(view).reshape(B, c_in * k, L)
    w2 = wd.reshape(c_out, c_in * k)
    out = np.matmul(w2, cols)

    def vjp(g):
        gw = np.matmul(g, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(c_out, c_in, k)
        gcols = np.matmul(w2.T, g).reshape(B, c_in, k, L)
        gxpad = np.zeros_like(xpad)
        for t in range(k):
            gxpad[:, :, t:t + L] += gcols[:, :, t, :]
        return gxpad[:, :, left:left + L], gw

    return out, vjp


def _conv1d_dense(xd, wd, bias, c_out, c_in, k, L, left):
    B = xd.shape[0]
    pos = np.arange(L)
    tau = pos[None, :] - pos[:, None] + left       # tap hit by (t_out, t_in)
    valid = (tau >= 0) & (tau < k)
    tau_c = np.clip(tau, 0, k - 1)
    wmat = wd[:, :, tau_c]                          # (c_out, c_in, L, L)
    if not valid.all():
        wmat = wmat * valid
    wmat = np.ascontiguousarray(wmat.transpose(0, 2, 1, 3)).reshape(c_out * L, c_in * L)
    x_flat = xd.reshape(B, c_in * L)
    out = np.matmul(x_flat, wmat.T).reshape(B, c_out, L)

    def vjp(g):
        g_flat = np.ascontiguousarray(g).reshape(B, c_out * L)
        gx = np.matmul(g_flat, wmat).reshape(B, c_in, L)
        gwmat = np.matmul(g_flat.T, x_flat).reshape(c_out, L, c_in, L)
        gw = np.zeros_like(wd)
        for d in range(-(L - 1), L):
            t = d + left
            if 0 <= t < k:
                gw[:, :, t] = np.trace(gwmat, offset=d, axis1=1, axis2=3)
        return gx, gw

    return out, vjp


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor) -> list:
    order: list = []
    seen = set()
    stack = [(root, iter(root._parents))]
    seen.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if id(p) not in seen and p._parents:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
            seen.add(id(p))
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of all requires-grad leaves.

    Repeated sub-expressions accumulate additively. The loss must be scalar.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads: dict = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            if p._parents:
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
            else:
                p.grad = pg.copy() if p.grad is None else p.grad + pg


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def first_nonfinite(root: Tensor) -> Optional[str]:
    """Name the earliest graph node holding a NaN/Inf, or None if clean."""
    for node in _toposort(root):
        if not np.isfinite(node.data).all():
            op = node._op or "leaf"
            return f"{op}{list(node.shape)}"
    return None


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               max_coords: Optional[int] = None,
               rng: Optional[RngState] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is |analytic - numeric| / max(1, |analytic|). Run in
    float64 mode; float32 rounding swamps the h^2 truncation term. For large
    tensors ``max_coords`` checks a deterministic random coordinate subset.
    """
    if not x.requires_grad or x._parents:
        raise ContractError("grad_check needs a requires-grad leaf tensor")
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    n = x.data.size
    if max_coords is not None and max_coords < n:
        r = rng if rng is not None else RngState(0)
        idxs = r.choice(n, size=max_coords, replace=False)
    else:
        idxs = np.arange(n)

    flat = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1.0, abs(a))
            if err > worst:
                worst = err
    return worst
