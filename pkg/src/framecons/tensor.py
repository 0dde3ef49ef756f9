"""Dense float64 tensors with a small reverse-mode autodiff tape.

Every differentiable op takes :class:`Tensor` operands, computes the forward
value with numpy and records a closure that maps the output gradient to the
gradients of its parents. ``Tensor.backward`` walks the recorded graph in
reverse topological order.

Layout conventions: channel axis first. Spatial ops act on the last two axes,
so a single image is ``[C, H, W]`` and a whole scene processed in one call is
``[C, T, H, W]``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class Tensor:
    """A float64 array plus (optionally) its position in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar for readability in layer code
    def __add__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __mul__(self, other): return mul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

        Intermediate gradients are released afterwards, and so is the graph.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        owned: set[int] = set()
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                _accumulate(pending, owned, id(parent), pg, parent.shape)
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node.requires_grad = False


class DualTensor(Tensor):
    """A learnable leaf: value plus a gradient buffer of identical shape."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"DualTensor(shape={self.shape}, name={self.name!r})"


class _SliceGrad:
    """Gradient that is zero outside ``index``; avoids dense temporaries for slices."""

    __slots__ = ("index", "values")

    def __init__(self, index: tuple, values: np.ndarray):
        self.index = index
        self.values = values


def _accumulate(pending: dict, owned: set, key: int, g, shape: tuple) -> None:
    cur = pending.get(key)
    if isinstance(g, _SliceGrad):
        if cur is None or key not in owned:
            base = np.zeros(shape, dtype=DTYPE) if cur is None else np.array(cur, dtype=DTYPE)
            pending[key] = cur = base
            owned.add(key)
        cur[g.index] += g.values
    elif cur is None:
        pending[key] = g
    elif key in owned:
        cur += g
    else:
        pending[key] = cur + g
        owned.add(key)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------------------
# pointwise ops
# ----------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, factor: float) -> Tensor:
    return _result(a.data * factor, (a,), lambda g: (g * factor,))


def sigmoid(a: Tensor) -> Tensor:
    # two-branch form avoids exp overflow for large |x|
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _result(x * x, (a,), lambda g: (2.0 * g * x,))


def absolute(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def log_clamped(a: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log with inputs clamped from below; no gradient where clamped."""
    x = a.data
    clamped = x < floor
    out = np.log(np.maximum(x, floor))
    return _result(out, (a,), lambda g: (np.where(clamped, 0.0, g / np.maximum(x, floor)),))


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (ndim - 1))


def _reduce_to_channels(g: np.ndarray, n: int) -> np.ndarray:
    per_channel = g.reshape(g.shape[0], -1).sum(axis=1)
    return per_channel if n == g.shape[0] else np.array([per_channel.sum()])


def _check_channel_vector(op: str, x: Tensor, v: Tensor) -> None:
    if v.ndim != 1 or v.shape[0] not in (1, x.shape[0]):
        raise ValueError(f"{op}: per-channel vector of length {v.shape} does not fit "
                         f"{x.shape[0]} channels")


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """x where x >= 0, else slope[channel] * x. A length-1 slope is shared."""
    _check_channel_vector("prelu", x, slope)
    xd = x.data
    a = _channel_view(slope.data, xd.ndim)
    neg = xd < 0
    out = np.where(neg, a * xd, xd)

    def backward(g):
        gx = np.where(neg, a * g, g)
        ga = _reduce_to_channels(np.where(neg, g * xd, 0.0), slope.shape[0])
        return gx, ga

    return _result(out, (x, slope), backward)


def channel_scale(x: Tensor, v: Tensor) -> Tensor:
    """Multiply channel c of ``x`` by ``v[c]`` (``v`` of length 1 is shared)."""
    _check_channel_vector("channel_scale", x, v)
    xd = x.data
    vv = _channel_view(v.data, xd.ndim)

    def backward(g):
        return g * vv, _reduce_to_channels(g * xd, v.shape[0])

    return _result(xd * vv, (x, v), backward)


def channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b[c]`` to channel c of ``x`` (``b`` of length 1 is shared)."""
    _check_channel_vector("channel_bias", x, b)
    bb = _channel_view(b.data, x.ndim)
    return _result(x.data + bb, (x, b), lambda g: (g, _reduce_to_channels(g, b.shape[0])))


ELEMENTWISE_OPS = ("add", "sub", "mul", "sigmoid", "tanh", "prelu", "square")


def elementwise(op: str, *operands: Tensor) -> Tensor:
    """Dispatch a pointwise op by name. ``prelu`` takes ``(x, slope)``."""
    table = {"add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "tanh": tanh,
             "prelu": prelu, "square": square}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {ELEMENTWISE_OPS}")
    return table[op](*operands)


# ----------------------------------------------------------------------------
# reductions and reshaping
# ----------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(sum_all(a), 1.0 / n)


def weighted_sum(a: Tensor, weights: np.ndarray) -> Tensor:
    """sum(a * weights) with ``weights`` a constant array of the same shape."""
    w = np.asarray(weights, dtype=DTYPE)
    if w.shape != a.shape:
        raise ValueError(f"weighted_sum: weights {w.shape} vs tensor {a.shape}")
    return _result(np.array((a.data * w).sum()), (a,), lambda g: (g * w,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _result(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, backward)


def take(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    """Slice ``[start:stop]`` along ``axis``."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    return _result(a.data[idx], (a,), lambda g: (_SliceGrad(idx, g),))


def split(a: Tensor, sections: int, axis: int = 0) -> list[Tensor]:
    n = a.shape[axis]
    if n % sections:
        raise ValueError(f"split: axis of size {n} not divisible by {sections}")
    step = n // sections
    return [take(a, k * step, (k + 1) * step, axis) for k in range(sections)]


def repeat_channels(a: Tensor, times: int) -> Tensor:
    """Tile a ``[1, ...]`` tensor to ``[times, ...]``; gradient sums back."""
    if a.shape[0] != 1:
        raise ValueError(f"repeat_channels expects a leading axis of 1, got {a.shape}")
    out = np.repeat(a.data, times, axis=0)
    return _result(out, (a,), lambda g: (g.sum(axis=0, keepdims=True),))


def gather_classes(p: Tensor, labels: np.ndarray, class_axis: int = -1) -> Tensor:
    """Pick ``p[..., labels[...]]`` along the class axis.

    ``labels`` entries outside ``[0, num_classes)`` yield 0 and get no gradient.
    """
    pd = np.moveaxis(p.data, class_axis, -1)
    k = pd.shape[-1]
    lab = np.asarray(labels)
    if lab.shape != pd.shape[:-1]:
        raise ValueError(f"gather_classes: labels {lab.shape} vs predictions {pd.shape}")
    valid = (lab >= 0) & (lab < k)
    safe = np.where(valid, lab, 0).astype(np.intp)
    out = np.take_along_axis(pd, safe[..., None], axis=-1)[..., 0] * valid
    shape = p.shape

    def backward(g):
        full = np.zeros(pd.shape, dtype=DTYPE)
        np.put_along_axis(full, safe[..., None], (g * valid)[..., None], axis=-1)
        return (np.moveaxis(full, -1, class_axis).reshape(shape),)

    return _result(out, (p,), backward)


# ----------------------------------------------------------------------------
# softmax
# ----------------------------------------------------------------------------

def softmax_channels(logits: Tensor) -> Tensor:
    """Softmax over axis 0 with max subtraction."""
    x = logits.data
    z = np.exp(x - x.max(axis=0, keepdims=True))
    out = z / z.sum(axis=0, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=0, keepdims=True)),)

    return _result(out, (logits,), backward)


# ----------------------------------------------------------------------------
# spatial ops
# ----------------------------------------------------------------------------

def _check_filter(weight_shape: tuple[int, ...]) -> tuple[int, int]:
    p, q = weight_shape[-2:]
    if p % 2 == 0 or q % 2 == 0:
        raise ValueError(f"filter size must be odd, got {p}x{q}")
    return p, q


def _pad_spatial(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    h, w = x.shape[-2:]
    out = np.zeros(x.shape[:-2] + (h + 2 * ph, w + 2 * pw), dtype=DTYPE)
    out[..., ph:ph + h, pw:pw + w] = x
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 1,
           padding: str = "same") -> Tensor:
    """'Same' zero-padded dilated cross-correlation.

    x: ``[C, H, W]`` or ``[C, B, H, W]``; weight ``[D, C, P, Q]``; bias ``[D]``.
    Tap (i, j) reads the input at offset ``dilation * (i - P//2, j - Q//2)``.
    """
    if padding != "same":
        raise ValueError(f"only 'same' zero padding is supported, got {padding!r}")
    if dilation < 1:
        raise ValueError(f"dilation must be a positive integer, got {dilation}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d weight must be [D, C, P, Q], got {weight.shape}")
    if x.ndim not in (3, 4):
        raise ValueError(f"conv2d input must be [C, H, W] or [C, B, H, W], got {x.shape}")
    d_out, c_in = weight.shape[:2]
    if x.shape[0] != c_in:
        raise ValueError(f"conv2d: input has {x.shape[0]} channels but weight expects {c_in}")
    if bias is not None and bias.shape != (d_out,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {d_out} output channels")
    p, q = _check_filter(weight.shape)
    ph, pw = dilation * (p // 2), dilation * (q // 2)
    batch_shape = x.shape[1:-2]
    h, w = x.shape[-2:]

    xp = _pad_spatial(x.data, ph, pw)
    cols = np.empty((c_in, p, q) + batch_shape + (h, w), dtype=DTYPE)
    for i in range(p):
        for j in range(q):
            cols[:, i, j] = xp[..., i * dilation:i * dilation + h, j * dilation:j * dilation + w]
    cols = cols.reshape(c_in * p * q, -1)
    wmat = weight.data.reshape(d_out, -1)
    out = (wmat @ cols).reshape((d_out,) + batch_shape + (h, w))
    if bias is not None:
        out += _channel_view(bias.data, out.ndim)

    def backward(g):
        g2 = g.reshape(d_out, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape((c_in, p, q) + batch_shape + (h, w))
            gxp = np.zeros_like(xp)
            for i in range(p):
                for j in range(q):
                    gxp[..., i * dilation:i * dilation + h, j * dilation:j * dilation + w] += gcols[:, i, j]
            gx = gxp[..., ph:ph + h, pw:pw + w]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, backward)


def depthwise_conv2d(x: Tensor, weight: Tensor, dilation: int = 1) -> Tensor:
    """Per-channel 'same' correlation: channel c of x with filter ``weight[c, 0]``."""
    if weight.ndim != 4 or weight.shape[1] != 1:
        raise ValueError(f"depthwise weight must be [C, 1, P, Q], got {weight.shape}")
    c = x.shape[0]
    if weight.shape[0] != c:
        raise ValueError(f"depthwise_conv2d: input has {c} channels but weight has {weight.shape[0]}")
    p, q = _check_filter(weight.shape)
    ph, pw = dilation * (p // 2), dilation * (q // 2)
    h, w = x.shape[-2:]
    xp = _pad_spatial(x.data, ph, pw)
    kern = weight.data[:, 0]
    out = np.zeros(x.shape, dtype=DTYPE)
    tail = (1,) * (x.ndim - 1)
    for i in range(p):
        for j in range(q):
            out += kern[:, i, j].reshape((c,) + tail) * \
                xp[..., i * dilation:i * dilation + h, j * dilation:j * dilation + w]

    def backward(g):
        gw = np.zeros_like(weight.data) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(p):
            for j in range(q):
                win = (Ellipsis, slice(i * dilation, i * dilation + h), slice(j * dilation, j * dilation + w))
                if gw is not None:
                    gw[:, 0, i, j] = (g * xp[win]).reshape(c, -1).sum(axis=1)
                if gxp is not None:
                    gxp[win] += kern[:, i, j].reshape((c,) + tail) * g
        gx = gxp[..., ph:ph + h, pw:pw + w] if gxp is not None else None
        return gx, gw

    return _result(out, (x, weight), backward)


_UPSAMPLE_CACHE: dict[int, np.ndarray] = {}


def _upsample_matrix(n: int) -> np.ndarray:
    """Bilinear x2 interpolation matrix ``[2n, n]`` with half-pixel centers, edge-clamped."""
    if n not in _UPSAMPLE_CACHE:
        m = np.zeros((2 * n, n), dtype=DTYPE)
        for o in range(2 * n):
            src = (o + 0.5) / 2.0 - 0.5
            lo = math.floor(src)
            frac = src - lo
            m[o, min(max(lo, 0), n - 1)] += 1.0 - frac
            m[o, min(max(lo + 1, 0), n - 1)] += frac
        _UPSAMPLE_CACHE[n] = m
    return _UPSAMPLE_CACHE[n]


def resample(x: Tensor, direction: str) -> Tensor:
    """``down2``: 2x2 average pooling. ``up2``: bilinear x2 (half-pixel centers)."""
    h, w = x.shape[-2:]
    if direction == "down2":
        if h % 2 or w % 2:
            raise ValueError(f"down2 needs even spatial dims, got {h}x{w}")
        lead = x.shape[:-2]
        out = x.data.reshape(lead + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))

        def backward(g):
            up = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1)
            return (up * 0.25,)

        return _result(out, (x,), backward)
    if direction == "up2":
        mh, mw = _upsample_matrix(h), _upsample_matrix(w)
        out = mh @ x.data @ mw.T
        return _result(out, (x,), lambda g: (mh.T @ g @ mw,))
    raise ValueError(f"unknown resample direction {direction!r}; expected 'down2' or 'up2'")


# ----------------------------------------------------------------------------
# gradient verification
# ----------------------------------------------------------------------------

def _relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / denom


def _scalar(out: Tensor) -> float:
    if out.data.size != 1:
        raise ValueError(f"function under check must return a scalar, got shape {out.shape}")
    v = float(out.data.reshape(-1)[0])
    if not math.isfinite(v):
        raise ValueError(f"function under check returned a non-finite value ({v})")
    return v


def grad_check(f: Callable[[Tensor], Tensor], x, epsilon: float = 1e-6,
               indices: Iterable[tuple[int, ...]] | None = None) -> float:
    """Max relative error between backprop and central differences of ``f`` at ``x``.

    Error per entry is ``|a - n| / max(1, |a|, |n|)``. ``indices`` restricts the
    finite-difference probes to a subset of entries.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    _scalar(out)
    if out.requires_grad:
        out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    probe = list(np.ndindex(x0.shape)) if indices is None else list(indices)
    worst = 0.0
    for idx in probe:
        xp = x0.copy()
        xp[idx] += epsilon
        fp = _scalar(f(Tensor(xp)))
        xp[idx] -= 2 * epsilon
        fm = _scalar(f(Tensor(xp)))
        numeric = (fp - fm) / (2 * epsilon)
        worst = max(worst, float(_relative_errors(np.array(analytic[idx]), np.array(numeric))))
    return worst


def param_grad_check(loss_fn: Callable[[], Tensor], params: Sequence[DualTensor],
                     epsilon: float = 1e-6, max_entries: int | None = None,
                     rng: np.random.Generator | None = None) -> float:
    """Like :func:`grad_check` but perturbs learnable tensors in place.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call. At most ``max_entries`` random entries per parameter are probed.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    rng = rng or np.random.default_rng(0)
    for prm in params:
        prm.zero_grad()
    out = loss_fn()
    _scalar(out)
    if out.requires_grad:
        out.backward()
    worst = 0.0
    for prm in params:
        analytic = prm.grad.copy()
        flat = prm.data.reshape(-1)
        n = flat.size
        picks = np.arange(n) if max_entries is None or n <= max_entries else \
            rng.choice(n, size=max_entries, replace=False)
        for k in picks:
            orig = flat[k]
            flat[k] = orig + epsilon
            fp = _scalar(loss_fn())
            flat[k] = orig - epsilon
            fm = _scalar(loss_fn())
            flat[k] = orig
            numeric = (fp - fm) / (2 * epsilon)
            err = _relative_errors(np.array(analytic.reshape(-1)[k]), np.array(numeric))
            worst = max(worst, float(err))
    for prm in params:
        prm.zero_grad()
    return worst
