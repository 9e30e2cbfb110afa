"""Dense tensors with tape-free reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  ``backward``
orders the reachable nodes topologically and runs each closure once.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_CHECK_FINITE = True
# op name -> callable(list of grads) -> list of grads; used by gradcheck negative controls
GRAD_HOOKS: dict[str, Callable[[list], list]] = {}


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64, np.longdouble):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype (e.g. float64 for gradchecks)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _CHECK_FINITE
    old = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = old


class GraphConsumedError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    # -- basic introspection -------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def make_op(out: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap ``out`` as the result of ``op``.

    ``backward_fn(g)`` receives the output gradient and returns one gradient
    (or None) per parent.  Nothing is recorded when grad mode is off or no
    parent requires a gradient.
    """
    if _CHECK_FINITE and not np.isfinite(out).all():
        raise FloatingPointError(f"non-finite values produced by {op}")
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.requires_grad = needs
    t.name = None
    t._op = op
    t._consumed = False
    if needs:
        t._parents = tuple(parents)
        t._backward = backward_fn
    else:
        t._parents = ()
        t._backward = None
    return t


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    The graph is released afterwards; calling again on the same loss raises
    :class:`GraphConsumedError`.
    """
    if loss._consumed:
        raise GraphConsumedError("graph already consumed by a previous backward call")
    if grad is None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        if node._consumed:
            raise GraphConsumedError(f"graph node {node._op} already consumed")
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            node._consumed = True
            node._backward = None
            node._parents = ()
            continue
        pgrads = list(node._backward(g))
        hook = GRAD_HOOKS.get(node._op)
        if hook is not None:
            pgrads = hook(pgrads)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise RuntimeError(f"{node._op}: grad shape {pg.shape} != parent shape {p.shape}")
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
        node._consumed = True
        node._backward = None
        node._parents = ()


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting)
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_op(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd  # non-finite results are reported by make_op

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_op(out, (a, b), bw, "div")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------


def _softplus_np(v: np.ndarray) -> np.ndarray:
    # max(v,0) + log1p(exp(-|v|)) never overflows
    return np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return make_op(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    xd = x.data
    return make_op(xd * s, (x,), lambda g: (g * s * (1 + xd * (1 - s)),), "silu")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return make_op(_softplus_np(xd), (x,), lambda g: (g * _sigmoid_np(xd),), "softplus")


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return make_op(e, (x,), lambda g: (g * e,), "exp")


_POINTWISE = {"relu": relu, "silu": silu, "sigmoid": sigmoid, "softplus": softplus, "exp": exp}


def pointwise(x: Tensor, mode: str) -> Tensor:
    try:
        fn = _POINTWISE[mode]
    except KeyError:
        raise ValueError(f"unknown pointwise mode {mode!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),), "permute")


def transpose_cl(x: Tensor) -> Tensor:
    """Swap [B, C, L] <-> [B, L, C]."""
    if x.ndim != 3:
        raise ValueError(f"transpose_cl expects rank 3, got {x.shape}")
    return permute(x, (0, 2, 1))


def flip(x: Tensor, axis: int) -> Tensor:
    return make_op(np.flip(x.data, axis).copy(), (x,), lambda g: (np.flip(g, axis).copy(),), "flip")


def flip_time(x: Tensor) -> Tensor:
    return flip(x, x.ndim - 1)


def split(x: Tensor, sections: int, axis: int) -> list[Tensor]:
    n = x.shape[axis]
    if n % sections:
        raise ValueError(f"cannot split extent {n} into {sections} equal parts")
    step = n // sections
    outs = []
    for i in range(sections):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(i * step, (i + 1) * step)
        outs.append(slice_(x, tuple(sl)))
    return outs


def chunk2_channels(x: Tensor, axis: int = 1) -> tuple[Tensor, Tensor]:
    if x.shape[axis] % 2:
        raise ValueError(f"chunk2 needs an even channel extent, got {x.shape[axis]}")
    a, b = split(x, 2, axis)
    return a, b


def slice_(x: Tensor, index) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return make_op(x.data[index].copy(), (x,), bw, "slice")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_op(np.concatenate([t.data for t in xs], axis=axis), xs, bw, "concat")


def concat_channels(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    return concat(xs, axis)


_AXIS_OPS = {
    "flip_time": flip_time,
    "transpose_cl": transpose_cl,
    "chunk2_channels": chunk2_channels,
    "concat_channels": concat_channels,
}


def axis_ops(x, op: str):
    try:
        fn = _AXIS_OPS[op]
    except KeyError:
        raise ValueError(f"unknown axis op {op!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# linear algebra, convolution, normalization, pooling
# ---------------------------------------------------------------------------


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x Wᵀ + b over the trailing axis."""
    din = W.shape[1]
    if x.shape[-1] != din:
        raise ValueError(f"linear: trailing extent {x.shape[-1]} != {din}")
    xd, Wd = x.data, W.data
    out = xd @ Wd.T
    if b is not None:
        out += b.data

    def bw(g):
        gx = g @ Wd if x.requires_grad else None
        gW = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, din) if W.requires_grad else None
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gW, gb

    parents = (x, W) if b is None else (x, W, b)
    return make_op(out, parents, bw, "linear")


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, groups: int = 1, padding: str = "causal") -> Tensor:
    """1-D convolution over the last axis of ``x`` [B, Cin, L].

    ``causal`` left-pads k-1 zeros; ``same`` pads (k-1)/2 on each side and
    needs an odd kernel.  The output keeps length L.
    """
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError(f"conv1d expects x [B,Cin,L] and w [Cout,Cin/groups,k], got {x.shape}, {w.shape}")
    B, cin, L = x.shape
    cout, cig, k = w.shape
    if k < 1 or L < 1:
        raise ValueError("conv1d needs k >= 1 and L >= 1")
    if cin % groups or cout % groups or cin // groups != cig:
        raise ValueError(f"conv1d shape mismatch: Cin={cin}, groups={groups}, w={w.shape}")
    if padding == "causal":
        left, right = k - 1, 0
    elif padding == "same":
        if k % 2 == 0:
            raise ValueError("'same' padding needs an odd kernel size")
        left = right = (k - 1) // 2
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xd, wd = x.data, w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (left, right))) if left or right else xd
    depthwise = groups == cin and cig == 1 and cout == cin
    if depthwise:
        out = np.zeros((B, cout, L), dtype=xd.dtype)
        for j in range(k):
            out += wd[None, :, 0, j, None] * xp[:, :, j:j + L]
    else:
        cog = cout // groups
        out = np.empty((B, cout, L), dtype=xd.dtype)
        for gi in range(groups):
            xs = xp[:, gi * cig:(gi + 1) * cig]
            ws = wd[gi * cog:(gi + 1) * cog]
            acc = np.zeros((B, cog, L), dtype=xd.dtype)
            for j in range(k):
                acc += np.matmul(ws[:, :, j], xs[:, :, j:j + L])
            out[:, gi * cog:(gi + 1) * cog] = acc
    if bias is not None:
        out += bias.data[None, :, None]

    def bw(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wd) if w.requires_grad else None
        if depthwise:
            for j in range(k):
                if gxp is not None:
                    gxp[:, :, j:j + L] += wd[None, :, 0, j, None] * g
                if gw is not None:
                    gw[:, 0, j] = (g * xp[:, :, j:j + L]).sum(axis=(0, 2))
        else:
            cog = cout // groups
            for gi in range(groups):
                gs = g[:, gi * cog:(gi + 1) * cog]
                xs = xp[:, gi * cig:(gi + 1) * cig]
                ws = wd[gi * cog:(gi + 1) * cog]
                for j in range(k):
                    if gxp is not None:
                        gxp[:, gi * cig:(gi + 1) * cig, j:j + L] += np.matmul(ws[:, :, j].T, gs)
                    if gw is not None:
                        gw[gi * cog:(gi + 1) * cog, :, j] = np.einsum("bol,bil->oi", gs, xs[:, :, j:j + L])
        gx = None
        if gxp is not None:
            gx = gxp[:, :, left:left + L] if (left or right) else gxp
            gx = np.ascontiguousarray(gx)
        gb = g.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return make_op(out, parents, bw, "conv1d")


def conv1d_causal(x: Tensor, w: Tensor, bias: Tensor | None = None, groups: int = 1,
                  padding_mode: str = "causal") -> Tensor:
    return conv1d(x, w, bias, groups=groups, padding=padding_mode)


def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize [B, C, L] over C at every (b, l), then apply per-channel affine."""
    if not np.isfinite(x.data).all():
        raise FloatingPointError("layer_norm_channels: non-finite input")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data[None, :, None]
    out = xhat * gd + beta.data[None, :, None]

    def bw(g):
        gxhat = g * gd
        gx = None
        if x.requires_grad:
            gx = inv * (gxhat - gxhat.mean(axis=1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=1, keepdims=True))
        ggamma = (g * xhat).sum(axis=(0, 2)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2)) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return make_op(out, (x, gamma, beta), bw, "layer_norm")


def max_pool_k3s2p1(x: Tensor) -> Tensor:
    """Window 3, stride 2, padding 1 over the last axis; output length ceil(L/2)."""
    B, C, L = x.shape
    if L == 0:
        raise ValueError("max pool over empty sequence")
    lout = (L + 1) // 2
    padded = np.full((B, C, 2 * lout + 1), -np.inf, dtype=x.dtype)
    padded[:, :, 1:L + 1] = x.data
    cand = np.stack([padded[:, :, j:j + 2 * lout:2] for j in range(3)], axis=-1)
    arg = cand.argmax(axis=-1)
    out = np.take_along_axis(cand, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gp = np.zeros((B, C, 2 * lout + 1), dtype=g.dtype)
        for j in range(3):
            gp[:, :, j:j + 2 * lout:2] += g * (arg == j)
        return (gp[:, :, 1:L + 1].copy(),)

    return make_op(np.ascontiguousarray(out), (x,), bw, "max_pool")


def adaptive_avg_matrix(L: int, target: int, dtype=np.float64) -> np.ndarray:
    """[L, target] averaging matrix; bin i covers [floor(i L/T), ceil((i+1) L/T)).

    Every bin is non-empty, so a target longer than L repeats samples.
    """
    P = np.zeros((L, target), dtype=dtype)
    for i in range(target):
        lo = (i * L) // target
        hi = -((-(i + 1) * L) // target)
        P[lo:hi, i] = 1.0 / (hi - lo)
    return P


def adaptive_avg_pool(x: Tensor, target: int) -> Tensor:
    L = x.shape[-1]
    if L == 0:
        raise ValueError("adaptive pool over empty sequence")
    if target < 1:
        raise ValueError("adaptive_avg target must be >= 1")
    P = adaptive_avg_matrix(L, target, x.dtype)
    return make_op(x.data @ P, (x,), lambda g: (g @ P.T,), "adaptive_avg")


def mean_all(x: Tensor) -> Tensor:
    if x.shape[-1] == 0:
        raise ValueError("mean over empty sequence")
    return mean(x, axis=-1, keepdims=True)


def pool_time(x: Tensor, mode: str, target: int | None = None) -> Tensor:
    if mode == "max_k3s2p1":
        return max_pool_k3s2p1(x)
    if mode == "adaptive_avg":
        if target is None:
            raise ValueError("adaptive_avg needs a target length")
        return adaptive_avg_pool(x, target)
    if mode == "mean_all":
        return mean_all(x)
    raise ValueError(f"unknown pool mode {mode!r}")


def drop_path(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Zero whole batch elements with probability ``rate``; rescale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"drop_path rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("drop_path in training mode needs a seeded generator")
    keep = (rng.random(x.shape[0]) >= rate).astype(x.dtype) / (1.0 - rate)
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    return mul(x, Tensor(keep.reshape(shape), dtype=x.dtype))
