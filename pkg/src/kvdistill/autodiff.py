"""Dense numpy tensors with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a closure mapping the output
gradient to one gradient per parent. ``Tensor.backward`` walks the graph in
reverse topological order, accumulating into leaf ``.grad`` buffers.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np

IGNORE_INDEX = -100
RMS_EPS = 1e-5

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class AutodiffError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (per context / thread)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

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
            raise AutodiffError(f"item: tensor of shape {self.shape} is not a single value")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return sum_(self, axis)

    # -- differentiation -------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every requires-grad leaf reachable from this scalar."""
        if self.data.size != 1:
            raise AutodiffError(f"backward: root must be scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS; parents are visited in declaration order so the order is deterministic.
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    k = x.dtype.type(math.sqrt(2.0 / math.pi))
    c = x.dtype.type(0.044715)
    inner = k * (x + c * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = k * (1.0 + 3.0 * c * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out.astype(x.dtype, copy=False), (a,), backward, "gelu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions differ")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dimensions differ") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # weight matmul: fold leading dims into one contraction
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes, detail="axes are not a permutation")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    src = a.shape
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise AutodiffError("concat: empty input")
    nd = tensors[0].ndim
    ax = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", ref, t.shape, detail=f"non-axis dims differ (axis={axis})")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                out.append(None)
                continue
            idx = [slice(None)] * nd
            idx[ax] = slice(int(lo), int(hi))
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def slice_(a: Tensor, idx) -> Tensor:
    """Basic (view) indexing; gradients scatter back into the sliced region."""
    out = a.data[idx]
    shape, dt = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, idx, g) if _is_advanced(idx) else full.__setitem__(idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward, "slice")


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def sum_(a: Tensor, axis=None) -> Tensor:
    """Sum; full reductions accumulate in double precision."""
    if axis is None:
        out = np.asarray(a.data.sum(dtype=np.float64))
        shape, dt = a.shape, a.dtype
        return _make(out, (a,), lambda g: (np.full(shape, g, dtype=dt),), "sum")
    out = a.data.sum(axis=axis, keepdims=True)
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.squeeze(out, axis=axis), (a,), lambda g: backward(np.expand_dims(g, axis)), "sum")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


# ---------------------------------------------------------------------------
# fused ops
# ---------------------------------------------------------------------------

def _stable_softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _stable_log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_lastdim(z: Tensor) -> Tensor:
    if z.ndim == 0 or z.shape[-1] < 1:
        raise ShapeError("softmax_lastdim", z.shape, detail="last dimension must be >= 1")
    if not np.all(np.isfinite(z.data)):
        raise AutodiffError("softmax_lastdim: non-finite input")
    p = _stable_softmax(z.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (z,), backward, "softmax")


def log_softmax_lastdim(z: Tensor) -> Tensor:
    ls = _stable_log_softmax(z.data)

    def backward(g):
        return (g - np.exp(ls) * g.sum(axis=-1, keepdims=True),)

    return _make(ls, (z,), backward, "log_softmax")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    bad = np.flatnonzero((ids < 0) | (ids >= V))
    if bad.size:
        raise IndexError(f"embedding_lookup: id {int(ids.reshape(-1)[bad[0]])} out of range [0, {V})")
    shape, dt = table.shape, table.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), backward, "embedding")


def rms_norm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    if gain.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise ShapeError("rms_norm", x.shape, gain.shape, detail="gain must match last dim")
    xd, gd = x.data, gain.data
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    normed = xd * inv

    def backward(g):
        gx = gg = None
        if gain.requires_grad:
            gg = (g * normed).reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gn = g * gd
            gx = inv * (gn - normed * (gn * normed).sum(axis=-1, keepdims=True) / d)
        return gx, gg

    return _make((normed * gd).astype(xd.dtype, copy=False), (x, gain), backward, "rms_norm")


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate feature pairs (i, i + d/2) of ``x`` by position-dependent angles.

    ``cos``/``sin`` broadcast against ``x`` and hold each angle twice
    (concatenated halves), the usual rotate-half layout.
    """
    h = x.shape[-1] // 2

    def rot(v):
        return np.concatenate([-v[..., h:], v[..., :h]], axis=-1)

    def rot_t(v):
        return np.concatenate([v[..., h:], -v[..., :h]], axis=-1)

    out = x.data * cos + rot(x.data) * sin
    return _make(out.astype(x.dtype, copy=False), (x,), lambda g: (g * cos + rot_t(g * sin),), "rotary")


def cross_entropy_per_position(logits: Tensor, labels, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """-log softmax(logits)[label] per row; ignored rows give exactly 0 and no gradient."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    keep = labels != ignore_index
    V = logits.shape[1]
    if np.any(keep & ((labels < 0) | (labels >= V))):
        raise IndexError("cross_entropy: label out of range")
    safe = np.where(keep, labels, 0)
    ls = _stable_log_softmax(logits.data)
    rows = np.arange(labels.shape[0])
    loss = np.where(keep, -ls[rows, safe], 0.0).astype(logits.dtype, copy=False)

    def backward(g):
        gz = np.exp(ls)
        gz[rows, safe] -= 1.0
        return (gz * np.where(keep, g, 0.0)[:, None].astype(gz.dtype),)

    return _make(loss, (logits,), backward, "cross_entropy")


def cross_entropy_masked(logits: Tensor, labels, ignore_index: int = IGNORE_INDEX) -> tuple[Tensor, int]:
    """Summed CE over counted rows plus the count; all-ignored gives (0, 0)."""
    labels = np.asarray(labels, dtype=np.int64)
    count = int((labels != ignore_index).sum())
    return sum_(cross_entropy_per_position(logits, labels, ignore_index)), count


def kl_per_position(z_t: Tensor, z_s: Tensor, T: float) -> Tensor:
    """KL(softmax(z_t/T) || softmax(z_s/T)) per row, in log space.

    The teacher side is treated as a constant: no gradient is produced for it.
    """
    if T <= 0:
        raise AutodiffError(f"kl_divergence: temperature must be positive, got {T}")
    if z_t.shape != z_s.shape or z_s.ndim != 2:
        raise ShapeError("kl_divergence", z_t.shape, z_s.shape)
    zt = np.asarray(z_t.data if isinstance(z_t, Tensor) else z_t)
    lt = _stable_log_softmax(zt / T)
    ls = _stable_log_softmax(z_s.data / T)
    pt = np.exp(lt)
    kl = (pt * (lt - ls)).sum(axis=-1)
    inv_t = z_s.dtype.type(1.0 / T)

    def backward(g):
        return (None, (np.exp(ls) - pt) * (g * inv_t)[:, None])

    return _make(kl.astype(z_s.dtype, copy=False), (_as_tensor(z_t).detach(), z_s), backward, "kl")


def kl_divergence_masked(z_t: Tensor, z_s: Tensor, mask, T: float) -> tuple[Tensor, int]:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (z_s.shape[0],):
        raise ShapeError("kl_divergence", z_s.shape, mask.shape, detail="mask length")
    per = kl_per_position(z_t, z_s, T)
    return sum_(mul(per, mask.astype(z_s.dtype))), int(mask.sum())


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def grad_check(closure: Callable[..., Tensor], inputs: Iterable[np.ndarray], step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``closure`` receives one ``Tensor`` per input (requires_grad set) and must
    return a scalar tensor. Inputs should be float64.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    closure(*leaves).backward()
    worst = 0.0
    for k, (arr, leaf) in enumerate(zip(arrays, leaves)):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = _eval_scalar(closure, arrays)
            flat[i] = orig - step
            down = _eval_scalar(closure, arrays)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst


def _eval_scalar(closure, arrays) -> float:
    with no_grad():
        return float(closure(*[Tensor(a) for a in arrays]).data)
