"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every operation records its inputs and a local gradient rule on the output
tensor. ``Tensor.backward`` walks the recorded graph in reverse topological
order and accumulates gradients additively, so a tensor that feeds several
consumers receives the sum of their contributions.

Only the operations the prediction heads need are provided: elementwise
arithmetic with numpy broadcasting, (batched) matrix products, ReLU, a
temperature softmax, row gathers and slices, 3x3 same-padding convolution,
and the two training losses.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError, TrainingError

# Test-only mutation hook: ops listed here have the gradient they propagate
# to their inputs negated. Used to prove the gradient checker catches bugs.
_SIGN_FLIPS: set[str] = set()


@contextlib.contextmanager
def sign_flip(op_name: str):
    """Negate the backward rule of ``op_name`` inside the block."""
    _SIGN_FLIPS.add(op_name)
    try:
        yield
    finally:
        _SIGN_FLIPS.discard(op_name)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._grad_owned = False
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op: str | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None
        self._grad_owned = False

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    # -- reverse pass -----------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every upstream tensor.

        ``grad`` defaults to 1 and may only be omitted for scalar outputs.
        """
        if grad is None:
            if self.size != 1:
                raise DimensionError(f"backward() without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        _accumulate(self, grad.copy())
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            g = node.grad
            if node._op in _SIGN_FLIPS:
                g = -g
            node._backward(g)


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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Gradients are never modified in place unless owned, so storing a view
    # of an upstream gradient is safe.
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
        t._grad_owned = False
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _owned_grad(t: Tensor) -> np.ndarray:
    """``t.grad`` as a writable array private to ``t`` (zeros if unset)."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    elif not t._grad_owned:
        t.grad = np.array(t.grad, dtype=np.float64, copy=True)
    t._grad_owned = True
    return t.grad


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward, "add")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: _accumulate(a, -g), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward, "mul")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: _accumulate(x, g * mask), "relu")


# -- shape manipulation ---------------------------------------------------
def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _make(data, (x,), lambda g: _accumulate(x, g.reshape(x.shape)), "reshape")


def getitem(x, key) -> Tensor:
    """Basic (slice/int) indexing. Advanced indexing goes through :func:`take`."""
    x = _as_tensor(x)
    data = x.data[key]

    def backward(g):
        if x.requires_grad:
            _owned_grad(x)[key] += g

    return _make(data, (x,), backward, "getitem")


def take(x, index) -> Tensor:
    """Gather rows ``x[index]`` along axis 0; repeated indices accumulate."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    data = x.data[index]

    def backward(g):
        if not x.requires_grad:
            return
        # Scatter-add as a (rows x N) one-hot product; much faster than add.at.
        onehot = np.zeros((x.shape[0], index.size))
        onehot[index, np.arange(index.size)] = 1.0
        _accumulate(x, (onehot @ g.reshape(index.size, -1)).reshape(x.shape))

    return _make(data, (x,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                _accumulate(t, np.take(g, np.arange(lo, hi), axis=axis))

    return _make(data, tensors, backward, "concat")


# -- reductions -----------------------------------------------------------
def tsum(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    data = x.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(data), (x,), backward, "sum")


def mean(x) -> Tensor:
    x = _as_tensor(x)
    n = x.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: _accumulate(x, np.full(x.shape, g / n)), "mean")


# -- linear algebra -------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product; 3-d operands are treated as batches of matrices.

    A 2-d operand is broadcast across the batch of a 3-d one.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim > 3 or b.ndim > 3 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul: batch sizes differ, {a.shape} and {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if a.ndim == 3 and a.shape[1] == 1:
                # batched row-vector products: the weight gradient is an outer product
                gb = np.swapaxes(a.data, -1, -2) * g
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward, "matmul")


def softmax_temp(logits, tau: float) -> Tensor:
    """Softmax of ``logits / tau`` along the last axis."""
    if not tau > 0:
        raise DomainError(f"softmax temperature must be positive, got {tau}")
    x = _as_tensor(logits)
    z = (x.data - x.data.max(axis=-1, keepdims=True)) / tau
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)) / tau)

    return _make(y, (x,), backward, "softmax_temp")


# -- convolution ----------------------------------------------------------
def unfold3x3(x) -> Tensor:
    """im2col for a 3x3 window with zero padding 1: (N,C,S,T) -> (N, C*9, S*T).

    Column rows are ordered channel-major, then kernel row, then kernel column,
    matching ``kernel.reshape(O, C*9)``.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"unfold3x3 expects (N,C,S,T), got {x.shape}")
    n, c, s, t = x.shape
    pad = np.zeros((n, c, s + 2, t + 2))
    pad[:, :, 1:-1, 1:-1] = x.data
    windows = sliding_window_view(pad, (3, 3), axis=(2, 3))  # (n, c, s, t, 3, 3)
    data = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * 9, s * t)

    def backward(g):
        g6 = g.reshape(n, c, 3, 3, s, t)
        gpad = np.zeros((n, c, s + 2, t + 2))
        for ki in range(3):
            for kj in range(3):
                gpad[:, :, ki:ki + s, kj:kj + t] += g6[:, :, ki, kj]
        _accumulate(x, gpad[:, :, 1:-1, 1:-1])

    return _make(data, (x,), backward, "unfold3x3")


def conv2d(x, kernel, bias) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1, plus bias.

    Shapes: ``x`` is (C,S,S) or a batch (N,C,S,S). ``kernel`` is (O,C,3,3)
    shared by the batch, or (N,O,C,3,3) with one kernel per batch item, in
    which case ``bias`` is (N,O) instead of (O,).
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be (C,S,S) or (N,C,S,S), got {x.shape}")
    n, c, s, t = x.shape
    per_item = kernel.ndim == 5
    if kernel.shape[-2:] != (3, 3) or kernel.ndim not in (4, 5):
        raise DimensionError(f"conv2d kernel must be (O,C,3,3) or (N,O,C,3,3), got {kernel.shape}")
    if kernel.shape[-3] != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if per_item and kernel.shape[0] != n:
        raise DimensionError(f"conv2d per-item kernels {kernel.shape} for batch {x.shape}")
    o = kernel.shape[-4]
    if bias.shape != ((n, o) if per_item else (o,)):
        raise DimensionError(f"conv2d bias shape {bias.shape} does not fit kernel {kernel.shape}")

    cols = unfold3x3(x)
    if per_item:
        out = matmul(reshape(kernel, (n, o, c * 9)), cols) + reshape(bias, (n, o, 1))
    else:
        out = matmul(reshape(kernel, (o, c * 9)), cols) + reshape(bias, (o, 1))
    out = reshape(out, (n, o, s, t))
    if single:
        out = reshape(out, (o, s, t))
    return out


# -- losses ---------------------------------------------------------------
def smooth_l1(pred, target) -> Tensor:
    """Mean Huber-style loss with unit transition point."""
    pred = _as_tensor(pred)
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"smooth_l1: pred {pred.shape} vs target {target.shape}")
    d = pred.data - target
    ad = np.abs(d)
    value = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5).mean()
    n = d.size

    def backward(g):
        _accumulate(pred, g * np.clip(d, -1.0, 1.0) / n)

    return _make(np.asarray(value), (pred,), backward, "smooth_l1")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def bce_logits(logits, target) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against binary targets."""
    logits = _as_tensor(logits)
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape:
        raise DimensionError(f"bce_logits: logits {logits.shape} vs target {target.shape}")
    if not np.all((target == 0.0) | (target == 1.0)):
        raise DomainError("bce_logits: targets must be 0 or 1")
    x = logits.data
    value = (np.maximum(x, 0.0) - x * target + np.log1p(np.exp(-np.abs(x)))).mean()
    n = x.size

    def backward(g):
        _accumulate(logits, g * (_sigmoid(x) - target) / n)

    return _make(np.asarray(value), (logits,), backward, "bce_logits")


# -- optimizer ------------------------------------------------------------
def init_adam_state(params: dict[str, Tensor]) -> dict:
    return {
        "step": 0,
        "m": {k: np.zeros_like(p.data) for k, p in params.items()},
        "v": {k: np.zeros_like(p.data) for k, p in params.items()},
    }


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: dict,
              lr: float | dict[str, float] = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    ``lr`` is one rate for all parameters or a mapping from parameter name to
    rate. Missing entries in ``grads`` are treated as zero gradients. All
    gradients are checked for finiteness before anything is modified.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient", param=name)
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        rate = lr[name] if isinstance(lr, dict) else lr
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        denom = np.sqrt(v)
        denom *= 1.0 / np.sqrt(c2)
        denom += eps
        step = np.divide(m, denom, out=denom)
        step *= rate / c1
        p.data = p.data - step


# -- verification ---------------------------------------------------------
def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def gradcheck(fn: Callable[..., Tensor], inputs: Iterable[Tensor], h: float = 1e-5,
              max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    ``fn(*inputs)`` must return a scalar tensor. Every input with
    ``requires_grad`` is checked; ``max_coords`` subsamples coordinates per
    input when the full sweep would be too slow.
    """
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    out.backward()
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        if not t.requires_grad:
            continue
        if ga is None:
            ga = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(*inputs).data)
            flat[i] = orig - h
            fm = float(fn(*inputs).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, float(relative_error(ga.reshape(-1)[i], numeric)))
    for t in inputs:
        t.zero_grad()
    return worst
