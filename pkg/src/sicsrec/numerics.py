"""Dense float64 tensors with a small reverse-mode tape.

Only the kernels the recommender needs are differentiable: matmul,
broadcasting arithmetic, ReLU, masked row softmax, layer norm, dropout,
row gathers, concatenation, L2 row normalization and the two loss kernels
(InfoNCE and cross-entropy).  Gradients accumulate with ``+=`` so a
parameter used on several paths (the shared position table) receives the
sum of all path gradients; call :func:`zero_grad` between steps.
"""
from __future__ import annotations

import contextlib
import math
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class EvaluationError(ArithmeticError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no tape inside the block (inference and finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def make_rng(seed: int, *keys: str | int) -> np.random.Generator:
    """Independent PCG64 stream derived from ``seed`` and a key path."""
    spawn = tuple(k if isinstance(k, int) else zlib.crc32(k.encode()) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=spawn))


class Tensor:
    __slots__ = ("value", "grad", "_parents", "_backward", "requires_grad", "name")

    def __init__(self, value, parents: Sequence["Tensor"] = (), backward=None, name=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward = backward
        self.requires_grad = bool(parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Back-propagate from a scalar."""
        if self.value.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            if not isinstance(node, Param):
                node.grad = None
        self._accum(np.ones_like(self.value))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])


class Param(Tensor):
    """A leaf tensor owned by a model; ``trainable=False`` freezes it."""

    __slots__ = ("trainable",)

    def __init__(self, value, name=None, trainable: bool = True):
        super().__init__(np.array(value, dtype=DTYPE, copy=True), name=name)
        self.trainable = trainable
        self.grad = np.zeros_like(self.value)

    @property
    def requires_grad(self):
        return self.trainable

    @requires_grad.setter
    def requires_grad(self, _):
        pass

    def _accum(self, g):
        self.grad += g

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def zero_grad(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _track(*xs: Tensor) -> bool:
    return _grad_enabled and any(x.requires_grad for x in xs)


def _node(value, parents, backward) -> Tensor:
    if _track(*parents):
        return Tensor(value, parents, backward)
    return Tensor(value)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.value + b.value
    except ValueError:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _node(out, (a, b), backward)


def sub(a, b) -> Tensor:
    return add(a, mul(b, -1.0))


def mul(a, b) -> Tensor:
    """Element-wise product with broadcasting (``b`` may be a float)."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.value * b.value
    except ValueError:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.value, b.shape))

    return _node(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.value, b.value)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape))

    return _node(out, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accum(np.swapaxes(g, -1, -2))

    return _node(np.swapaxes(a.value, -1, -2), (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.value > 0

    def backward(g):
        a._accum(g * on)

    return _node(np.where(on, a.value, 0.0), (a,), backward)


def total(a) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    a = as_tensor(a)

    def backward(g):
        a._accum(np.broadcast_to(g, a.shape))

    return _node(np.sum(a.value), (a,), backward)


def sum_squares(a) -> Tensor:
    """Squared Frobenius norm."""
    a = as_tensor(a)

    def backward(g):
        a._accum(2.0 * g * a.value)

    return _node(np.sum(a.value * a.value), (a,), backward)


def take_rows(table, ids) -> Tensor:
    """Embedding lookup: ``out[..., :] = table[ids[...]]``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range for table with {table.shape[0]} rows")
    out = table.value[ids]

    def backward(g):
        acc = np.zeros_like(table.value)
        np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        table._accum(acc)

    return _node(out, (table,), backward)


def index(a, key) -> Tensor:
    """Basic slicing, e.g. ``index(h, (slice(None), -1))`` for the last step."""
    a = as_tensor(a)
    out = a.value[key]

    def backward(g):
        acc = np.zeros_like(a.value)
        acc[key] += g
        a._accum(acc)

    return _node(out, (a,), backward)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.value for x in xs], axis=axis)
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        for x, piece in zip(xs, np.split(g, sizes, axis=axis)):
            if x.requires_grad:
                x._accum(piece)

    return _node(out, tuple(xs), backward)


# ------------------------------------------------------------------- kernels


def softmax_rows(m, mask=None) -> Tensor:
    """Softmax along the last axis; ``mask`` is True where entries are kept.

    Masked entries come out as exact zeros.  A row with nothing kept raises
    :class:`DegenerateRowError`.
    """
    m = as_tensor(m)
    x = m.value
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            try:
                mask = np.broadcast_to(mask, x.shape)
            except ValueError:
                raise ShapeError(f"mask shape {mask.shape} does not match {x.shape}") from None
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax row has every entry masked")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        m._accum(y * (g - np.sum(g * y, axis=-1, keepdims=True)))

    return _node(y, (m,), backward)


def causal_mask(n_q: int, n_k: int | None = None) -> np.ndarray:
    n_k = n_q if n_k is None else n_k
    return np.tril(np.ones((n_q, n_k), dtype=bool))


def attention(q, k, v, causal_mask: bool = False, scale: float | None = None,
              key_mask=None, dropout: float = 0.0, rng=None) -> Tensor:
    """``softmax(q kᵀ · scale) v`` with optional causal and key-padding masks.

    ``key_mask`` (True = real position) hides padded keys; a query always
    keeps its own position so a padded query never yields an empty row.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    scores = mul(matmul(q, transpose(k)), scale)
    n_q, n_k = q.shape[-2], k.shape[-2]
    mask = None
    if causal_mask:
        mask = np.tril(np.ones((n_q, n_k), dtype=bool))
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)[..., None, :]
        if n_q == n_k:
            km = km | np.eye(n_q, dtype=bool)
        mask = km if mask is None else (mask & km)
    if mask is not None:
        mask = np.broadcast_to(mask, scores.shape)
    w = softmax_rows(scores, mask)
    if dropout > 0.0:
        w = dropout_(w, dropout, rng)
    return matmul(w, v)


def ffn(h, w1, b1, w2, b2) -> Tensor:
    """Point-wise ``relu(h w1 + b1) w2 + b2``."""
    h, w1, w2 = as_tensor(h), as_tensor(w1), as_tensor(w2)
    if h.shape[-1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise ShapeError(f"ffn shapes h{h.shape} w1{w1.shape} w2{w2.shape}")
    return add(matmul(relu(add(matmul(h, w1), b1)), w2), b2)


def layer_norm(x, gain, bias, eps: float = 1e-8) -> Tensor:
    x = as_tensor(x)
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        x._accum(inv * (g - g.mean(axis=-1, keepdims=True)
                        - xhat * np.mean(g * xhat, axis=-1, keepdims=True)))

    normed = _node(xhat, (x,), backward)
    return add(mul(normed, gain), bias)


def dropout_(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0``."""
    x = as_tensor(x)
    if rate <= 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


def l2_normalize_rows(m, eps: float = 1e-12) -> Tensor:
    """Divide each row by ``max(‖row‖₂, eps)``."""
    if eps <= 0:
        raise ParameterError("eps must be positive")
    m = as_tensor(m)
    norm = np.sqrt(np.sum(m.value * m.value, axis=-1, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    y = m.value / denom

    def backward(g):
        proj = np.sum(y * g, axis=-1, keepdims=True)
        m._accum(np.where(big, (g - y * proj) / denom, g / denom))

    return _node(y, (m,), backward)


def _logsumexp(x: np.ndarray) -> np.ndarray:
    mx = x.max(axis=-1, keepdims=True)
    return (mx + np.log(np.sum(np.exp(x - mx), axis=-1, keepdims=True)))[..., 0]


def info_nce(sim, tau: float) -> Tensor:
    """Mean over rows of ``-log softmax(sim/tau)[i, i]`` (diagonal positives)."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    sim = as_tensor(sim)
    s = sim.value
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] < 1:
        raise ShapeError(f"info_nce needs a non-empty square matrix, got {s.shape}")
    n = s.shape[0]
    z = s / tau
    lse = _logsumexp(z)
    loss = float(np.mean(lse - np.diag(z)))

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.diag_indices(n)] -= 1.0
        sim._accum(g * p / (n * tau))

    return _node(max(loss, 0.0), (sim,), backward)


def cross_entropy(logits, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64)
    x = logits.value
    if x.ndim != 2 or t.shape != (x.shape[0],):
        raise ShapeError(f"cross_entropy: logits {x.shape} vs targets {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= x.shape[1]):
        raise IndexError(f"target index out of range [0, {x.shape[1]})")
    b = x.shape[0]
    lse = _logsumexp(x)
    rows = np.arange(b)
    loss = float(np.mean(lse - x[rows, t]))

    def backward(g):
        p = np.exp(x - lse[:, None])
        p[rows, t] -= 1.0
        logits._accum(g * p / b)

    return _node(max(loss, 0.0), (logits,), backward)


# ----------------------------------------------------------------- optimizer


class Adam:
    """Bias-corrected adaptive-moment optimizer over a fixed parameter list."""

    def __init__(self, params: Sequence[Param], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.epsilon = lr, beta1, beta2, epsilon
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self) -> None:
        for p, m in zip(self.params, self.m):
            if p.grad.shape != p.value.shape or m.shape != p.value.shape:
                raise ShapeError(f"optimizer state/grad shape mismatch for {p.name}: "
                                 f"{p.grad.shape} vs {p.value.shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if not p.trainable:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)

    def zero_grad(self) -> None:
        zero_grad(self.params)


# -------------------------------------------------------------- verification


def grad_check(f: Callable[[], Tensor], params: Sequence[Param], h: float = 1e-5,
               floor: float = 1e-4) -> float:
    """Max relative error between the tape gradient and central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps coordinates whose true gradient is ~0 from dominating.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ParameterError(f"step h={h} outside [1e-6, 1e-4]")
    params = list(params)
    zero_grad(params)
    out = f()
    if not np.isfinite(out.value).all():
        raise EvaluationError("objective is not finite")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise EvaluationError("objective is not finite under perturbation")
            numeric = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    zero_grad(params)
    return worst
