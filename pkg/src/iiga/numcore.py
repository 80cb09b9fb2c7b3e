"""Dense float64 numeric core.

Everything downstream (attention, CTC, the trainer) is built from the
operations in this module. Values are rank-2 float64 arrays; gradients flow
through a small reverse-mode graph: each operation returns a `Var` holding
its forward value plus a closure that maps the upstream gradient onto the
operation's inputs. Calling `backward` on a scalar `Var` walks the graph in
reverse topological order and accumulates gradients into every `Parameter`
that fed it.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

Matrix = np.ndarray


class DimensionError(ValueError):
    """Shapes do not line up for the requested operation."""


class DegenerateRowError(ValueError):
    """A softmax row had every position masked out (padding bug upstream)."""


class EvaluationError(RuntimeError):
    """A checked function produced a non-finite value."""


def as_matrix(values, what: str = "matrix") -> Matrix:
    """Coerce to a finite rank-2 float64 array."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionError(f"{what}: expected rank 2, got shape {a.shape}")
    if a.size and not np.isfinite(a).all():
        raise ValueError(f"{what}: contains non-finite values")
    return a


class RngStream:
    """Deterministic random stream.

    Backed by numpy's Philox counter-based generator, so identical seeds and
    identical draw sequences give identical outputs on every platform.
    `position` counts scalar draws. `derive` produces an independent child
    stream whose seed is a SHA-256 digest of (seed, label), which keeps
    per-purpose streams (shuffle, dropout, frame-drop) decoupled.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.position = 0
        self._gen = np.random.Generator(np.random.Philox(key=self.seed & (2**64 - 1)))

    def derive(self, label: str) -> "RngStream":
        digest = hashlib.sha256(f"{self.seed}:{label}".encode()).digest()
        return RngStream(int.from_bytes(digest[:8], "little"))

    def _count(self, size) -> int:
        if size is None:
            return 1
        return int(np.prod(size))

    def random(self, size=None) -> np.ndarray:
        self.position += self._count(size)
        return self._gen.random(size)

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        self.position += self._count(size)
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        self.position += self._count(size)
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers in [low, high] inclusive."""
        self.position += self._count(size)
        return self._gen.integers(low, high, size, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        self.position += n
        return self._gen.permutation(n)

    def choice_sorted(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), in increasing order."""
        self.position += k
        picked = self._gen.choice(n, size=k, replace=False)
        return np.sort(picked)


class Parameter:
    """A named learnable matrix with a same-shaped gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value):
        self.name = name
        self.value = as_matrix(value, name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[:] = 0.0

    def var(self) -> "Var":
        leaf = Var(self.value)
        leaf._param = self
        return leaf

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Var:
    """A node in the reverse-mode graph: forward value plus backward hook.

    `_vjp(g)` returns one gradient array (or None) per parent. Leaves made
    from a `Parameter` flush their accumulated gradient into
    `Parameter.grad` when `backward` reaches them.
    """

    __slots__ = ("value", "grad", "_parents", "_vjp", "_param")

    def __init__(self, value, parents: tuple = (), vjp: Optional[Callable] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self._parents = parents
        self._vjp = vjp
        self._param: Optional[Parameter] = None

    @property
    def shape(self):
        return self.value.shape


def as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(as_matrix(x))


def backward(root: Var, seed=1.0) -> None:
    """Reverse-accumulate d(root)/d(everything) through the graph."""
    order: list[Var] = []
    visited: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    root.grad = np.broadcast_to(np.asarray(seed, dtype=np.float64), root.value.shape).copy()
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        if node._param is not None:
            node._param.grad += g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad += pg


# ---------------------------------------------------------------------------
# graph primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"matmul: inner dims differ, {a.value.shape} @ {b.value.shape}")
    av, bv = a.value, b.value
    return Var(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.shape != b.value.shape:
        raise DimensionError(f"add: shapes differ, {a.value.shape} vs {b.value.shape}")
    return Var(a.value + b.value, (a, b), lambda g: (g, g))


def add_n(vars: Sequence[Var]) -> Var:
    vars = [as_var(v) for v in vars]
    if len(vars) == 1:
        return vars[0]
    total = vars[0].value.copy()
    for v in vars[1:]:
        total += v.value
    n = len(vars)
    return Var(total, tuple(vars), lambda g: (g,) * n)


def add_rowvec(x, row) -> Var:
    """x[t, :] + row[0, :] with broadcasting over rows."""
    x, row = as_var(x), as_var(row)
    if row.value.shape != (1, x.value.shape[1]):
        raise DimensionError(f"add_rowvec: bias {row.value.shape} does not match {x.value.shape}")
    return Var(x.value + row.value, (x, row),
               lambda g: (g, g.sum(axis=0, keepdims=True)))


def scale(x, c: float) -> Var:
    x = as_var(x)
    c = float(c)
    return Var(x.value * c, (x,), lambda g: (g * c,))


def mul_elem(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.shape != b.value.shape:
        raise DimensionError(f"mul_elem: shapes differ, {a.value.shape} vs {b.value.shape}")
    av, bv = a.value, b.value
    return Var(av * bv, (a, b), lambda g: (g * bv, g * av))


def relu(x) -> Var:
    x = as_var(x)
    mask = x.value > 0.0
    return Var(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def row_slice(x, start: int, stop: int) -> Var:
    x = as_var(x)

    def vjp(g):
        full = np.zeros_like(x.value)
        full[start:stop] = g
        return (full,)

    return Var(x.value[start:stop].copy(), (x,), vjp)


def col_slice(x, start: int, stop: int) -> Var:
    x = as_var(x)

    def vjp(g):
        full = np.zeros_like(x.value)
        full[:, start:stop] = g
        return (full,)

    return Var(x.value[:, start:stop].copy(), (x,), vjp)


def concat_cols(vars: Sequence[Var]) -> Var:
    vars = [as_var(v) for v in vars]
    widths = [v.value.shape[1] for v in vars]
    edges = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(vars)))

    return Var(np.concatenate([v.value for v in vars], axis=1), tuple(vars), vjp)


def pad_rows(x, start: int, total_rows: int) -> Var:
    """Embed x into a taller zero matrix at row offset `start`."""
    x = as_var(x)
    n = x.value.shape[0]
    out = np.zeros((total_rows, x.value.shape[1]))
    out[start:start + n] = x.value
    return Var(out, (x,), lambda g: (g[start:start + n],))


def row_scale(x, weights) -> Var:
    """Scale row t by weights[t] (a fixed, non-differentiated vector)."""
    x = as_var(x)
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    if w.shape[0] != x.value.shape[0]:
        raise DimensionError(f"row_scale: {w.shape[0]} weights for {x.value.shape[0]} rows")
    return Var(x.value * w, (x,), lambda g: (g * w,))


def sum_all(x) -> Var:
    x = as_var(x)
    return Var(np.asarray(x.value.sum()), (x,), lambda g: (np.full_like(x.value, float(g)),))


def mean_scalars(vars: Sequence[Var]) -> Var:
    vars = [as_var(v) for v in vars]
    n = len(vars)
    total = float(sum(float(v.value) for v in vars))
    return Var(np.asarray(total / n), tuple(vars),
               lambda g: tuple(np.asarray(float(g) / n) for _ in vars))


def gather_bias(table_row, idx: np.ndarray) -> Var:
    """Expand a (1, M) bias table into a matrix bias via an index grid."""
    table_row = as_var(table_row)
    if table_row.value.shape[0] != 1:
        raise DimensionError(f"gather_bias: expected a single row, got {table_row.value.shape}")
    flat = table_row.value[0]

    def vjp(g):
        acc = np.zeros_like(flat)
        np.add.at(acc, idx.ravel(), g.ravel())
        return (acc.reshape(1, -1),)

    return Var(flat[idx], (table_row,), vjp)


# ---------------------------------------------------------------------------
# named operations
# ---------------------------------------------------------------------------

def linear(x, weight: Parameter, bias: Optional[Parameter] = None) -> Var:
    """x @ weight (+ bias). Gradients reach weight.grad / bias.grad via backward()."""
    x = as_var(x)
    if x.value.shape[1] != weight.value.shape[0]:
        raise DimensionError(
            f"linear: input {x.value.shape} incompatible with weight "
            f"{weight.name} {weight.value.shape}")
    out = matmul(x, weight.var())
    if bias is not None:
        out = add_rowvec(out, bias.var())
    return out


def softmax_rows(scores, mask: Optional[np.ndarray] = None) -> Var:
    """Row-wise softmax with max-subtraction; masked positions are exactly 0.

    `mask` marks allowed positions (True = may attend). A row with nothing
    allowed raises DegenerateRowError: that means padding leaked upstream.
    """
    scores = as_var(scores)
    v = scores.value
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != v.shape:
            raise DimensionError(f"softmax_rows: mask {mask.shape} vs scores {v.shape}")
        dead = ~mask.any(axis=1)
        if dead.any():
            raise DegenerateRowError(f"fully-masked softmax rows: {np.flatnonzero(dead).tolist()}")
        shifted = np.where(mask, v, -np.inf)
    else:
        shifted = v
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return Var(p, (scores,), vjp)


def log_softmax_rows(x) -> Var:
    x = as_var(x)
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(logp)

    def vjp(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return Var(logp, (x,), vjp)


def layer_norm(x, gamma: Parameter, beta: Parameter, eps: float = 1e-5) -> Var:
    """Per-row normalization: (x - mean) / sqrt(var + eps) * gamma + beta."""
    x = as_var(x)
    d = x.value.shape[1]
    if gamma.value.shape != (1, d) or beta.value.shape != (1, d):
        raise DimensionError(
            f"layer_norm: gamma {gamma.value.shape} / beta {beta.value.shape} "
            f"do not match width {d}")
    gv, bv = gamma.var(), beta.var()
    centered = x.value - x.value.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gv.value + bv.value

    def vjp(g):
        g_gamma = (g * xhat).sum(axis=0, keepdims=True)
        g_beta = g.sum(axis=0, keepdims=True)
        g_xhat = g * gv.value
        g_x = inv * (g_xhat
                     - g_xhat.mean(axis=1, keepdims=True)
                     - xhat * (g_xhat * xhat).mean(axis=1, keepdims=True))
        return (g_x, g_gamma, g_beta)

    return Var(out, (x, gv, bv), vjp)


def feed_forward(x, w1: Parameter, b1: Parameter, w2: Parameter, b2: Parameter) -> Var:
    """Position-wise two-layer net with a rectifier between."""
    return linear(relu(linear(x, w1, b1)), w2, b2)


def dropout(x, rate: float, rng: Optional[RngStream], training: bool) -> Var:
    """Zero each element with probability `rate`, scaling survivors by 1/(1-rate).

    Inference (training=False) is the bit-for-bit identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_var(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an RngStream")
    keep = (rng.random(x.value.shape) >= rate) / (1.0 - rate)
    return Var(x.value * keep, (x,), lambda g: (g * keep,))


def grad_check(fn: Callable[[], Var], params: Iterable[Parameter], eps: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    `fn` must rebuild its graph on every call and return a scalar Var.
    Returns max over all parameter entries of
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    out = fn()
    if not np.isfinite(out.value).all():
        raise EvaluationError("grad_check: function value is not finite")
    backward(out)
    analytic = {id(p): p.grad.copy() for p in params}

    def evaluate() -> float:
        v = float(fn().value)
        if not np.isfinite(v):
            raise EvaluationError("grad_check: function value is not finite")
        return v

    worst = 0.0
    for p in params:
        it = np.nditer(p.value, flags=["multi_index"])
        for _ in it:
            ij = it.multi_index
            orig = p.value[ij]
            p.value[ij] = orig + eps
            hi = evaluate()
            p.value[ij] = orig - eps
            lo = evaluate()
            p.value[ij] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic[id(p)][ij]
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if rel > worst:
                worst = rel
    return worst
