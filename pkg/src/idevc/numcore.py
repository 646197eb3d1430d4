"""Dense float64 matrices with a minimal reverse-mode autodiff tape.

Every value in the graph is a 2-D, row-major ``numpy.float64`` array; a
1x1 array plays the role of a scalar.  Operations evaluate eagerly and
record parents plus a vector-Jacobian closure, so the graph is
topologically ordered by construction.  ``backward`` walks the recorded
nodes in reverse and accumulates gradients into leaves.

Design constraints kept deliberately tight:

- 64-bit reals only; the estimators exponentiate negative squared
  distances and need the headroom.
- every public operation checks its result for NaN/Inf and raises
  ``NumericError`` naming the offending node;
- broadcasting is restricted to a (1, k) row vector over an (n, k)
  matrix (plus constant per-row scaling via ``rowscale``), which keeps
  the graph auditable;
- log-sum-exp is implemented with max-subtraction and is the single
  routing point for every log-mean-exp expression in the estimators.

The module also owns the shared on-disk matrix text format:
first line ``<rows> <cols>``, then ``rows`` lines of ``cols``
space-separated decimals with 17 significant digits, UTF-8 with LF
line endings.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable

import numpy as np

from .errors import ContractError, DimensionError, NumericError, ValidationError

_node_ids = itertools.count()


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"matrix values must be 2-D, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def _check_finite(name: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite values in node '{name}'")


class Node:
    """One value in the computation graph.

    ``grad`` is populated by :func:`backward` and has the same shape as
    ``value``.  Leaves carry ``requires_grad=True``; constants do not.
    """

    __slots__ = ("value", "grad", "parents", "name", "requires_grad", "_vjp")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Node", ...] = (),
        name: str = "",
        requires_grad: bool = False,
        vjp: Callable[[np.ndarray], None] | None = None,
    ):
        self.value = value
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.name = name or f"node{next(_node_ids)}"
        self.requires_grad = requires_grad
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Node({self.name}, shape={self.value.shape}, leaf={self._vjp is None})"


def leaf(name: str, value) -> Node:
    """Trainable leaf; gradients accumulate here."""
    arr = _as_matrix(value)
    _check_finite(name, arr)
    return Node(arr, name=name, requires_grad=True)


def constant(value, name: str = "const") -> Node:
    """Non-differentiable input; backward treats it as fixed."""
    arr = _as_matrix(value)
    _check_finite(name, arr)
    return Node(arr, name=name, requires_grad=False)


def _op(name: str, value: np.ndarray, parents: tuple[Node, ...], vjp) -> Node:
    _check_finite(name, value)
    requires = any(p.requires_grad for p in parents)
    return Node(value, parents, name, requires, vjp if requires else None)


def _accum(node: Node, grad: np.ndarray) -> None:
    if node.requires_grad:
        node.grad += grad


def _binary_shapes(op: str, a: Node, b: Node) -> bool:
    """Returns True when b is a broadcast (1, k) row vector."""
    if a.value.shape == b.value.shape:
        return False
    if b.value.shape == (1, a.value.shape[1]):
        return True
    raise DimensionError(
        f"{op}: incompatible shapes {a.value.shape} and {b.value.shape} "
        f"(nodes '{a.name}', '{b.name}')"
    )


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; b may be a (1, k) row vector."""
    broadcast = _binary_shapes("add", a, b)
    out = _op("add", a.value + b.value, (a, b), None)

    def vjp(g):
        _accum(a, g)
        _accum(b, g.sum(axis=0, keepdims=True) if broadcast else g)

    out._vjp = vjp if out.requires_grad else None
    return out


def sub(a: Node, b: Node) -> Node:
    """Elementwise difference; b may be a (1, k) row vector."""
    broadcast = _binary_shapes("sub", a, b)
    out = _op("sub", a.value - b.value, (a, b), None)

    def vjp(g):
        _accum(a, g)
        _accum(b, -(g.sum(axis=0, keepdims=True) if broadcast else g))

    out._vjp = vjp if out.requires_grad else None
    return out


def mul(a: Node, b: Node) -> Node:
    """Hadamard product; b may be a (1, k) row vector."""
    broadcast = _binary_shapes("mul", a, b)
    out = _op("mul", a.value * b.value, (a, b), None)

    def vjp(g):
        _accum(a, g * b.value)
        gb = g * a.value
        _accum(b, gb.sum(axis=0, keepdims=True) if broadcast else gb)

    out._vjp = vjp if out.requires_grad else None
    return out


def div(a: Node, b: Node) -> Node:
    """Elementwise quotient of equal shapes."""
    if a.value.shape != b.value.shape:
        raise DimensionError(
            f"div: incompatible shapes {a.value.shape} and {b.value.shape} "
            f"(nodes '{a.name}', '{b.name}')"
        )
    out = _op("div", a.value / b.value, (a, b), None)

    def vjp(g):
        _accum(a, g / b.value)
        _accum(b, -g * a.value / (b.value * b.value))

    out._vjp = vjp if out.requires_grad else None
    return out


def scale(a: Node, s: float) -> Node:
    """Multiply by a python scalar."""
    s = float(s)
    out = _op("scale", a.value * s, (a,), None)

    def vjp(g):
        _accum(a, g * s)

    out._vjp = vjp if out.requires_grad else None
    return out


def rowscale(a: Node, col) -> Node:
    """Scale row i by the constant column vector col[i]; col is (n, 1)."""
    col = np.asarray(col, dtype=np.float64).reshape(-1, 1)
    if col.shape[0] != a.value.shape[0]:
        raise DimensionError(
            f"rowscale: column of length {col.shape[0]} against "
            f"{a.value.shape[0]} rows (node '{a.name}')"
        )
    out = _op("rowscale", a.value * col, (a,), None)

    def vjp(g):
        _accum(a, g * col)

    out._vjp = vjp if out.requires_grad else None
    return out


def matmul(a: Node, b: Node) -> Node:
    """Matrix product."""
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions {a.value.shape} x {b.value.shape} "
            f"(nodes '{a.name}', '{b.name}')"
        )
    out = _op("matmul", a.value @ b.value, (a, b), None)

    def vjp(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    out._vjp = vjp if out.requires_grad else None
    return out


def transpose(a: Node) -> Node:
    out = _op("transpose", np.ascontiguousarray(a.value.T), (a,), None)

    def vjp(g):
        _accum(a, g.T)

    out._vjp = vjp if out.requires_grad else None
    return out


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    out = _op("tanh", y, (a,), None)

    def vjp(g):
        _accum(a, g * (1.0 - y * y))

    out._vjp = vjp if out.requires_grad else None
    return out


def softplus(a: Node) -> Node:
    """Numerically stable log(1 + exp(x))."""
    x = a.value
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    out = _op("softplus", y, (a,), None)

    def vjp(g):
        t = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
        _accum(a, g * sig)

    out._vjp = vjp if out.requires_grad else None
    return out


def exp(a: Node) -> Node:
    y = np.exp(a.value)
    out = _op("exp", y, (a,), None)

    def vjp(g):
        _accum(a, g * y)

    out._vjp = vjp if out.requires_grad else None
    return out


def log(a: Node) -> Node:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.value)
    out = _op("log", y, (a,), None)

    def vjp(g):
        _accum(a, g / a.value)

    out._vjp = vjp if out.requires_grad else None
    return out


def clip(a: Node, lo: float, hi: float) -> Node:
    """Clamp to [lo, hi]; gradient passes through strictly inside the range."""
    y = np.clip(a.value, lo, hi)
    out = _op("clip", y, (a,), None)

    def vjp(g):
        inside = (a.value > lo) & (a.value < hi)
        _accum(a, g * inside)

    out._vjp = vjp if out.requires_grad else None
    return out


def sum_all(a: Node) -> Node:
    out = _op("sum", np.array([[a.value.sum()]]), (a,), None)

    def vjp(g):
        _accum(a, np.full_like(a.value, g[0, 0]))

    out._vjp = vjp if out.requires_grad else None
    return out


def mean_all(a: Node) -> Node:
    n = a.value.size
    out = _op("mean", np.array([[a.value.mean()]]), (a,), None)

    def vjp(g):
        _accum(a, np.full_like(a.value, g[0, 0] / n))

    out._vjp = vjp if out.requires_grad else None
    return out


def row_sum(a: Node) -> Node:
    """Sum along each row: (n, k) -> (n, 1)."""
    out = _op("row_sum", a.value.sum(axis=1, keepdims=True), (a,), None)

    def vjp(g):
        _accum(a, np.broadcast_to(g, a.value.shape).copy())

    out._vjp = vjp if out.requires_grad else None
    return out


def row_logsumexp(a: Node, mask=None) -> Node:
    """Row-wise log-sum-exp with max-subtraction: (n, k) -> (n, 1).

    ``mask`` is an optional constant 0/1 array of the same shape; masked-out
    entries do not contribute.  Every row must keep at least one active
    entry.  All log-mean-exp expressions in the estimators route through
    this primitive.
    """
    x = a.value
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != x.shape:
            raise DimensionError(
                f"row_logsumexp: mask shape {mask.shape} vs value {x.shape} "
                f"(node '{a.name}')"
            )
        if np.any(mask.sum(axis=1) < 1):
            raise ValidationError("row_logsumexp: a row has no active entries")
        neg = np.where(mask > 0, x, -np.inf)
        m = neg.max(axis=1, keepdims=True)
        w = np.exp(x - m) * mask
    else:
        m = x.max(axis=1, keepdims=True)
        w = np.exp(x - m)
    total = w.sum(axis=1, keepdims=True)
    y = m + np.log(total)
    out = _op("row_logsumexp", y, (a,), None)
    softmax = w / total

    def vjp(g):
        _accum(a, g * softmax)

    out._vjp = vjp if out.requires_grad else None
    return out


def pairwise_sqdist(a: Node, b: Node) -> Node:
    """All-pairs squared Euclidean row distances: (n, d), (m, d) -> (n, m).

    Computed by direct subtraction (no norm expansion) so values match a
    naive per-pair loop to machine precision.
    """
    if a.value.shape[1] != b.value.shape[1]:
        raise DimensionError(
            f"pairwise_sqdist: feature dims {a.value.shape} vs {b.value.shape} "
            f"(nodes '{a.name}', '{b.name}')"
        )
    diff = a.value[:, None, :] - b.value[None, :, :]
    y = np.einsum("nmd,nmd->nm", diff, diff)
    out = _op("pairwise_sqdist", y, (a, b), None)

    def vjp(g):
        scaled = 2.0 * g[:, :, None] * diff
        _accum(a, scaled.sum(axis=1))
        _accum(b, -scaled.sum(axis=0))

    out._vjp = vjp if out.requires_grad else None
    return out


_LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_cross_logpdf(s: Node, mu: Node, var: Node) -> Node:
    """All-pairs diagonal-Gaussian log densities: (n, d), (m, d), (m, d) -> (n, m).

    Entry (i, j) is ``log N(s_i; mu_j, diag(var_j))``.  Fused so the cross
    quadratic form is computed by direct subtraction rather than a moment
    expansion, keeping values exact against a per-pair reference.
    """
    if not (s.value.shape[1] == mu.value.shape[1] == var.value.shape[1]):
        raise DimensionError(
            "gaussian_cross_logpdf: feature dims disagree "
            f"({s.value.shape}, {mu.value.shape}, {var.value.shape})"
        )
    if mu.value.shape[0] != var.value.shape[0]:
        raise DimensionError(
            "gaussian_cross_logpdf: mu and var row counts disagree "
            f"({mu.value.shape} vs {var.value.shape})"
        )
    if np.any(var.value <= 0):
        raise NumericError(f"gaussian_cross_logpdf: non-positive variance (node '{var.name}')")
    d = s.value.shape[1]
    diff = s.value[:, None, :] - mu.value[None, :, :]
    quad = np.einsum("nmd,nmd->nm", diff / var.value[None, :, :], diff)
    logdet = np.log(var.value).sum(axis=1)  # (m,)
    y = -0.5 * (d * _LOG_2PI + logdet[None, :] + quad)
    out = _op("gaussian_cross_logpdf", y, (s, mu, var), None)

    def vjp(g):
        gd = g[:, :, None] * diff / var.value[None, :, :]
        _accum(s, -gd.sum(axis=1))
        _accum(mu, gd.sum(axis=0))
        gv = -0.5 * g[:, :, None] * (
            1.0 / var.value[None, :, :]
            - (diff * diff) / (var.value[None, :, :] ** 2)
        )
        _accum(var, gv.sum(axis=0))

    out._vjp = vjp if out.requires_grad else None
    return out


def hconcat(a: Node, b: Node) -> Node:
    """Column-wise concatenation of equal-row matrices."""
    if a.value.shape[0] != b.value.shape[0]:
        raise DimensionError(
            f"hconcat: row counts {a.value.shape} vs {b.value.shape} "
            f"(nodes '{a.name}', '{b.name}')"
        )
    split = a.value.shape[1]
    out = _op("hconcat", np.hstack([a.value, b.value]), (a, b), None)

    def vjp(g):
        _accum(a, g[:, :split])
        _accum(b, g[:, split:])

    out._vjp = vjp if out.requires_grad else None
    return out


def backward(out: Node) -> None:
    """Populate ``grad`` for every node reachable from ``out``.

    ``out`` must be scalar-valued (1x1).  Gradient buffers are reset first,
    so repeated calls are idempotent.
    """
    if out.value.shape != (1, 1):
        raise ContractError(
            f"backward requires a 1x1 output node, got shape {out.value.shape} "
            f"(node '{out.name}')"
        )
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    for node in order:
        node.grad = np.zeros_like(node.value)
    if not out.requires_grad:
        return
    out.grad = np.ones((1, 1))
    for node in reversed(order):
        if node._vjp is not None:
            node._vjp(node.grad)


def finite_diff_check(
    build: Callable[[dict[str, Node]], Node],
    params: dict[str, np.ndarray],
    step: float,
) -> float:
    """Compare tape gradients of a scalar function against central differences.

    ``build`` maps named parameter nodes to a scalar output node and is
    re-invoked at perturbed points.  Returns the maximum over all parameter
    entries of ``|analytic - central| / max(|analytic|, 1e-8)``.
    """
    if step <= 0:
        raise ValidationError("finite_diff_check: step must be positive")
    leaves = {name: leaf(name, arr) for name, arr in params.items()}
    out = build(leaves)
    if out.value.shape != (1, 1):
        raise ContractError("finite_diff_check: build must produce a scalar node")
    backward(out)
    analytic = {name: leaves[name].grad.copy() for name in params}

    def value_at(current: dict[str, np.ndarray]) -> float:
        nodes = {name: constant(arr, name=name) for name, arr in current.items()}
        result = build(nodes)
        _check_finite("finite_diff_check", result.value)
        return float(result.value[0, 0])

    worst = 0.0
    work = {name: np.array(arr, dtype=np.float64) for name, arr in params.items()}
    for name, arr in work.items():
        flat = arr.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + step
            plus = value_at(work)
            flat[idx] = original - step
            minus = value_at(work)
            flat[idx] = original
            numeric = (plus - minus) / (2.0 * step)
            rel = abs(grad_flat[idx] - numeric) / max(abs(grad_flat[idx]), 1e-8)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Shared matrix text format
# ---------------------------------------------------------------------------


def format_matrix(arr: np.ndarray) -> str:
    arr = _as_matrix(arr)
    lines = [f"{arr.shape[0]} {arr.shape[1]}"]
    for row in arr:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def parse_matrix(text: str) -> np.ndarray:
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines:
        raise ValidationError("matrix text: empty input")
    header = lines[0].split()
    if len(header) != 2:
        raise ValidationError(f"matrix text: bad header line {lines[0]!r}")
    try:
        rows, cols = int(header[0]), int(header[1])
    except ValueError as exc:
        raise ValidationError(f"matrix text: bad header line {lines[0]!r}") from exc
    if rows < 1 or cols < 1:
        raise ValidationError(f"matrix text: non-positive dimensions {rows}x{cols}")
    if len(lines) - 1 != rows:
        raise ValidationError(
            f"matrix text: expected {rows} data lines, found {len(lines) - 1}"
        )
    data = np.empty((rows, cols), dtype=np.float64)
    for i, line in enumerate(lines[1:]):
        parts = line.split()
        if len(parts) != cols:
            raise ValidationError(
                f"matrix text: line {i + 2} has {len(parts)} values, expected {cols}"
            )
        data[i] = [float(p) for p in parts]
    return data


def write_matrix(path, arr: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_matrix(arr))


def read_matrix(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_matrix(fh.read())


def iter_leaves(nodes: Iterable[Node]):
    """Yield the trainable leaves among ``nodes`` (helper for updates)."""
    for node in nodes:
        if node.requires_grad and node._vjp is None and not node.parents:
            yield node
