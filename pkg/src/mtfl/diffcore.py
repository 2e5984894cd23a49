"""Dense 2-D array arithmetic with tape-based reverse-mode differentiation.

Every value on the tape is a 2-D float array (scalars are 1x1). Ops record
a backward closure per input; `backward` replays the tape in reverse and
returns gradients keyed by leaf name. A central-difference checker
(`finite_diff_check`) validates analytic gradients of any scalar build.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Node",
    "GradReport",
    "as_matrix",
    "matmul",
    "add",
    "sub",
    "add_rowvec",
    "scale",
    "hadamard",
    "sigmoid",
    "relu",
    "absolute",
    "log_clamped",
    "softmax_rows",
    "dilated_conv1d_depthwise",
    "concat_cols",
    "slice_cols",
    "slice_rows",
    "reduce",
    "row_norms",
    "topk_mean",
    "backward",
    "backward_from",
    "finite_diff_check",
]


def as_matrix(value, dtype=None) -> np.ndarray:
    """Coerce to a 2-D float array and validate finiteness.

    Floating inputs keep their precision (so the finite-difference checker
    can push extended-precision values through a build); everything else
    widens to float64.
    """
    a = np.asarray(value)
    if dtype is None:
        dtype = a.dtype if a.dtype.kind == "f" else np.float64
    a = a.astype(dtype, copy=False)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    return a


class Node:
    """One tape entry: a value plus (parent, vector-Jacobian product) pairs."""

    __slots__ = ("value", "parents", "name", "tape", "index")

    def __init__(self, value, parents, name, tape, index):
        self.value = value
        self.parents = parents
        self.name = name
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Append-only record of primitive applications, in topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, Node] = {}

    def _record(self, value: np.ndarray, parents=(), name=None) -> Node:
        node = Node(value, tuple(parents), name, self, len(self.nodes))
        self.nodes.append(node)
        return node

    def leaf(self, value, name: str | None = None) -> Node:
        """A differentiable input. Named leaves appear in backward's result."""
        node = self._record(as_matrix(value), name=name)
        if name is not None:
            if name in self.leaves:
                raise ValueError(f"duplicate leaf name {name!r}")
            self.leaves[name] = node
        return node

    def constant(self, value) -> Node:
        """A non-differentiable input (no gradient is ever requested for it)."""
        return self._record(as_matrix(value))


def _tape_of(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


def matmul(a: Node, b: Node) -> Node:
    if a.value.shape[1] != b.value.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: {a.value.shape} @ {b.value.shape}")
    av, bv = a.value, b.value
    out = av @ bv
    return _tape_of(a, b)._record(out, [
        (a, lambda g: g @ bv.T),
        (b, lambda g: av.T @ g),
    ])


def add(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ValueError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    return _tape_of(a, b)._record(a.value + b.value, [
        (a, lambda g: g),
        (b, lambda g: g),
    ])


def sub(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ValueError(f"sub shape mismatch: {a.value.shape} vs {b.value.shape}")
    return _tape_of(a, b)._record(a.value - b.value, [
        (a, lambda g: g),
        (b, lambda g: -g),
    ])


def add_rowvec(m: Node, b: Node) -> Node:
    """Broadcast-add a 1xD row (bias) over every row of an TxD matrix."""
    if b.value.shape != (1, m.value.shape[1]):
        raise ValueError(
            f"row vector shape {b.value.shape} does not match matrix {m.value.shape}")
    return _tape_of(m, b)._record(m.value + b.value, [
        (m, lambda g: g),
        (b, lambda g: g.sum(axis=0, keepdims=True)),
    ])


def scale(m: Node, c: float) -> Node:
    c = float(c)
    return m.tape._record(m.value * c, [(m, lambda g: g * c)])


def hadamard(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ValueError(
            f"hadamard shape mismatch: {a.value.shape} vs {b.value.shape}")
    av, bv = a.value, b.value
    return _tape_of(a, b)._record(av * bv, [
        (a, lambda g: g * bv),
        (b, lambda g: g * av),
    ])


def sigmoid(m: Node) -> Node:
    # Split by sign for overflow safety.
    x = m.value
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return m.tape._record(out, [(m, lambda g: g * out * (1.0 - out))])


def relu(m: Node) -> Node:
    x = m.value
    return m.tape._record(np.maximum(x, 0.0), [(m, lambda g: g * (x > 0))])


def absolute(m: Node) -> Node:
    x = m.value
    return m.tape._record(np.abs(x), [(m, lambda g: g * np.sign(x))])


def log_clamped(m: Node, lo: float = 1e-7, hi: float = 1.0 - 1e-7) -> Node:
    """log of the input clamped into [lo, hi]; gradient is zero where clamped."""
    x = m.value
    clamped = np.clip(x, lo, hi)
    inside = (x > lo) & (x < hi)
    return m.tape._record(np.log(clamped),
                          [(m, lambda g: g * inside / clamped)])


def softmax_rows(m: Node) -> Node:
    x = m.value
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return s * (g - (g * s).sum(axis=1, keepdims=True))

    return m.tape._record(s, [(m, vjp)])


def _shift_rows(x: np.ndarray, offset: int) -> np.ndarray:
    """Rows moved by `offset` (positive: downward), zero-filled."""
    out = np.zeros_like(x)
    t = x.shape[0]
    if offset == 0:
        return x.copy()
    if offset > 0:
        if offset < t:
            out[offset:] = x[:t - offset]
    else:
        if -offset < t:
            out[:t + offset] = x[-offset:]
    return out


def dilated_conv1d_depthwise(m: Node, kernel: Node, bias: Node,
                             dilation: int) -> Node:
    """Per-channel 3-tap temporal convolution with zero ("same") padding.

    kernel is Dx3 (taps at offsets -dilation, 0, +dilation); bias is 1xD.
    """
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    t, d = m.value.shape
    if kernel.value.shape != (d, 3):
        raise ValueError(
            f"kernel shape {kernel.value.shape} does not match channels {d}")
    if bias.value.shape != (1, d):
        raise ValueError(f"bias shape {bias.value.shape}, expected (1, {d})")
    x, w, b = m.value, kernel.value, bias.value
    r = dilation
    # out[t] = w0*x[t-r] + w1*x[t] + w2*x[t+r] + b
    out = (w[:, 0] * _shift_rows(x, r) + w[:, 1] * x
           + w[:, 2] * _shift_rows(x, -r) + b)

    def vjp_x(g):
        return (w[:, 0] * _shift_rows(g, -r) + w[:, 1] * g
                + w[:, 2] * _shift_rows(g, r))

    def vjp_w(g):
        gw = np.empty_like(w)
        gw[:, 0] = (g * _shift_rows(x, r)).sum(axis=0)
        gw[:, 1] = (g * x).sum(axis=0)
        gw[:, 2] = (g * _shift_rows(x, -r)).sum(axis=0)
        return gw

    return _tape_of(m, kernel, bias)._record(out, [
        (m, vjp_x),
        (kernel, vjp_w),
        (bias, lambda g: g.sum(axis=0, keepdims=True)),
    ])


def concat_cols(nodes: Sequence[Node]) -> Node:
    nodes = list(nodes)
    widths = [n.value.shape[1] for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=1)
    parents = []
    start = 0
    for n, w in zip(nodes, widths):
        j0, j1 = start, start + w
        parents.append((n, lambda g, j0=j0, j1=j1: g[:, j0:j1]))
        start = j1
    return _tape_of(*nodes)._record(out, parents)


def slice_cols(m: Node, j0: int, j1: int) -> Node:
    x = m.value

    def vjp(g):
        full = np.zeros_like(x)
        full[:, j0:j1] = g
        return full

    return m.tape._record(x[:, j0:j1].copy(), [(m, vjp)])


def slice_rows(m: Node, i0: int, i1: int) -> Node:
    x = m.value

    def vjp(g):
        full = np.zeros_like(x)
        full[i0:i1] = g
        return full

    return m.tape._record(x[i0:i1].copy(), [(m, vjp)])


def reduce(m: Node, axis: str = "all", mode: str = "sum") -> Node:
    """Reduce `m`. axis="rows": per-row (mx1); "cols": per-column (1xn); "all": 1x1."""
    if axis not in ("rows", "cols", "all"):
        raise ValueError(f"unknown axis {axis!r}")
    if mode not in ("sum", "mean"):
        raise ValueError(f"unknown mode {mode!r}")
    x = m.value
    rows, cols = x.shape
    if axis == "rows":
        out = x.sum(axis=1, keepdims=True)
        count = cols
        vjp = lambda g: np.broadcast_to(g / (count if mode == "mean" else 1.0),
                                        x.shape).copy()
    elif axis == "cols":
        out = x.sum(axis=0, keepdims=True)
        count = rows
        vjp = lambda g: np.broadcast_to(g / (count if mode == "mean" else 1.0),
                                        x.shape).copy()
    else:
        out = np.array([[x.sum()]])
        count = rows * cols
        vjp = lambda g: np.full_like(x, g[0, 0] / (count if mode == "mean" else 1.0))
    if mode == "mean":
        out = out / count
    return m.tape._record(out, [(m, vjp)])


def row_norms(m: Node) -> Node:
    """Euclidean norm of every row, as an mx1 column."""
    x = m.value
    n = np.sqrt((x * x).sum(axis=1, keepdims=True))

    def vjp(g):
        safe = np.where(n > 0, n, 1.0)
        return g * np.where(n > 0, x / safe, 0.0)

    return m.tape._record(n, [(m, vjp)])


def topk_mean(v: Node, k: int) -> Node:
    """Mean of the k largest entries of a column/row vector; ties broken by
    lowest index. Gradient flows 1/k to each selected entry only."""
    flat = v.value.ravel()
    n = flat.size
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for vector of length {n}")
    order = np.argsort(-flat, kind="stable")[:k]
    mask = np.zeros_like(v.value)
    mask.ravel()[order] = 1.0 / k
    out = np.array([[flat[order].sum() / k]])
    return v.tape._record(out, [(v, lambda g: g[0, 0] * mask)])


def _accumulate(grads: dict[int, np.ndarray], node: Node, g: np.ndarray):
    i = node.index
    if i in grads:
        grads[i] = grads[i] + g
    else:
        grads[i] = g


def backward_from(tape: Tape, seeds: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
    """Reverse sweep seeded with cotangents at given node indices.

    Returns gradients for every named leaf (exact zeros if unreached).
    The tape is not modified; repeated calls give identical results.
    """
    grads: dict[int, np.ndarray] = {i: np.asarray(g, dtype=np.float64)
                                    for i, g in seeds.items()}
    for node in reversed(tape.nodes):
        g = grads.get(node.index)
        if g is None:
            continue
        for parent, vjp in node.parents:
            _accumulate(grads, parent, vjp(g))
    out = {}
    for name, leaf in tape.leaves.items():
        g = grads.get(leaf.index)
        out[name] = np.zeros_like(leaf.value) if g is None else g
    return out


def backward(loss: Node) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss node with respect to every named leaf."""
    if loss.value.shape != (1, 1):
        raise ValueError(f"loss must be scalar (1x1), got shape {loss.value.shape}")
    return backward_from(loss.tape, {loss.index: np.ones((1, 1))})


@dataclass
class GradReport:
    max_rel_error: float
    worst_coordinate: str
    passed: bool


def finite_diff_check(build: Callable[[dict[str, np.ndarray]], Node],
                      params: dict[str, np.ndarray],
                      eps: float = 1e-5,
                      tol: float = 1e-4,
                      max_coords: int = 200,
                      seed: int = 0) -> GradReport:
    """Compare analytic gradients of `build` against central differences.

    `build` must construct a fresh tape from the given parameter arrays and
    return the scalar loss node. All coordinates are checked unless the
    total exceeds 10,000, in which case a seeded random subsample of at
    least `max_coords` coordinates is used. Relative error denominator is
    max(|analytic|, |numeric|, 1e-8).
    """
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    loss = build(params)
    if loss.value.shape != (1, 1):
        raise ValueError("build must produce a scalar loss")
    if build(params).value[0, 0] != loss.value[0, 0]:
        raise ValueError("build is not deterministic; finite differences are invalid")
    analytic = backward(loss)

    coords = [(name, idx) for name, p in params.items()
              for idx in np.ndindex(p.shape)]
    total = len(coords)
    if total > 10_000:
        rng = np.random.default_rng(seed)
        pick = rng.choice(total, size=max(max_coords, 200), replace=False)
        coords = [coords[i] for i in pick]

    # The perturbed evaluations run in extended precision so that the
    # central-difference cancellation does not drown out coordinates with
    # tiny (but correct) double-precision gradients.
    wide = {k: v.astype(np.longdouble) for k, v in params.items()}
    worst_err = 0.0
    worst = ""
    for name, idx in coords:
        p = {k: v.copy() for k, v in wide.items()}
        p[name][idx] += eps
        up = build(p).value[0, 0]
        p[name][idx] -= 2 * eps
        down = build(p).value[0, 0]
        numeric = float((up - down) / (2 * eps))
        a = analytic[name][idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if err > worst_err:
            worst_err = err
            worst = f"{name}{list(idx)}"
    return GradReport(max_rel_error=worst_err, worst_coordinate=worst,
                      passed=worst_err <= tol)
