"""Reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run: every primitive builds a fresh tape node holding its forward
value and a closure that routes the incoming gradient to its parents. Calling
:func:`backward` on a scalar root walks the tape once in reverse topological
order. The op set is deliberately small; everything else in this package is a
composition of these primitives.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np


class AutodiffError(Exception):
    """Misuse of the tape (non-scalar root, repeated backward, unbound leaf)."""


class NumericsError(ArithmeticError):
    """A primitive produced a NaN or Inf value."""


def _as_f64(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    return arr


class Tensor:
    """A tape node: forward value, parents, and a gradient-routing closure.

    Tensors are immutable once created. Leaves carry an optional name so that
    :func:`backward` can report gradients per named parameter.
    """

    __slots__ = ("data", "parents", "grad", "name", "requires_grad", "_backward", "_op", "_done")

    def __init__(
        self,
        data: np.ndarray,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        name: str | None = None,
        requires_grad: bool = False,
        op: str = "leaf",
    ):
        self.data = data
        self.parents = parents
        self.grad: np.ndarray | None = None
        self.name = name
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._backward = backward
        self._op = op
        self._done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self._op!r}, shape={self.shape}, name={self.name!r})"


def leaf(values, name: str | None = None, requires_grad: bool = True) -> Tensor:
    """Create a leaf tensor (a parameter when requires_grad, else an input)."""
    return Tensor(_as_f64(values), name=name, requires_grad=requires_grad)


def constant(values) -> Tensor:
    """Create a non-differentiable tensor (adjacency masks, labels, anchors)."""
    return Tensor(_as_f64(values), requires_grad=False, op="const")


def _make(data: np.ndarray, parents, backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite value produced by op {op!r}")
    return Tensor(data, tuple(parents), backward, op=op)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# ---------------------------------------------------------------------------
# primitive catalog
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bwd(g: np.ndarray) -> None:
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), bwd, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise AutodiffError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def bwd(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), bwd, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise AutodiffError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def bwd(g: np.ndarray) -> None:
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bwd, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g: np.ndarray) -> None:
        _accum(a, g * c)

    return _make(a.data * c, (a,), bwd, "scale")


def relu(a: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    mask = a.data > 0.0

    def bwd(g: np.ndarray) -> None:
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), bwd, "relu")


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid_stable(a.data)

    def bwd(g: np.ndarray) -> None:
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bwd, "sigmoid")


def _sigmoid_stable(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def concat(parts: Iterable[Tensor]) -> Tensor:
    """Concatenate along the last axis; leading dimensions must agree."""
    parts = list(parts)
    if not parts:
        raise AutodiffError("concat of zero tensors")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise AutodiffError(f"concat leading-dim mismatch: {[p.shape for p in parts]}")
    widths = [p.shape[-1] for p in parts]
    offs = np.cumsum([0] + widths)

    def bwd(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offs[:-1], offs[1:]):
            _accum(p, g[..., lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=-1), parts, bwd, "concat")


def gather(table: Tensor, idx) -> Tensor:
    """Select rows of a 2-D tensor by integer index (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)
    if table.data.ndim != 2:
        raise AutodiffError(f"gather expects a 2-D table, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise AutodiffError(
            f"gather index out of range: [{idx.min()}, {idx.max()}] for table with {table.shape[0]} rows"
        )

    def bwd(g: np.ndarray) -> None:
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    return _make(table.data[idx], (table,), bwd, "gather")


def broadcast_rows(v: Tensor, n: int) -> Tensor:
    """Tile a 1-D vector into n identical rows; backward sums over rows."""
    if v.data.ndim != 1:
        raise AutodiffError(f"broadcast_rows expects a vector, got {v.shape}")

    def bwd(g: np.ndarray) -> None:
        _accum(v, g.sum(axis=0))

    return _make(np.broadcast_to(v.data, (n, v.shape[0])).copy(), (v,), bwd, "broadcast_rows")


def row_sum(a: Tensor) -> Tensor:
    """Per-row sum over the last axis: [r, c] -> [r]."""
    if a.data.ndim != 2:
        raise AutodiffError(f"row_sum expects a matrix, got {a.shape}")

    def bwd(g: np.ndarray) -> None:
        _accum(a, np.repeat(g[:, None], a.shape[1], axis=1))

    return _make(a.data.sum(axis=1), (a,), bwd, "row_sum")


def row_mean(a: Tensor) -> Tensor:
    """Per-row mean over the last axis: [r, c] -> [r]."""
    if a.data.ndim != 2:
        raise AutodiffError(f"row_mean expects a matrix, got {a.shape}")
    c = a.shape[1]

    def bwd(g: np.ndarray) -> None:
        _accum(a, np.repeat(g[:, None], c, axis=1) / c)

    return _make(a.data.mean(axis=1), (a,), bwd, "row_mean")


def sum_all(a: Tensor) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        _accum(a, np.full_like(a.data, float(g)))

    return _make(np.asarray(a.data.sum()), (a,), bwd, "sum_all")


LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    xd = x.data if x.data.ndim == 2 else x.data[None, :]
    squeeze = x.data.ndim == 1
    d = xd.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise AutodiffError(f"layer_norm affine shape mismatch: {gamma.shape}, {beta.shape} for width {d}")
    mu = xd.mean(axis=1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (xd - mu) * inv
    out_data = xhat * gamma.data + beta.data
    if squeeze:
        out_data = out_data[0]

    def bwd(g: np.ndarray) -> None:
        g2 = g if g.ndim == 2 else g[None, :]
        gg = g2 * gamma.data
        dx = inv * (gg - gg.mean(axis=1, keepdims=True) - xhat * (gg * xhat).mean(axis=1, keepdims=True))
        _accum(x, dx[0] if squeeze else dx)
        _accum(gamma, (g2 * xhat).sum(axis=0))
        _accum(beta, g2.sum(axis=0))

    return _make(out_data, (x, gamma, beta), bwd, "layer_norm")


class BatchNormState:
    """Running statistics for one batch-norm layer, mutated in train mode."""

    __slots__ = ("running_mean", "running_var")

    def __init__(self, running_mean: np.ndarray, running_var: np.ndarray):
        self.running_mean = running_mean
        self.running_var = running_var


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str) -> Tensor:
    """Per-feature normalization over the row (atom) axis.

    Train mode normalizes with current-batch statistics and folds them into
    the running estimates with momentum 0.1; eval mode uses the running
    statistics, making the op a fixed affine map of x.
    """
    if x.data.ndim != 2:
        raise AutodiffError(f"batch_norm expects a matrix, got {x.shape}")
    n, d = x.shape
    if gamma.shape != (d,) or beta.shape != (d,):
        raise AutodiffError(f"batch_norm affine shape mismatch for width {d}")

    if mode == "train":
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        state.running_mean *= 1.0 - BN_MOMENTUM
        state.running_mean += BN_MOMENTUM * mu
        state.running_var *= 1.0 - BN_MOMENTUM
        state.running_var += BN_MOMENTUM * var
    elif mode == "eval":
        mu = state.running_mean
        var = state.running_var
    else:
        raise AutodiffError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")

    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mu) * inv
    out_data = xhat * gamma.data + beta.data

    if mode == "train":

        def bwd(g: np.ndarray) -> None:
            gg = g * gamma.data
            dx = inv / n * (n * gg - gg.sum(axis=0) - xhat * (gg * xhat).sum(axis=0))
            _accum(x, dx)
            _accum(gamma, (g * xhat).sum(axis=0))
            _accum(beta, g.sum(axis=0))

    else:

        def bwd(g: np.ndarray) -> None:
            _accum(x, g * gamma.data * inv)
            _accum(gamma, (g * xhat).sum(axis=0))
            _accum(beta, g.sum(axis=0))

    return _make(out_data, (x, gamma, beta), bwd, "batch_norm")


def bce_logits(z: Tensor, y: Tensor) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(z) against targets y.

    Computed from the logit for stability: softplus(z) - z*y. The gradient
    w.r.t. z is sigmoid(z) - y.
    """
    if z.shape != y.shape:
        raise AutodiffError(f"bce shape mismatch: {z.shape} vs {y.shape}")
    zd = z.data
    out_data = np.maximum(zd, 0.0) + np.log1p(np.exp(-np.abs(zd))) - zd * y.data

    def bwd(g: np.ndarray) -> None:
        _accum(z, g * (_sigmoid_stable(zd) - y.data))
        if y.requires_grad:
            _accum(y, g * (-zd))

    return _make(out_data, (z, y), bwd, "bce")


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row cross-entropy of softmax(logits) against integer targets: [n, C] -> [n]."""
    t = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or t.shape != (logits.shape[0],):
        raise AutodiffError(f"softmax_cross_entropy shapes: {logits.shape} with targets {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= logits.shape[1]):
        raise AutodiffError("softmax_cross_entropy target out of range")
    zd = logits.data
    zmax = zd.max(axis=1, keepdims=True)
    ez = np.exp(zd - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    probs = ez / denom
    rows = np.arange(t.shape[0])
    out_data = np.log(denom[:, 0]) + zmax[:, 0] - zd[rows, t]

    def bwd(g: np.ndarray) -> None:
        dz = probs * g[:, None]
        dz[rows, t] -= g
        _accum(logits, dz)

    return _make(out_data, (logits,), bwd, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# tape execution
# ---------------------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor, params: Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Propagate gradients from a scalar root back to every trainable leaf.

    Returns a name -> gradient dict for the leaves in ``params`` (zeros for
    leaves the root does not depend on). Calling backward twice on the same
    root is an error; rebuild the tape instead.
    """
    if root.data.size != 1:
        raise AutodiffError(f"backward root must be scalar, got shape {root.shape}")
    if root._done:
        raise AutodiffError("backward already ran on this root; re-run forward first")
    root._done = True

    root.grad = np.ones_like(root.data)
    for node in reversed(_topo(root)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    out: dict[str, np.ndarray] = {}
    if params is not None:
        for p in params:
            if p.name is None:
                raise AutodiffError("gradient requested for an unnamed leaf")
            out[p.name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
    return out


class Bindings(dict):
    """name -> Tensor mapping for graph functions; missing names are an error."""

    def __missing__(self, key):
        raise AutodiffError(f"unbound leaf {key!r}")


def forward(graph: Callable[[Mapping[str, Tensor]], Tensor], bindings: Mapping[str, Tensor]) -> Tensor:
    """Run a graph function over named leaf tensors, returning the root."""
    root = graph(Bindings(bindings))
    if not isinstance(root, Tensor):
        raise AutodiffError("graph did not return a Tensor")
    return root


def finite_diff_check(
    graph: Callable[[Mapping[str, Tensor]], Tensor],
    bindings: Mapping[str, float | np.ndarray],
    step: float = 1e-5,
    coord_limit: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic gradients and central differences.

    The graph is rebuilt per evaluation (define-by-run). Coordinates where the
    two one-sided differences disagree badly (a kink, e.g. relu at exactly 0)
    are excluded. ``coord_limit`` optionally subsamples the checked
    coordinates for large parameter sets.
    """
    if step <= 0:
        raise AutodiffError("finite_diff_check step must be positive")

    arrays = {k: _as_f64(v).copy() for k, v in bindings.items()}

    def run() -> Tensor:
        leaves = {k: leaf(a, name=k) for k, a in arrays.items()}
        return forward(graph, leaves)

    root = run()
    if root.data.size != 1:
        raise AutodiffError("finite_diff_check root must be scalar")
    base = float(root.data)
    leaves = _named_leaves(root)
    grad_map = backward(root, params=list(leaves.values())) if leaves else {}
    grads = {k: grad_map.get(k, np.zeros_like(a)) for k, a in arrays.items()}

    coords = [(k, i) for k, a in sorted(arrays.items()) for i in range(a.size)]
    if coord_limit is not None and len(coords) > coord_limit:
        picker = rng if rng is not None else np.random.default_rng(0)
        sel = picker.choice(len(coords), size=coord_limit, replace=False)
        coords = [coords[i] for i in sorted(sel)]

    max_err = 0.0
    for k, i in coords:
        flat = arrays[k].reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(run().data)
        flat[i] = orig - step
        f_minus = float(run().data)
        flat[i] = orig

        fwd_slope = (f_plus - base) / step
        back_slope = (base - f_minus) / step
        kink_scale = max(1.0, abs(fwd_slope), abs(back_slope))
        if abs(fwd_slope - back_slope) > 0.1 * kink_scale:
            continue  # nondifferentiable point; excluded by convention

        fd = (f_plus - f_minus) / (2.0 * step)
        analytic = float(grads[k].reshape(-1)[i])
        err = abs(analytic - fd) / max(1.0, abs(analytic))
        max_err = max(max_err, err)
    return max_err


def _named_leaves(root: Tensor) -> dict[str, Tensor]:
    found: dict[str, Tensor] = {}
    for node in _topo(root):
        if node.name is not None and not node.parents:
            found[node.name] = node
    return found
