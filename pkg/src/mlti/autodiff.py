"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape-free engine sufficient for dense few-shot models: tensors record
their parents and the op that produced them, ``backward`` walks the implicit
DAG. Backward rules are themselves written in terms of the public ops, so a
backward pass run with ``create_graph=True`` records new differentiable nodes
and a second backward yields exact gradients-of-gradients (used for unrolled
inner-loop meta-gradients).

Conventions:
  * everything is float64, row-major;
  * every completed op checks its output for NaN/Inf and raises;
  * softmax-style ops clamp logits to [-50, 50] before exponentiation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeMismatchError",
    "NonFiniteError",
    "ValidationError",
    "UnsupportedCapabilityError",
    "no_grad",
    "register_op",
    "backward",
    "meta_gradient",
    "finite_diff",
    "one_hot",
    "softmax_cross_entropy",
    "mse",
    "trace",
]

LOGIT_CLAMP = 50.0

_ids = itertools.count()


class ShapeMismatchError(ValueError):
    """Operand shapes do not conform for the named primitive."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf, or a leaf was built from non-finite data."""


class ValidationError(ValueError):
    """A value-level precondition failed (e.g. non-simplex soft targets)."""


class UnsupportedCapabilityError(RuntimeError):
    """A second-order backward was requested through a first-order-only primitive."""


class no_grad:
    """Context manager: tensors created inside are never tracked."""

    _depth = 0

    def __enter__(self):
        no_grad._depth += 1
        return self

    def __exit__(self, *exc):
        no_grad._depth -= 1
        return False


def _grad_enabled() -> bool:
    return no_grad._depth == 0


class Tensor:
    """Dense float64 array with optional participation in differentiation.

    ``tracked`` tensors remember the op and parent tensors that produced them;
    ids are assigned in construction order, so every parent id is smaller than
    its child's id and the implicit graph is acyclic by construction.
    """

    __slots__ = ("data", "tracked", "op", "parents", "op_args", "id")

    def __init__(self, data, tracked: bool = False, op: str = "leaf",
                 parents: tuple = (), op_args: Optional[dict] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in output of op '{op}'")
        self.data = arr
        self.tracked = bool(tracked) and _grad_enabled()
        self.op = op
        self.parents = parents if self.tracked else ()
        self.op_args = op_args or {}
        self.id = next(_ids)

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), tracked=False)

    def __repr__(self):
        flag = "tracked" if self.tracked else "const"
        return f"Tensor(shape={self.shape}, op={self.op!r}, {flag})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# op registry
# ---------------------------------------------------------------------------

@dataclass
class OpDef:
    name: str
    forward: Callable
    vjp: Callable  # vjp(grad_out: Tensor, node: Tensor) -> list of grads per parent
    second_order_ok: bool = True


OPS: dict[str, OpDef] = {}


def register_op(name: str, forward: Callable, vjp: Callable, second_order_ok: bool = True):
    """Register a primitive. Tests may add first-order-only primitives."""
    OPS[name] = OpDef(name, forward, vjp, second_order_ok)


def _apply(name: str, *inputs: Tensor, **op_args) -> Tensor:
    opdef = OPS[name]
    out_data = opdef.forward(*(t.data for t in inputs), **op_args)
    tracked = _grad_enabled() and any(t.tracked for t in inputs)
    return Tensor(out_data, tracked=tracked, op=name,
                  parents=tuple(inputs) if tracked else (), op_args=op_args)


# ---------------------------------------------------------------------------
# primitive forwards / backward rules
# ---------------------------------------------------------------------------

def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    return sum_to(g, shape)


def _conform_elementwise(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _conform_elementwise("add", a, b)
    return _apply("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _conform_elementwise("sub", a, b)
    return _apply("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _conform_elementwise("mul", a, b)
    return _apply("mul", a, b)


def scale(a: Tensor, c: float) -> Tensor:
    return _apply("scale", a, c=float(c))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    return _apply("matmul", a, b)


def transpose(a: Tensor) -> Tensor:
    return _apply("transpose", a)


def relu(a: Tensor) -> Tensor:
    return _apply("relu", a)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    return _apply("clip", a, lo=float(lo), hi=float(hi))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _apply("sum", a, axis=axis, keepdims=keepdims)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _apply("mean", a, axis=axis, keepdims=keepdims)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _apply("reshape", a, shape=tuple(shape))


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    return _apply("broadcast_to", a, shape=tuple(shape))


def sum_to(a: Tensor, shape: tuple) -> Tensor:
    return _apply("sum_to", a, shape=tuple(shape))


def rows(a: Tensor, idx) -> Tensor:
    """Select rows by index list (gather along axis 0)."""
    idx = np.asarray(idx, dtype=np.intp)
    if a.ndim < 1 or (idx.size and idx.max(initial=0) >= a.shape[0]):
        raise ShapeMismatchError("rows", a.shape, (int(idx.max(initial=0)) + 1,))
    return _apply("rows", a, idx=idx)


def rows_scatter(g: Tensor, idx, n_rows: int) -> Tensor:
    """Scatter-add rows of ``g`` into a zero tensor with ``n_rows`` rows."""
    return _apply("rows_scatter", g, idx=np.asarray(idx, dtype=np.intp), n_rows=int(n_rows))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [p if isinstance(p, Tensor) else _as_tensor(p) for p in parts]
    widths = {p.shape[1:] for p in parts}
    if len(widths) != 1:
        raise ShapeMismatchError("concat_rows", *(p.shape for p in parts))
    return _apply("concat_rows", *parts)


def rows_slice(a: Tensor, start: int, stop: int) -> Tensor:
    return _apply("rows_slice", a, start=int(start), stop=int(stop))


def softmax(a: Tensor) -> Tensor:
    """Row softmax with the standard max-shift; logits clamped to +-LOGIT_CLAMP."""
    return _apply("softmax", a)


def logsumexp_rows(a: Tensor) -> Tensor:
    return _apply("logsumexp_rows", a)


def sqdist(q: Tensor, p: Tensor) -> Tensor:
    """Pairwise squared Euclidean distances, rows of q against rows of p."""
    if q.ndim != 2 or p.ndim != 2 or q.shape[1] != p.shape[1]:
        raise ShapeMismatchError("sqdist", q.shape, p.shape)
    return _apply("sqdist", q, p)


# forwards ------------------------------------------------------------------

def _fwd_softmax(x):
    z = np.clip(x, -LOGIT_CLAMP, LOGIT_CLAMP)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _fwd_logsumexp(x):
    z = np.clip(x, -LOGIT_CLAMP, LOGIT_CLAMP)
    m = z.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]


def _fwd_sqdist(q, p):
    qq = (q * q).sum(axis=1, keepdims=True)
    pp = (p * p).sum(axis=1)
    return qq + pp[None, :] - 2.0 * (q @ p.T)


def _fwd_sum(x, axis=None, keepdims=False):
    return np.sum(x, axis=axis, keepdims=keepdims)


def _fwd_mean(x, axis=None, keepdims=False):
    return np.mean(x, axis=axis, keepdims=keepdims)


def _fwd_sum_to(x, shape):
    out = x
    while out.ndim > len(shape):
        out = out.sum(axis=0)
    for ax, n in enumerate(shape):
        if out.shape[ax] != n:
            out = out.sum(axis=ax, keepdims=True)
    return out.reshape(shape)


def _fwd_rows_scatter(g, idx, n_rows):
    out = np.zeros((n_rows,) + g.shape[1:], dtype=np.float64)
    np.add.at(out, idx, g)
    return out


# vjps ------------------------------------------------------------------------
# Each vjp returns one entry per parent; entries for untracked parents are
# ignored by backward, None marks "no gradient defined/needed".

def _vjp_add(g, node):
    a, b = node.parents
    return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


def _vjp_sub(g, node):
    a, b = node.parents
    return [_unbroadcast(g, a.shape), _unbroadcast(scale(g, -1.0), b.shape)]


def _vjp_mul(g, node):
    a, b = node.parents
    return [_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)]


def _vjp_scale(g, node):
    return [scale(g, node.op_args["c"])]


def _vjp_matmul(g, node):
    a, b = node.parents
    return [matmul(g, transpose(b)), matmul(transpose(a), g)]


def _vjp_transpose(g, node):
    return [transpose(g)]


def _vjp_relu(g, node):
    (a,) = node.parents
    mask = Tensor((a.data > 0).astype(np.float64))
    return [mul(g, mask)]


def _vjp_clip(g, node):
    (a,) = node.parents
    lo, hi = node.op_args["lo"], node.op_args["hi"]
    mask = Tensor(((a.data > lo) & (a.data < hi)).astype(np.float64))
    return [mul(g, mask)]


def _vjp_sum(g, node):
    (a,) = node.parents
    axis, keepdims = node.op_args["axis"], node.op_args["keepdims"]
    if axis is not None and not keepdims:
        kept = list(node.data.shape)
        for ax in np.atleast_1d(axis):
            kept.insert(ax if ax >= 0 else a.ndim + ax, 1)
        g = reshape(g, tuple(kept))
    return [broadcast_to(g, a.shape)]


def _vjp_mean(g, node):
    (a,) = node.parents
    n = a.size // max(node.data.size, 1)
    [gs] = _vjp_sum(g, node)
    return [scale(gs, 1.0 / n)]


def _vjp_reshape(g, node):
    (a,) = node.parents
    return [reshape(g, a.shape)]


def _vjp_broadcast_to(g, node):
    (a,) = node.parents
    return [sum_to(g, a.shape)]


def _vjp_sum_to(g, node):
    (a,) = node.parents
    return [broadcast_to(g, a.shape)]


def _vjp_rows(g, node):
    (a,) = node.parents
    return [rows_scatter(g, node.op_args["idx"], a.shape[0])]


def _vjp_rows_scatter(g, node):
    return [rows(g, node.op_args["idx"])]


def _vjp_concat_rows(g, node):
    grads, start = [], 0
    for p in node.parents:
        grads.append(rows_slice(g, start, start + p.shape[0]))
        start += p.shape[0]
    return grads


def _vjp_rows_slice(g, node):
    (a,) = node.parents
    start = node.op_args["start"]
    idx = np.arange(start, node.op_args["stop"], dtype=np.intp)
    return [rows_scatter(g, idx, a.shape[0])]


def _vjp_softmax(g, node):
    # ds/dz = s * (g - sum(g*s)); s recomputed from the parent so that the
    # rule itself is differentiable for second-order passes
    (a,) = node.parents
    s = softmax(a)
    inner = tsum(mul(g, s), axis=-1, keepdims=True)
    return [mul(s, sub(g, inner))]


def _vjp_logsumexp(g, node):
    (a,) = node.parents
    s = softmax(a)
    gcol = reshape(g, g.shape + (1,))
    return [mul(broadcast_to(gcol, a.shape), s)]


def _vjp_sqdist(g, node):
    q, p = node.parents
    ones_m = Tensor(np.ones((p.shape[0], 1)))
    ones_n = Tensor(np.ones((q.shape[0], 1)))
    row_tot = matmul(g, ones_m)            # [n,1]
    col_tot = matmul(transpose(g), ones_n)  # [m,1]
    gq = scale(sub(mul(q, broadcast_to(row_tot, q.shape)), matmul(g, p)), 2.0)
    gp = scale(sub(mul(p, broadcast_to(col_tot, p.shape)), matmul(transpose(g), q)), 2.0)
    return [gq, gp]


for _name, _fwd, _bwd in [
    ("add", np.add, _vjp_add),
    ("sub", np.subtract, _vjp_sub),
    ("mul", np.multiply, _vjp_mul),
    ("scale", lambda x, c: x * c, _vjp_scale),
    ("matmul", lambda a, b: a @ b, _vjp_matmul),
    ("transpose", lambda a: a.T.copy(), _vjp_transpose),
    ("relu", lambda x: np.maximum(x, 0.0), _vjp_relu),
    ("clip", lambda x, lo, hi: np.clip(x, lo, hi), _vjp_clip),
    ("sum", _fwd_sum, _vjp_sum),
    ("mean", _fwd_mean, _vjp_mean),
    ("reshape", lambda x, shape: x.reshape(shape), _vjp_reshape),
    ("broadcast_to", lambda x, shape: np.broadcast_to(x, shape).copy(), _vjp_broadcast_to),
    ("sum_to", _fwd_sum_to, _vjp_sum_to),
    ("rows", lambda x, idx: x[idx], _vjp_rows),
    ("rows_scatter", _fwd_rows_scatter, _vjp_rows_scatter),
    ("concat_rows", lambda *parts: np.concatenate(parts, axis=0), _vjp_concat_rows),
    ("rows_slice", lambda x, start, stop: x[start:stop].copy(), _vjp_rows_slice),
    ("softmax", _fwd_softmax, _vjp_softmax),
    ("logsumexp_rows", _fwd_logsumexp, _vjp_logsumexp),
    ("sqdist", _fwd_sqdist, _vjp_sqdist),
]:
    register_op(_name, _fwd, _bwd)


# ---------------------------------------------------------------------------
# composite losses / constructors
# ---------------------------------------------------------------------------

def one_hot(labels, n_classes: int) -> Tensor:
    """Constant one-hot row matrix from integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.size, n_classes), dtype=np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return Tensor(out)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy between row-softmax of logits and soft target rows.

    Target rows must lie on the simplex (each row sums to 1 within 1e-9).
    Logits are clamped to [-LOGIT_CLAMP, LOGIT_CLAMP] before exponentiation.
    """
    targets = _as_tensor(targets)
    if logits.ndim != 2 or logits.shape != targets.shape:
        raise ShapeMismatchError("softmax_cross_entropy", logits.shape, targets.shape)
    row_sums = targets.data.sum(axis=1)
    bad = np.abs(row_sums - 1.0) > 1e-9
    if bad.any():
        raise ValidationError(
            f"softmax_cross_entropy: target row {int(np.argmax(bad))} sums to "
            f"{row_sums[np.argmax(bad)]!r}, expected 1 within 1e-9")
    z = clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    per_row = sub(logsumexp_rows(z), tsum(mul(z, targets), axis=1))
    return tmean(per_row)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all entries."""
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatchError("mse", pred.shape, target.shape)
    d = sub(pred, target)
    return tmean(mul(d, d))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.id not in seen:
                stack.append((p, False))
    return order  # parents before children


def backward(loss: Tensor, wrt: dict, create_graph: bool = False) -> dict:
    """Gradients of a scalar loss with respect to named tensors.

    Returns a mapping with the same keys as ``wrt`` restricted to tracked
    entries; a tracked entry the loss does not reach maps to a zero gradient.
    With ``create_graph=True`` the returned gradients are themselves graph
    nodes, so a further backward differentiates through this one.
    """
    if loss.shape != ():
        raise ValidationError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _toposort(loss)
    if create_graph:
        bad = sorted({n.op for n in order if n.parents and not OPS[n.op].second_order_ok})
        if bad:
            raise UnsupportedCapabilityError(
                "second-order backward unsupported for primitive(s): " + ", ".join(bad))

    wanted = {t.id for t in wrt.values() if isinstance(t, Tensor)}
    grads: dict[int, Tensor] = {loss.id: Tensor(np.ones(()))}

    def run():
        for node in reversed(order):
            g = grads.get(node.id)
            if g is None:
                continue
            if node.parents:
                parent_grads = OPS[node.op].vjp(g, node)
                for parent, pg in zip(node.parents, parent_grads):
                    if pg is None or not parent.tracked:
                        continue
                    acc = grads.get(parent.id)
                    grads[parent.id] = pg if acc is None else add(acc, pg)
            if node.id not in wanted:
                del grads[node.id]

    if create_graph:
        run()
    else:
        with no_grad():
            run()

    out = {}
    for name, t in wrt.items():
        if not t.tracked:
            continue
        g = grads.get(t.id)
        if g is None:
            g = Tensor(np.zeros(t.shape))
        out[name] = g if create_graph else (g if not g.tracked else g.detach())
    return out


# ---------------------------------------------------------------------------
# bilevel meta-gradient
# ---------------------------------------------------------------------------

def meta_gradient(support_loss_fn: Callable[[dict], Tensor],
                  query_loss_fn: Callable[[dict], Tensor],
                  params: dict,
                  inner_lr: float,
                  updates: int,
                  order: str = "second",
                  adapt: Optional[Iterable[str]] = None) -> dict:
    """Gradient of the query loss through ``updates`` inner gradient steps.

    The inner loop minimizes ``support_loss_fn`` over the ``adapt`` subset of
    ``params`` with step size ``inner_lr``. With ``order='second'`` the inner
    updates stay on the graph and the result is the exact derivative of the
    query loss as a function of the initial parameters; with ``order='first'``
    the inner dependence is detached and the query gradient is evaluated at
    the adapted point.
    """
    if order not in ("first", "second"):
        raise ValidationError(f"meta_gradient: unknown order {order!r}")
    if inner_lr < 0 or updates < 0:
        raise ValidationError("meta_gradient: inner_lr and updates must be >= 0")
    adapt = set(params if adapt is None else adapt)

    if order == "second":
        cur = dict(params)
        for _ in range(updates):
            if inner_lr == 0.0:
                break
            sl = support_loss_fn(cur)
            gs = backward(sl, {n: cur[n] for n in adapt}, create_graph=True)
            cur = {n: (sub(cur[n], scale(gs[n], inner_lr)) if n in adapt else cur[n])
                   for n in cur}
        ql = query_loss_fn(cur)
        return backward(ql, params)

    # first order: adapted tensors are fresh leaves, inner grads detached
    cur = dict(params)
    adapted = {n: Tensor(params[n].data.copy(), tracked=True) for n in adapt}
    cur.update(adapted)
    for _ in range(updates):
        if inner_lr == 0.0:
            break
        sl = support_loss_fn(cur)
        gs = backward(sl, {n: cur[n] for n in adapt})
        adapted = {n: Tensor(cur[n].data - inner_lr * gs[n].data, tracked=True)
                   for n in adapt}
        cur.update(adapted)
    ql = query_loss_fn(cur)
    leaf_map = dict(params)
    leaf_map.update({n: cur[n] for n in adapt})
    gq = backward(ql, leaf_map)
    return {n: gq[n] for n in params if n in gq}


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff(fn: Callable[[dict], float], point: dict, step: float = 1e-5) -> dict:
    """Central-difference gradient estimate of a scalar function of named arrays.

    ``fn`` must be deterministic; a non-finite value raises with the offending
    coordinate named.
    """
    if step <= 0:
        raise ValidationError("finite_diff: step must be > 0")
    point = {k: np.asarray(v, dtype=np.float64) for k, v in point.items()}
    grads = {}
    for name, arr in point.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn(point)
            flat[i] = orig - step
            fm = fn(point)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"finite_diff: non-finite value at {name}[{i}]")
            gflat[i] = (fp - fm) / (2.0 * step)
        grads[name] = g
    return grads


def grad_relative_error(analytic: dict, numeric: dict) -> float:
    """Max-norm difference between two gradient mappings over their joint scale."""
    num = 0.0
    den = 1e-8
    for name in numeric:
        a = analytic[name].data if isinstance(analytic[name], Tensor) else analytic[name]
        b = np.asarray(numeric[name])
        num = max(num, float(np.abs(a - b).max()) if b.size else 0.0)
        den = max(den, float(np.abs(a).max()) if b.size else 0.0,
                  float(np.abs(b).max()) if b.size else 0.0)
    return num / den


# ---------------------------------------------------------------------------
# graph tracing (inspection/replay)
# ---------------------------------------------------------------------------

@dataclass
class GraphNode:
    id: int
    op: str
    parent_ids: tuple
    op_args: dict
    output: Tensor


@dataclass
class Graph:
    """Recorded forward computation reachable from one root tensor."""

    nodes: list = field(default_factory=list)
    roots: list = field(default_factory=list)  # ids of tracked leaves

    def replay(self) -> dict:
        """Re-execute every recorded op from the leaves; returns id -> array."""
        values: dict[int, np.ndarray] = {}
        for node in self.nodes:
            if not node.parent_ids:
                values[node.id] = node.output.data
            else:
                args = [values[p] for p in node.parent_ids]
                values[node.id] = OPS[node.op].forward(*args, **node.op_args)
        return values


def trace(root: Tensor) -> Graph:
    order = _toposort(root)
    order.sort(key=lambda t: t.id)
    g = Graph()
    for t in order:
        pids = tuple(p.id for p in t.parents)
        assert all(pid < t.id for pid in pids), "graph must be acyclic by id order"
        g.nodes.append(GraphNode(t.id, t.op, pids, t.op_args, t))
        if not t.parents and t.tracked:
            g.roots.append(t.id)
    return g
