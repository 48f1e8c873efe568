"""Dense float64 tensors with a reverse-mode tape.

Only the operations the QMDP-net needs are provided. Every op accepts an
unbatched operand (e.g. H x W x C) or the same operand with a leading batch
axis (B x H x W x C); batching is how training amortizes Python overhead.

Ops run eagerly. When a :class:`Tape` is active and some input requires a
gradient, the op appends a record with its backward rule; :func:`backward`
replays the records in reverse.

    >>> p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(mul(p, p))
    >>> backward(tape, loss)[p]
    array([2., 4.])
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from qmdpnet import kernels

LOG_EPS = 1e-12
NORM_EPS = 1e-12


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class DegenerateBeliefError(ValueError):
    """A distribution to be normalized has (almost) no mass."""


_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "node_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __hash__(self) -> int:
        return self.node_id

    def __eq__(self, other) -> bool:  # identity semantics; needed for dict keys
        return self is other


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def validate(self) -> None:
        """Check that records are topologically ordered (inputs before consumers)."""
        produced: set[int] = set()
        for rec in self.records:
            out = rec.output.node_id
            if out in produced:
                raise RuntimeError(f"tape cycle: node {out} produced twice ({rec.op})")
            for t in rec.inputs:
                if t.node_id > out:
                    raise RuntimeError(f"tape cycle: {rec.op} consumes a later node")
            produced.add(out)


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _active() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


@contextmanager
def no_grad():
    """Suspend recording on the active tape (forward values only)."""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    _check_finite(op, out)
    needs = any(t.requires_grad for t in inputs)
    res = Tensor(out, requires_grad=needs)
    tape = _active()
    if needs and tape is not None:
        tape.records.append(Record(op, inputs, res, grad_fn))
    return res


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` w.r.t. every leaf that requires grad."""
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output.node_id, None)
        if g is None:
            continue
        in_grads = rec.grad_fn(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + gi
            else:
                grads[t.node_id] = gi
            leaves.setdefault(t.node_id, t)
    out: dict[Tensor, np.ndarray] = {}
    for nid, g in grads.items():
        t = leaves.get(nid)
        if t is None:
            if nid == loss.node_id:
                t = loss
            else:
                continue
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {t!r}")
        out[t] = g.reshape(t.shape)
    return out


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last axis."""
    if bias.shape != x.shape[-1:]:
        raise ValueError(f"add_bias: bias {bias.shape} vs last axis of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return _emit("add_bias", x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=axes)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split form avoids overflow in exp for large |d|
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def pointwise(x: Tensor, kind: str) -> Tensor:
    try:
        fn = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "linear": lambda t: t}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), grad_fn)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _emit("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def dot_const(x: Tensor, w: np.ndarray) -> Tensor:
    """Scalar sum(x * w) with a constant weight array (masked means)."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != x.shape:
        raise ValueError(f"dot_const: {w.shape} vs {x.shape}")
    return _emit("dot_const", np.asarray((x.data * w).sum()), (x,), lambda g: (g * w,))


# ---------------------------------------------------------------- network ops


def _as_batch(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], False
    if x.ndim == rank + 1:
        return x, True
    raise ValueError(f"expected rank {rank} or {rank + 1}, got shape {x.shape}")


def conv2d(x: Tensor, k: Tensor) -> Tensor:
    """'Same' 2-D correlation with zero padding.

    out[x, y, co] = sum_{dx, dy, ci} k[dx, dy, ci, co] * in[x + dx - p, y + dy - p, ci]
    """
    if k.ndim != 4:
        raise ValueError(f"conv2d: kernel must be kh x kw x Cin x Cout, got {k.shape}")
    kh, kw, ci, _ = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    xb, batched = _as_batch(x.data, 3)
    if xb.shape[3] != ci:
        raise ValueError(f"conv2d: input has {xb.shape[3]} channels, kernel expects {ci}")
    kd = k.data
    y = kernels.conv2d_forward(xb, kd)

    def grad_fn(g):
        gb = g if batched else g[None]
        gb = np.ascontiguousarray(gb)
        gx = kernels.conv2d_backward_input(gb, kd) if x.requires_grad else None
        gk = kernels.conv2d_backward_kernel(xb, gb, kh, kw) if k.requires_grad else None
        if gx is not None and not batched:
            gx = gx[0]
        return gx, gk

    return _emit("conv2d", y if batched else y[0], (x, k), grad_fn)


def channel_group_max(x: Tensor, groups: int, return_argmax: bool = False):
    """Max over each contiguous block of C = channels/groups channels.

    Ties resolve to the lowest channel index; gradients go only to the winner.
    """
    xb, batched = _as_batch(x.data, 3)
    ct = xb.shape[3]
    if groups <= 0 or ct % groups:
        raise ValueError(f"channel_group_max: {ct} channels not divisible by {groups} groups")
    y, idx = kernels.group_max_forward(xb, groups)

    def grad_fn(g):
        gb = g if batched else g[None]
        gx = kernels.group_max_backward(np.ascontiguousarray(gb), idx, ct)
        return (gx if batched else gx[0],)

    out = _emit("channel_group_max", y if batched else y[0], (x,), grad_fn)
    if return_argmax:
        return out, (idx if batched else idx[0])
    return out


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for an n-vector (or B x n batch), n x m weights, m bias."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"fully_connected: shapes {x.shape}, {w.shape}, {b.shape} disagree")
    if x.ndim not in (1, 2):
        raise ValueError("fully_connected: input must be a vector or a batch of vectors")
    xd, wd = x.data, w.data

    def grad_fn(g):
        gx = g @ wd.T
        gw = np.outer(xd, g) if xd.ndim == 1 else xd.T @ g
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gw, gb

    return _emit("fully_connected", xd @ wd + b.data, (x, w, b), grad_fn)


def weighted_channel_sum(x: Tensor, w: Tensor, block: int = 1, keepdims: bool = False) -> Tensor:
    """Soft indexing along the channel axis.

    With ``block == 1``: out[x, y] = sum_c in[x, y, c] * w[c]. With ``block = k``
    the channels are len(w) consecutive blocks of k and the blocks are mixed:
    out[x, y, j] = sum_c in[x, y, c*k + j] * w[c]. A batched input pairs each
    batch item with its own row of a B x C weight matrix.
    """
    xb, batched = _as_batch(x.data, 3)
    wb = w.data if batched else w.data[None]
    B, H, W, ct = xb.shape
    n = wb.shape[1]
    if wb.ndim != 2 or wb.shape[0] != B or n * block != ct:
        raise ValueError(f"weighted_channel_sum: weights {w.shape} do not match input {x.shape} (block {block})")
    xr = xb.reshape(B, H, W, n, block)
    y = np.einsum("bhwcj,bc->bhwj", xr, wb, optimize=True)

    def grad_fn(g):
        gb = g.reshape(B, H, W, block)
        gx = (gb[:, :, :, None, :] * wb[:, None, None, :, None]).reshape(B, H, W, ct)
        gw = np.einsum("bhwcj,bhwj->bc", xr, gb, optimize=True)
        if not batched:
            gx, gw = gx[0], gw[0]
        return gx, gw

    if block == 1 and not keepdims:
        y = y[..., 0]
    if not batched:
        y = y[0]
    return _emit("weighted_channel_sum", y, (x, w), grad_fn)


def normalize_sum1(x: Tensor, batched: bool = False) -> Tensor:
    """Divide by the total (per leading batch item when ``batched``)."""
    d = x.data
    if (d < 0).any():
        raise ValueError("normalize_sum1: negative entries")
    axes = tuple(range(1, d.ndim)) if batched else None
    tot = d.sum(axis=axes, keepdims=True)
    if (tot < NORM_EPS).any():
        raise DegenerateBeliefError(f"distribution mass {float(np.min(tot)):.3g} below {NORM_EPS}")
    y = d / tot

    def grad_fn(g):
        return ((g - (g * y).sum(axis=axes, keepdims=True)) / tot,)

    return _emit("normalize_sum1", y, (x,), grad_fn)


def cross_entropy(pred: Tensor, label) -> Tensor:
    """-log(pred[label] + 1e-12); per-item vector for a batch of predictions."""
    p = pred.data
    if p.ndim == 1:
        m = p.shape[0]
        lab = int(label)
        if not 0 <= lab < m:
            raise IndexError(f"label {lab} out of range for {m} classes")
        picked = p[lab]

        def grad_fn(g):
            gp = np.zeros_like(p)
            gp[lab] = -g / (picked + LOG_EPS)
            return (gp,)

        return _emit("cross_entropy", np.asarray(-np.log(picked + LOG_EPS)), (pred,), grad_fn)
    lab = np.asarray(label, dtype=np.int64)
    B, m = p.shape
    if lab.shape != (B,) or (lab < 0).any() or (lab >= m).any():
        raise IndexError("labels out of range or wrong shape")
    rows = np.arange(B)
    picked = p[rows, lab]

    def grad_fn_b(g):
        gp = np.zeros_like(p)
        gp[rows, lab] = -g / (picked + LOG_EPS)
        return (gp,)

    return _emit("cross_entropy", -np.log(picked + LOG_EPS), (pred,), grad_fn_b)


def qmdp_contract(q: Tensor, b: Tensor) -> Tensor:
    """Belief-weighted action values.

    ``q`` is H x W x (O*A) laid out as O blocks of A actions, ``b`` is H x W x O;
    returns the A-vector sum_{x,y,o} q[x, y, o*A + a] * b[x, y, o].
    """
    qb, batched = _as_batch(q.data, 3)
    bb = b.data if batched else b.data[None]
    if bb.ndim != 4 or bb.shape[:3] != qb.shape[:3] or qb.shape[3] % bb.shape[3]:
        raise ValueError(f"qmdp_contract: shapes {q.shape} and {b.shape} disagree")
    B, H, W, O = bb.shape
    A = qb.shape[3] // O
    qr = qb.reshape(B, H, W, O, A)
    y = np.einsum("bhwoa,bhwo->ba", qr, bb, optimize=True)

    def grad_fn(g):
        gb_ = g if batched else g[None]
        gq = (bb[..., None] * gb_[:, None, None, None, :]).reshape(qb.shape)
        gbel = np.einsum("bhwoa,ba->bhwo", qr, gb_, optimize=True)
        if not batched:
            gq, gbel = gq[0], gbel[0]
        return gq, gbel

    return _emit("qmdp_contract", y if batched else y[0], (q, b), grad_fn)


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    checked: int
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    build: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-6,
    tolerance: float = 1e-3,
    max_coords: int | None = 20,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients with central differences.

    ``build`` must rebuild the scalar loss from the current parameter values.
    Relative error is |a - n| / max(|a|, |n|, floor); ``max_coords`` samples
    that many coordinates per parameter (None checks all).
    """
    rng = np.random.default_rng(seed)
    with Tape() as tape:
        loss = build()
    grads = backward(tape, loss)
    per: dict[str, float] = {}
    checked = 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = grads.get(p, np.zeros(p.shape)).reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = build().item()
            flat[i] = old - eps
            fm = build().item()
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            err = abs(g[i] - num) / max(abs(g[i]), abs(num), floor)
            worst = max(worst, float(err))
            checked += 1
        per[name] = worst
    return GradCheckReport(float(max(per.values(), default=0.0)), per, checked, tolerance)
