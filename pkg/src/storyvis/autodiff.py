"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every primitive application; :func:`backward` replays
the record in reverse to accumulate gradients for all ``requires_grad``
leaves. Values are always float64: the finite-difference oracle used
throughout the test suite needs ~1e-4 relative agreement, which float32
cannot deliver reliably.

Primitives raise :class:`AutodiffError` instead of returning NaN/Inf, so a
finite forward pass is a hard guarantee of the engine, not a hope.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "Tensor",
    "Tape",
    "GradientMap",
    "apply_primitive",
    "backward",
    "grad_check",
    "PRIMITIVES",
]


class AutodiffError(ValueError):
    """Shape mismatch, invalid mask, or non-finite result in a primitive."""


def _as_f64(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, order="C")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


class Tensor:
    """A dense float64 value recorded on a computation tape.

    ``data`` is read-only once recorded; ``node_id`` identifies the tensor
    inside its tape. Scalars have shape ``(1,)``.
    """

    __slots__ = ("data", "requires_grad", "node_id", "tape")

    def __init__(self, data: np.ndarray, requires_grad: bool, node_id: int, tape: "Tape"):
        self.data = data
        self.requires_grad = requires_grad
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise AutodiffError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, node_id={self.node_id})"

    # -- operator sugar; everything routes through the primitive registry --
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.tape), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("inputs", "needs", "backward_fn", "leaf_requires")

    def __init__(self, inputs, needs, backward_fn, leaf_requires=False):
        self.inputs = inputs
        self.needs = needs
        self.backward_fn = backward_fn
        self.leaf_requires = leaf_requires


class Tape:
    """Single-owner computation record.

    Constants and leaves are registered explicitly; primitive outputs are
    appended as they are computed. A tape must not be shared between
    concurrently recorded computations.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __len__(self) -> int:
        return len(self._records)

    def tensor(self, data, requires_grad: bool = False) -> Tensor:
        """Register a leaf value (parameter if ``requires_grad``)."""
        arr = _as_f64(data)
        if not np.all(np.isfinite(arr)):
            raise AutodiffError("leaf tensor contains non-finite entries")
        arr.setflags(write=False)
        node_id = len(self._records)
        self._records.append(_Record((), (), None, leaf_requires=requires_grad))
        return Tensor(arr, requires_grad, node_id, self)

    def constant(self, data) -> Tensor:
        return self.tensor(data, requires_grad=False)

    def _emit(self, data: np.ndarray, inputs: Sequence[Tensor], backward_fn, op: str) -> Tensor:
        if not np.all(np.isfinite(data)):
            raise AutodiffError(f"{op}: non-finite result from finite inputs")
        data = np.ascontiguousarray(data, dtype=np.float64)
        if data.ndim == 0:
            data = data.reshape(1)
        data.setflags(write=False)
        requires = any(t.requires_grad for t in inputs)
        node_id = len(self._records)
        record = _Record(
            tuple(t.node_id for t in inputs),
            tuple(t.requires_grad for t in inputs),
            backward_fn if requires else None,
        )
        self._records.append(record)
        return Tensor(data, requires, node_id, self)


def _lift(value, tape: Tape) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return tape.constant(value)


def _common_tape(op: str, values) -> Tape:
    tape = None
    for v in values:
        if isinstance(v, Tensor):
            if tape is None:
                tape = v.tape
            elif v.tape is not tape:
                raise AutodiffError(f"{op}: inputs recorded on different tapes")
    if tape is None:
        raise AutodiffError(f"{op}: at least one input must be a Tensor")
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    tape = _common_tape("add", (a, b))
    a, b = _lift(a, tape), _lift(b, tape)
    try:
        out = a.data + b.data
    except ValueError:
        raise AutodiffError(f"add: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return tape._emit(out, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    tape = _common_tape("sub", (a, b))
    a, b = _lift(a, tape), _lift(b, tape)
    try:
        out = a.data - b.data
    except ValueError:
        raise AutodiffError(f"sub: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return tape._emit(out, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    tape = _common_tape("mul", (a, b))
    a, b = _lift(a, tape), _lift(b, tape)
    try:
        out = a.data * b.data
    except ValueError:
        raise AutodiffError(f"mul: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None
    a_data, b_data = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return tape._emit(out, (a, b), bwd, "mul")


def matmul(a, b) -> Tensor:
    tape = _common_tape("matmul", (a, b))
    a, b = _lift(a, tape), _lift(b, tape)
    ok = (
        a.ndim >= 2
        and b.ndim == a.ndim
        and a.shape[-1] == b.shape[-2]
        and a.shape[:-2] == b.shape[:-2]
    )
    if not ok:
        raise AutodiffError(f"matmul: shapes {a.shape} and {b.shape} do not contract")
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def bwd(g):
        return g @ b_data.swapaxes(-1, -2), a_data.swapaxes(-1, -2) @ g

    return tape._emit(out, (a, b), bwd, "matmul")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise AutodiffError("concat: no inputs")
    tape = _common_tape("concat", tensors)
    tensors = [_lift(t, tape) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise AutodiffError(f"concat: shapes {[t.shape for t in tensors]} do not stack on axis {axis}") from None
    sizes = [t.shape[axis if axis >= 0 else t.ndim + axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape._emit(out, tensors, bwd, "concat")


def mean_pool(x: Tensor, axis: int = 0) -> Tensor:
    if not isinstance(x, Tensor):
        raise AutodiffError("mean_pool: input must be a Tensor")
    if not -x.ndim <= axis < x.ndim:
        raise AutodiffError(f"mean_pool: axis {axis} out of range for shape {x.shape}")
    axis = axis if axis >= 0 else x.ndim + axis
    out = x.data.mean(axis=axis)
    n = x.shape[axis]
    in_shape = x.shape

    def bwd(g):
        g = g.reshape(in_shape[:axis] + (1,) + in_shape[axis + 1 :]) if g.ndim < len(in_shape) else g
        return (np.broadcast_to(g / n, in_shape).copy(),)

    return x.tape._emit(out, (x,), bwd, "mean_pool")


def sum_all(x: Tensor) -> Tensor:
    if not isinstance(x, Tensor):
        raise AutodiffError("sum: input must be a Tensor")
    out = np.array([x.data.sum()])
    shape = x.shape

    def bwd(g):
        return (np.broadcast_to(g.reshape(()), shape).copy(),)

    return x.tape._emit(out, (x,), bwd, "sum")


def mean_all(x: Tensor) -> Tensor:
    return mul(sum_all(x), 1.0 / x.size)


def _elementwise(op: str, x: Tensor, fwd, dfdx) -> Tensor:
    if not isinstance(x, Tensor):
        raise AutodiffError(f"{op}: input must be a Tensor")
    out = fwd(x.data)
    deriv = dfdx(x.data, out)

    def bwd(g):
        return (g * deriv,)

    return x.tape._emit(out, (x,), bwd, op)


def tanh(x: Tensor) -> Tensor:
    return _elementwise("tanh", x, np.tanh, lambda d, y: 1.0 - y * y)


def sigmoid(x: Tensor) -> Tensor:
    def fwd(d):
        out = np.empty_like(d)
        pos = d >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        e = np.exp(d[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    return _elementwise("sigmoid", x, fwd, lambda d, y: y * (1.0 - y))


def relu(x: Tensor) -> Tensor:
    return _elementwise("relu", x, lambda d: np.maximum(d, 0.0), lambda d, y: (d > 0).astype(np.float64))


def exp(x: Tensor) -> Tensor:
    return _elementwise("exp", x, np.exp, lambda d, y: y)


def log(x: Tensor) -> Tensor:
    if not isinstance(x, Tensor):
        raise AutodiffError("log: input must be a Tensor")
    if np.any(x.data <= 0):
        raise AutodiffError("log: non-positive input")
    return _elementwise("log", x, np.log, lambda d, y: 1.0 / d)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise AutodiffError(f"clip: lo {lo} > hi {hi}")

    def dfdx(d, y):
        return ((d >= lo) & (d <= hi)).astype(np.float64)

    return _elementwise("clip", x, lambda d: np.clip(d, lo, hi), dfdx)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout. ``rate == 0`` is an exact identity; otherwise a
    seeded generator must be supplied so the mask is reproducible."""
    if not 0.0 <= rate < 1.0:
        raise AutodiffError(f"dropout: rate {rate} outside [0, 1)")
    if rate == 0.0:
        return _elementwise("dropout", x, lambda d: d.copy(), lambda d, y: np.ones_like(d))
    if rng is None:
        raise AutodiffError("dropout: rate > 0 requires a seeded Generator")
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return _elementwise("dropout", x, lambda d: d * keep, lambda d, y: keep)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    tape = _common_tape("layer_norm", (x, gain, bias))
    x, gain, bias = _lift(x, tape), _lift(gain, tape), _lift(bias, tape)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise AutodiffError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = xh * gain.data + bias.data
    g_data = gain.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xh).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxh = g * g_data
        dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return tape._emit(out, (x, gain, bias), bwd, "layer_norm")


def masked_softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` (bool, broadcastable) gates which
    positions may receive weight. Masked positions are exactly zero."""
    if not isinstance(x, Tensor):
        raise AutodiffError("masked_softmax: input must be a Tensor")
    if mask is None:
        mask_arr = np.ones(x.shape, dtype=bool)
    else:
        mask_arr = np.asarray(mask, dtype=bool)
        try:
            mask_arr = np.broadcast_to(mask_arr, x.shape)
        except ValueError:
            raise AutodiffError(
                f"masked_softmax: mask shape {np.asarray(mask).shape} does not broadcast to {x.shape}"
            ) from None
    if not mask_arr.any(axis=-1).all():
        raise AutodiffError("masked_softmax: fully masked row")
    shifted = np.where(mask_arr, x.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return x.tape._emit(out, (x,), bwd, "masked_softmax")


def logsumexp(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis (axis removed; scalars become (1,))."""
    if not isinstance(x, Tensor):
        raise AutodiffError("logsumexp: input must be a Tensor")
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).squeeze(-1)
    soft = e / s

    def bwd(g):
        return (np.expand_dims(g.reshape(soft.shape[:-1]), -1) * soft,)

    return x.tape._emit(out, (x,), bwd, "logsumexp")


_NORM_FLOOR = 1e-12


def cosine_similarity(a, b) -> Tensor:
    """Cosine over the last axis of two same-shape tensors."""
    tape = _common_tape("cosine_similarity", (a, b))
    a, b = _lift(a, tape), _lift(b, tape)
    if a.shape != b.shape:
        raise AutodiffError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    dots = (a.data * b.data).sum(axis=-1)
    na = np.maximum(np.sqrt((a.data * a.data).sum(axis=-1)), _NORM_FLOOR)
    nb = np.maximum(np.sqrt((b.data * b.data).sum(axis=-1)), _NORM_FLOOR)
    cos = dots / (na * nb)
    a_data, b_data = a.data, b.data

    def bwd(g):
        g = g.reshape(cos.shape)
        ge = np.expand_dims(g, -1)
        cos_e = np.expand_dims(cos, -1)
        na_e = np.expand_dims(na, -1)
        nb_e = np.expand_dims(nb, -1)
        da = ge * (b_data / (na_e * nb_e) - cos_e * a_data / (na_e * na_e))
        db = ge * (a_data / (na_e * nb_e) - cos_e * b_data / (nb_e * nb_e))
        return da, db

    return tape._emit(cos, (a, b), bwd, "cosine_similarity")


def l1_distance(a, b) -> Tensor:
    """Sum of absolute differences, as a scalar."""
    tape = _common_tape("l1_distance", (a, b))
    a, b = _lift(a, tape), _lift(b, tape)
    if a.shape != b.shape:
        raise AutodiffError(f"l1_distance: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    out = np.array([np.abs(diff).sum()])
    sign = np.sign(diff)

    def bwd(g):
        return g.reshape(()) * sign, -g.reshape(()) * sign

    return tape._emit(out, (a, b), bwd, "l1_distance")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean token-level cross-entropy of integer ``targets`` under ``logits``
    of shape (..., vocab); ``mask`` selects which positions count."""
    if not isinstance(logits, Tensor):
        raise AutodiffError("cross_entropy: logits must be a Tensor")
    vocab = logits.shape[-1]
    ids = np.asarray(targets)
    if ids.shape != logits.shape[:-1]:
        raise AutodiffError(f"cross_entropy: target shape {ids.shape} does not match logits {logits.shape}")
    if mask is None:
        keep = np.ones(ids.shape, dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != ids.shape:
            raise AutodiffError(f"cross_entropy: mask shape {keep.shape} does not match targets {ids.shape}")
    if not keep.any():
        raise AutodiffError("cross_entropy: no unmasked positions")
    used = ids[keep]
    if used.size and (used.min() < 0 or used.max() >= vocab):
        raise AutodiffError(f"cross_entropy: target id {int(used.max())} outside vocab of size {vocab}")
    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    lse = (m + np.log(e.sum(axis=-1, keepdims=True))).squeeze(-1)
    safe_ids = np.where(keep, ids, 0)
    picked = np.take_along_axis(logits.data, np.expand_dims(safe_ids, -1), axis=-1).squeeze(-1)
    per_token = lse - picked
    count = keep.sum()
    out = np.array([(per_token * keep).sum() / count])
    soft = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        grad = soft.copy()
        one = np.zeros_like(grad)
        np.put_along_axis(one, np.expand_dims(safe_ids, -1), 1.0, axis=-1)
        grad -= one
        grad *= np.expand_dims(keep, -1)
        return (g.reshape(()) * grad / count,)

    return logits.tape._emit(out, (logits,), bwd, "cross_entropy")


def gaussian_kl(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)) as a scalar."""
    tape = _common_tape("gaussian_kl", (mu, logvar))
    mu, logvar = _lift(mu, tape), _lift(logvar, tape)
    if mu.shape != logvar.shape:
        raise AutodiffError(f"gaussian_kl: shapes {mu.shape} and {logvar.shape} differ")
    ev = np.exp(logvar.data)
    out = np.array([0.5 * (ev + mu.data * mu.data - 1.0 - logvar.data).sum()])
    mu_data = mu.data

    def bwd(g):
        s = g.reshape(())
        return s * mu_data, s * 0.5 * (ev - 1.0)

    return tape._emit(out, (mu, logvar), bwd, "gaussian_kl")


def minimum(a, b) -> Tensor:
    tape = _common_tape("minimum", (a, b))
    a, b = _lift(a, tape), _lift(b, tape)
    try:
        da, db = np.broadcast_arrays(a.data, b.data)
    except ValueError:
        raise AutodiffError(f"minimum: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None
    take_a = da <= db
    out = np.where(take_a, da, db)

    def bwd(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return tape._emit(out, (a, b), bwd, "minimum")


def maximum(a, b) -> Tensor:
    tape = _common_tape("maximum", (a, b))
    a, b = _lift(a, tape), _lift(b, tape)
    try:
        da, db = np.broadcast_arrays(a.data, b.data)
    except ValueError:
        raise AutodiffError(f"maximum: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None
    take_a = da >= db
    out = np.where(take_a, da, db)

    def bwd(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return tape._emit(out, (a, b), bwd, "maximum")


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows of ``x`` along axis 0 (embedding lookup / row picking)."""
    if not isinstance(x, Tensor):
        raise AutodiffError("gather_rows: input must be a Tensor")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise AutodiffError(f"gather_rows: indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise AutodiffError(f"gather_rows: index out of range for {x.shape[0]} rows")
    out = x.data[idx]
    in_shape = x.shape

    def bwd(g):
        grad = np.zeros(in_shape, dtype=np.float64)
        np.add.at(grad, idx, g)
        return (grad,)

    return x.tape._emit(out, (x,), bwd, "gather_rows")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    if not isinstance(x, Tensor):
        raise AutodiffError("reshape: input must be a Tensor")
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise AutodiffError(f"reshape: cannot reshape {x.shape} to {shape}")
    in_shape = x.shape

    def bwd(g):
        return (g.reshape(in_shape),)

    return x.tape._emit(x.data.reshape(shape), (x,), bwd, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    if not isinstance(x, Tensor):
        raise AutodiffError("transpose: input must be a Tensor")
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise AutodiffError(f"transpose: axes {axes} are not a permutation for shape {x.shape}")
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inverse),)

    return x.tape._emit(x.data.transpose(axes), (x,), bwd, "transpose")


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "concat": concat,
    "mean_pool": mean_pool,
    "sum": sum_all,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "exp": exp,
    "log": log,
    "clip": clip,
    "dropout": dropout,
    "layer_norm": layer_norm,
    "masked_softmax": masked_softmax,
    "logsumexp": logsumexp,
    "cosine_similarity": cosine_similarity,
    "l1_distance": l1_distance,
    "cross_entropy": cross_entropy,
    "gaussian_kl": gaussian_kl,
    "minimum": minimum,
    "maximum": maximum,
    "gather_rows": gather_rows,
    "reshape": reshape,
    "transpose": transpose,
}


def apply_primitive(op_name: str, *inputs, **kwargs) -> Tensor:
    """Apply a registered primitive by name."""
    try:
        fn = PRIMITIVES[op_name]
    except KeyError:
        raise AutodiffError(f"unknown primitive {op_name!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


class GradientMap(Mapping):
    """Gradients of a scalar loss keyed by leaf ``node_id``.

    Entries exist for every ``requires_grad`` leaf reachable from the loss
    and match the leaf shapes exactly; unreachable leaves have no entry.
    """

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    @staticmethod
    def _key(key) -> int:
        return key.node_id if isinstance(key, Tensor) else int(key)

    def __getitem__(self, key) -> np.ndarray:
        return self._grads[self._key(key)]

    def __contains__(self, key) -> bool:
        return self._key(key) in self._grads

    def get(self, key, default=None):
        return self._grads.get(self._key(key), default)

    def __iter__(self):
        return iter(self._grads)

    def __len__(self):
        return len(self._grads)


def backward(loss: Tensor) -> GradientMap:
    """Reverse-mode gradients of a scalar ``loss`` for all reachable
    ``requires_grad`` leaves. Repeated consumption accumulates."""
    if not isinstance(loss, Tensor):
        raise AutodiffError("backward: loss must be a Tensor")
    if loss.shape != (1,):
        raise AutodiffError(f"backward: loss must be a scalar of shape (1,), got {loss.shape}")
    tape = loss.tape
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(1)}
    leaf_grads: dict[int, np.ndarray] = {}
    for node_id in range(loss.node_id, -1, -1):
        g = grads.pop(node_id, None)
        if g is None:
            continue
        record = tape._records[node_id]
        if record.backward_fn is None:
            if record.leaf_requires:
                leaf_grads[node_id] = g
            continue
        for input_id, needed, input_grad in zip(record.inputs, record.needs, record.backward_fn(g)):
            if not needed:
                continue
            existing = grads.get(input_id)
            grads[input_id] = input_grad if existing is None else existing + input_grad
    return GradientMap(leaf_grads)


def grad_check(
    function: Callable[[list[Tensor]], Tensor],
    params: Sequence[np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``function`` receives freshly lifted leaf tensors (all ``requires_grad``)
    and must return a scalar tensor on the same tape. It is evaluated twice up
    front; any discrepancy means unfrozen randomness, which is rejected.
    """
    if eps <= 0:
        raise AutodiffError(f"grad_check: eps must be positive, got {eps}")
    arrays = [np.array(p, dtype=np.float64) for p in params]

    def evaluate(values: list[np.ndarray], want_grads: bool):
        tape = Tape()
        leaves = [tape.tensor(v, requires_grad=True) for v in values]
        loss = function(leaves)
        if not isinstance(loss, Tensor) or loss.shape != (1,):
            raise AutodiffError("grad_check: function must return a scalar tensor of shape (1,)")
        if want_grads:
            gmap = backward(loss)
            return loss.item(), [gmap.get(leaf, np.zeros_like(v)) for leaf, v in zip(leaves, values)]
        return loss.item(), None

    value_a, analytic = evaluate(arrays, want_grads=True)
    value_b, _ = evaluate(arrays, want_grads=False)
    if value_a != value_b:
        raise AutodiffError(
            "grad_check: function is not deterministic; freeze sampling noise with a fixed seed"
        )

    worst = 0.0
    for i, base in enumerate(arrays):
        flat_analytic = np.asarray(analytic[i]).reshape(-1)
        for j in range(base.size):
            perturbed = [a.copy() for a in arrays]
            perturbed[i].reshape(-1)[j] = base.reshape(-1)[j] + eps
            f_plus, _ = evaluate(perturbed, want_grads=False)
            perturbed[i].reshape(-1)[j] = base.reshape(-1)[j] - eps
            f_minus, _ = evaluate(perturbed, want_grads=False)
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = flat_analytic[j]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
