"""Dense float64 tensors with reverse-mode differentiation and an AdamW optimizer.

The computation graph is the tape carried on each Tensor (parent links plus a
vjp closure); calling ``backward(loss)`` walks it once in reverse topological
order and accumulates gradients additively into every tensor that requires
them. All forward primitives are pure and deterministic.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "backward",
    "finite_diff_check",
    "AdamW",
    "step_decay_factor",
    "save_params",
    "load_params",
    "add", "sub", "mul", "div", "neg", "matmul", "concat", "take",
    "slice_rows", "segment_sum", "segment_mean", "scale_rows", "softmax",
    "log_softmax", "sigmoid", "relu", "layer_norm", "tsum", "tmean", "sin",
    "cos", "exp", "log", "square", "bce_with_logits", "transpose", "reshape",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate a primitive's shape rule."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A float64 array node on the autodiff tape.

    ``requires_grad`` marks trainable leaves; intermediate results inherit it
    from their parents. ``grad`` is populated by :func:`backward` and
    accumulates across calls until reset.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar; non-Tensor operands become constants
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return neg(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents) or any(
            p._parents for p in parents
        )
        out._parents = parents
        out._vjp = vjp
    return out


def _check_suffix_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    """Allow equal shapes, scalars, or one shape being a trailing suffix of the
    other (leading-axis repetition); anything else is rejected."""
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    if big.shape[big.ndim - small.ndim:] != small.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not align")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to ``shape`` by summing the leading axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_suffix_broadcast("add", a.data, b.data)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_suffix_broadcast("sub", a.data, b.data)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_suffix_broadcast("mul", a.data, b.data)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_suffix_broadcast("div", a.data, b.data)
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _node(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = _wrap(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sin(a) -> Tensor:
    a = _wrap(a)
    return _node(np.sin(a.data), (a,), lambda g: (np.cos(a.data) * g,))


def cos(a) -> Tensor:
    a = _wrap(a)
    return _node(np.cos(a.data), (a,), lambda g: (-np.sin(a.data) * g,))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (out * g,))


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = _wrap(a)
    out = np.maximum(a.data, 0.0)
    return _node(out, (a,), lambda g: (np.where(a.data > 0, g, 0.0),))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    # overflow-free: exp of a non-positive argument only
    e = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(out, (a,), lambda g: (out * (1.0 - out) * g,))


# ---------------------------------------------------------------------------
# structural primitives


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul: expected 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: inner dims differ, {a.data.shape} vs {b.data.shape}"
        )
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), vjp)


def transpose(a) -> Tensor:
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.data.shape}")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    old = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(ts), vjp)


def take(a, indices) -> Tensor:
    """Row gather: out[i] = a[indices[i]]."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _node(out, (a,), vjp)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _wrap(a)
    out = a.data[start:stop].copy()

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return (ga,)

    return _node(out, (a,), vjp)


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given by segment_ids."""
    a = _wrap(a)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape[0] != a.data.shape[0]:
        raise ShapeError(
            f"segment_sum: {seg.shape[0]} ids for {a.data.shape[0]} rows"
        )
    out = np.zeros((num_segments,) + a.data.shape[1:], dtype=np.float64)
    np.add.at(out, seg, a.data)

    def vjp(g):
        return (g[seg],)

    return _node(out, (a,), vjp)


def segment_mean(a, segment_ids, num_segments: int) -> Tensor:
    seg = np.asarray(segment_ids, dtype=np.int64)
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    counts = np.maximum(counts, 1.0)
    total = segment_sum(a, seg, num_segments)
    return scale_rows(total, 1.0 / counts)


def scale_rows(a, vec) -> Tensor:
    """Multiply row i of ``a`` by ``vec[i]``."""
    a, vec = _wrap(a), _wrap(vec)
    if vec.data.ndim != 1 or vec.data.shape[0] != a.data.shape[0]:
        raise ShapeError(
            f"scale_rows: vec shape {vec.data.shape} vs rows {a.data.shape[0]}"
        )
    col = vec.data[:, None] if a.data.ndim == 2 else vec.data
    out = a.data * col

    def vjp(g):
        gv = (g * a.data).sum(axis=1) if a.data.ndim == 2 else g * a.data
        return g * col, gv

    return _node(out, (a, vec), vjp)


# ---------------------------------------------------------------------------
# reductions and normalizations


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _node(out, (a,), vjp)


def tmean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.data.shape).copy(),)

    return _node(out, (a,), vjp)


def softmax(a) -> Tensor:
    """Row-stochastic softmax over the last axis (shift-stabilized)."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _node(out, (a,), vjp)


def log_softmax(a) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _node(out, (a,), vjp)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a learned affine map."""
    a, gain, bias = _wrap(a), _wrap(gain), _wrap(bias)
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must be ({d},), got "
            f"{gain.data.shape} and {bias.data.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    var = ((a.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = (a.data - mu) * inv
    out = xh * gain.data + bias.data

    def vjp(g):
        dgain = (g * xh).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        dxh = g * gain.data
        dx = inv * (
            dxh
            - dxh.mean(axis=-1, keepdims=True)
            - xh * (dxh * xh).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _node(out, (a, gain, bias), vjp)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy from raw logits (overflow-free)."""
    a = _wrap(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != a.data.shape:
        raise ShapeError(
            f"bce_with_logits: target shape {t.shape} vs logits {a.data.shape}"
        )
    x = a.data
    loss = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def vjp(g):
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return ((sig - t) * (g / n),)

    return _node(np.asarray(loss.mean()), (a,), vjp)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every requires_grad tensor.

    Calling twice without resetting grads accumulates, by design.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    order = _topo_order(loss)
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            acc = flow.get(id(p))
            flow[id(p)] = pg if acc is None else acc + pg


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    param: Tensor,
    step: float = 1e-5,
    max_coords: int | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must rebuild the loss from current parameter values. Returns
    max over coordinates of |analytic - fd| / max(1, |analytic|). For large
    tensors ``max_coords`` limits the probe to a seeded random subset.
    """
    param.zero_grad()
    loss = loss_fn()
    backward(loss)
    if param.grad is None:
        raise ValueError("finite_diff_check: param does not participate in loss")
    analytic = param.grad.reshape(-1).copy()
    flat = param.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = np.random.default_rng(flat.size).choice(
            flat.size, size=max_coords, replace=False)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        hi = loss_fn().item()
        flat[i] = orig - step
        lo = loss_fn().item()
        flat[i] = orig
        fd = (hi - lo) / (2.0 * step)
        err = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimizer and schedule


class AdamW:
    """Decoupled-weight-decay Adam over named parameter groups.

    ``groups`` is a list of (params dict, learning rate); ``lr_scale`` applies
    a global multiplier (used by the step-decay schedule).
    """

    def __init__(
        self,
        groups: list[tuple[dict[str, Tensor], float]],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.groups = groups
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_scale = 1.0
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        for params, _ in groups:
            for name, p in params.items():
                self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for p in params.values():
                p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for params, lr in self.groups:
            lr_t = lr * self.lr_scale
            for name, p in params.items():
                if p.grad is None:
                    continue
                g = p.grad
                if not np.all(np.isfinite(g)):
                    raise ValueError(f"AdamW: non-finite gradient for '{name}'")
                m = self._m[name]
                v = self._v[name]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                m_hat = m / bc1
                v_hat = v / bc2
                p.data -= lr_t * (
                    m_hat / (np.sqrt(v_hat) + self.eps)
                    + self.weight_decay * p.data
                )


def step_decay_factor(epoch: int, decay_epochs: Sequence[int], factor: float = 0.1) -> float:
    """Multiplier for the learning rate after step decays at the given epochs."""
    return factor ** sum(1 for e in decay_epochs if epoch >= e)


# ---------------------------------------------------------------------------
# checkpoints: flat little-endian float64 blob + text index


def save_params(params: dict[str, Tensor], base_path: str) -> None:
    """Write ``<base>.bin`` (LE float64 payload) and ``<base>.idx`` (name shape offset)."""
    names = sorted(params)
    offset = 0
    lines = []
    with open(base_path + ".bin", "wb") as fh:
        for name in names:
            data = params[name].data
            arr = np.ascontiguousarray(data, dtype="<f8")
            fh.write(arr.tobytes())
            shape = ",".join(str(s) for s in data.shape) if data.ndim else "scalar"
            lines.append(f"{name} {shape} {offset}")
            offset += arr.size * 8
    with open(base_path + ".idx", "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(base_path: str) -> dict[str, np.ndarray]:
    if not os.path.exists(base_path + ".idx"):
        raise FileNotFoundError(base_path + ".idx")
    blob = np.fromfile(base_path + ".bin", dtype="<f8")
    out: dict[str, np.ndarray] = {}
    with open(base_path + ".idx", "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            name, shape_s, offset_s = line.rsplit(" ", 2)
            shape = () if shape_s == "scalar" else tuple(
                int(s) for s in shape_s.split(",")
            )
            count = int(np.prod(shape)) if shape else 1
            start = int(offset_s) // 8
            if start + count > blob.size:
                raise ValueError(
                    f"checkpoint truncated: '{name}' needs {count} values at "
                    f"offset {int(offset_s)} in {base_path}.bin"
                )
            out[name] = blob[start : start + count].reshape(shape).astype(np.float64)
    return out
