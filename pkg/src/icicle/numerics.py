"""Small reverse-mode differentiation kernels over float64 numpy arrays.

Every kernel records a closure that maps the output gradient back to its
inputs, so a scalar loss built from these kernels can be differentiated with
``loss.backward()``.  Only the operations needed by the prototype network and
its losses are provided.

Random numbers always come from ``numpy.random.Generator(PCG64(seed))``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
NORM_EPS = 1e-12

_grad_enabled = True


class NumericsError(ValueError):
    """Raised on shape errors or non-finite values inside a kernel."""


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise NumericsError("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(parent) not in seen:
                    stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise NotImplementedError("tensor division is not a kernel here")
        return mul(self, 1.0 / other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericsError("kernel produced non-finite values")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericsError("log of non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def abs_(x: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return relu(x)
    raise NumericsError(f"unknown activation {kind!r}")


def similarity(dist: Tensor, eta: float) -> Tensor:
    """log((d + 1) / (d + eta)), elementwise, for distances d >= 0."""
    d = dist.data
    out = np.log(d + 1.0) - np.log(d + eta)
    return _result(out, (dist,), lambda g: (g * (1.0 / (d + 1.0) - 1.0 / (d + eta)),))


# ---------------------------------------------------------------- reductions

def sum_(x: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis), 1.0 / count)


def _select_along(x: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    picked = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (gx,)

    return _result(picked, (x,), backward)


def max_along(x: Tensor, axis: int) -> tuple[Tensor, np.ndarray]:
    """Max over one axis; ties go to the first (smallest) index."""
    idx = np.argmax(x.data, axis=axis)
    return _select_along(x, idx, axis), idx


def min_along(x: Tensor, axis: int) -> tuple[Tensor, np.ndarray]:
    idx = np.argmin(x.data, axis=axis)
    return _select_along(x, idx, axis), idx


def masked_min(x: Tensor, mask: np.ndarray, axis: int) -> tuple[Tensor, np.ndarray]:
    """Min over ``axis`` restricted to entries where ``mask`` is true."""
    mask = np.broadcast_to(mask, x.shape)
    if not np.all(mask.any(axis=axis)):
        raise NumericsError("masked_min over an empty selection")
    idx = np.argmin(np.where(mask, x.data, np.inf), axis=axis)
    return _select_along(x, idx, axis), idx


def take_along(x: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    out = np.take_along_axis(x.data, idx, axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        # indices along the axis are distinct per slice, so plain assignment is safe
        np.put_along_axis(gx, idx, g, axis)
        return (gx,)

    return _result(out, (x,), backward)


def index(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing."""
    out = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _result(np.array(out), (x,), backward)


# ---------------------------------------------------------------- structure

def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------- convolution

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if k > size + 2 * pad or span % stride:
        raise NumericsError(
            f"conv2d: ({size} + 2*{pad} - {k}) is not a multiple of stride {stride}"
        )
    return span // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, k, k, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """NHWC convolution with kernels shaped (k, k, Cin, Cout).

    A 3-d input (H, W, Cin) is treated as a batch of one and returned as
    (H', W', Cout).
    """
    single = x.data.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise NumericsError("conv2d expects NHWC input and (k, k, Cin, Cout) kernels")
    n, h, wd, cin = x.shape
    k, k2, wcin, cout = w.shape
    if k != k2 or wcin != cin:
        raise NumericsError(f"conv2d: kernel {w.shape} does not match input channels {cin}")
    if b is not None and b.shape != (cout,):
        raise NumericsError("conv2d: bias must have shape (Cout,)")
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(wd, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols = np.ascontiguousarray(_windows(xp, k, stride, ho, wo)).reshape(n * ho * wo, k * k * cin)
    w2 = w.data.reshape(k * k * cin, cout)
    out = cols @ w2
    if b is not None:
        out = out + b.data
    out = out.reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(n, ho, wo, k, k, cin)
            gxp = np.zeros_like(xp)
            span_h = stride * (ho - 1) + 1
            span_w = stride * (wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + span_h:stride, j:j + span_w:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, pad:pad + h, pad:pad + wd, :] if pad else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    result = _result(out, parents, backward)
    return reshape(result, (ho, wo, cout)) if single else result


# ---------------------------------------------------------------- distances

def pairwise_l2(z: Tensor, p: Tensor) -> Tensor:
    """sqrt(|z_i - p_m|^2 + 1e-12) for z (..., P, D) and p (M, D) -> (..., P, M)."""
    zz = (z.data * z.data).sum(axis=-1, keepdims=True)
    pp = (p.data * p.data).sum(axis=-1)
    sq = np.maximum(zz + pp - 2.0 * (z.data @ p.data.T), 0.0)
    d = np.sqrt(sq + NORM_EPS)

    def backward(g):
        r = g / d
        gz = gp = None
        if z.requires_grad:
            gz = r.sum(axis=-1, keepdims=True) * z.data - r @ p.data
        if p.requires_grad:
            rr = r.reshape(-1, r.shape[-1])
            zr = z.data.reshape(-1, z.shape[-1])
            gp = rr.sum(axis=0)[:, None] * p.data - rr.T @ zr
        return gz, gp

    return _result(d, (z, p), backward)


def l2_norm(x: Tensor, axis: int = -1) -> Tensor:
    d = np.sqrt((x.data * x.data).sum(axis=axis) + NORM_EPS)
    return _result(d, (x,), lambda g: (np.expand_dims(g / d, axis) * x.data,))


# ---------------------------------------------------------------- softmax family

def log_softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax_np(logits, axis))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over rows; a 1-d ``logits`` with an int label is one row."""
    single = logits.data.ndim == 1
    data = logits.data[None, :] if single else logits.data
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = data.shape
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= c):
        raise NumericsError(f"labels out of range for {c} classes")
    logp = log_softmax_np(data)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        grad *= g / n
        return (grad[0] if single else grad,)

    return _result(np.asarray(loss), (logits,), backward)


def kl_softmax(teacher_logits: np.ndarray, student: Tensor, temperature: float) -> Tensor:
    """Row-mean KL(softmax(teacher/T) || softmax(student/T)); teacher is a constant."""
    p = softmax_np(teacher_logits / temperature)
    logp = log_softmax_np(teacher_logits / temperature)
    logq = log_softmax_np(student.data / temperature)
    n = student.shape[0]
    value = (p * (logp - logq)).sum() / n

    def backward(g):
        q = np.exp(logq)
        return (g * (q - p) / (temperature * n),)

    return _result(np.asarray(value), (student,), backward)


# ---------------------------------------------------------------- init + optim

def xavier_normal(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    if fan_in <= 0 or fan_out <= 0:
        raise NumericsError("fans must be positive")
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape)


def xavier_normal_init(shape, fan_in: int, fan_out: int, seed: int) -> Tensor:
    return Tensor(xavier_normal(shape, fan_in, fan_out, make_rng(seed)), requires_grad=True)


@dataclass
class ParamGroup:
    params: list[Tensor]
    lr: float
    weight_decay: float = 0.0


class Adam:
    """Bias-corrected Adam with coupled L2 weight decay (added to the gradient)."""

    def __init__(self, groups: Iterable[ParamGroup], betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = list(groups)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group.params:
                p.grad = None

    def scale_lr(self, factor: float) -> None:
        for group in self.groups:
            group.lr *= factor

    def step(self) -> None:
        grads = []
        for group in self.groups:
            for p in group.params:
                g = np.zeros_like(p.data) if p.grad is None else p.grad
                if not np.all(np.isfinite(g)):
                    raise NumericsError(f"non-finite gradient for {p.name or 'parameter'}")
                grads.append(g)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        it = iter(grads)
        for group in self.groups:
            for p in group.params:
                g = next(it)
                if group.weight_decay:
                    g = g + group.weight_decay * p.data
                key = id(p)
                m = self.m.get(key)
                if m is None:
                    m = self.m[key] = np.zeros_like(p.data)
                    self.v[key] = np.zeros_like(p.data)
                v = self.v[key]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p.data -= group.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: Sequence[Tensor], state: Adam) -> None:
    """Apply one update with the gradients already stored on ``params``."""
    known = {id(p) for g in state.groups for p in g.params}
    if any(id(p) not in known for p in params):
        raise NumericsError("parameter not registered with the optimizer")
    state.step()


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    worst_index: dict[str, tuple[int, ...]] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def overall(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.overall <= self.tolerance


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    With ``max_coords`` only a random subset of coordinates per parameter is
    probed.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    report = GradCheckReport(tolerance=tol)
    for n_param, p in enumerate(params):
        name = p.name or f"param{n_param}"
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort((rng or make_rng(0)).choice(flat.size, max_coords, replace=False))
        worst, worst_at = 0.0, ()
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            with no_grad():
                fp = loss_fn().item()
            flat[c] = orig - h
            with no_grad():
                fm = loss_fn().item()
            flat[c] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericsError(f"non-finite loss while perturbing {name}")
            numeric = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[c]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst, worst_at = err, np.unravel_index(c, p.shape)
        report.max_rel_error[name] = worst
        report.worst_index[name] = tuple(int(i) for i in worst_at)
    return report
