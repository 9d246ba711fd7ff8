"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: operations executed while a Tape is active are recorded and
replayed in reverse by backward(). Outside a tape everything runs as plain
numpy (inference mode). Shapes must match exactly; the only broadcasts are
bias-add inside linear/conv2d and scalar-times-tensor.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """An operation received or produced non-finite values."""


class TapeError(RuntimeError):
    """Backward requested on a missing, empty, or consumed tape."""


_STATE = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


@dataclass
class _Node:
    op: str
    backward_fn: Callable[[np.ndarray], None]
    out: "Tensor"


class Tape:
    """Ordered record of executed ops; reverse replay computes adjoints.

    One tape per forward pass, one thread per tape. Nested tapes are not
    supported; entering a tape while another is active is an error.
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    def __enter__(self) -> "Tape":
        # re-entering the same tape later is allowed (recording continues);
        # nesting different tapes is not
        if _active_tape() is not None:
            raise TapeError("a tape is already active on this thread")
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        _STATE.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _STATE.tape = None

    def _record(self, node: _Node) -> None:
        self._nodes.append(node)

    def backward(self, loss: "Tensor") -> None:
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward()")
        if not self._nodes:
            raise TapeError("tape is empty; nothing was recorded")
        if loss.data.ndim != 0:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        self.consumed = True
        loss.grad = np.ones((), dtype=np.float64)
        for node in reversed(self._nodes):
            if node.out.grad is not None:
                node.backward_fn(node.out.grad)


class Tensor:
    """Dense float64 array plus optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:  # ascontiguousarray would upcast 0-d to 1-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        """Populate grads of every requires_grad leaf reachable from self."""
        if self._tape is None:
            raise TapeError("tensor was not recorded on any tape")
        self._tape.backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars mean python floats, everything else exact-shape
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{op}: non-finite values in input")


def _make_op(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
             backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap a forward result; record on the active tape when grads flow."""
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._record(_Node(op, backward_fn, out))
    return out


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        _check_finite("add", a)
        out_data = a.data + float(b)

        def backward_fn(g):
            if a.requires_grad:
                a._accumulate(g)

        return _make_op("add", out_data, (a,), backward_fn)

    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    _check_finite("add", a, b)
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make_op("add", out_data, (a, b), backward_fn)


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    _check_finite("mul", a, b)
    out_data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make_op("mul", out_data, (a, b), backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    _check_finite("scale", a)
    c = float(c)
    out_data = a.data * c

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _make_op("scale", out_data, (a,), backward_fn)


def relu(x: Tensor) -> Tensor:
    _check_finite("relu", x)
    out_data = np.maximum(x.data, 0.0)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0.0))

    return _make_op("relu", out_data, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    _check_finite("sigmoid", x)
    out_data = _sigmoid_stable(x.data)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * out_data * (1.0 - out_data))

    return _make_op("sigmoid", out_data, (x,), backward_fn)


def _sigmoid_stable(z: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow at any |z|
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0.0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def log(x: Tensor) -> Tensor:
    _check_finite("log", x)
    if np.any(x.data <= 0.0):
        raise NonFiniteError("log: input must be strictly positive")
    out_data = np.log(x.data)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g / x.data)

    return _make_op("log", out_data, (x,), backward_fn)


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) in a form that never overflows."""
    _check_finite("log_sigmoid", x)
    z = x.data
    out_data = np.where(z >= 0.0, 0.0, z) - np.log1p(np.exp(-np.abs(z)))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * _sigmoid_stable(-z))

    return _make_op("log_sigmoid", out_data, (x,), backward_fn)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes only inside the interval."""
    _check_finite("clamp", x)
    out_data = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _make_op("clamp", out_data, (x,), backward_fn)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    _check_finite("sum", x)
    out_data = np.asarray(x.data.sum())

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, float(g)))

    return _make_op("sum", out_data, (x,), backward_fn)


def mean_all(x: Tensor) -> Tensor:
    _check_finite("mean", x)
    n = x.data.size
    out_data = np.asarray(x.data.mean())

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, float(g) / n))

    return _make_op("mean", out_data, (x,), backward_fn)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of (a - b)^2."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    _check_finite("mse", a, b)
    diff = a.data - b.data
    n = diff.size
    out_data = np.asarray(np.mean(diff * diff))

    def backward_fn(g):
        coeff = 2.0 * float(g) / n
        if a.requires_grad:
            a._accumulate(coeff * diff)
        if b.requires_grad:
            b._accumulate(-coeff * diff)

    return _make_op("mse", out_data, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    _check_finite("reshape", x)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out_data = x.data.reshape(shape)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.shape))

    return _make_op("reshape", out_data, (x,), backward_fn)


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) dimension."""
    if x.data.ndim < 2:
        raise ShapeError(f"flatten: need at least 2 dims, got {x.shape}")
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def slice_batch(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows start:stop along the leading (batch) axis."""
    if not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f"slice_batch: bad range [{start},{stop}) for batch {x.shape[0]}")
    _check_finite("slice_batch", x)
    out_data = x.data[start:stop]

    def backward_fn(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            dx[start:stop] = g
            x._accumulate(dx)

    return _make_op("slice_batch", out_data, (x,), backward_fn)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1 (the channel axis)."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: empty input list")
    base = parts[0].shape
    for p in parts:
        if p.data.ndim != len(base) or p.shape[0] != base[0] or p.shape[2:] != base[2:]:
            raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}")
    _check_finite("concat", *parts)
    out_data = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[:, lo:hi])

    return _make_op("concat", out_data, tuple(parts), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    _check_finite("matmul", a, b)
    out_data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make_op("matmul", out_data, (a, b), backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[B,F] @ weight[O,F]^T + bias[O]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: x {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} incompatible with weight {weight.shape}")
    _check_finite("linear", x, weight, bias)
    out_data = x.data @ weight.data.T + bias.data

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _make_op("linear", out_data, (x, weight, bias), backward_fn)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x[B,C,H,W] with weight[K,C,kh,kw] plus bias[K]."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input/weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    K, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ShapeError(f"conv2d: input has {C} channels but weight expects {Cw}")
    if bias.shape != (K,):
        raise ShapeError(f"conv2d: bias {bias.shape} incompatible with {K} output channels")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel ({kh},{kw}) larger than padded input "
            f"({H + 2 * padding},{W + 2 * padding})")
    _check_finite("conv2d", x, weight, bias)

    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    Hp, Wp = H + 2 * padding, W + 2 * padding
    # channels-last internally: the im2col gather then copies stride-1 runs
    # of length C instead of length kw, which dominates the conv cost
    xl = np.zeros((B, Hp, Wp, C))
    xl[:, padding:padding + H, padding:padding + W, :] = x.data.transpose(0, 2, 3, 1)
    win = sliding_window_view(xl, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * C)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(K, kh * kw * C)
    out_mat = cols @ wmat.T + bias.data
    out_data = np.ascontiguousarray(out_mat.reshape(B, Ho, Wo, K).transpose(0, 3, 1, 2))

    def backward_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, K)
        if weight.requires_grad:
            dw = (gmat.T @ cols).reshape(K, kh, kw, C).transpose(0, 3, 1, 2)
            weight._accumulate(dw)
        if bias.requires_grad:
            bias._accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            dwin = (gmat @ wmat).reshape(B, Ho, Wo, kh, kw, C)
            dxl = np.zeros((B, Hp, Wp, C))
            for u in range(kh):
                for v in range(kw):
                    dxl[:, u:u + stride * Ho:stride, v:v + stride * Wo:stride, :] += \
                        dwin[:, :, :, u, v, :]
            x._accumulate(dxl[:, padding:padding + H, padding:padding + W, :]
                          .transpose(0, 3, 1, 2))

    return _make_op("conv2d", out_data, (x, weight, bias), backward_fn)


def max_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride == kernel); H and W must divide."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d: need 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if H % kernel or W % kernel:
        raise ShapeError(f"max_pool2d: spatial dims {(H, W)} not divisible by {kernel}")
    _check_finite("max_pool2d", x)
    Ho, Wo = H // kernel, W // kernel
    win = x.data.reshape(B, C, Ho, kernel, Wo, kernel).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, Ho, Wo, kernel * kernel)
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        if x.requires_grad:
            dwin = np.zeros((B, C, Ho, Wo, kernel * kernel))
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            dx = dwin.reshape(B, C, Ho, Wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
            x._accumulate(dx.reshape(B, C, H, W))

    return _make_op("max_pool2d", out_data, (x,), backward_fn)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat each spatial cell factor x factor times."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest: need 4-D input, got {x.shape}")
    if factor < 1:
        raise ShapeError(f"upsample_nearest: factor must be >= 1, got {factor}")
    _check_finite("upsample_nearest", x)
    B, C, H, W = x.shape
    out_data = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)))

    return _make_op("upsample_nearest", out_data, (x,), backward_fn)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    max_rel_error: float
    passed: bool
    tol: float
    per_param: dict[int, float] = field(default_factory=dict)

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"grad_check {status}: max rel error {self.max_rel_error:.3e} (tol {self.tol:.1e})"


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               h: float = 1e-4, tol: float = 1e-4, atol: float = 1e-7) -> GradCheckReport:
    """Compare analytic grads of f() w.r.t. params against central differences.

    f must be deterministic and read params by reference. A coordinate passes
    when |analytic - numeric| <= atol + tol * max(|analytic|, |numeric|);
    the reported relative error uses max(|analytic|, |numeric|, atol/tol)
    as denominator so exact zeros do not divide by zero.
    """
    for p in params:
        p.zero_grad()
    with Tape():
        loss = f()
    if loss.data.ndim != 0:
        raise ShapeError("grad_check: f must return a scalar")
    if not np.isfinite(loss.data):
        raise NonFiniteError("grad_check: f returned a non-finite value")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    floor = atol / tol
    max_rel = 0.0
    passed = True
    per_param: dict[int, float] = {}
    for k, p in enumerate(params):
        worst = 0.0
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError("grad_check: f returned a non-finite value")
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[k].reshape(-1)[i]
            err = abs(a - numeric)
            rel = err / max(abs(a), abs(numeric), floor)
            worst = max(worst, rel)
            if err > atol + tol * max(abs(a), abs(numeric)):
                passed = False
        per_param[k] = worst
        max_rel = max(max_rel, worst)
    return GradCheckReport(max_rel_error=max_rel, passed=passed, tol=tol, per_param=per_param)
