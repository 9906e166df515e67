"""Dense float64 tensor engine with tape-based reverse-mode differentiation.

Everything downstream (encoder, fusion, losses) is built from the ops in this
module. Ground rules:

- double precision only, row-major storage, explicit shape checks on every op
- broadcasting is limited to tensor-vs-python-scalar; the few axis broadcasts
  the pipeline needs (bias add, per-channel / per-pixel scaling) are dedicated
  ops with hand-written backward rules
- every op checks its output for NaN/Inf and raises instead of propagating
- gradients accumulate additively across fan-out; ``backward`` walks the tape
  in exact reverse recording order and clears it afterwards
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class TensorError(ValueError):
    """Shape or domain violation in a tensor op."""


class NonFiniteError(ArithmeticError):
    """An op produced (or was handed) NaN or Inf."""


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    Recording order is a topological order by construction (an op can only
    consume tensors that already exist), so the backward pass simply visits
    nodes in reverse.
    """

    def __init__(self) -> None:
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: "Tensor", backward: Callable[[np.ndarray], None]) -> None:
        out._node_index = len(self._nodes)
        self._nodes.append((out, backward))

    def clear(self) -> None:
        for out, _ in self._nodes:
            out._node_index = None
        self._nodes.clear()


_TAPE_STACK: list[Tape | None] = [Tape()]


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1]


class no_grad:
    """Context manager: ops inside record nothing and yield detached outputs."""

    def __enter__(self) -> None:
        _TAPE_STACK.append(None)

    def __exit__(self, *exc) -> bool:
        _TAPE_STACK.pop()
        return False


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    """Dense float64 array with an optional same-shape gradient buffer.

    Data is immutable after creation (parameter updates rebind ``.data``);
    only ``.grad`` is written in place, by gradient accumulation.
    """

    __slots__ = ("data", "grad", "requires_grad", "_node_index")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self._adopt(arr, requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Adopt a freshly computed float64 array without copying."""
        t = cls.__new__(cls)
        t._adopt(np.asarray(arr, dtype=np.float64), requires_grad)
        return t

    def _adopt(self, arr: np.ndarray, requires_grad: bool) -> None:
        if arr.size == 0:
            raise TensorError("tensor dimensions must all be positive")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite values in tensor data")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node_index: int | None = None

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
        if self.size != 1:
            raise TensorError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all real work happens in the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)  # copy: g may alias a shared buffer
    else:
        t.grad += g


def record_op(
    name: str,
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], None],
) -> Tensor:
    """Wrap an op result, recording it on the active tape when grads are needed.

    ``backward`` receives the output gradient and must accumulate into the
    inputs via :func:`accumulate_grad`. This is the extension hook used by
    fused ops outside this module (e.g. the segmentation loss).
    """
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{name}: non-finite values in result")
    if data.size == 0:
        raise TensorError(f"{name}: empty result")
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)  # already validated; skip the _adopt re-check
    out.data = data
    out.grad = None
    out.requires_grad = needs_grad
    out._node_index = None
    if needs_grad:
        tape._record(out, backward)
    return out


# public alias for fused ops defined in other modules
accumulate_grad = _accumulate


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Run reverse-mode accumulation from a scalar loss; clears the tape."""
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise TensorError("backward called with gradients disabled")
    if loss.size != 1:
        raise TensorError(f"loss must be scalar, got shape {loss.shape}")
    if loss._node_index is None:
        raise TensorError("detached loss: not recorded on the tape")
    loss.grad = np.ones_like(loss.data)
    try:
        for out, bwd in reversed(tape._nodes[: loss._node_index + 1]):
            if out.grad is not None:
                bwd(out.grad)
    finally:
        tape.clear()


# ---------------------------------------------------------------------------
# elementwise ops (equal shapes, or a python-number second operand)


def _binary_operands(name: str, a: Tensor, b) -> tuple[np.ndarray, Tensor | None]:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise TensorError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
        return b.data, b
    if isinstance(b, (int, float, np.integer, np.floating)):
        return np.float64(b), None
    raise TensorError(f"{name}: unsupported operand type {type(b).__name__}")


def add(a: Tensor, b) -> Tensor:
    bd, bt = _binary_operands("add", a, b)

    def bwd(g):
        _accumulate(a, g)
        if bt is not None:
            _accumulate(bt, g)

    return record_op("add", a.data + bd, (a, bt) if bt else (a,), bwd)


def sub(a: Tensor, b) -> Tensor:
    bd, bt = _binary_operands("sub", a, b)

    def bwd(g):
        _accumulate(a, g)
        if bt is not None:
            _accumulate(bt, -g)

    return record_op("sub", a.data - bd, (a, bt) if bt else (a,), bwd)


def mul(a: Tensor, b) -> Tensor:
    bd, bt = _binary_operands("mul", a, b)
    ad = a.data

    def bwd(g):
        _accumulate(a, g * bd)
        if bt is not None:
            _accumulate(bt, g * ad)

    return record_op("mul", ad * bd, (a, bt) if bt else (a,), bwd)


def div(a: Tensor, b) -> Tensor:
    bd, bt = _binary_operands("div", a, b)
    if np.any(bd == 0.0):
        raise ZeroDivisionError("div: zero divisor")
    ad = a.data

    def bwd(g):
        _accumulate(a, g / bd)
        if bt is not None:
            _accumulate(bt, -g * ad / (bd * bd))

    return record_op("div", ad / bd, (a, bt) if bt else (a,), bwd)


def maximum(a: Tensor, b) -> Tensor:
    bd, bt = _binary_operands("max", a, b)
    take_a = a.data >= bd  # ties route the gradient to a

    def bwd(g):
        _accumulate(a, g * take_a)
        if bt is not None:
            _accumulate(bt, g * ~take_a)

    return record_op("max", np.maximum(a.data, bd), (a, bt) if bt else (a,), bwd)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div, "max": maximum}


def elementwise(kind: str, a: Tensor, b) -> Tensor:
    try:
        op = _ELEMENTWISE[kind]
    except KeyError:
        raise TensorError(f"unknown elementwise op kind {kind!r}") from None
    return op(a, b)


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise TensorError(f"matmul: need 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        _accumulate(a, g @ bd.T)
        _accumulate(b, ad.T @ g)

    return record_op("matmul", ad @ bd, (a, b), bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-C vector to the last axis of x (the one sanctioned broadcast)."""
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise TensorError(f"add_bias: incompatible shapes {x.shape} + {b.shape}")
    c = b.shape[0]

    def bwd(g):
        _accumulate(x, g)
        _accumulate(b, g.reshape(-1, c).sum(axis=0))

    return record_op("add_bias", x.data + b.data, (x, b), bwd)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise TensorError(f"reshape: dimensions must be positive, got {shape}")
    if int(np.prod(shape, dtype=np.int64)) != t.size:
        raise TensorError(f"reshape: cannot view {t.shape} as {shape}")
    orig = t.shape

    def bwd(g):
        _accumulate(t, g.reshape(orig))

    return record_op("reshape", t.data.reshape(shape), (t,), bwd)


def transpose(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(t.ndim)):
        raise TensorError(f"transpose: {axes} is not a permutation of {t.ndim} axes")
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        _accumulate(t, np.transpose(g, inverse))

    return record_op("transpose", np.transpose(t.data, axes), (t,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise TensorError("concat: empty input list")
    first = tensors[0]
    if not 0 <= axis < first.ndim:
        raise TensorError(f"concat: axis {axis} out of range for ndim {first.ndim}")
    for t in tensors[1:]:
        if t.ndim != first.ndim:
            raise TensorError("concat: rank mismatch")
        for ax in range(first.ndim):
            if ax != axis and t.shape[ax] != first.shape[ax]:
                raise TensorError(f"concat: shape mismatch {t.shape} vs {first.shape}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, stop)
            _accumulate(t, g[tuple(sl)])

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return record_op("concat", data, tuple(tensors), bwd)


def narrow(t: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if not 0 <= axis < t.ndim:
        raise TensorError(f"narrow: axis {axis} out of range")
    if length <= 0 or start < 0 or start + length > t.shape[axis]:
        raise TensorError(f"narrow: bad range [{start}, {start + length}) on {t.shape}")
    sl = [slice(None)] * t.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bwd(g):
        full = np.zeros_like(t.data)
        full[sl] = g
        _accumulate(t, full)

    return record_op("narrow", t.data[sl].copy(), (t,), bwd)


def sum_all(t: Tensor) -> Tensor:
    shape = t.shape

    def bwd(g):
        _accumulate(t, np.broadcast_to(g, shape))

    return record_op("sum", np.asarray(t.data.sum()), (t,), bwd)


def mean_all(t: Tensor) -> Tensor:
    return mul(sum_all(t), 1.0 / t.size)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def exp(t: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow becomes NonFiniteError below
        out_data = np.exp(t.data)

    def bwd(g):
        _accumulate(t, g * out_data)

    return record_op("exp", out_data, (t,), bwd)


def log(t: Tensor) -> Tensor:
    if np.any(t.data <= 0.0):
        raise TensorError("log: domain requires strictly positive values")
    td = t.data

    def bwd(g):
        _accumulate(t, g / td)

    return record_op("log", np.log(td), (t,), bwd)


def sqrt(t: Tensor) -> Tensor:
    if np.any(t.data < 0.0):
        raise TensorError("sqrt: negative input")
    out_data = np.sqrt(t.data)

    def bwd(g):
        _accumulate(t, g / (2.0 * out_data))

    return record_op("sqrt", out_data, (t,), bwd)


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        _accumulate(t, g * out_data * (1.0 - out_data))

    return record_op("sigmoid", out_data, (t,), bwd)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(t: Tensor) -> Tensor:
    """tanh-approximation GELU; smooth, so finite differences behave."""
    x = t.data
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        _accumulate(t, g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du))

    return record_op("gelu", 0.5 * x * (1.0 + th), (t,), bwd)


def clamp(t: Tensor, lo: float, hi: float) -> Tensor:
    if not lo < hi:
        raise TensorError(f"clamp: need lo < hi, got [{lo}, {hi}]")
    inside = (t.data >= lo) & (t.data <= hi)

    def bwd(g):
        _accumulate(t, g * inside)

    return record_op("clamp", np.clip(t.data, lo, hi), (t,), bwd)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        _accumulate(t, p * (g - inner))

    return record_op("softmax", p, (t,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift per channel."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise TensorError(f"layer_norm: scale/shift must have shape ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bwd(g):
        _accumulate(beta, g.reshape(-1, c).sum(axis=0))
        _accumulate(gamma, (g * xhat).reshape(-1, c).sum(axis=0))
        dxhat = g * gamma.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        _accumulate(x, dx)

    return record_op("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# spatial ops on C x h x w feature maps


def _check_chw(name: str, f: Tensor) -> tuple[int, int, int]:
    if f.ndim != 3:
        raise TensorError(f"{name}: expected C x h x w tensor, got shape {f.shape}")
    return f.shape


def pool_global(f: Tensor, kind: str) -> Tensor:
    """Collapse the spatial extent of a C x h x w map to a length-C vector."""
    c, h, w = _check_chw("pool_global", f)
    if kind == "avg":
        def bwd(g):
            _accumulate(f, np.broadcast_to((g / (h * w))[:, None, None], f.shape))

        return record_op("pool_avg", f.data.mean(axis=(1, 2)), (f,), bwd)
    if kind == "max":
        flat = f.data.reshape(c, -1)
        idx = flat.argmax(axis=1)  # first max wins; deterministic

        def bwd(g):
            full = np.zeros_like(flat)
            full[np.arange(c), idx] = g
            _accumulate(f, full.reshape(f.shape))

        return record_op("pool_max", flat[np.arange(c), idx].copy(), (f,), bwd)
    raise TensorError(f"pool_global: kind must be 'avg' or 'max', got {kind!r}")


def scale_channels(f: Tensor, w: Tensor) -> Tensor:
    """Multiply each channel map of f by the matching entry of a length-C vector."""
    c, _, _ = _check_chw("scale_channels", f)
    if w.shape != (c,):
        raise TensorError(f"scale_channels: weight shape {w.shape} != ({c},)")
    fd, wd = f.data, w.data

    def bwd(g):
        _accumulate(f, g * wd[:, None, None])
        _accumulate(w, (g * fd).sum(axis=(1, 2)))

    return record_op("scale_channels", fd * wd[:, None, None], (f, w), bwd)


def scale_spatial(f: Tensor, m: Tensor) -> Tensor:
    """Multiply every channel of f by the same h x w map."""
    _, h, w = _check_chw("scale_spatial", f)
    if m.shape != (h, w):
        raise TensorError(f"scale_spatial: map shape {m.shape} != ({h}, {w})")
    fd, md = f.data, m.data

    def bwd(g):
        _accumulate(f, g * md[None])
        _accumulate(m, (g * fd).sum(axis=0))

    return record_op("scale_spatial", fd * md[None], (f, m), bwd)


def _interp_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """Dense row-stochastic matrix applying 1-d bilinear resampling
    (half-pixel source mapping, edge clamping)."""
    s = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    i0f = np.floor(s)
    t = s - i0f
    i0 = np.clip(i0f, 0, n_src - 1).astype(np.intp)
    i1 = np.clip(i0f + 1, 0, n_src - 1).astype(np.intp)
    mat = np.zeros((n_dst, n_src))
    rows = np.arange(n_dst)
    np.add.at(mat, (rows, i0), 1.0 - t)
    np.add.at(mat, (rows, i1), t)
    return mat


def resample_bilinear(f: Tensor, h2: int, w2: int) -> Tensor:
    """Bilinear resize of a C x h x w map (half-pixel centers, edges clamped)."""
    c, h, w = _check_chw("resample_bilinear", f)
    if h2 < 1 or w2 < 1:
        raise TensorError(f"resample_bilinear: target {h2}x{w2} must be positive")
    if (h2, w2) == (h, w):
        def bwd_id(g):
            _accumulate(f, g)

        return record_op("resample_bilinear", f.data.copy(), (f,), bwd_id)

    wy = _interp_matrix(h, h2)
    wx = _interp_matrix(w, w2)
    data = np.matmul(np.matmul(wy, f.data), wx.T)

    def bwd(g):
        _accumulate(f, np.matmul(np.matmul(wy.T, g), wx))

    return record_op("resample_bilinear", data, (f,), bwd)


# ---------------------------------------------------------------------------
# parameter construction


def uniform_param(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> Tensor:
    """Trainable tensor initialized uniformly in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True)


def zeros_param(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=True)


def ones_param(shape: Sequence[int]) -> Tensor:
    return Tensor(np.ones(tuple(shape)), requires_grad=True)
