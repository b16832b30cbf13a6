"""Dense float64 tensors with reverse-mode automatic differentiation.

Big enough for small MLP / convolutional VAEs and for gradients of scalar
objectives with respect to latent vectors; deliberately nothing more.  No
broadcasting beyond bias-add: shapes must match exactly, and reshape /
concat / narrow are explicit ops.  Every tensor produced by an op records
its operands and a backward rule, so the computation record is the graph
reachable from a loss scalar; ``backward`` replays it in reverse
topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ParameterError, ShapeError

Array = np.ndarray


def _as_f64(values) -> Array:
    arr = np.asarray(values, dtype=np.float64)
    return arr


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode autodiff.

    ``data`` is row-major and immutable by convention: ops return new
    tensors and never write to an operand.  ``grad`` is populated by
    ``backward`` for tensors with ``requires_grad`` set.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward_fn: Callable[[Array], None] | None = None,
    ):
        self.data = _as_f64(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward_fn = _backward_fn

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

    def detach(self) -> "Tensor":
        """A leaf copy of this tensor's value: gradients stop here."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are wrapped as constant tensors.
    def __add__(self, other):
        return add(self, _wrap(other, self.shape))

    def __radd__(self, other):
        return add(_wrap(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.shape))

    def __rsub__(self, other):
        return sub(_wrap(other, self.shape), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.shape))

    def __rmul__(self, other):
        return mul(_wrap(other, self.shape), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def backward(self) -> None:
        backward(self)


def _wrap(value, shape: tuple[int, ...]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = _as_f64(value)
    if arr.shape == ():
        arr = np.full(shape, float(arr))
    return Tensor(arr)


def constant(values) -> Tensor:
    """A tensor that never receives gradients."""
    return Tensor(values, requires_grad=False)


def parameter(values, requires_grad: bool = True) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def _accumulate(t: Tensor, g: Array) -> None:
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _make(data: Array, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _needs_grad(*parents):
        return Tensor(data, _parents=parents, _backward_fn=backward_fn)
    return Tensor(data)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bwd(g: Array) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bwd(g: Array) -> None:
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bwd(g: Array) -> None:
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g: Array) -> None:
        _accumulate(a, -g)

    return _make(-a.data, (a,), bwd)


def scale(a: Tensor, factor: float) -> Tensor:
    f = float(factor)

    def bwd(g: Array) -> None:
        _accumulate(a, g * f)

    return _make(a.data * f, (a,), bwd)


def pow_const(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    out = a.data**p

    def bwd(g: Array) -> None:
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _make(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g: Array) -> None:
        _accumulate(a, g * out)

    return _make(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bwd(g: Array) -> None:
        _accumulate(a, g / a.data)

    return _make(out, (a,), bwd)


def sqrt(a: Tensor, eps: float = 0.0) -> Tensor:
    out = np.sqrt(a.data + eps)

    def bwd(g: Array) -> None:
        _accumulate(a, g * 0.5 / out)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Activations


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def bwd(g: Array) -> None:
        _accumulate(a, g * mask)

    return _make(a.data * mask, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g: Array) -> None:
        _accumulate(a, g * (1.0 - out * out))

    return _make(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    # Stable in both tails.
    out = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))), np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def bwd(g: Array) -> None:
        _accumulate(a, g * out * (1.0 - out))

    return _make(out, (a,), bwd)


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ParameterError(f"unknown activation kind {kind!r}") from None
    return fn(a)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ParameterError(f"softmax: axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g: Array) -> None:
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(a, out * (g - inner))

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def bwd(g: Array) -> None:
        _accumulate(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ParameterError("concat: empty tensor list")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g: Array) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries starting at ``start`` along ``axis``."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) outside axis of size {a.shape[axis]}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g: Array) -> None:
        full = np.zeros_like(a.data)
        full[idx] = g
        _accumulate(a, full)

    return _make(a.data[idx].copy(), (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g: Array) -> None:
        _accumulate(a, np.full(a.shape, float(g)))

    return _make(np.asarray(a.data.sum()), (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g: Array) -> None:
        _accumulate(a, np.full(a.shape, float(g) / n))

    return _make(np.asarray(a.data.mean()), (a,), bwd)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} x {b.shape} do not conform")

    def bwd(g: Array) -> None:
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias``; accepts a single row vector or a batch of rows."""
    squeeze = x.data.ndim == 1
    xd = x.data[None, :] if squeeze else x.data
    if xd.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects 1-D/2-D input and 2-D weight, got {x.shape}, {weight.shape}")
    if xd.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {xd.shape[1]} != weight rows {weight.shape[0]}")
    if bias.data.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
    out = xd @ weight.data + bias.data

    def bwd(g: Array) -> None:
        gm = g[None, :] if squeeze else g
        _accumulate(x, (gm @ weight.data.T).reshape(x.shape))
        _accumulate(weight, xd.T @ gm)
        _accumulate(bias, gm.sum(axis=0))

    return _make(out[0] if squeeze else out, (x, weight, bias), bwd)


# ---------------------------------------------------------------------------
# Convolution


def _im2col(xp: Array, kh: int, kw: int, stride: int, h_out: int, w_out: int) -> Array:
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, kh, kw, h_out, w_out), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride]
    return cols


def _col2im(cols: Array, xp_shape: tuple, kh: int, kw: int, stride: int, h_out: int, w_out: int) -> Array:
    xp = np.zeros(xp_shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += cols[:, :, i, j]
    return xp


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (C,H,W) or (N,C,H,W) with ``kernel`` (F,C,kh,kw)."""
    if stride <= 0:
        raise ParameterError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ParameterError(f"conv2d: padding must be nonnegative, got {padding}")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects (N,C,H,W) input and (F,C,kh,kw) kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = xd.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {ck}")
    if bias.data.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({f},)")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, kh, kw, stride, h_out, w_out)
    k_dim = c * kh * kw
    l_dim = h_out * w_out
    # (k_dim, n*l) layout lets one BLAS matmul serve the whole batch.
    cols_flat = np.ascontiguousarray(cols.reshape(n, k_dim, l_dim).transpose(1, 0, 2)).reshape(k_dim, n * l_dim)
    k_mat = kernel.data.reshape(f, k_dim)
    out = (k_mat @ cols_flat).reshape(f, n, l_dim).transpose(1, 0, 2).reshape(n, f, h_out, w_out)
    out += bias.data[None, :, None, None]

    def bwd(g: Array) -> None:
        gm = (g[None] if squeeze else g).reshape(n, f, l_dim)
        _accumulate(bias, gm.sum(axis=(0, 2)))
        g_flat = np.ascontiguousarray(gm.transpose(1, 0, 2)).reshape(f, n * l_dim)
        _accumulate(kernel, (g_flat @ cols_flat.T).reshape(kernel.shape))
        gcols_flat = k_mat.T @ g_flat
        gcols = gcols_flat.reshape(k_dim, n, l_dim).transpose(1, 0, 2).reshape(n, c, kh, kw, h_out, w_out)
        gxp = _col2im(gcols, xp.shape, kh, kw, stride, h_out, w_out)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        _accumulate(x, gx[0] if squeeze else gx)

    return _make(out[0] if squeeze else out, (x, kernel, bias), bwd)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling of (C,H,W) or (N,C,H,W)."""
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"upsample2x expects (N,C,H,W), got {x.shape}")
    out = xd.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g: Array) -> None:
        gm = g[None] if squeeze else g
        n, c, h2, w2 = gm.shape
        gx = gm.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
        _accumulate(x, gx[0] if squeeze else gx)

    return _make(out[0] if squeeze else out, (x,), bwd)


# ---------------------------------------------------------------------------
# Losses


def loss_mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all entries; returns a scalar tensor."""
    _check_same_shape(a, b, "loss_mse")
    diff = a.data - b.data
    n = diff.size

    def bwd(g: Array) -> None:
        core = (2.0 / n) * diff * float(g)
        _accumulate(a, core)
        _accumulate(b, -core)

    return _make(np.asarray(np.mean(diff * diff)), (a, b), bwd)


def loss_categorical(logits: Tensor, targets, axis: int = 0) -> Tensor:
    """Cross-entropy of integer ``targets`` under ``logits``, summed over all cells.

    ``targets`` holds the class index for every position, with shape equal to
    ``logits`` minus the class axis.
    """
    t = np.asarray(targets, dtype=np.int64)
    axis = axis % logits.data.ndim
    expected = logits.shape[:axis] + logits.shape[axis + 1 :]
    if t.shape != expected:
        raise ShapeError(f"loss_categorical: target shape {t.shape} != {expected}")
    n_classes = logits.shape[axis]
    if t.min() < 0 or t.max() >= n_classes:
        raise ParameterError(f"loss_categorical: target index outside [0, {n_classes})")

    moved = np.moveaxis(logits.data, axis, -1)
    shifted = moved - moved.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, t[..., None], axis=-1)[..., 0]
    loss = float((lse - picked).sum())

    def bwd(g: Array) -> None:
        p = np.exp(shifted - lse[..., None])
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
        _accumulate(logits, np.moveaxis((p - onehot) * float(g), -1, axis))

    return _make(np.asarray(loss), (logits,), bwd)


def gaussian_kl(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over all entries."""
    _check_same_shape(mu, logvar, "gaussian_kl")
    ev = np.exp(logvar.data)
    val = 0.5 * float((mu.data * mu.data + ev - 1.0 - logvar.data).sum())

    def bwd(g: Array) -> None:
        _accumulate(mu, mu.data * float(g))
        _accumulate(logvar, 0.5 * (ev - 1.0) * float(g))

    return _make(np.asarray(val), (mu, logvar), bwd)


# ---------------------------------------------------------------------------
# Backward pass and gradient checking


def topo_order(seed: Tensor) -> list[Tensor]:
    """All tensors reachable from ``seed``, operands before results."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(seed, False)]
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
    return order


def backward(seed: Tensor) -> None:
    """Accumulate gradients of ``seed`` (a scalar) into every reachable tensor."""
    if seed.data.size != 1:
        raise ContractError(f"backward seed must be scalar, got shape {seed.shape}")
    order = topo_order(seed)
    seed.grad = np.ones_like(seed.data)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-4) -> float:
    """Max relative error between reverse-mode and central-difference gradients of ``f``."""
    x0 = _as_f64(x)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = step
        hi = f(Tensor((flat + bump).reshape(x0.shape))).item()
        lo = f(Tensor((flat - bump).reshape(x0.shape))).item()
        num_flat[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))


def collect_grads(tensors: Iterable[Tensor]) -> dict[int, Array]:
    """Snapshot accumulated gradients keyed by tensor identity."""
    return {id(t): t.grad.copy() for t in tensors if t.grad is not None}
