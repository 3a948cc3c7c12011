"""Dense tensors with reverse-mode automatic differentiation.

Everything else in the package is built from the primitives here. The engine
is define-by-run: each forward op appends a record (inputs, output, backward
rule) to the implicit graph, and ``backward`` replays the reachable records
exactly once in reverse topological order. Data lives in numpy arrays;
float64 is the default, float32 can be selected via ``set_default_dtype``
for storage-light training.

Broadcasting is deliberately restrictive: two operands must have equal
shapes, or one must be a scalar (size 1), or one shape must be a trailing
suffix of the other. Anything else is a ``ShapeError``; use ``broadcast_to``
to expand explicitly.
"""

from __future__ import annotations

import itertools

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """Input values outside an op's mathematical domain (log/sqrt of negatives)."""


_DEFAULT_DTYPE = [np.float64]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported default dtype {dtype}")
    _DEFAULT_DTYPE[0] = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE[0]


_node_ids = itertools.count()

_NO_GRAD = [False]


class no_grad:
    """Context manager: ops run forward-only, recording no backward rules."""

    def __enter__(self):
        self._saved = _NO_GRAD[0]
        _NO_GRAD[0] = True
        return self

    def __exit__(self, *exc):
        _NO_GRAD[0] = self._saved
        return False


class OpRecord:
    """One primitive op: inputs, output, and its backward rule."""

    __slots__ = ("name", "inputs", "output", "backward_rule")

    def __init__(self, name, inputs, output, backward_rule):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_rule = backward_rule  # out_grad -> tuple of input grads


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE[0])
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE[0])
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.op = None  # OpRecord that produced this tensor, None for leaves

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all dispatch to the module-level primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index_select(self, key)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# broadcasting rules


def _is_scalar_shape(shape) -> bool:
    return int(np.prod(shape, dtype=np.int64)) == 1


def _broadcast_result_shape(sa, sb):
    if sa == sb:
        return sa
    if _is_scalar_shape(sb):
        return sa
    if _is_scalar_shape(sa):
        return sb
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(
        f"shapes {sa} and {sb} do not combine; only scalar and "
        f"trailing-dimension expansion are allowed (use broadcast_to)"
    )


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to the shape of a broadcast operand."""
    if grad.shape == tuple(shape):
        return grad
    if _is_scalar_shape(shape):
        return np.sum(grad).reshape(shape)
    extra = grad.ndim - len(shape)
    return np.sum(grad, axis=tuple(range(extra)))


# ---------------------------------------------------------------------------
# op construction / backward


def _record(name, inputs, out_data, backward_rule) -> Tensor:
    inputs = tuple(inputs)
    out = Tensor(out_data, dtype=out_data.dtype)
    if not _NO_GRAD[0] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = OpRecord(name, inputs, out, backward_rule)
    return out


class Graph:
    """Topologically ordered record of the ops reachable from a root tensor.

    Rebuilt per step (define-by-run); construction order guarantees every
    op's inputs precede it.
    """

    def __init__(self, root: Tensor):
        ops = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if node.op is None:
                continue
            if expanded:
                ops.append(node.op)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for parent in node.op.inputs:
                stack.append((parent, False))
        self.ops = ops

    def __len__(self):
        return len(self.ops)


def backward(loss: Tensor) -> int:
    """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf.

    Repeated calls without zero_grad accumulate. Returns the number of
    backward rules executed (each reachable op exactly once).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph(loss)
    flowing: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    calls = 0
    for rec in reversed(graph.ops):
        out_grad = flowing.pop(rec.output.node_id, None)
        if out_grad is None:
            out_grad = np.zeros_like(rec.output.data)
        input_grads = rec.backward_rule(out_grad)
        calls += 1
        for inp, g in zip(rec.inputs, input_grads):
            if g is None or not inp.requires_grad:
                continue
            g = _unbroadcast(np.asarray(g, dtype=inp.data.dtype), inp.shape)
            g = g.reshape(inp.shape)
            if inp.op is None:
                inp.grad = g.copy() if inp.grad is None else inp.grad + g
            else:
                prev = flowing.get(inp.node_id)
                flowing[inp.node_id] = g if prev is None else prev + g
    # the loss itself may be a requires_grad leaf
    if loss.op is None and loss.requires_grad:
        seed = np.ones_like(loss.data)
        loss.grad = seed if loss.grad is None else loss.grad + seed
    return calls


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_result_shape(a.shape, b.shape)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_result_shape(a.shape, b.shape)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_result_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_result_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", (a, b), out, lambda g: (g / bd, -g * ad / (bd * bd)))


# ---------------------------------------------------------------------------
# elementwise unary ops


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive inputs")
    ad = a.data
    return _record("log", (a,), np.log(ad), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt requires non-negative inputs")
    out = np.sqrt(a.data)
    return _record("sqrt", (a,), out, lambda g: (g * 0.5 / np.maximum(out, 1e-300),))


def pow_const(a, p) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    ad = a.data
    out = ad ** p
    return _record("pow", (a,), out, lambda g: (g * p * ad ** (p - 1.0),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    ad = a.data
    return _record("silu", (a,), ad * s, lambda g: (g * s * (1.0 + ad * (1.0 - s)),))


def clamp(a, lo=None, hi=None) -> Tensor:
    """Elementwise clip; gradient passes only where the input was inside the bounds."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data)
    if lo is not None:
        inside = inside * (a.data >= lo)
    if hi is not None:
        inside = inside * (a.data <= hi)
    return _record("clamp", (a,), out, lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    in_shape = a.shape
    out = a.data.reshape(shape)
    return _record("reshape", (a,), out, lambda g: (g.reshape(in_shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) for x in axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _record("transpose", (a,), out, lambda g: (np.transpose(g, inv),))


def swap_last2(a) -> Tensor:
    """Transpose the last two axes; matmul's companion for batched tensors."""
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-2], axes[-1] = axes[-1], axes[-2]
    return transpose(a, axes)


def broadcast_to(a, shape) -> Tensor:
    """Explicit broadcast; the gradient sums over the expanded axes."""
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}: {e}") from None
    in_shape = a.shape

    def bwd(g):
        extra = len(shape) - len(in_shape)
        g = np.sum(g, axis=tuple(range(extra))) if extra else g
        kept = tuple(i for i, s in enumerate(in_shape) if s == 1 and g.shape[i] != 1)
        if kept:
            g = np.sum(g, axis=kept, keepdims=True)
        return (g,)

    return _record("broadcast_to", (a,), np.ascontiguousarray(out), bwd)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    nd = tensors[0].ndim
    axis = axis % nd
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if t.ndim != nd or [s for i, s in enumerate(other) if i != axis] != [
            s for i, s in enumerate(base) if i != axis
        ]:
            raise ShapeError(
                f"concat shapes {tensors[0].shape} and {t.shape} differ off axis {axis}"
            )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record(
        "concat", tensors, out, lambda g: tuple(np.split(g, splits, axis=axis))
    )


def index_select(a, key) -> Tensor:
    """Basic slicing (ints, slices, tuples thereof); backward scatters into zeros."""
    a = as_tensor(a)
    out = a.data[key]
    in_shape = a.shape

    def bwd(g):
        buf = np.zeros(in_shape, dtype=g.dtype)
        buf[key] = g
        return (buf,)

    return _record("index", (a,), np.ascontiguousarray(out), bwd)


def take_rows(table, ids) -> Tensor:
    """Row gather (embedding lookup); backward scatter-adds into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]
    n_rows = table.shape[0]

    def bwd(g):
        buf = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (buf,)

    return _record("take_rows", (table,), out, bwd)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape),)

    return _record("sum", (a,), np.asarray(out), bwd)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    in_shape = a.shape
    count = a.size if axis is None else int(np.prod([in_shape[i] for i in axis]))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape) / count,)

    return _record("mean", (a,), np.asarray(out), bwd)


# ---------------------------------------------------------------------------
# linear algebra / nn building blocks


def matmul(a, b) -> Tensor:
    """Matrix product; 2-D or batched N-D with identical leading batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bwd(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _record("matmul", (a, b), out, bwd)


def softmax(a, axis=-1) -> Tensor:
    """Stable softmax (max-subtracted); rows sum to 1 along axis."""
    a = as_tensor(a)
    axis = axis % a.ndim
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", (a,), out, bwd)


def layer_norm(a, axis=-1, eps=1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along axis (no affine terms).

    Composed from primitives, so the gradient comes out of the graph rather
    than a handwritten rule. Constant inputs map to zeros thanks to the
    variance floor.
    """
    a = as_tensor(a)
    axis = axis % a.ndim
    mu = tmean(a, axis=axis, keepdims=True)
    centered = sub(a, broadcast_to(mu, a.shape))
    var = tmean(mul(centered, centered), axis=axis, keepdims=True)
    denom = sqrt(add(var, eps))
    return div(centered, broadcast_to(denom, a.shape))


def unit_normalize(a, axis=-1, eps=1e-12) -> Tensor:
    """Scale so the L2 norm along axis is 1."""
    a = as_tensor(a)
    axis = axis % a.ndim
    sq = tsum(mul(a, a), axis=axis, keepdims=True)
    inv = pow_const(add(sq, eps), -0.5)
    return mul(a, broadcast_to(inv, a.shape))


# ---------------------------------------------------------------------------
# 2-D image ops (B, C, H, W)


_CONV_PLANS: dict = {}


def _conv_plan(Cin, H, W, kh, kw, padding):
    """Cached gather indices for im2col and its gather-based inverse."""
    key = (Cin, H, W, kh, kw, padding)
    plan = _CONV_PLANS.get(key)
    if plan is not None:
        return plan
    Hp, Wp = H + 2 * padding, W + 2 * padding
    Ho, Wo = Hp - kh + 1, Wp - kw + 1

    oy, ox = np.meshgrid(np.arange(Ho), np.arange(Wo), indexing="ij")
    ky, kx = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    rows = oy.reshape(-1, 1) + ky.reshape(1, -1)  # (Ho*Wo, kh*kw)
    cols_ = ox.reshape(-1, 1) + kx.reshape(1, -1)
    pix = rows * Wp + cols_
    chan = (np.arange(Cin) * (Hp * Wp)).reshape(1, Cin, 1, 1)
    idx = (chan + pix.reshape(1, 1, Ho * Wo, kh * kw)).reshape(Cin, Ho * Wo, kh * kw)
    idx = np.ascontiguousarray(np.transpose(idx, (1, 0, 2))).reshape(Ho * Wo, Cin * kh * kw)

    # col2im as gather: padded pixel (y, x) and kernel slot (ky, kx) pull from
    # output pixel (y - ky, x - kx) when it exists
    yy, xx = np.meshgrid(np.arange(Hp), np.arange(Wp), indexing="ij")
    py = yy.reshape(-1, 1) - ky.reshape(1, -1)  # (Hp*Wp, kh*kw)
    px = xx.reshape(-1, 1) - kx.reshape(1, -1)
    valid = (py >= 0) & (py < Ho) & (px >= 0) & (px < Wo)
    inv_pix = np.where(valid, py * Wo + px, 0)
    plan = (Ho, Wo, Hp, Wp, idx, inv_pix, valid.astype(np.float64))
    _CONV_PLANS[key] = plan
    return plan


def conv2d(x, w, b=None, padding=1) -> Tensor:
    """Stride-1 convolution via im2col; both directions are gathers + matmuls."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D x and w, got {x.shape} and {w.shape}")
    B, Cin, H, W = x.shape
    Cout, Cin2, kh, kw = w.shape
    if Cin != Cin2:
        raise ShapeError(f"conv2d channel mismatch: x {x.shape} vs w {w.shape}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(f"conv2d kernel {w.shape} larger than padded input {x.shape}")
    Ho, Wo, Hp, Wp, idx, inv_pix, inv_mask = _conv_plan(Cin, H, W, kh, kw, padding)
    kk = kh * kw

    if padding:
        xp = np.zeros((B, Cin, Hp, Wp), dtype=x.data.dtype)
        xp[:, :, padding:padding + H, padding:padding + W] = x.data
    else:
        xp = x.data
    cols = np.take(xp.reshape(B, -1), idx, axis=1)  # (B, Ho*Wo, Cin*kh*kw)
    wmat = w.data.reshape(Cout, -1)
    # flattened 2-D matmul; numpy's batched matmul is much slower here
    out = (cols.reshape(B * Ho * Wo, -1) @ wmat.T).reshape(B, Ho * Wo, Cout)
    out = np.ascontiguousarray(np.transpose(out, (0, 2, 1))).reshape(B, Cout, Ho, Wo)

    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (Cout,):
            raise ShapeError(f"conv2d bias shape {b.shape} != ({Cout},)")
        out = out + b.data.reshape(1, Cout, 1, 1)
        inputs.append(b)

    def bwd(g):
        gmat = np.ascontiguousarray(
            np.transpose(g.reshape(B, Cout, Ho * Wo), (0, 2, 1))
        ).reshape(B * Ho * Wo, Cout)
        dw = (gmat.T @ cols.reshape(-1, Cin * kk)).reshape(w.shape)
        dcols = (gmat @ wmat).reshape(B, Ho * Wo, Cin, kk)
        dct = np.ascontiguousarray(np.transpose(dcols, (0, 2, 1, 3)))  # (B,Cin,HoWo,kk)
        pulled = dct[:, :, inv_pix, np.arange(kk)]  # (B, Cin, Hp*Wp, kk)
        dxp = (pulled * inv_mask).sum(axis=3).reshape(B, Cin, Hp, Wp)
        dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _record("conv2d", inputs, out, bwd)


def avg_pool2d(x, k=2) -> Tensor:
    """k-by-k mean pooling; H and W must be divisible by k."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ShapeError(f"avg_pool2d: spatial {H}x{W} not divisible by {k}")
    r = reshape(x, (B, C, H // k, k, W // k, k))
    return tmean(r, axis=(3, 5))


def upsample2d(x, k=2) -> Tensor:
    """Nearest-neighbour upsampling by factor k."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, k, axis=2), k, axis=3)

    def bwd(g):
        return (g.reshape(B, C, H, k, W, k).sum(axis=(3, 5)),)

    return _record("upsample2d", (x,), out, bwd)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, x: Tensor, h: float = 1e-5, max_coords=None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must map a Tensor to a scalar Tensor. Runs in float64 regardless of the
    input dtype. Error metric per coordinate:
    |analytic - central| / max(1, |central|).
    """
    base = np.asarray(x.data, dtype=np.float64).copy()
    probe = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    out = f(probe)
    if out.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    backward(out)
    analytic = (
        np.zeros_like(base) if probe.grad is None else np.asarray(probe.grad, dtype=np.float64)
    )

    n = base.size
    if max_coords is not None and max_coords < n:
        rng = np.random.default_rng(seed)
        coords = rng.choice(n, size=max_coords, replace=False)
    else:
        coords = np.arange(n)

    flat = base.reshape(-1)
    worst = 0.0
    for i in coords:
        saved = flat[i]
        flat[i] = saved + h
        up = f(Tensor(base.copy(), dtype=np.float64)).item()
        flat[i] = saved - h
        down = f(Tensor(base.copy(), dtype=np.float64)).item()
        flat[i] = saved
        central = (up - down) / (2.0 * h)
        err = abs(analytic.reshape(-1)[i] - central) / max(1.0, abs(central))
        worst = max(worst, err)
    return worst
