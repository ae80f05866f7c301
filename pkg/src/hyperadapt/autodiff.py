"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray plus an implicit tape: every op records its parents
and a closure that maps the output gradient to parent gradients. backward()
walks the tape in reverse topological order. The op set is exactly what the
acoustic model needs: matmul (2D and stacked 3D), length-preserving 1D
convolution, ReLU/tanh, softmax and log-softmax, layer norm, seeded dropout,
embedding lookup, elementwise add/sub/mul, sum/mean reductions, MSE/L1
losses, and reshape/slice/concat plumbing.

Training runs in float32 by default; gradient checking should build float64
tensors (finite differences are unreliable in 32-bit).
"""

import numpy as np

from . import kernels
from .errors import InputError, NumericsError, ShapeError, StateError

DEFAULT_DTYPE = np.float32


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def from_op(data, parents, grad_fn, op):
    """Create a graph node. grad_fn(g) returns one gradient per parent (or None)."""
    out = Tensor(data)
    out.op = op
    out._parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in out._parents)
    if out.requires_grad:
        out._grad_fn = grad_fn
    return out


def constant(data, dtype=DEFAULT_DTYPE):
    return Tensor(np.asarray(data, dtype=dtype))


def _check_same_dtype(op, *tensors):
    dts = {t.dtype for t in tensors}
    if len(dts) > 1:
        raise InputError(f"{op}: mixed dtypes {sorted(str(d) for d in dts)}")


def _coerce(op, a, like=None):
    if isinstance(a, Tensor):
        return a
    if isinstance(a, (int, float)):
        dt = like.dtype if like is not None else DEFAULT_DTYPE
        return Tensor(np.asarray(a, dtype=dt))
    raise InputError(f"{op}: expected Tensor or scalar, got {type(a).__name__}")


# -----------------------------------------------------------------------------
# elementwise arithmetic (strict broadcasting: same shape, scalar, or a
# trailing-axis bias vector)
# -----------------------------------------------------------------------------


def _broadcast_kind(op, a, b):
    if a.shape == b.shape:
        return "same"
    if b.data.ndim == 0:
        return "scalar"
    if b.data.ndim == 1 and a.data.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return "bias"
    raise ShapeError(op, f"cannot broadcast {b.shape} onto {a.shape} (trailing axis mismatch)")


def _reduce_to(g, kind, shape):
    if kind == "same":
        return g
    if kind == "scalar":
        return g.sum()
    axes = tuple(range(g.ndim - 1))
    return g.sum(axis=axes) if axes else g


def add(a, b):
    a = _coerce("add", a)
    b = _coerce("add", b, like=a)
    _check_same_dtype("add", a, b)
    kind = _broadcast_kind("add", a, b)
    out_data = a.data + b.data

    def grad_fn(g):
        return g, _reduce_to(g, kind, b.shape)

    return from_op(out_data, (a, b), grad_fn, "add")


def sub(a, b):
    a = _coerce("sub", a)
    b = _coerce("sub", b, like=a)
    _check_same_dtype("sub", a, b)
    kind = _broadcast_kind("sub", a, b)
    out_data = a.data - b.data

    def grad_fn(g):
        return g, -_reduce_to(g, kind, b.shape)

    return from_op(out_data, (a, b), grad_fn, "sub")


def mul(a, b):
    a = _coerce("mul", a)
    b = _coerce("mul", b, like=a)
    _check_same_dtype("mul", a, b)
    kind = _broadcast_kind("mul", a, b)
    ad, bd = a.data, b.data
    out_data = ad * bd

    def grad_fn(g):
        return g * bd, _reduce_to(g * ad, kind, b.shape)

    return from_op(out_data, (a, b), grad_fn, "mul")


def scale(a, c):
    c = float(c)

    def grad_fn(g):
        return (g * c,)

    return from_op(a.data * a.dtype.type(c), (a,), grad_fn, "scale")


def neg(a):
    return scale(a, -1.0)


# -----------------------------------------------------------------------------
# matmul: 2D @ 2D, 3D @ 3D (matching batch), 3D @ 2D
# -----------------------------------------------------------------------------


def matmul(a, b):
    _check_same_dtype("matmul", a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.ndim > 3 or bd.ndim > 3:
        raise ShapeError("matmul", f"ranks {ad.ndim} and {bd.ndim} unsupported (need 2 or 3)")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(
            "matmul", f"inner axes differ: {ad.shape} @ {bd.shape} ({ad.shape[-1]} vs {bd.shape[-2]})"
        )
    if ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise ShapeError("matmul", f"batch axes differ: {ad.shape[0]} vs {bd.shape[0]}")
    out_data = np.matmul(ad, bd)

    def grad_fn(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        gb = np.matmul(ad.swapaxes(-1, -2), g)
        if ga.ndim > ad.ndim:
            ga = ga.sum(axis=0)
        if gb.ndim > bd.ndim:
            gb = gb.sum(axis=0)
        return ga, gb

    return from_op(out_data, (a, b), grad_fn, "matmul")


# -----------------------------------------------------------------------------
# shape plumbing
# -----------------------------------------------------------------------------


def reshape(a, shape):
    old = a.shape

    def grad_fn(g):
        return (g.reshape(old),)

    return from_op(a.data.reshape(shape), (a,), grad_fn, "reshape")


def permute(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def grad_fn(g):
        return (g.transpose(inv),)

    return from_op(a.data.transpose(axes), (a,), grad_fn, "permute")


def transpose_last(a):
    nd = a.data.ndim
    if nd < 2:
        raise ShapeError("transpose_last", f"rank {nd} has no trailing axis pair")
    axes = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    return permute(a, axes)


def concat(tensors, axis=-1):
    if not tensors:
        raise InputError("concat: empty tensor list")
    _check_same_dtype("concat", *tensors)
    sizes = [t.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        idx = [slice(None)] * g.ndim
        outs = []
        for i in range(len(sizes)):
            idx[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(idx)])
        return tuple(outs)

    return from_op(out_data, tuple(tensors), grad_fn, "concat")


def narrow(a, axis, start, length):
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError("narrow", f"slice [{start}:{start + length}] exceeds axis {axis} of {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return from_op(a.data[idx], (a,), grad_fn, "narrow")


# -----------------------------------------------------------------------------
# nonlinearities and normalization
# -----------------------------------------------------------------------------


def relu(a):
    mask = a.data > 0
    out_data = np.where(mask, a.data, a.dtype.type(0))

    def grad_fn(g):
        return (g * mask,)

    return from_op(out_data, (a,), grad_fn, "relu")


def tanh(a):
    out_data = np.tanh(a.data)

    def grad_fn(g):
        return (g * (1.0 - out_data * out_data),)

    return from_op(out_data, (a,), grad_fn, "tanh")


def softmax(a, axis=-1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return from_op(y, (a,), grad_fn, "softmax")


def log_softmax(a, axis=-1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def grad_fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return from_op(y, (a,), grad_fn, "log_softmax")


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    _check_same_dtype("layer_norm", a, gain, bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", f"affine params {gain.shape}/{bias.shape} do not match last axis {d}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out_data = xhat * gain.data + bias.data

    def grad_fn(g):
        gxhat = g * gain.data
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if lead else g * xhat
        gbias = g.sum(axis=lead) if lead else g
        return gx, ggain, gbias

    return from_op(out_data, (a, gain, bias), grad_fn, "layer_norm")


def dropout(a, p, rng, training):
    """Seeded inverted dropout; identity when p == 0 or not training."""
    if p < 0 or p >= 1:
        raise InputError(f"dropout: probability {p} outside [0, 1)")
    if not training or p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype)
    factor = a.dtype.type(1.0 / (1.0 - p))
    out_data = a.data * keep * factor

    def grad_fn(g):
        return (g * keep * factor,)

    return from_op(out_data, (a,), grad_fn, "dropout")


def embedding(table, ids):
    """Row lookup into a (vocab, dim) table; ids is an integer ndarray."""
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise ShapeError("embedding", f"ids must be 1-D, got shape {ids.shape}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)][0]
        raise InputError(f"embedding: id {int(bad)} outside vocabulary of size {vocab}")
    out_data = table.data[ids]

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return from_op(out_data, (table,), grad_fn, "embedding")


# -----------------------------------------------------------------------------
# 1D convolution over (T, C_in) with symmetric zero padding (length preserved)
# -----------------------------------------------------------------------------


def conv1d(x, w, b=None):
    _check_same_dtype("conv1d", *( (x, w) if b is None else (x, w, b) ))
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ShapeError("conv1d", f"need x (T, Cin) and w (K, Cin, Cout), got {x.shape} and {w.shape}")
    k, cin, cout = w.shape
    if k % 2 != 1:
        raise ShapeError("conv1d", f"kernel size {k} must be odd to preserve length")
    if x.shape[1] != cin:
        raise ShapeError("conv1d", f"channel axes differ: input {x.shape[1]} vs weight {cin}")
    pad = (k - 1) // 2
    xp = np.concatenate(
        [np.zeros((pad, cin), x.dtype), x.data, np.zeros((pad, cin), x.dtype)], axis=0
    )
    out_data = kernels.conv1d_forward(xp, w.data)

    def grad_fn(g):
        gxp, gw = kernels.conv1d_backward(xp, w.data, g)
        gx = gxp[pad : pad + x.shape[0]]
        return gx, gw

    out = from_op(out_data, (x, w), grad_fn, "conv1d")
    if b is not None:
        out = add(out, b)
    return out


# -----------------------------------------------------------------------------
# reductions and losses
# -----------------------------------------------------------------------------


def sum_all(a):
    def grad_fn(g):
        return (np.full_like(a.data, g),)

    return from_op(a.data.sum(), (a,), grad_fn, "sum")


def mean_all(a):
    n = a.size

    def grad_fn(g):
        return (np.full_like(a.data, g / n),)

    return from_op(a.data.mean(), (a,), grad_fn, "mean")


def mean_axis(a, axis):
    n = a.shape[axis]

    def grad_fn(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return from_op(a.data.mean(axis=axis), (a,), grad_fn, "mean_axis")


def _as_target(op, b):
    # loss targets are often plain arrays; wrap them as non-grad constants
    if isinstance(b, np.ndarray):
        return Tensor(b)
    if isinstance(b, Tensor):
        return b
    raise InputError(f"{op}: target must be a Tensor or ndarray, got {type(b).__name__}")


def mse_loss(a, b):
    b = _as_target("mse_loss", b)
    _check_same_dtype("mse_loss", a, b)
    if a.shape != b.shape:
        raise ShapeError("mse_loss", f"operand shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = max(a.size, 1)

    def grad_fn(g):
        d = g * 2.0 / n * diff
        return d, -d

    return from_op((diff * diff).mean(), (a, b), grad_fn, "mse_loss")


def l1_loss(a, b):
    b = _as_target("l1_loss", b)
    _check_same_dtype("l1_loss", a, b)
    if a.shape != b.shape:
        raise ShapeError("l1_loss", f"operand shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = max(a.size, 1)

    def grad_fn(g):
        d = g / n * np.sign(diff)
        return d, -d

    return from_op(np.abs(diff).mean(), (a, b), grad_fn, "l1_loss")


# -----------------------------------------------------------------------------
# backward pass
# -----------------------------------------------------------------------------


def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate gradients of a scalar loss into .grad of every reachable
    requires_grad tensor."""
    if loss.size != 1:
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.shape}")
    if not loss._parents:
        raise StateError("backward called before any forward computation produced this tensor")
    if not loss.requires_grad:
        raise StateError("loss does not depend on any requires_grad tensor")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._grad_fn is None or node.grad is None:
            continue
        grads = node._grad_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


def grads_for(loss, params):
    """Run backward and return one gradient array per param, zeros if untouched."""
    for _, p in params:
        p.grad = None
    backward(loss)
    return {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params}


# -----------------------------------------------------------------------------
# finite-difference gradient checking
# -----------------------------------------------------------------------------


class GradCheckReport:
    """Per-parameter relative errors of analytic vs central-difference grads."""

    def __init__(self, max_rel, mean_rel, n_entries, threshold, worst):
        self.max_rel = max_rel
        self.mean_rel = mean_rel
        self.n_entries = n_entries
        self.threshold = threshold
        self.worst = worst  # (tensor_index, flat_index)

    @property
    def passed(self):
        return self.max_rel < self.threshold

    def __repr__(self):
        state = "pass" if self.passed else "FAIL"
        return (
            f"GradCheckReport({state}: max_rel={self.max_rel:.3e}, mean_rel={self.mean_rel:.3e}, "
            f"entries={self.n_entries}, threshold={self.threshold:g}, worst={self.worst})"
        )


def grad_check(fn, inputs, eps=1e-5, threshold=1e-4, rel_floor=1e-3):
    """Compare analytic gradients of scalar-valued fn(*inputs) against central
    finite differences.

    inputs: list of Tensors; only requires_grad ones are perturbed. fn must be
    a pure function of the tensors' .data. Use float64 inputs.
    """
    out = fn(*inputs)
    if out.size != 1:
        raise InputError(f"grad_check: fn must return a scalar, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericsError(f"grad_check: non-finite output from op '{out.op}'")
    for _, p in enumerate(inputs):
        p.grad = None
    backward(out)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in inputs]

    max_rel = 0.0
    sum_rel = 0.0
    count = 0
    worst = (-1, -1)
    for ti, p in enumerate(inputs):
        if not p.requires_grad:
            continue
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = fn(*inputs).item()
            flat[j] = orig - eps
            f_minus = fn(*inputs).item()
            flat[j] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericsError(
                    f"grad_check: non-finite FD evaluation at tensor {ti}, entry {j}"
                )
            fd = (f_plus - f_minus) / (2.0 * eps)
            an = analytic[ti].reshape(-1)[j]
            rel = abs(an - fd) / max(abs(an), abs(fd), rel_floor)
            sum_rel += rel
            count += 1
            if rel > max_rel:
                max_rel = rel
                worst = (ti, j)
    return GradCheckReport(max_rel, sum_rel / max(count, 1), count, threshold, worst)
