"""Minimal reverse-mode autodiff over dense float64 numpy tensors.

Every differentiable quantity in the package is a `Tensor`: a numpy array
plus an optional backward closure linking it to its parents. Calling
`backward()` on a scalar output walks the graph in reverse topological
order and accumulates `.grad` on every `requires_grad` leaf.

Shape discipline is strict: no implicit broadcasting except scalar-by-tensor.
Anything that needs a shape change goes through an explicit op (`reshape`,
`broadcast_to`, `narrow`, `gather`, ...), which keeps adjoints honest.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


class Tensor:
    """Dense n-d value participating in the gradient tape.

    data          contiguous float64 array
    requires_grad whether backward() should populate .grad
    grad          same-shape array, present only after a backward pass
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode pass from a scalar output."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar output, got shape {self.data.shape}")
        order = topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                # leaf: accumulate into .grad
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg

    # operator sugar (explicit functions below do the real work)
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def topo_order(root):
    """Nodes of `root`'s graph, every node after all of its inputs."""
    order, seen, stack = [], set(), [(root, False)]
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


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.ndim == 0, b.data.ndim == 0
    if not (sa or sb):
        _check_same_shape("add", a.data, b.data)
    out_data = a.data + b.data

    def bwd(g):
        ga = g.sum() if sa and not sb else g
        gb = g.sum() if sb and not sa else g
        return ((a, np.asarray(ga)), (b, np.asarray(gb)))

    return Tensor(out_data, _parents=(a, b), _backward=bwd, _op="add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.ndim == 0, b.data.ndim == 0
    if not (sa or sb):
        _check_same_shape("sub", a.data, b.data)
    out_data = a.data - b.data

    def bwd(g):
        ga = g.sum() if sa and not sb else g
        gb = -(g.sum()) if sb and not sa else -g
        return ((a, np.asarray(ga)), (b, np.asarray(gb)))

    return Tensor(out_data, _parents=(a, b), _backward=bwd, _op="sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.ndim == 0, b.data.ndim == 0
    if not (sa or sb):
        _check_same_shape("mul", a.data, b.data)
    out_data = a.data * b.data

    def bwd(g):
        ga = g * b.data
        gb = g * a.data
        if sa and not sb:
            ga = ga.sum()
        if sb and not sa:
            gb = gb.sum()
        return ((a, np.asarray(ga)), (b, np.asarray(gb)))

    return Tensor(out_data, _parents=(a, b), _backward=bwd, _op="mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.ndim == 0, b.data.ndim == 0
    if not (sa or sb):
        _check_same_shape("div", a.data, b.data)
    out_data = a.data / b.data

    def bwd(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        if sa and not sb:
            ga = ga.sum()
        if sb and not sa:
            gb = gb.sum()
        return ((a, np.asarray(ga)), (b, np.asarray(gb)))

    return Tensor(out_data, _parents=(a, b), _backward=bwd, _op="div")


def matmul(a, b):
    """np.matmul semantics restricted to 2-d, or stacked with identical batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-d, got {a.data.shape} and {b.data.shape}")
    if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul: batch dims must match, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ((a, ga), (b, gb))

    return Tensor(out_data, _parents=(a, b), _backward=bwd, _op="matmul")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    base = list(tensors[0].data.shape)
    for t in tensors[1:]:
        s = list(t.data.shape)
        s[axis] = base[axis]
        if s != base:
            raise ShapeError(f"concat: incompatible shapes {tensors[0].data.shape} vs {t.data.shape} on axis {axis}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        return tuple((t, p) for t, p in zip(tensors, parts))

    return Tensor(out_data, _parents=tuple(tensors), _backward=bwd, _op="concat")


def reshape(a, shape):
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def bwd(g):
        return ((a, g.reshape(a.data.shape)),)

    return Tensor(out_data, _parents=(a,), _backward=bwd, _op="reshape")


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.transpose(a.data, axes)

    def bwd(g):
        return ((a, np.transpose(g, inv)),)

    return Tensor(out_data, _parents=(a,), _backward=bwd, _op="transpose")


def broadcast_to(a, shape):
    """Explicit broadcast; adjoint sums over the expanded axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    if len(shape) < a.data.ndim:
        raise ShapeError(f"broadcast_to: target {shape} has fewer dims than {a.data.shape}")
    np.broadcast_to(a.data, shape)  # raises on incompatible shapes
    out_data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    n_new = len(shape) - a.data.ndim
    rep_axes = tuple(range(n_new)) + tuple(
        i + n_new for i, d in enumerate(a.data.shape) if d == 1 and shape[i + n_new] != 1
    )

    def bwd(g):
        gg = g.sum(axis=rep_axes, keepdims=False) if rep_axes else g
        return ((a, gg.reshape(a.data.shape)),)

    return Tensor(out_data, _parents=(a,), _backward=bwd, _op="broadcast_to")


def narrow(a, axis, start, length):
    """Contiguous slice along one axis; adjoint zero-pads."""
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_data = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return ((a, full),)

    return Tensor(out_data, _parents=(a,), _backward=bwd, _op="narrow")


def gather(a, indices, axis=0):
    """Index rows (np.take) along an axis; adjoint scatter-adds."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1:
        raise ShapeError(f"gather: indices must be 1-d, got {indices.shape}")
    out_data = np.take(a.data, indices, axis=axis)

    def bwd(g):
        if axis == 0 and a.data.ndim == 2:
            # bincount scatter is far faster than np.add.at for the hot 2-d case
            m, c = a.data.shape
            flat = (indices[:, None] * c + np.arange(c)).ravel()
            full = np.bincount(flat, weights=np.ascontiguousarray(g).ravel(), minlength=m * c).reshape(m, c)
        else:
            full = np.zeros_like(a.data)
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return ((a, full),)

    return Tensor(out_data, _parents=(a,), _backward=bwd, _op="gather")


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        return ((a, g * out_data),)

    return Tensor(out_data, _parents=(a,), _backward=bwd, _op="exp")


def log(a):
    a = as_tensor(a)
    out_data = np.log(a.data)

    def bwd(g):
        return ((a, g / a.data),)

    return Tensor(out_data, _parents=(a,), _backward=bwd, _op="log")


def softplus(a):
    a = as_tensor(a)
    # stable: log1p(exp(-|x|)) + max(x, 0)
    out_data = np.log1p(np.exp(-np.abs(a.data))) + np.maximum(a.data, 0.0)

    def bwd(g):
        sig = 1.0 / (1.0 + np.exp(-a.data))
        return ((a, g * sig),)

    return Tensor(out_data, _parents=(a,), _backward=bwd, _op="softplus")


def sigmoid(a):
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return ((a, g * out_data * (1.0 - out_data)),)

    return Tensor(out_data, _parents=(a,), _backward=bwd, _op="sigmoid")


def relu(a):
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        return ((a, g * (a.data > 0.0)),)

    return Tensor(out_data, _parents=(a,), _backward=bwd, _op="relu")


def clip01_unit(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes through strictly inside the interval."""
    a = as_tensor(a)
    out_data = np.clip(a.data, lo, hi)

    def bwd(g):
        inside = (a.data > lo) & (a.data < hi)
        return ((a, g * inside),)

    return Tensor(out_data, _parents=(a,), _backward=bwd, _op="clip")


def scale_rows(a, s):
    """Multiply each row of a 2-d tensor by a per-row scalar (explicit broadcast)."""
    a, s = as_tensor(a), as_tensor(s)
    if a.data.ndim != 2 or s.data.shape != (a.data.shape[0],):
        raise ShapeError(f"scale_rows: need (N, C) and (N,), got {a.data.shape} and {s.data.shape}")
    col = s.data[:, None]
    out_data = a.data * col

    def bwd(g):
        return ((a, g * col), (s, (g * a.data).sum(axis=1)))

    return Tensor(out_data, _parents=(a, s), _backward=bwd, _op="scale_rows")


def add_rowvec(a, v):
    """Add a length-C vector to every row of an (N, C) tensor (explicit broadcast)."""
    a, v = as_tensor(a), as_tensor(v)
    if a.data.ndim != 2 or v.data.shape != (a.data.shape[1],):
        raise ShapeError(f"add_rowvec: need (N, C) and (C,), got {a.data.shape} and {v.data.shape}")
    out_data = a.data + v.data[None, :]

    def bwd(g):
        return ((a, g), (v, g.sum(axis=0)))

    return Tensor(out_data, _parents=(a, v), _backward=bwd, _op="add_rowvec")


def sin(a):
    a = as_tensor(a)
    out_data = np.sin(a.data)

    def bwd(g):
        return ((a, g * np.cos(a.data)),)

    return Tensor(out_data, _parents=(a,), _backward=bwd, _op="sin")


def cos(a):
    a = as_tensor(a)
    out_data = np.cos(a.data)

    def bwd(g):
        return ((a, -g * np.sin(a.data)),)

    return Tensor(out_data, _parents=(a,), _backward=bwd, _op="cos")


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return ((a, out_data * (g - dot)),)

    return Tensor(out_data, _parents=(a,), _backward=bwd, _op="softmax")


def tsum(a, axis=None):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return ((a, np.full_like(a.data, float(g))),)
        return ((a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy()),)

    return Tensor(out_data, _parents=(a,), _backward=bwd, _op="sum")


def tmean(a, axis=None):
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis)
    n = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is None:
            return ((a, np.full_like(a.data, float(g) / n)),)
        return ((a, np.broadcast_to(np.expand_dims(g / n, axis), a.data.shape).copy()),)

    return Tensor(out_data, _parents=(a,), _backward=bwd, _op="mean")


def cumsum(a, axis):
    a = as_tensor(a)
    out_data = np.cumsum(a.data, axis=axis)

    def bwd(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return ((a, rev),)

    return Tensor(out_data, _parents=(a,), _backward=bwd, _op="cumsum")


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.data.shape != (x.data.shape[-1],) or beta.data.shape != (x.data.shape[-1],):
        raise ShapeError(
            f"layer_norm: gamma/beta must be ({x.data.shape[-1]},), got {gamma.data.shape}, {beta.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data
    n = x.data.shape[-1]

    def bwd(g):
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gg - m1 - xhat * m2)
        ggamma = (g * xhat).reshape(-1, n).sum(axis=0)
        gbeta = g.reshape(-1, n).sum(axis=0)
        return ((x, gx), (gamma, ggamma), (beta, gbeta))

    return Tensor(out_data, _parents=(x, gamma, beta), _backward=bwd, _op="layer_norm")


def affine(x, w, b):
    """x @ w + row-broadcast bias; the one composite everybody needs."""
    y = matmul(x, w)
    if y.data.ndim == 2:
        return add_rowvec(y, b)
    shp = (1,) * (y.data.ndim - 1) + (b.data.shape[-1],)
    return add(y, broadcast_to(reshape(b, shp), y.data.shape))


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def grad_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    f must map a Tensor to a scalar Tensor and be deterministic. Returns
    max over coordinates of |analytic - numeric| / max(1, |analytic|).
    The caller is responsible for keeping x away from non-smooth points.
    """
    x = as_tensor(x)
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValueError("grad_check: f must return a scalar Tensor")
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        fp = float(f(Tensor(x.data)).data)
        flat[i] = keep - eps
        fm = float(f(Tensor(x.data)).data)
        flat[i] = keep
        numeric[i] = (fp - fm) / (2.0 * eps)
    numeric = numeric.reshape(x.data.shape)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))


def _rng_inputs(rng, shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# registry used by the gradcheck CLI and the acceptance suite
def primitive_suite(seed=0):
    """One (name, f, x) triple per registered primitive, on well-conditioned inputs.

    Constants are drawn once so every f is deterministic (a requirement of
    grad_check's central differencing).
    """
    rng = np.random.default_rng(seed)

    def c(*shape):
        return Tensor(rng.normal(size=shape))

    x4 = rng.normal(size=(3, 4)) + 0.1  # offset keeps relu away from its kink
    pos = np.abs(rng.normal(size=(3, 4))) + 0.5
    k_add, k_sub, k_mul = c(3, 4), c(3, 4), c(3, 4)
    k_mm, k_mmb = c(4, 2), c(2, 4, 3)
    k_cat, k_rsh, k_tr = c(3, 8), c(4, 3), c(4, 3)
    k_bc, k_nar, k_gat = c(5, 3, 4), c(3, 2), c(5, 4)
    k_sm, k_sumax, k_meanax, k_cs = c(3, 4), c(4), c(3), c(3, 4)
    k_sumax_r = c(3)
    ln_g, ln_b, k_ln, k_clip = c(4), c(4), c(3, 4), c(3, 4)
    gi = np.array([2, 0, 1, 2, 2])
    pos_t = Tensor(pos / (np.abs(pos).max() * 2) + 0.5)  # safely positive for div/log

    suite = [
        ("add", lambda t: tsum(mul(add(t, k_add), add(t, k_add))), _rng_inputs(rng, (3, 4))),
        ("sub", lambda t: tsum(mul(sub(t, k_sub), sub(t, k_sub))), _rng_inputs(rng, (3, 4))),
        ("mul", lambda t: tsum(mul(t, k_mul)), _rng_inputs(rng, (3, 4))),
        ("div", lambda t: tsum(div(t, pos_t)), _rng_inputs(rng, (3, 4))),
        ("scalar_mul", lambda t: tsum(mul(t, 2.5)), _rng_inputs(rng, (3, 4))),
        ("matmul", lambda t: tsum(matmul(t, k_mm)), _rng_inputs(rng, (3, 4))),
        ("matmul_batched", lambda t: tsum(matmul(t, k_mmb)), _rng_inputs(rng, (2, 3, 4))),
        ("concat", lambda t: tsum(mul(concat([t, t], axis=1), k_cat)), _rng_inputs(rng, (3, 4))),
        ("reshape", lambda t: tsum(mul(reshape(t, (4, 3)), k_rsh)), _rng_inputs(rng, (3, 4))),
        ("transpose", lambda t: tsum(mul(transpose(t, (1, 0)), k_tr)), _rng_inputs(rng, (3, 4))),
        ("broadcast_to", lambda t: tsum(mul(broadcast_to(t, (5, 3, 4)), k_bc)), _rng_inputs(rng, (3, 4))),
        ("narrow", lambda t: tsum(mul(narrow(t, 1, 1, 2), k_nar)), _rng_inputs(rng, (3, 4))),
        ("gather", lambda t: tsum(mul(gather(t, gi), k_gat)), _rng_inputs(rng, (3, 4))),
        ("exp", lambda t: tsum(exp(t)), _rng_inputs(rng, (3, 4))),
        ("sin", lambda t: tsum(mul(sin(t), k_add)), _rng_inputs(rng, (3, 4))),
        ("cos", lambda t: tsum(mul(cos(t), k_sub)), _rng_inputs(rng, (3, 4))),
        ("log", lambda t: tsum(log(t)), Tensor(pos.copy(), requires_grad=True)),
        ("softplus", lambda t: tsum(softplus(t)), _rng_inputs(rng, (3, 4))),
        ("sigmoid", lambda t: tsum(sigmoid(t)), _rng_inputs(rng, (3, 4))),
        ("relu", lambda t: tsum(relu(t)), Tensor(x4.copy(), requires_grad=True)),
        ("softmax", lambda t: tsum(mul(softmax(t, axis=1), k_sm)), _rng_inputs(rng, (3, 4))),
        ("sum_axis", lambda t: tsum(mul(tsum(t, axis=0), k_sumax)), _rng_inputs(rng, (3, 4))),
        ("mean_axis", lambda t: tsum(mul(tmean(t, axis=1), k_meanax)), _rng_inputs(rng, (3, 4))),
        ("mean", lambda t: tmean(mul(t, t)), _rng_inputs(rng, (3, 4))),
        ("cumsum", lambda t: tsum(mul(cumsum(t, axis=1), k_cs)), _rng_inputs(rng, (3, 4))),
        ("layer_norm", lambda t: tsum(mul(layer_norm(t, ln_g, ln_b), k_ln)), _rng_inputs(rng, (3, 4))),
        ("scale_rows", lambda t: tsum(mul(scale_rows(t, k_sumax_r), k_mul)), _rng_inputs(rng, (3, 4))),
        ("add_rowvec", lambda t: tsum(mul(add_rowvec(t, k_sumax), k_mul)), _rng_inputs(rng, (3, 4))),
        ("clip", lambda t: tsum(mul(clip01_unit(t, -0.9, 0.9), k_clip)),
         Tensor(rng.uniform(-0.8, 0.8, size=(3, 4)), requires_grad=True)),
    ]
    return suite
