"""Minimal reverse-mode autodiff on numpy arrays.

Exactly the operator set the SR network needs, nothing speculative. Tensors
store f32 by default (f64 during gradient checking); reductions accumulate
in f64 regardless of storage precision. One computation graph belongs to one
logical thread and is consumable by a single backward pass.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ShapeMismatchError(Exception):
    """Operand shapes incompatible for the requested op."""


class NonFiniteInputError(Exception):
    """NaN or Inf entering a forward op."""


class NonScalarLossError(Exception):
    """backward() requires a scalar loss."""


class GraphConsumedError(Exception):
    """A graph may be backpropagated only once per forward pass."""


class TensorFileError(Exception):
    """Corrupt or mistyped tensor dump."""


def _require_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteInputError("non-finite value in op input")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_backward", "_prev", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _prev=()):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._prev = tuple(_prev)
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            # copy: g may alias the upstream grad buffer or a cached view
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise NonScalarLossError(f"loss has shape {self.shape}")
        topo: list[Tensor] = []
        seen = set()

        def visit(t):
            stack = [(t, iter(t._prev))]
            seen.add(id(t))
            while stack:
                node, children = stack[-1]
                advanced = False
                for c in children:
                    if id(c) not in seen:
                        seen.add(id(c))
                        stack.append((c, iter(c._prev)))
                        advanced = True
                        break
                if not advanced:
                    topo.append(node)
                    stack.pop()

        visit(self)
        # leaves (parameters, inputs) may feed any number of graphs; only
        # interior nodes are single-use once backpropagated
        if any(t._consumed for t in topo if t._prev):
            raise GraphConsumedError("graph already backpropagated")
        for t in topo:
            if t._prev:
                t._consumed = True
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(g, shape):
    """Sum g down to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fwd, bwd_a, bwd_b):
    a, b = as_tensor(a), as_tensor(b)
    _require_finite(a.data, b.data)
    try:
        out_data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatchError(f"{a.shape} vs {b.shape}") from exc
    out = Tensor(out_data, requires_grad=a.requires_grad or b.requires_grad,
                 _prev=(a, b))
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(bwd_a(g, a.data, b.data), a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(bwd_b(g, a.data, b.data), b.data.shape))
        out._backward = backward
    return out


def add(a, b):
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(x, s: float):
    """Multiply by a python scalar without changing the tensor's dtype."""
    x = as_tensor(x)
    return mul(x, Tensor(np.asarray(s, dtype=x.data.dtype)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _require_finite(a.data, b.data)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeMismatchError(f"{a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad,
                 _prev=(a, b))
    if out.requires_grad:
        def backward(g):
            g = np.asarray(g)
            if a.requires_grad:
                if b.data.ndim == 1:
                    ga = g[..., None] * b.data
                else:
                    ga = g @ np.swapaxes(b.data, -1, -2)
                a._accumulate(_unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                if b.data.ndim == 1:
                    gb = _unbroadcast(a.data * g[..., None], b.data.shape)
                elif a.data.ndim == 1:
                    gb = np.outer(a.data, g)
                else:
                    gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g,
                                      b.data.shape)
                b._accumulate(gb)
        out._backward = backward
    return out


def relu(x):
    x = as_tensor(x)
    _require_finite(x.data)
    out = Tensor(np.maximum(x.data, 0), requires_grad=x.requires_grad, _prev=(x,))
    if out.requires_grad:
        mask = x.data > 0
        out._backward = lambda g: x._accumulate(g * mask)
    return out


def abs_(x):
    x = as_tensor(x)
    _require_finite(x.data)
    out = Tensor(np.abs(x.data), requires_grad=x.requires_grad, _prev=(x,))
    if out.requires_grad:
        sign = np.sign(x.data)
        out._backward = lambda g: x._accumulate(g * sign)
    return out


def softmax(x, axis: int = -1):
    x = as_tensor(x)
    _require_finite(x.data)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    denom = np.sum(e, axis=axis, keepdims=True, dtype=np.float64)
    s = (e / denom).astype(x.data.dtype)
    out = Tensor(s, requires_grad=x.requires_grad, _prev=(x,))
    if out.requires_grad:
        def backward(g):
            inner = np.sum(g * s, axis=axis, keepdims=True, dtype=np.float64)
            x._accumulate((s * (g - inner)).astype(x.data.dtype))
        out._backward = backward
    return out


def layernorm(x, gamma, beta, eps: float = 1e-5):
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.data.shape != x.data.shape[-1:] or beta.data.shape != x.data.shape[-1:]:
        raise ShapeMismatchError("layernorm scale/shift must match last axis")
    _require_finite(x.data, gamma.data, beta.data)
    mu = np.mean(x.data, axis=-1, keepdims=True, dtype=np.float64)
    var = np.var(x.data, axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps))
    xhat = ((x.data - mu) * inv).astype(x.data.dtype)
    out = Tensor(xhat * gamma.data + beta.data,
                 requires_grad=x.requires_grad or gamma.requires_grad
                 or beta.requires_grad,
                 _prev=(x, gamma, beta))
    if out.requires_grad:
        n = x.data.shape[-1]

        def backward(g):
            if gamma.requires_grad:
                gamma._accumulate(
                    np.sum(g * xhat, axis=tuple(range(g.ndim - 1)),
                           dtype=np.float64).astype(gamma.data.dtype))
            if beta.requires_grad:
                beta._accumulate(
                    np.sum(g, axis=tuple(range(g.ndim - 1)),
                           dtype=np.float64).astype(beta.data.dtype))
            if x.requires_grad:
                gx = g * gamma.data
                t1 = np.sum(gx, axis=-1, keepdims=True, dtype=np.float64)
                t2 = np.sum(gx * xhat, axis=-1, keepdims=True, dtype=np.float64)
                gi = inv * (gx - t1 / n - xhat * (t2 / n))
                x._accumulate(gi.astype(x.data.dtype))
        out._backward = backward
    return out


def concat(tensors, axis: int = -1):
    tensors = [as_tensor(t) for t in tensors]
    _require_finite(*[t.data for t in tensors])
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatchError(str(exc)) from exc
    out = Tensor(data, requires_grad=any(t.requires_grad for t in tensors),
                 _prev=tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def backward(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                if t.requires_grad:
                    t._accumulate(piece)
        out._backward = backward
    return out


def reshape(x, shape):
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape), requires_grad=x.requires_grad, _prev=(x,))
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g.reshape(x.data.shape))
    return out


def transpose(x, axes):
    x = as_tensor(x)
    out = Tensor(x.data.transpose(axes), requires_grad=x.requires_grad, _prev=(x,))
    if out.requires_grad:
        inv = np.argsort(axes)
        out._backward = lambda g: x._accumulate(g.transpose(inv))
    return out


def sum_(x, axis=None):
    x = as_tensor(x)
    _require_finite(x.data)
    data = np.sum(x.data, axis=axis, dtype=np.float64).astype(x.data.dtype)
    out = Tensor(data, requires_grad=x.requires_grad, _prev=(x,))
    if out.requires_grad:
        def backward(g):
            if axis is None:
                x._accumulate(np.broadcast_to(g, x.data.shape).copy())
            else:
                x._accumulate(np.broadcast_to(
                    np.expand_dims(g, axis), x.data.shape).copy())
        out._backward = backward
    return out


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(sum_(x, axis=axis), 1.0 / n)


def _im2col(xp, kh, kw, stride, oh, ow):
    cols = np.empty((oh, ow, kh, kw, xp.shape[2]), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j, :] = xp[i:i + oh * stride:stride,
                                     j:j + ow * stride:stride, :]
    return cols.reshape(oh * ow, kh * kw * xp.shape[2])


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0):
    """2D convolution on HWC input with (kh, kw, cin, cout) weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeMismatchError("conv2d wants HWC input and khkwcico weights")
    if x.data.shape[2] != w.data.shape[2]:
        raise ShapeMismatchError(
            f"input channels {x.data.shape[2]} != kernel {w.data.shape[2]}")
    _require_finite(x.data, w.data)
    kh, kw, cin, cout = w.data.shape
    h, wd = x.data.shape[:2]
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeMismatchError("kernel larger than padded input")
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out_data = (cols @ wmat).reshape(oh, ow, cout)
    prev = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (cout,):
            raise ShapeMismatchError("bias must have one entry per out channel")
        _require_finite(b.data)
        out_data = out_data + b.data
        prev.append(b)
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in prev),
                 _prev=tuple(prev))
    if out.requires_grad:
        def backward(g):
            gmat = g.reshape(oh * ow, cout)
            if b is not None and b.requires_grad:
                b._accumulate(np.sum(gmat, axis=0, dtype=np.float64)
                              .astype(b.data.dtype))
            if w.requires_grad:
                w._accumulate((cols.T @ gmat).reshape(w.data.shape))
            if x.requires_grad:
                gcols = (gmat @ wmat.T).reshape(oh, ow, kh, kw, cin)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[i:i + oh * stride:stride,
                            j:j + ow * stride:stride, :] += gcols[:, :, i, j, :]
                x._accumulate(gxp[pad:pad + h, pad:pad + wd, :] if pad else gxp)
        out._backward = backward
    return out


def avgpool2(x):
    """2x2 average pooling, stride 2; extents must be even."""
    x = as_tensor(x)
    h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError(f"avgpool2 needs even extents, got {h}x{w}")
    _require_finite(x.data)
    blocks = x.data.reshape(h // 2, 2, w // 2, 2, c)
    out = Tensor(blocks.mean(axis=(1, 3), dtype=np.float64).astype(x.data.dtype),
                 requires_grad=x.requires_grad, _prev=(x,))
    if out.requires_grad:
        def backward(g):
            gx = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25
            x._accumulate(gx.astype(x.data.dtype))
        out._backward = backward
    return out


def pixel_rearrange_up(x, r: int):
    """(H, W, C*r*r) -> (H*r, W*r, C) by moving channel blocks into space."""
    x = as_tensor(x)
    h, w, crr = x.data.shape
    if crr % (r * r):
        raise ShapeMismatchError(f"channels {crr} not divisible by {r * r}")
    c = crr // (r * r)
    _require_finite(x.data)
    data = (x.data.reshape(h, w, c, r, r)
            .transpose(0, 3, 1, 4, 2)
            .reshape(h * r, w * r, c))
    out = Tensor(data, requires_grad=x.requires_grad, _prev=(x,))
    if out.requires_grad:
        def backward(g):
            x._accumulate(g.reshape(h, r, w, r, c)
                          .transpose(0, 2, 4, 1, 3)
                          .reshape(h, w, crr))
        out._backward = backward
    return out


def _bilinear_weights(h, w, coords):
    """Tap indices, weights, and inside-rectangle mask for 4-tap sampling."""
    u = coords[:, 0]
    v = coords[:, 1]
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fu = u - x0
    fv = v - y0
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    taps = []
    for dy, dx, wt in ((0, 0, (1 - fu) * (1 - fv)), (0, 1, fu * (1 - fv)),
                       (1, 0, (1 - fu) * fv), (1, 1, fu * fv)):
        xi = x0 + dx
        yi = y0 + dy
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        taps.append((np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1),
                     np.where(ok, wt, 0.0)))
    return taps, inside


def bilinear_sample(featmap, coords):
    """Sample (N,2) continuous (u,v) pixel coords from an HWC feature map.

    Returns (values (N,C), mask (N,)); out-of-bounds queries give zeros with
    mask 0. Coordinates are constants: no gradient flows into them.
    """
    featmap = as_tensor(featmap)
    coords = np.asarray(coords, dtype=np.float64)
    if featmap.data.ndim != 3 or coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeMismatchError("bilinear_sample wants HWC map and (N,2) coords")
    _require_finite(featmap.data)
    _require_finite(coords)
    h, w, c = featmap.data.shape
    taps, inside = _bilinear_weights(h, w, coords)
    acc = np.zeros((coords.shape[0], c), dtype=featmap.data.dtype)
    for yi, xi, wt in taps:
        acc += featmap.data[yi, xi, :] * wt[:, None].astype(featmap.data.dtype)
    acc[~inside] = 0
    out = Tensor(acc, requires_grad=featmap.requires_grad, _prev=(featmap,))
    mask = inside.astype(featmap.data.dtype)
    if out.requires_grad:
        def backward(g):
            gm = np.zeros_like(featmap.data)
            gq = g * mask[:, None]
            for yi, xi, wt in taps:
                np.add.at(gm, (yi, xi), gq * wt[:, None].astype(g.dtype))
            featmap._accumulate(gm)
        out._backward = backward
    return out, mask


def sparse_matmul(sp, x):
    """Constant sparse (M,N) matrix times dense (N,C) tensor.

    The sparse operand carries no gradient; backward is sp.T @ g. Used for
    precomputed gather/interpolation operators.
    """
    x = as_tensor(x)
    if sp.shape[1] != x.data.shape[0]:
        raise ShapeMismatchError(f"{sp.shape} @ {x.shape}")
    _require_finite(x.data)
    out = Tensor(np.asarray(sp @ x.data), requires_grad=x.requires_grad,
                 _prev=(x,))
    if out.requires_grad:
        # the operator is typically reused across many passes; keep its
        # transpose in CSR form on the object instead of rebuilding
        spt = getattr(sp, "_t_csr", None)
        if spt is None:
            spt = sp.T.tocsr()
            try:
                sp._t_csr = spt
            except AttributeError:
                pass
        out._backward = lambda g: x._accumulate(np.asarray(spt @ g))
    return out


@dataclass
class Parameter:
    tensor: Tensor
    name: str


def kaiming_uniform(shape, fan_in: int, rng) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def grad_check(f, inputs, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in f64. Coordinates where the two one-sided slopes disagree (kinks,
    e.g. relu or abs near 0) are excluded rather than reported as failures.
    """
    tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
               for x in inputs]
    loss = f(*tensors)
    loss.backward()
    f0 = float(f(*[Tensor(t2.data) for t2 in tensors]).data)
    worst = 0.0
    for t in tensors:
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*[Tensor(t2.data) for t2 in tensors]).data)
            flat[i] = orig - h
            fm = float(f(*[Tensor(t2.data) for t2 in tensors]).data)
            flat[i] = orig
            fwd = (fp - f0) / h
            bwd = (f0 - fm) / h
            if abs(fwd - bwd) > 1e-3 * max(1.0, abs(fwd), abs(bwd)):
                continue  # straddling a kink; derivative undefined here
            numeric = (fp - fm) / (2.0 * h)
            analytic = float(gflat[i])
            # the floor keeps f64 cancellation noise (|f| * eps / h) from
            # dominating on coordinates whose true gradient is ~zero
            err = abs(analytic - numeric) / max(1e-6, abs(analytic) + abs(numeric))
            worst = max(worst, err)
    return worst


MVTF_MAGIC = b"MVTF"
MVTF_VERSION = 1


def write_tensor(path, array) -> None:
    """Dump an array as MVTF: magic, u32 version, u32 ndim, u64 extents, f32 payload."""
    a = np.ascontiguousarray(np.asarray(array, dtype=np.float32))
    with open(path, "wb") as f:
        f.write(MVTF_MAGIC)
        f.write(struct.pack("<II", MVTF_VERSION, a.ndim))
        f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        f.write(a.astype("<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != MVTF_MAGIC:
        raise TensorFileError(f"{path}: bad magic {data[:4]!r}")
    version, ndim = struct.unpack_from("<II", data, 4)
    if version != MVTF_VERSION:
        raise TensorFileError(f"{path}: unsupported version {version}")
    shape = struct.unpack_from(f"<{ndim}Q", data, 12)
    payload = data[12 + 8 * ndim:]
    count = int(np.prod(shape)) if ndim else 1
    if len(payload) != 4 * count:
        raise TensorFileError(f"{path}: payload size mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
