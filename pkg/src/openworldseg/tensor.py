"""Dense float32 tensors with reverse-mode gradients on a define-by-run tape.

Storage is float32 everywhere; reductions accumulate in float64 before
casting back. The tape is rebuilt on every forward pass and is not safe
to share across concurrent backward calls.
"""
from __future__ import annotations

import numpy as np

# When enabled, every op asserts its output is finite. Cheap insurance for
# tests; off by default in normal runs.
DEBUG_CHECK_FINITE = False


class ShapeMismatch(ValueError):
    """Raised when operand shapes do not conform for an operation."""

    def __init__(self, op: str, shape_a, shape_b):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{op}: shapes {self.shape_a} and {self.shape_b} do not conform")


class GradientError(RuntimeError):
    pass


class Tensor:
    """A dense float32 array that can participate in gradient taping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backprop = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _finite_check(name: str, arr: np.ndarray):
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} produced non-finite values")


def _make(data: np.ndarray, parents, backprop) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backprop = backprop
    return out


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients add into existing buffers, so repeated calls accumulate until
    the caller zeroes them.
    """
    if loss.data.shape != ():
        raise GradientError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            topo.append(node)
            continue
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    # Local gradient table keeps repeated backward calls independent.
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float32)}
    for node in reversed(topo):
        gout = grads.get(id(node))
        if gout is None:
            continue
        if node._backprop is not None:
            for parent, gpar in node._backprop(gout):
                if not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = gpar.astype(np.float32) if prev is None else prev + gpar.astype(np.float32)

    for node in topo:
        g = grads.get(id(node))
        if g is None or not node.requires_grad:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g


def _coerce(op: str, a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.float32(a))
    b = b if isinstance(b, Tensor) else Tensor(np.float32(b))
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeMismatch(op, a.shape, b.shape)
    return a, b


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    # Only scalar-vs-array mixing is permitted, so either shapes match or
    # the target is a scalar.
    if g.shape == tuple(shape):
        return g
    return np.sum(g, dtype=np.float64).astype(np.float32).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _coerce("add", a, b)
    out = a.data + b.data
    _finite_check("add", out)

    def backprop(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(out, (a, b), backprop)


def sub(a, b) -> Tensor:
    a, b = _coerce("sub", a, b)
    out = a.data - b.data
    _finite_check("sub", out)

    def backprop(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _make(out, (a, b), backprop)


def mul(a, b) -> Tensor:
    a, b = _coerce("mul", a, b)
    out = a.data * b.data
    _finite_check("mul", out)

    def backprop(g):
        return ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape)))

    return _make(out, (a, b), backprop)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    out = a.data @ b.data
    _finite_check("matmul", out)

    def backprop(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return _make(out, (a, b), backprop)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backprop(g):
        return ((x, g * (x.data > 0.0)),)

    return _make(out, (x,), backprop)


def _channel_axis(ndim: int) -> int:
    return 1 if ndim == 4 else 0


def softmax(x: Tensor) -> Tensor:
    """Softmax over the channel axis (axis 0, or 1 for batched 4-D maps)."""
    ax = _channel_axis(x.ndim)
    z = x.data.astype(np.float64)
    z = z - z.max(axis=ax, keepdims=True)
    e = np.exp(z)
    p64 = e / e.sum(axis=ax, keepdims=True)
    p = p64.astype(np.float32)

    def backprop(g):
        g64 = g.astype(np.float64)
        dot = np.sum(g64 * p64, axis=ax, keepdims=True)
        return ((x, (p64 * (g64 - dot)).astype(np.float32)),)

    return _make(p, (x,), backprop)


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the channel axis, stabilised by max subtraction."""
    ax = _channel_axis(x.ndim)
    z = x.data.astype(np.float64)
    z = z - z.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    ls64 = z - lse
    out = ls64.astype(np.float32)

    def backprop(g):
        g64 = g.astype(np.float64)
        gsum = g64.sum(axis=ax, keepdims=True)
        return ((x, (g64 - np.exp(ls64) * gsum).astype(np.float32)),)

    return _make(out, (x,), backprop)


def tsum(x: Tensor) -> Tensor:
    out = np.float32(np.sum(x.data, dtype=np.float64))

    def backprop(g):
        return ((x, np.full(x.shape, g, dtype=np.float32)),)

    return _make(out, (x,), backprop)


def tmean(x: Tensor) -> Tensor:
    n = x.size
    out = np.float32(np.sum(x.data, dtype=np.float64) / n)

    def backprop(g):
        return ((x, np.full(x.shape, g / n, dtype=np.float32)),)

    return _make(out, (x,), backprop)


def sqdist(features: Tensor, protos: Tensor) -> Tensor:
    """Per-pixel squared Euclidean distance to each prototype row.

    features: (D, H, W) or (B, D, H, W); protos: (K, D).
    Returns (K, H, W) or (B, K, H, W).
    """
    if protos.ndim != 2:
        raise ShapeMismatch("sqdist", features.shape, protos.shape)
    dim = protos.shape[1]
    if features.ndim == 3:
        f = features.data[None]
        batched = False
    elif features.ndim == 4:
        f = features.data
        batched = True
    else:
        raise ShapeMismatch("sqdist", features.shape, protos.shape)
    if f.shape[1] != dim:
        raise ShapeMismatch("sqdist", features.shape, protos.shape)

    m = protos.data  # (K, D)
    diff = f[:, None, :, :, :] - m[:, :, None, None]  # (B, K, D, H, W)
    out = np.sum(diff.astype(np.float64) ** 2, axis=2).astype(np.float32)
    if not batched:
        out = out[0]
    _finite_check("sqdist", out)

    def backprop(g):
        gb = g if batched else g[None]
        gf = 2.0 * np.einsum("bkhw,bkdhw->bdhw", gb, diff)
        grads = [(features, gf if batched else gf[0])]
        if protos.requires_grad:
            gm = -2.0 * np.einsum("bkhw,bkdhw->kd", gb, diff)
            grads.append((protos, gm))
        return tuple(grads)

    return _make(out, (features, protos), backprop)


def _im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    oh, ow = windows.shape[2], windows.shape[3]
    # (B, C, OH, OW, kh, kw) -> (B, C*kh*kw, OH*OW)
    return np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, in_shape, kh: int, kw: int, pad: int) -> np.ndarray:
    b, c, h, w = in_shape
    oh = h + 2 * pad - kh + 1
    ow = w + 2 * pad - kw + 1
    g6 = cols.reshape(b, c, kh, kw, oh, ow)
    gpad = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            gpad[:, :, i : i + oh, j : j + ow] += g6[:, :, i, j]
    if pad:
        return gpad[:, :, pad : pad + h, pad : pad + w]
    return gpad


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 2-D convolution over (B, C, H, W); spatial size preserved
    when padding matches the kernel (pad 1 for 3x3, pad 0 for 1x1)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch("conv2d", x.shape, weight.shape)
    b, c, h, w = x.shape
    k, _, kh, kw = weight.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeMismatch("conv2d", x.shape, weight.shape)
    if bias is not None and bias.shape != (k,):
        raise ShapeMismatch("conv2d bias", bias.shape, (k,))

    oh = h + 2 * padding - kh + 1
    ow = w + 2 * padding - kw + 1
    cols = _im2col(x.data, kh, kw, padding)  # (B, C*kh*kw, OH*OW)
    wmat = weight.data.reshape(k, c * kh * kw)
    out = np.matmul(wmat, cols).reshape(b, k, oh, ow)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    _finite_check("conv2d", out)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backprop(g):
        g2 = np.ascontiguousarray(g.reshape(b, k, oh * ow))
        grads = []
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            grads.append((x, _col2im(gcols, (b, c, h, w), kh, kw, padding)))
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
            grads.append((weight, gw))
        if bias is not None and bias.requires_grad:
            grads.append((bias, np.sum(g, axis=(0, 2, 3), dtype=np.float64).astype(np.float32)))
        return tuple(grads)

    return _make(out, parents, backprop)


class SGD:
    """SGD with classical momentum and L2 weight decay.

    Update rule: v <- momentum*v + grad; p <- p - lr*(v + weight_decay*p).
    Gradients are left untouched; the caller zeroes them.
    """

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise GradientError(f"parameter {i} has no gradient; run backward first")
            v = self.momentum * self.velocity[i] + p.grad
            self.velocity[i] = v
            p.data = p.data - self.lr * (v + self.weight_decay * p.data)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
