"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Only the operations needed by the losses and the U-Net are provided. Every
op builds its output eagerly and, when any input requires gradients, stores
a closure mapping the upstream gradient to per-input gradients.
"""

import itertools

import numpy as np

_node_ids = itertools.count()

DIV_EPS = 1e-12


class Tensor:
    """Dense float64 array that records how it was produced."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self.id = next(_node_ids)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, mask=None):
        return reduce("sum", self, mask)

    def mean(self, mask=None, eps=1e-6):
        return reduce("mean", self, mask, eps=eps)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, grad_fn, op):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def _check_broadcast(a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    if np.any(np.abs(b.data) < DIV_EPS):
        raise FloatingPointError("division by a value with magnitude below 1e-12")
    out = a.data / b.data

    def grad_fn(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), grad_fn, "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def abs(a):
    a = as_tensor(a)
    # np.sign gives the 0 subgradient at exactly 0
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def square(a):
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    safe = np.where(out > 0, out, 1.0)
    return _make(out, (a,), lambda g: (np.where(out > 0, 0.5 * g / safe, 0.0),), "sqrt")


def softplus(a):
    """log(1 + exp(a)), computed without overflow."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def clamp_min(a, lo):
    a = as_tensor(a)
    keep = a.data > lo
    return _make(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,), "clamp_min")


def elementwise(kind, a, b=None):
    """Dispatch by name over the binary and unary elementwise ops."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"abs": abs, "relu": relu, "log": log, "square": square,
             "sqrt": sqrt, "exp": exp, "neg": neg, "softplus": softplus}
    if kind in binary:
        return binary[kind](a, b)
    if kind in unary:
        return unary[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# Reductions and indexing


def reduce(kind, a, mask=None, eps=1e-6):
    """Sum or mean of all entries, optionally restricted to a 0/1 mask.

    A masked mean divides by ``count + eps`` so an empty mask yields 0.
    """
    a = as_tensor(a)
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    if mask is None:
        weights = None
        total = a.data.sum()
        scale = 1.0 / a.size if kind == "mean" else 1.0
    else:
        weights = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
        if weights.shape != a.shape:
            raise ValueError(f"mask shape {weights.shape} does not match {a.shape}")
        total = (a.data * weights).sum()
        scale = 1.0 / (weights.sum() + eps) if kind == "mean" else 1.0

    def grad_fn(g):
        if weights is None:
            return (np.full(a.shape, g * scale),)
        return (g * scale * weights,)

    return _make(np.asarray(total * scale), (a,), grad_fn, kind)


def take(a, index):
    """Indexing (basic or advanced); repeated advanced indices accumulate."""
    a = as_tensor(a)
    out = a.data[index]
    advanced = isinstance(index, (np.ndarray, list)) or (
        isinstance(index, tuple) and any(isinstance(i, (np.ndarray, list)) for i in index))

    def grad_fn(g):
        full = np.zeros(a.shape)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _make(out, (a,), grad_fn, "take")


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat_channels(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects NCHW tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concatenate {a.shape} and {b.shape}")
    ca = a.shape[1]
    return _make(np.concatenate([a.data, b.data], axis=1), (a, b),
                 lambda g: (g[:, :ca], g[:, ca:]), "concat")


def stack(tensors):
    """Stack equally shaped tensors along a new leading axis."""
    tensors = [as_tensor(t) for t in tensors]
    return _make(np.stack([t.data for t in tensors]), tensors,
                 lambda g: tuple(g[i] for i in range(len(tensors))), "stack")


# ---------------------------------------------------------------------------
# Spatial ops (NCHW)


def _im2col(xp, k, stride, out_h, out_w):
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    # (N, H', W', C, k, k) so each row is one receptive field
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * k * k)


def _correlate(xp, wmat, k, stride, out_h, out_w):
    """Padded input (N, C, H+2p, W+2p) times flattened kernel -> (rows, O), cols."""
    cols = _im2col(xp, k, stride, out_h, out_w)
    return cols @ wmat.T, cols


def _conv3x3_same(x, weight, bias):
    """Stride-1 3x3 convolution as nine GEMMs over a flattened padded NHWC buffer.

    In the flattened zero-padded image every tap is a contiguous row slice,
    so no patch matrix is materialized. Rows that fall on padding compute
    garbage and are discarded.
    """
    n, c, h, w = x.shape
    o = weight.shape[0]
    wp = w + 2
    rows = n * (h + 2) * wp
    span = rows - 2 * wp - 2
    xp = np.zeros((n, h + 2, wp, c))
    xp[:, 1:-1, 1:-1, :] = x.data.transpose(0, 2, 3, 1)
    flat = xp.reshape(rows, c)
    taps = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))  # (3, 3, C, O)
    acc = np.zeros((rows, o))
    tmp = np.empty((span, o))
    for i in range(3):
        for j in range(3):
            off = i * wp + j
            np.matmul(flat[off:off + span], taps[i, j], out=tmp)
            acc[:span] += tmp
    out = acc.reshape(n, h + 2, wp, o)[:, :h, :w, :]
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def grad_fn(g):
        gflat = np.zeros((n, h + 2, wp, o))
        gflat[:, :h, :w, :] = g.transpose(0, 2, 3, 1)
        gflat = gflat.reshape(rows, o)[:span]
        gw = gx = None
        if weight.requires_grad:
            gtaps = np.empty((3, 3, c, o))
            for i in range(3):
                for j in range(3):
                    off = i * wp + j
                    np.matmul(flat[off:off + span].T, gflat, out=gtaps[i, j])
            gw = gtaps.transpose(3, 2, 0, 1)
        if x.requires_grad:
            taps_t = np.ascontiguousarray(taps.transpose(0, 1, 3, 2))  # (3, 3, O, C)
            gxp = np.zeros((rows, c))
            tmp_c = np.empty((span, c))
            for i in range(3):
                for j in range(3):
                    off = i * wp + j
                    np.matmul(gflat, taps_t[i, j], out=tmp_c)
                    gxp[off:off + span] += tmp_c
            gx = gxp.reshape(n, h + 2, wp, c)[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return out, grad_fn


def conv2d(x, weight, bias=None, stride=1):
    """Cross-correlation with zero padding (k - 1) / 2; k is 1 or 3."""
    x, weight = as_tensor(x), as_tensor(weight)
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight expects {ci}")
    if k != k2 or k not in (1, 3):
        raise ValueError(f"unsupported kernel size {weight.shape[2:]}")
    if stride not in (1, 2):
        raise ValueError(f"unsupported stride {stride}")
    if stride == 2 and (h % 2 or w % 2):
        raise ValueError(f"stride-2 conv needs even spatial size, got {h}x{w}")
    if bias is not None:
        bias = as_tensor(bias)
    parents = (x, weight) if bias is None else (x, weight, bias)
    if k == 3 and stride == 1:
        out, grad_fn = _conv3x3_same(x, weight, bias)
        return _make(out, parents, grad_fn, "conv2d")

    pad = (k - 1) // 2
    out_h, out_w = h // stride, w // stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wmat = weight.data.reshape(o, -1)
    out, cols = _correlate(xp, wmat, k, stride, out_h, out_w)
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, out_h, out_w, o).transpose(0, 3, 1, 2))

    def grad_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            # input gradient = stride-1 correlation of the zero-dilated upstream
            # gradient with the spatially flipped, channel-transposed kernel
            if stride == 1:
                gd = g
            else:
                gd = np.zeros((n, o, h, w))
                gd[:, :, ::2, ::2] = g
            gdp = np.pad(gd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else gd
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            gx, _ = _correlate(gdp, wflip, k, 1, h, w)
            gx = gx.reshape(n, h, w, c).transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=0)

    return _make(out, parents, grad_fn, "conv2d")


def nearest_upsample2(a):
    a = as_tensor(a)
    out = a.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = a.shape
    return _make(out, (a,),
                 lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),), "upsample2")


def avg_downsample2(a):
    a = as_tensor(a)
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_downsample2 needs even spatial size, got {h}x{w}")
    out = a.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return _make(out, (a,),
                 lambda g: (0.25 * g.repeat(2, axis=2).repeat(2, axis=3),), "downsample2")


SOBEL_W = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_H = SOBEL_W.T.copy()
DIFF_W = np.array([[0.0, 0.0, 0.0], [0.0, -1.0, 1.0], [0.0, 0.0, 0.0]])
DIFF_H = DIFF_W.T.copy()


def stencil3x3(a, kernel):
    """Fixed 3x3 cross-correlation per channel with zero padding."""
    a = as_tensor(a)
    h, w = a.shape[2:]
    xp = np.pad(a.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    taps = [(i, j, kernel[i, j]) for i in range(3) for j in range(3) if kernel[i, j] != 0]
    out = np.zeros(a.shape)
    for i, j, kv in taps:
        out += kv * xp[:, :, i:i + h, j:j + w]

    def grad_fn(g):
        gp = np.zeros(xp.shape)
        for i, j, kv in taps:
            gp[:, :, i:i + h, j:j + w] += kv * g
        return (gp[:, :, 1:h + 1, 1:w + 1],)

    return _make(out, (a,), grad_fn, "stencil3x3")


def sobel_gradients(a):
    """Unnormalized Sobel responses (grad_h, grad_w) of an NCHW tensor."""
    return stencil3x3(a, SOBEL_H), stencil3x3(a, SOBEL_W)


def diff_gradients(a):
    """Forward differences (grad_h, grad_w); the last row/column sees zero padding."""
    return stencil3x3(a, DIFF_H), stencil3x3(a, DIFF_W)


def batch_norm(x, gamma, beta, running_mean, running_var, training=True,
               momentum=0.1, eps=1e-5):
    """Per-channel batch normalization of an NCHW tensor.

    In training mode the batch statistics are used and the running buffers
    (numpy arrays) are updated in place; otherwise the running statistics
    make this a fixed per-channel affine map.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if x.shape[0] < 2:
            raise ValueError("batch normalization in training mode needs batch size >= 2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def grad_fn(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(shape)
        if training:
            gx = (gxhat - gxhat.mean(axis=axes, keepdims=True)
                  - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)) * inv.reshape(shape)
        else:
            gx = gxhat * inv.reshape(shape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), grad_fn, "batch_norm")


# ---------------------------------------------------------------------------
# Backward pass


def _topological_order(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.id not in seen:
                stack_.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor requiring grad."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    upstream = {loss.id: np.ones(loss.shape)}
    for node in reversed(_topological_order(loss)):
        g = upstream.pop(node.id, None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in upstream:
                upstream[parent.id] = upstream[parent.id] + pg
            else:
                upstream[parent.id] = pg


def grad_of(t):
    """Gradient of ``t``, zeros when no backward pass reached it."""
    return np.zeros(t.shape) if t.grad is None else t.grad


def numerical_gradient(fn, arrays, index, h=1e-5):
    """Central difference of scalar ``fn(*arrays)`` w.r.t. one entry of ``arrays[index]``."""

    def grad_entry(flat_pos):
        arr = arrays[index]
        orig = arr.flat[flat_pos]
        arr.flat[flat_pos] = orig + h
        plus = float(fn(*arrays))
        arr.flat[flat_pos] = orig - h
        minus = float(fn(*arrays))
        arr.flat[flat_pos] = orig
        return (plus - minus) / (2 * h)

    return grad_entry


def check_gradients(fn, arrays, h=1e-5, max_entries=None, seed=0):
    """Compare reverse-mode gradients of ``fn`` with central differences.

    ``fn`` maps Tensors to a scalar Tensor. Returns the worst relative error
    ``|g_ad - g_fd| / max(|g_ad|, |g_fd|)`` over inputs, measured on the
    vector of checked entries of each input.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*tensors).backward()
    rng = np.random.default_rng(seed)
    worst = 0.0

    def scalar(*arrs):
        return fn(*[Tensor(a) for a in arrs]).item()

    for k, t in enumerate(tensors):
        positions = np.arange(arrays[k].size)
        if max_entries is not None and positions.size > max_entries:
            positions = rng.choice(positions, size=max_entries, replace=False)
        fd = numerical_gradient(scalar, arrays, k, h)
        numeric = np.array([fd(p) for p in positions])
        analytic = (np.zeros(arrays[k].size) if t.grad is None else t.grad.ravel())[positions]
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        if scale > 0:
            worst = max(worst, np.linalg.norm(analytic - numeric) / scale)
    return worst
