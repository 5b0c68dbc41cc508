"""Dense NCHW tensor engine with reverse-mode automatic differentiation.

Every operation records a backward closure on its output; ``backward()`` on a
scalar loss walks the tape in reverse topological order and accumulates
gradients into ``.grad`` buffers of tensors built with ``requires_grad=True``.
The verification profile is float64; a float32 runtime profile is supported
for training speed (gradient checking always runs in float64).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericError, UsageError

DEFAULT_DTYPE = np.float64

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """N-d array (feature maps are batch x channels x height x width) with an
    optional gradient buffer of identical shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

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
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar; `elementwise` below is the documented entry point
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return hadamard(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, hadamard(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), hadamard(self, -1.0))

    def __truediv__(self, other):
        return divide(self, other)

    def __neg__(self):
        return hadamard(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self, seed=None):
        backward(self, seed)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward_fn):
    """Wrap an op result; records the tape only when grads are live."""
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data)
    out.requires_grad = req
    if req:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out

def _accum(t, g):
    if not (t.requires_grad):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum a broadcasted gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(x, y):
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = _as_tensor(y, x.dtype)
    try:
        data = x.data + y.data
    except ValueError:
        raise DimensionError(
            f"add: shapes {x.shape} and {y.shape} are not broadcastable"
        )

    def back(out):
        _accum(x, _unbroadcast(out.grad, x.shape))
        _accum(y, _unbroadcast(out.grad, y.shape))

    return _node(data, (x, y), back)


def hadamard(x, y):
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = _as_tensor(y, x.dtype)
    try:
        data = x.data * y.data
    except ValueError:
        raise DimensionError(
            f"hadamard: shapes {x.shape} and {y.shape} are not broadcastable"
        )

    def back(out):
        _accum(x, _unbroadcast(out.grad * y.data, x.shape))
        _accum(y, _unbroadcast(out.grad * x.data, y.shape))

    return _node(data, (x, y), back)


def divide(x, y):
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = _as_tensor(y, x.dtype)
    try:
        data = x.data / y.data
    except ValueError:
        raise DimensionError(
            f"divide: shapes {x.shape} and {y.shape} are not broadcastable"
        )

    def back(out):
        _accum(x, _unbroadcast(out.grad / y.data, x.shape))
        _accum(y, _unbroadcast(-out.grad * x.data / (y.data * y.data), y.shape))

    return _node(data, (x, y), back)


def elementwise(x, y, kind):
    """Pointwise combine: ``add`` or ``hadamard`` (the attention-reweighting
    primitive). ``y`` may broadcast over spatial dims (per-channel scalars)."""
    if kind == "add":
        return add(x, y)
    if kind == "hadamard":
        return hadamard(x, y)
    raise ConfigurationError(f"elementwise: unknown kind {kind!r}")


def tsum(x, axis=None, keepdims=False):
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def back(out):
        g = out.grad
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            for ax in sorted(a % x.data.ndim for a in axes):
                g = np.expand_dims(g, ax)
        _accum(x, np.broadcast_to(g, x.shape).copy())

    return _node(data, (x,), back)


def tmean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.data.shape[a] for a in axes]))
    return hadamard(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# activations

def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    s = _sigmoid(x.data)

    def back(out):
        _accum(x, out.grad * s * (1.0 - s))

    return _node(s, (x,), back)


def relu(x):
    def back(out):
        _accum(x, out.grad * (x.data > 0))

    return _node(np.maximum(x.data, 0.0), (x,), back)


def silu(x):
    s = _sigmoid(x.data)

    def back(out):
        _accum(x, out.grad * s * (1.0 + x.data * (1.0 - s)))

    return _node(x.data * s, (x,), back)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu_tanh_approx(x):
    inner = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(inner)

    def back(out):
        di = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        _accum(x, out.grad * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * di))

    return _node(0.5 * x.data * (1.0 + t), (x,), back)


def softplus(x):
    # stable: max(z,0) + log1p(exp(-|z|))
    z = x.data
    data = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))

    def back(out):
        _accum(x, out.grad * _sigmoid(z))

    return _node(data, (x,), back)


def texp(x):
    e = np.exp(x.data)

    def back(out):
        _accum(x, out.grad * e)

    return _node(e, (x,), back)


def tlog(x):
    def back(out):
        _accum(x, out.grad / x.data)

    return _node(np.log(x.data), (x,), back)


_ACTIVATIONS = {
    "sigmoid": sigmoid,
    "silu": silu,
    "relu": relu,
    "gelu_tanh_approx": gelu_tanh_approx,
    "softplus": softplus,
}


def activation(x, kind):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"activation: unknown kind {kind!r}")
    return fn(x)


# ---------------------------------------------------------------------------
# convolution


def _pair(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ConfigurationError(f"expected int or (h, w) pair, got {v!r}")
        return (int(v[0]), int(v[1]))
    return (int(v), int(v))


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one 2-d cross-correlation (full, grouped, depthwise,
    pointwise, or dilated; stride/padding/dilation accept ints or (h, w)
    pairs, which 1-d kernels need for per-axis "same" padding)."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: object = 1
    padding: object = 0
    dilation: object = 1
    groups: int = 1
    has_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        object.__setattr__(self, "dilation", _pair(self.dilation))
        if min(self.in_channels, self.out_channels, self.kernel_h, self.kernel_w) < 1:
            raise ConfigurationError("conv: channel and kernel sizes must be >= 1")
        if min(self.stride) < 1 or min(self.dilation) < 1 or min(self.padding) < 0:
            raise ConfigurationError("conv: stride/dilation >= 1 and padding >= 0")
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigurationError(
                f"conv: groups={self.groups} must divide in_channels="
                f"{self.in_channels} and out_channels={self.out_channels}"
            )

    @property
    def depthwise(self):
        return self.groups == self.in_channels == self.out_channels

    def out_size(self, h, w):
        (sh, sw), (ph, pw), (dh, dw) = self.stride, self.padding, self.dilation
        ho = (h + 2 * ph - dh * (self.kernel_h - 1) - 1) // sh + 1
        wo = (w + 2 * pw - dw * (self.kernel_w - 1) - 1) // sw + 1
        return ho, wo


def _patches(xp, kh, kw, sh, sw, dh, dw, ho, wo):
    n, c = xp.shape[:2]
    sn, sc, srow, scol = xp.strides
    shape = (n, c, ho, wo, kh, kw)
    strides = (sn, sc, srow * sh, scol * sw, srow * dh, scol * dw)
    return np.lib.stride_tricks.as_strided(xp, shape, strides)


def conv2d(x, weights, bias, spec):
    """Standard cross-correlation over NCHW input.

    ``weights`` has shape (out_channels, in_channels/groups, kernel_h,
    kernel_w); output spatial size follows the usual floor formula.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d: input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise DimensionError(
            f"conv2d: channel axis is {c}, spec.in_channels is {spec.in_channels}"
        )
    wshape = (spec.out_channels, spec.in_channels // spec.groups, spec.kernel_h, spec.kernel_w)
    if tuple(weights.shape) != wshape:
        raise DimensionError(f"conv2d: weight shape {weights.shape} != {wshape}")
    if bias is not None and tuple(bias.shape) != (spec.out_channels,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({spec.out_channels},)")

    (sh, sw), (ph, pw), (dh, dw) = spec.stride, spec.padding, spec.dilation
    kh, kw = spec.kernel_h, spec.kernel_w
    if dh * (kh - 1) + 1 > h + 2 * ph:
        raise DimensionError(
            f"conv2d: effective kernel extent {dh*(kh-1)+1} exceeds padded height {h+2*ph}"
        )
    if dw * (kw - 1) + 1 > w + 2 * pw:
        raise DimensionError(
            f"conv2d: effective kernel extent {dw*(kw-1)+1} exceeds padded width {w+2*pw}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    ho, wo = spec.out_size(h, w)
    g = spec.groups
    cg_in = c // g
    cg_out = spec.out_channels // g

    view = _patches(xp, kh, kw, sh, sw, dh, dw, ho, wo)
    pg = view.reshape(n, g, cg_in, ho, wo, kh, kw)
    wg = weights.data.reshape(g, cg_out, cg_in, kh, kw)
    out = np.einsum("ngchwuv,gocuv->ngohw", pg, wg, optimize=True)
    out = out.reshape(n, spec.out_channels, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, weights) if bias is None else (x, weights, bias)

    def back(outt):
        dy = outt.grad
        dyg = dy.reshape(n, g, cg_out, ho, wo)
        if bias is not None and bias.requires_grad:
            _accum(bias, dy.sum(axis=(0, 2, 3)))
        if weights.requires_grad:
            dw_ = np.einsum("ngchwuv,ngohw->gocuv", pg, dyg, optimize=True)
            _accum(weights, dw_.reshape(weights.shape))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    contrib = np.einsum(
                        "ngohw,goc->ngchw", dyg, wg[:, :, :, u, v], optimize=True
                    ).reshape(n, c, ho, wo)
                    dxp[
                        :,
                        :,
                        u * dh : u * dh + sh * ho : sh,
                        v * dw : v * dw + sw * wo : sw,
                    ] += contrib
            _accum(x, dxp[:, :, ph : ph + h, pw : pw + w] if ph or pw else dxp)

    return _node(out, parents, back)


def pad2d(x, pads):
    """Zero-pad spatial dims by (top, bottom, left, right); needed for "same"
    padding of even-sized kernels where symmetric padding cannot work."""
    t, b, l, r = (int(p) for p in pads)
    if min(t, b, l, r) < 0:
        raise ConfigurationError(f"pad2d: negative pad {pads}")
    n, c, h, w = x.shape
    data = np.pad(x.data, ((0, 0), (0, 0), (t, b), (l, r)))

    def back(out):
        _accum(x, out.grad[:, :, t : t + h, l : l + w])

    return _node(data, (x,), back)


def crop2d(x, h, w, top=0, left=0):
    """Spatial slice [top:top+h, left:left+w]; inverse of pad2d's growth."""
    if top + h > x.shape[2] or left + w > x.shape[3]:
        raise DimensionError(
            f"crop2d: window ({h},{w})@({top},{left}) exceeds input {x.shape}"
        )
    data = x.data[:, :, top : top + h, left : left + w].copy()

    def back(out):
        g = np.zeros_like(x.data)
        g[:, :, top : top + h, left : left + w] = out.grad
        _accum(x, g)

    return _node(data, (x,), back)


# ---------------------------------------------------------------------------
# channel concat / split


def concat_channels(parts):
    if not parts:
        raise DimensionError("concat_channels: empty part list")
    n, _, h, w = parts[0].shape
    for i, p in enumerate(parts[1:], start=1):
        if p.data.ndim != 4 or p.shape[0] != n or p.shape[2] != h or p.shape[3] != w:
            raise DimensionError(
                f"concat_channels: part {i} has shape {p.shape}, expected (N={n}, *, H={h}, W={w})"
            )
    data = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.shape[1] for p in parts]

    def back(out):
        start = 0
        for p, sz in zip(parts, sizes):
            _accum(p, out.grad[:, start : start + sz])
            start += sz

    return _node(data, tuple(parts), back)


def split_channels(x, sizes):
    if sum(sizes) != x.shape[1]:
        raise DimensionError(
            f"split_channels: sizes {sizes} do not sum to channel axis {x.shape[1]}"
        )
    outs = []
    start = 0
    for sz in sizes:
        s0 = start

        def make_back(s0=s0, sz=sz):
            def back(out):
                g = np.zeros_like(x.data)
                g[:, s0 : s0 + sz] = out.grad
                _accum(x, g)

            return back

        outs.append(_node(x.data[:, s0 : s0 + sz].copy(), (x,), make_back()))
        start += sz
    return outs


# ---------------------------------------------------------------------------
# pooling and resize


def pool(x, kind, window=None, stride=None):
    """avg / max / global_avg pooling. max routes gradient to the argmax,
    ties broken toward the first position in row-major order."""
    n, c, h, w = x.shape
    if kind == "global_avg":
        data = x.data.mean(axis=(2, 3), keepdims=True)

        def back(out):
            _accum(x, np.broadcast_to(out.grad / (h * w), x.shape).copy())

        return _node(data, (x,), back)

    if kind not in ("avg", "max"):
        raise ConfigurationError(f"pool: unknown kind {kind!r}")
    wh, ww = _pair(window)
    if wh < 1 or ww < 1:
        raise ConfigurationError(f"pool: zero-size window {window!r}")
    sh, sw = _pair(stride) if stride is not None else (wh, ww)
    if wh > h or ww > w:
        raise DimensionError(f"pool: window ({wh},{ww}) exceeds input ({h},{w})")
    ho = (h - wh) // sh + 1
    wo = (w - ww) // sw + 1
    view = _patches(x.data, wh, ww, sh, sw, 1, 1, ho, wo)

    if kind == "avg":
        data = view.mean(axis=(4, 5))

        def back(out):
            dx = np.zeros_like(x.data)
            g = out.grad / (wh * ww)
            for u in range(wh):
                for v in range(ww):
                    dx[:, :, u : u + sh * ho : sh, v : v + sw * wo : sw] += g
            _accum(x, dx)

        return _node(data, (x,), back)

    flat = view.reshape(n, c, ho, wo, wh * ww)
    arg = flat.argmax(axis=4)  # first max in row-major window order
    data = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]

    def back(out):
        dx = np.zeros_like(x.data)
        ui, vi = np.divmod(arg, ww)
        ii = np.arange(ho)[:, None] * sh + ui
        jj = np.arange(wo)[None, :] * sw + vi
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(dx, (ni, ci, ii, jj), out.grad)
        _accum(x, dx)

    return _node(data, (x,), back)


def resize_nearest(x, target_h, target_w):
    """Nearest-neighbor resize; source index = floor(dst * src / dst_size)."""
    if target_h < 1 or target_w < 1:
        raise ConfigurationError(f"resize_nearest: target ({target_h},{target_w}) < 1")
    n, c, h, w = x.shape
    ri = (np.arange(target_h) * h) // target_h
    ci = (np.arange(target_w) * w) // target_w
    data = x.data[:, :, ri[:, None], ci[None, :]]

    def back(out):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (slice(None), slice(None), ri[:, None], ci[None, :]), out.grad)
        _accum(x, dx)

    return _node(data, (x,), back)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormParams:
    """Per-channel affine parameters plus running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @staticmethod
    def create(channels, dtype=DEFAULT_DTYPE):
        return BatchNormParams(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


def batch_norm(x, params, mode, update_running=True):
    """Normalize per channel. ``train`` uses batch moments (and updates the
    running stats unless ``update_running`` is off, which gradient checking
    needs to keep the function pure); ``infer`` uses the running stats."""
    c = x.shape[1]
    if params.gamma.shape != (c,):
        raise DimensionError(
            f"batch_norm: params sized {params.gamma.shape[0]}, input has C={c}"
        )
    gamma, beta, eps = params.gamma, params.beta, params.eps

    if mode == "infer":
        inv = 1.0 / np.sqrt(params.running_var + eps)
        scale = (gamma.data * inv)[None, :, None, None]
        shift = (beta.data - params.running_mean * gamma.data * inv)[None, :, None, None]
        data = x.data * scale + shift

        def back_inf(out):
            _accum(x, out.grad * scale)
            xh = (x.data - params.running_mean[None, :, None, None]) * inv[None, :, None, None]
            _accum(gamma, (out.grad * xh).sum(axis=(0, 2, 3)))
            _accum(beta, out.grad.sum(axis=(0, 2, 3)))

        return _node(data, (x, gamma, beta), back_inf)

    if mode != "train":
        raise ConfigurationError(f"batch_norm: unknown mode {mode!r}")

    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    mu = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    if update_running:
        mom = params.momentum
        unbiased = var * (m / max(m - 1, 1))
        params.running_mean += mom * (mu - params.running_mean)
        params.running_var += mom * (unbiased - params.running_var)

    def back(out):
        dy = out.grad
        _accum(beta, dy.sum(axis=(0, 2, 3)))
        _accum(gamma, (dy * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = dy * gamma.data[None, :, None, None]
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            _accum(x, inv[None, :, None, None] * (dxhat - s1 / m - xhat * s2 / m))

    return _node(data, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# backward pass and gradient oracle


def backward(loss, seed=None):
    """Reverse-mode sweep from ``loss``; grads accumulate until zeroed."""
    if seed is None:
        if loss.data.size != 1:
            raise UsageError(
                f"backward: output has {loss.data.size} elements; pass an explicit seed"
            )
        seed = np.ones_like(loss.data)
    loss.grad = np.asarray(seed, dtype=loss.data.dtype).reshape(loss.data.shape).copy()

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node)
    # release graph references so activations free promptly
    for node in topo:
        if node is not loss and node._backward is not None:
            node._backward = None
            node._parents = ()
            node.grad = None


def finite_diff_grad(f, x, h=1e-3):
    """Central-difference gradient of a scalar-valued ``f`` at ``x``; the
    independent oracle for every differentiable op."""
    if not x.data.flags["C_CONTIGUOUS"]:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _eval_scalar(f, x)
        flat[i] = orig - h
        fm = _eval_scalar(f, x)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return Tensor(out.reshape(x.shape))


def _eval_scalar(f, x):
    with no_grad():
        v = f(x)
    val = v.data if isinstance(v, Tensor) else np.asarray(v)
    if val.size != 1:
        raise UsageError("finite_diff_grad: f must return a scalar")
    val = float(val.reshape(-1)[0])
    if not np.isfinite(val):
        raise NumericError("finite_diff_grad: f produced a non-finite value")
    return val


# ---------------------------------------------------------------------------
# SGD


def make_velocities(params):
    return [np.zeros_like(p.data) for p in params]


def sgd_step(params, grads, velocities, lr, momentum=0.0, weight_decay=0.0):
    """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v."""
    for p, g, v in zip(params, grads, velocities):
        if g.shape != p.data.shape:
            raise DimensionError(
                f"sgd_step: grad shape {g.shape} != param shape {p.data.shape}"
            )
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v


# ---------------------------------------------------------------------------
# weight serialization: textual manifest + little-endian float32 blob


def save_weights(named_arrays, prefix):
    """Write ``<prefix>.manifest`` (name shape offset per line) and
    ``<prefix>.bin`` (flat little-endian float32). Round-trips are bit-exact
    at 32-bit precision."""
    lines = []
    offset = 0
    with open(f"{prefix}.bin", "wb") as blob:
        for name, arr in named_arrays:
            a32 = np.ascontiguousarray(arr, dtype="<f4")
            shape = "x".join(str(d) for d in a32.shape) if a32.ndim else "1"
            lines.append(f"{name} {shape} {offset}\n")
            blob.write(a32.tobytes())
            offset += a32.nbytes
    with open(f"{prefix}.manifest", "w") as mf:
        mf.writelines(lines)


def load_weights(prefix):
    """Read a manifest/blob pair back into an ordered dict of float32 arrays."""
    from .errors import FormatError

    entries = []
    with open(f"{prefix}.manifest") as mf:
        for ln, line in enumerate(mf, start=1):
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(f"manifest line {ln}: expected 'name shape offset'")
            name, shape_s, off_s = parts
            shape = tuple(int(d) for d in shape_s.split("x"))
            entries.append((name, shape, int(off_s)))
    with open(f"{prefix}.bin", "rb") as blob:
        raw = blob.read()
    out = {}
    for name, shape, off in entries:
        count = int(np.prod(shape))
        end = off + 4 * count
        if end > len(raw):
            raise FormatError(
                f"blob truncated: {name} needs bytes [{off},{end}), blob has {len(raw)}"
            )
        out[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).copy()
    return out
