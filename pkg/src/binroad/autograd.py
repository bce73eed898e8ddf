"""Minimal reverse-mode differentiation tape over numpy arrays.

Covers exactly what the segmentation engine needs: broadcasting arithmetic,
(batched) matmul, im2col convolution, pooling, pixel shuffle, batch norm,
the straight-through estimator for sign, shifted activations, softmax, and
the two optimizers used for training. Tensors are plain numpy arrays plus an
optional grad and a backpointer into the tape.
"""

from __future__ import annotations

import json
import math
import zlib

import numpy as np

# Latent binary weights are clipped just inside the open STE window so their
# gradient never vanishes at the boundary.
LATENT_CLIP = float(np.nextafter(np.float32(1.0), np.float32(0.0)))


class Tensor:
    __slots__ = ("values", "grad", "ctx", "requires_grad")

    def __init__(self, values, requires_grad=False, ctx=None):
        self.values = np.asarray(values)
        self.grad = None
        self.ctx = ctx
        self.requires_grad = requires_grad or ctx is not None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, grad={'set' if self.grad is not None else 'none'})"

    def detach(self):
        return Tensor(self.values)

    def item(self):
        return float(self.values)

    def backward(self, grad=None):
        if grad is None:
            if self.values.size != 1:
                raise ValueError("backward() without a gradient requires a scalar")
            grad = np.ones_like(self.values)
        order = _toposort(self)
        self.grad = np.asarray(grad, dtype=self.values.dtype)
        for node in order:
            ctx = node.ctx
            if ctx is None or node.grad is None:
                continue
            grads = ctx.backward(node.grad)
            for parent, g in zip(ctx.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.astype(parent.values.dtype, copy=True)
                else:
                    parent.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, _as_tensor(np.asarray(-1.0, dtype=self.values.dtype)))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape)


class Parameter(Tensor):
    __slots__ = ("name", "latent")

    def __init__(self, values, name=""):
        super().__init__(np.asarray(values), requires_grad=True)
        self.name = name
        self.latent = False


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.ctx is not None:
            for p in node.ctx.parents:
                if p.ctx is not None or p.requires_grad:
                    stack.append((p, False))
    return list(reversed(order))


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Function:
    def __init__(self, *parents):
        self.parents = parents

    @classmethod
    def apply(cls, *args, **kwargs):
        tensors = [a for a in args if isinstance(a, Tensor)]
        ctx = cls(*tensors)
        out = ctx.forward(*[a.values if isinstance(a, Tensor) else a for a in args], **kwargs)
        needs = any(t.requires_grad for t in tensors)
        return Tensor(out, ctx=ctx if needs else None)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


# ---------------------------------------------------------------------------
# elementwise and shape ops


class _Add(Function):
    def forward(self, a, b):
        self.sa, self.sb = a.shape, b.shape
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.sa), _unbroadcast(g, self.sb)


class _Sub(Function):
    def forward(self, a, b):
        self.sa, self.sb = a.shape, b.shape
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.sa), _unbroadcast(-g, self.sb)


class _Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class _Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        return (
            _unbroadcast(g / self.b, self.a.shape),
            _unbroadcast(-g * self.a / (self.b * self.b), self.b.shape),
        )


class _Exp(Function):
    def forward(self, a):
        self.y = np.exp(a)
        return self.y

    def backward(self, g):
        return (g * self.y,)


class _Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class _Abs(Function):
    def forward(self, a):
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, g):
        return (g * self.sign,)


class _Power(Function):
    def forward(self, a, exponent):
        self.a, self.p = a, exponent
        return a**exponent

    def backward(self, g):
        if self.p == 0:
            return (np.zeros_like(self.a),)
        return (g * self.p * self.a ** (self.p - 1),)


class _ClampMin(Function):
    def forward(self, a, lo):
        self.mask = a >= lo
        return np.maximum(a, lo)

    def backward(self, g):
        return (g * self.mask,)


class _Sigmoid(Function):
    def forward(self, a):
        self.y = np.where(a >= 0, 1.0 / (1.0 + np.exp(-np.abs(a))), np.exp(-np.abs(a)) / (1.0 + np.exp(-np.abs(a))))
        return self.y

    def backward(self, g):
        return (g * self.y * (1.0 - self.y),)


class _Reshape(Function):
    def forward(self, a, shape):
        self.orig = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.orig),)


class _Transpose(Function):
    def forward(self, a, axes):
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, g):
        return (np.transpose(g, np.argsort(self.axes)),)


class _Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.axis))


class _Sum(Function):
    def forward(self, a, axis, keepdims):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return a.sum(axis=axis, keepdims=keepdims)

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            axes = self.axis if isinstance(self.axis, tuple) else (self.axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, self.shape).copy(),)


class _TakeFlat(Function):
    def forward(self, a, idx):
        self.n, self.idx = a.shape[0], idx
        return a[idx]

    def backward(self, g):
        out = np.zeros(self.n, dtype=g.dtype)
        np.add.at(out, self.idx, g)
        return (out,)


def add(a, b):
    return _Add.apply(a, b)


def sub(a, b):
    return _Sub.apply(a, b)


def mul(a, b):
    return _Mul.apply(a, b)


def div(a, b):
    return _Div.apply(a, b)


def exp(a):
    return _Exp.apply(a)


def log(a):
    return _Log.apply(a)


def absolute(a):
    return _Abs.apply(a)


def power(a, exponent):
    return _Power.apply(a, exponent)


def clamp_min(a, lo):
    return _ClampMin.apply(a, lo)


def sigmoid(a):
    return _Sigmoid.apply(a)


def reshape(a, shape):
    return _Reshape.apply(a, tuple(shape))


def transpose(a, axes):
    return _Transpose.apply(a, tuple(axes))


def concat(tensors, axis=0):
    ctx = _Concat(*tensors)
    out = ctx.forward(*[t.values for t in tensors], axis=axis)
    needs = any(t.requires_grad for t in tensors)
    return Tensor(out, ctx=ctx if needs else None)


def tsum(a, axis=None, keepdims=False):
    return _Sum.apply(a, axis, keepdims)


def tmean(a, axis=None, keepdims=False):
    count = a.values.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    s = tsum(a, axis, keepdims)
    return s * _as_tensor(np.asarray(1.0 / count, dtype=a.values.dtype))

def take_flat(a, idx):
    return _TakeFlat.apply(a, np.asarray(idx))


# ---------------------------------------------------------------------------
# matmul / conv / pooling / rearrangement


class _MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        a, b = self.a, self.b
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def matmul(a, b):
    return _MatMul.apply(a, b)


def _im2col(x, kh, kw, stride, padding, dilation):
    """x: (B, C, H, W) -> cols (C*kh*kw, B*Ho*Wo), plus geometry."""
    b, c, h, w = x.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    if padding:
        xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = x
    else:
        xp = x
    cols = np.empty((c, kh, kw, b, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            ii, jj = i * dilation, j * dilation
            cols[:, i, j] = xp[:, :, ii : ii + ho * stride : stride, jj : jj + wo * stride : stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, b * ho * wo), ho, wo


def _col2im(gcols, xshape, kh, kw, stride, padding, dilation, ho, wo):
    b, c, h, w = xshape
    gx = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    gc = gcols.reshape(c, kh, kw, b, ho, wo)
    for i in range(kh):
        for j in range(kw):
            ii, jj = i * dilation, j * dilation
            gx[:, :, ii : ii + ho * stride : stride, jj : jj + wo * stride : stride] += gc[:, i, j].transpose(1, 0, 2, 3)
    if padding:
        gx = gx[:, :, padding : padding + h, padding : padding + w]
    return gx


class _Conv2d(Function):
    def forward(self, x, w, stride, padding, dilation):
        self.geom = (stride, padding, dilation)
        self.xshape, self.wshape = x.shape, w.shape
        co, ci, kh, kw = w.shape
        if x.shape[1] != ci:
            raise ValueError(f"conv2d channel mismatch: input {x.shape[1]} vs weight {ci}")
        cols, ho, wo = _im2col(x, kh, kw, stride, padding, dilation)
        self.cols, self.w2 = cols, w.reshape(co, -1)
        self.ho, self.wo = ho, wo
        out = self.w2 @ cols
        b = x.shape[0]
        return out.reshape(co, b, ho, wo).transpose(1, 0, 2, 3)

    def backward(self, g):
        stride, padding, dilation = self.geom
        co, ci, kh, kw = self.wshape
        g2 = g.transpose(1, 0, 2, 3).reshape(co, -1)
        gw = (g2 @ self.cols.T).reshape(self.wshape)
        gx = None
        if self.parents[0].requires_grad:
            gcols = self.w2.T @ g2
            gx = _col2im(gcols, self.xshape, kh, kw, stride, padding, dilation, self.ho, self.wo)
        return gx, gw


def conv2d(x, w, stride=1, padding=0, dilation=1):
    """Batched 2-D convolution: x (B,Ci,H,W), w (Co,Ci,kh,kw) -> (B,Co,Ho,Wo)."""
    return _Conv2d.apply(x, w, stride, padding, dilation)


class _AvgPool2(Function):
    """2x2 average pooling with stride 2; odd tails are floored away."""

    def forward(self, x):
        b, c, h, w = x.shape
        self.xshape = x.shape
        ho, wo = h // 2, w // 2
        self.ho, self.wo = ho, wo
        v = x[:, :, : ho * 2, : wo * 2].reshape(b, c, ho, 2, wo, 2)
        return v.mean(axis=(3, 5))

    def backward(self, g):
        b, c, h, w = self.xshape
        gx = np.zeros(self.xshape, dtype=g.dtype)
        spread = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        gx[:, :, : self.ho * 2, : self.wo * 2] = spread
        return (gx,)


def avg_pool2(x):
    return _AvgPool2.apply(x)


class _PixelShuffle(Function):
    def forward(self, x, r):
        b, crr, h, w = x.shape
        if crr % (r * r) != 0:
            raise ValueError(f"channels {crr} not divisible by r^2 = {r * r}")
        self.r, self.xshape = r, x.shape
        c = crr // (r * r)
        return x.reshape(b, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, c, h * r, w * r)

    def backward(self, g):
        b, crr, h, w = self.xshape
        r = self.r
        c = crr // (r * r)
        gx = g.reshape(b, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(self.xshape)
        return (gx,)


def pixel_shuffle(x, r):
    """Rearrange (B, C*r^2, H, W) -> (B, C, rH, rW); no arithmetic."""
    return _PixelShuffle.apply(x, r)


class _PixelUnshuffle(Function):
    def forward(self, x, r):
        b, c, hr, wr = x.shape
        if hr % r or wr % r:
            raise ValueError("spatial dims not divisible by r")
        self.r, self.xshape = r, x.shape
        h, w = hr // r, wr // r
        return x.reshape(b, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(b, c * r * r, h, w)

    def backward(self, g):
        b, c, hr, wr = self.xshape
        r = self.r
        h, w = hr // r, wr // r
        gx = g.reshape(b, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(self.xshape)
        return (gx,)


def pixel_unshuffle(x, r):
    return _PixelUnshuffle.apply(x, r)


# ---------------------------------------------------------------------------
# binarization, activations, normalization, softmax


class _SignSTE(Function):
    """Forward sign (with sign(0)=+1); backward passes grad where |x| < 1."""

    def forward(self, x):
        self.window = np.abs(x) < 1.0
        return np.where(x >= 0, 1.0, -1.0).astype(x.dtype)

    def backward(self, g):
        return (g * self.window,)


def sign_ste(x):
    return _SignSTE.apply(x)


class _PReLU(Function):
    """y = x if x > 0 else slope*x, slope per channel along `axis`."""

    def forward(self, x, slope, axis):
        self.axis = axis
        self.pos = x > 0
        self.x = x
        shape = [1] * x.ndim
        shape[axis] = slope.shape[0]
        self.sshape = slope.shape
        self.sl = slope.reshape(shape)
        return np.where(self.pos, x, self.sl * x)

    def backward(self, g):
        gx = g * np.where(self.pos, 1.0, self.sl)
        gneg = g * self.x * (~self.pos)
        axes = tuple(i for i in range(g.ndim) if i != self.axis)
        gs = gneg.sum(axis=axes).reshape(self.sshape)
        return gx, gs


def prelu(x, slope, axis=1):
    return _PReLU.apply(x, slope, axis)


class _Softmax(Function):
    def forward(self, x, axis):
        self.axis = axis
        m = x.max(axis=axis, keepdims=True)
        e = np.exp(x - m)
        self.p = e / e.sum(axis=axis, keepdims=True)
        return self.p

    def backward(self, g):
        p = self.p
        inner = (g * p).sum(axis=self.axis, keepdims=True)
        return (p * (g - inner),)


def softmax(x, axis=-1):
    return _Softmax.apply(x, axis)


class _BatchNormTrain(Function):
    def forward(self, x, gamma, beta, axis, eps):
        axes = tuple(i for i in range(x.ndim) if i != axis)
        self.axes, self.axis = axes, axis
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        self.invstd = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mean) * self.invstd
        self.n = x.size // x.shape[axis]
        shape = [1] * x.ndim
        shape[axis] = x.shape[axis]
        self.pshape = gamma.shape
        self.gamma = gamma.reshape(shape)
        self.batch_mean = mean.reshape(-1)
        self.batch_var = var.reshape(-1)
        return self.gamma * self.xhat + beta.reshape(shape)

    def backward(self, g):
        dxhat = g * self.gamma
        s1 = dxhat.sum(axis=self.axes, keepdims=True)
        s2 = (dxhat * self.xhat).sum(axis=self.axes, keepdims=True)
        gx = self.invstd / self.n * (self.n * dxhat - s1 - self.xhat * s2)
        ggamma = (g * self.xhat).sum(axis=self.axes).reshape(self.pshape)
        gbeta = g.sum(axis=self.axes).reshape(self.pshape)
        return gx, ggamma, gbeta


def batch_norm_train(x, gamma, beta, axis=1, eps=1e-5):
    """Batch-statistics normalization; returns (y, batch_mean, batch_var)."""
    ctx = _BatchNormTrain(x, gamma, beta)
    out = ctx.forward(x.values, gamma.values, beta.values, axis, eps)
    needs = x.requires_grad or gamma.requires_grad or beta.requires_grad
    y = Tensor(out, ctx=ctx if needs else None)
    return y, ctx.batch_mean, ctx.batch_var


def channel_shape(ndim, axis, c):
    shape = [1] * ndim
    shape[axis] = c
    return tuple(shape)


# ---------------------------------------------------------------------------
# modules


class Module:
    def __init__(self):
        self._params = {}
        self._buffers = {}
        self._modules = {}
        self.training = True

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self.__dict__.setdefault("_params", {})[key] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_modules", {})[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key, value):
        self._buffers[key] = np.asarray(value)
        object.__setattr__(self, key, self._buffers[key])

    def set_buffer(self, key, value):
        self._buffers[key] = np.asarray(value)
        object.__setattr__(self, key, self._buffers[key])

    def add_module(self, key, module):
        self._modules[key] = module
        object.__setattr__(self, key, module)

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def named_parameters(self, prefix=""):
        for k, p in self._params.items():
            yield (f"{prefix}{k}", p)
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix=""):
        for k, b in self._buffers.items():
            yield (f"{prefix}{k}", b)
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix=f"{prefix}{name}.")

    def train(self):
        for m in self.modules():
            m.training = True
        return self

    def eval(self):
        for m in self.modules():
            m.training = False
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def finalize_names(self, prefix=""):
        """Assign stable dotted names to every parameter (for checkpoints)."""
        for name, p in self.named_parameters():
            p.name = name
        return self


class BatchNorm(Module):
    """Batch normalization over all axes except the channel axis."""

    def __init__(self, channels, axis=1, eps=1e-5, momentum=0.1):
        super().__init__()
        self.channels, self.axis, self.eps, self.momentum = channels, axis, eps, momentum
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x):
        if self.training:
            y, bmean, bvar = batch_norm_train(x, self.gamma, self.beta, self.axis, self.eps)
            m = self.momentum
            self.set_buffer("running_mean", ((1 - m) * self.running_mean + m * bmean).astype(np.float32))
            self.set_buffer("running_var", ((1 - m) * self.running_var + m * bvar).astype(np.float32))
            return y
        shape = channel_shape(x.ndim, self.axis, self.channels)
        inv = (1.0 / np.sqrt(self.running_var + self.eps)).reshape(shape).astype(x.values.dtype)
        rm = self.running_mean.reshape(shape).astype(x.values.dtype)
        scale = mul(reshape(self.gamma, shape), Tensor(inv))
        return add(mul(sub(x, Tensor(rm)), scale), reshape(self.beta, shape))

    __call__ = forward


class RPReLU(Module):
    """Shifted activation: prelu(x - gamma) + zeta, all shifts learnable."""

    def __init__(self, channels, axis=1):
        super().__init__()
        self.channels, self.axis = channels, axis
        self.shift_in = Parameter(np.zeros(channels, dtype=np.float32))
        self.slope = Parameter(np.full(channels, 0.25, dtype=np.float32))
        self.shift_out = Parameter(np.zeros(channels, dtype=np.float32))

    def forward(self, x):
        shape = channel_shape(x.ndim, self.axis, self.channels)
        y = sub(x, reshape(self.shift_in, shape))
        y = prelu(y, self.slope, axis=self.axis)
        return add(y, reshape(self.shift_out, shape))

    __call__ = forward


class ChannelShift(Module):
    """Learnable per-channel pre-sign shift: x - b."""

    def __init__(self, channels, axis=1):
        super().__init__()
        self.channels, self.axis = channels, axis
        self.bias = Parameter(np.zeros(channels, dtype=np.float32))

    def forward(self, x):
        return sub(x, reshape(self.bias, channel_shape(x.ndim, self.axis, self.channels)))

    __call__ = forward


def shifted_sign(x, shift: ChannelShift):
    """Per-channel shift followed by the STE sign."""
    return sign_ste(shift(x))


# ---------------------------------------------------------------------------
# optimizers


def cosine_lr(lr0: float, epoch: int, epoch_total: int) -> float:
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / epoch_total))


class SgdCosine:
    """Plain SGD whose learning rate follows cosine decay from lr0 to 0."""

    def __init__(self, params, lr0, epoch_total):
        self.params = list(params)
        self.lr0 = lr0
        self.epoch_total = epoch_total

    def lr_at(self, epoch):
        return cosine_lr(self.lr0, epoch, self.epoch_total)

    def step(self, epoch):
        lr = self.lr_at(epoch)
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter '{p.name}' has no gradient")
            p.values -= (lr * p.grad).astype(p.values.dtype)
            if not np.isfinite(p.values).all():
                raise FloatingPointError(f"parameter '{p.name}' became non-finite")

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self):
        return {}

    def load_state_arrays(self, arrays):
        pass


class AdamW:
    """AdamW with decoupled weight decay; betas (0.9, 0.999), eps 1e-8."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self, epoch=None):
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"parameter '{p.name}' has no gradient")
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.values -= (self.lr * (update + self.weight_decay * p.values)).astype(p.values.dtype)
            if not np.isfinite(p.values).all():
                raise FloatingPointError(f"parameter '{p.name}' became non-finite")

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self):
        out = {"t": np.array([self.t], dtype=np.int64)}
        for i, p in enumerate(self.params):
            out[f"m/{p.name}"] = self.m[i].astype("<f4")
            out[f"v/{p.name}"] = self.v[i].astype("<f4")
        return out

    def load_state_arrays(self, arrays):
        self.t = int(arrays["t"][0])
        for i, p in enumerate(self.params):
            self.m[i] = arrays[f"m/{p.name}"].astype(p.values.dtype)
            self.v[i] = arrays[f"v/{p.name}"].astype(p.values.dtype)


def clip_latent_weights(params):
    """Keep latent binary weights inside the open STE window (-1, 1)."""
    for p in params:
        if getattr(p, "latent", False):
            np.clip(p.values, -LATENT_CLIP, LATENT_CLIP, out=p.values)


# ---------------------------------------------------------------------------
# checkpoint container
#
# A checkpoint is a .npz archive with:
#   __meta__            uint8-encoded JSON: format version, config digest,
#                       optimizer step counters
#   param/<name>        little-endian float32 parameter arrays
#   buffer/<name>       BN running stats (little-endian float32)
#   opt/<group>/<key>   optimizer moment buffers


def config_digest(text: str) -> str:
    return f"{zlib.crc32(text.encode('utf-8')):08x}"


def save_checkpoint(path, model: Module, digest="", optimizers=None):
    arrays = {}
    meta = {"format": 1, "config_digest": digest}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.values.astype("<f4")
    for name, b in model.named_buffers():
        arrays[f"buffer/{name}"] = b.astype("<f4")
    if optimizers:
        for group, opt in optimizers.items():
            for key, arr in opt.state_arrays().items():
                arrays[f"opt/{group}/{key}"] = arr
            meta.setdefault("optimizers", {})[group] = type(opt).__name__
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path, model: Module, optimizers=None, expect_digest=None):
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if expect_digest is not None and meta["config_digest"] != expect_digest:
            raise ValueError(
                f"checkpoint config digest {meta['config_digest']} does not match {expect_digest}"
            )
        params = dict(model.named_parameters())
        for key in data.files:
            if key.startswith("param/"):
                name = key[len("param/") :]
                if name not in params:
                    raise KeyError(f"checkpoint parameter '{name}' not in model")
                params[name].values = data[key].astype(np.float32)
        _load_buffers(model, data, prefix="")
        if optimizers:
            for group, opt in optimizers.items():
                state = {}
                pre = f"opt/{group}/"
                for key in data.files:
                    if key.startswith(pre):
                        state[key[len(pre) :]] = data[key]
                if state:
                    opt.load_state_arrays(state)
    return meta


def _load_buffers(module: Module, data, prefix=""):
    for key in list(module._buffers):
        full = f"buffer/{prefix}{key}"
        if full in data.files:
            module.set_buffer(key, data[full].astype(np.float32))
    for name, sub in module._modules.items():
        _load_buffers(sub, data, prefix=f"{prefix}{name}.")
