"""
Differentiable ops on `Tensor`.

No broadcasting: binary ops need identical shapes. The only exceptions are the
documented channel-wise parameters (conv/linear bias, batch-norm gamma/beta).
Every op keeps the dtype of its inputs, so float64 graphs stay float64 for
gradient checks.
"""

import numpy as np

from engine.tensor import Function, Tensor
from utils.errors import ConfigError, DataError, ShapeError

LOG_FLOOR = 1e-30
ARCCOS_FLOOR = 1e-12


def _require_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# Elementwise arithmetic


class Add(Function):
    def forward(self, x, y):
        return x + y

    def backward(self, grad):
        return grad, grad


class AddScalar(Function):
    def forward(self, x, value):
        return x + np.asarray(value, dtype=x.dtype)

    def backward(self, grad):
        return (grad,)


class MulScalar(Function):
    def forward(self, x, value):
        self.value = np.asarray(value, dtype=x.dtype)
        return x * self.value

    def backward(self, grad):
        return (grad * self.value,)


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return grad * self.y, grad * self.x


class Power(Function):
    def forward(self, x, exponent):
        self.x, self.exponent = x, exponent
        return np.power(x, exponent)

    def backward(self, grad):
        return (grad * self.exponent * np.power(self.x, self.exponent - 1),)


class Sqrt(Function):
    def forward(self, x):
        self.out = np.sqrt(x)
        return self.out

    def backward(self, grad):
        return (grad / (2.0 * self.out),)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    """Natural log with the argument floored at LOG_FLOOR."""

    def forward(self, x):
        self.x = np.maximum(x, LOG_FLOOR)
        return np.log(self.x)

    def backward(self, grad):
        return (grad / self.x,)


class Cos(Function):
    def forward(self, x):
        self.x = x
        return np.cos(x)

    def backward(self, grad):
        return (-grad * np.sin(self.x),)


class Arccos(Function):
    """arccos on [-1, 1]; the derivative is floored so |x| -> 1 stays finite."""

    def forward(self, x):
        self.x = np.clip(x, -1.0, 1.0)
        return np.arccos(self.x)

    def backward(self, grad):
        return (-grad / np.sqrt(np.maximum(1.0 - self.x * self.x, ARCCOS_FLOOR)),)


class Clip(Function):
    def forward(self, x, low, high):
        self.mask = (x >= low) & (x <= high)
        return np.clip(x, low, high)

    def backward(self, grad):
        return (grad * self.mask,)


# Activations


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class LeakyRelu(Function):
    def forward(self, x, slope):
        self.slope_map = np.where(x > 0, 1.0, slope).astype(x.dtype)
        return x * self.slope_map

    def backward(self, grad):
        return (grad * self.slope_map,)


class Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Sigmoid(Function):
    def forward(self, x):
        # split by sign to avoid overflow in exp
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self.out = out
        return out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Softmax(Function):
    def forward(self, x, axis):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, x, axis):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        self.softmax = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.softmax * grad.sum(axis=self.axis, keepdims=True),)


# Reductions and shape ops


class Sum(Function):
    def forward(self, x, axis, keepdims):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, x, axis, keepdims):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        self.count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
        return np.asarray(x.mean(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


class Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Concat(Function):
    def forward(self, *xs, axis):
        self.axis = axis
        self.splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.concatenate(xs, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Gather(Function):
    """Pick `index[b, j]` along axis 1 of a 2-D tensor."""

    def forward(self, x, index):
        self.shape = x.shape
        self.rows = np.arange(x.shape[0])[:, None]
        self.index = index
        return x[self.rows, index]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, (np.broadcast_to(self.rows, self.index.shape), self.index), grad)
        return (out,)


class Embedding(Function):
    """Row lookup `weight[indices]`; also used to pick class centers per sample."""

    def forward(self, weight, indices):
        self.shape, self.indices = weight.shape, indices
        return weight[indices]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, self.indices, grad)
        return (out,)


class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


class Linear(Function):
    def forward(self, x, weight, *bias):
        self.x, self.weight = x, weight
        out = x @ weight.T
        if bias:
            out = out + bias[0]
        return out

    def backward(self, grad):
        grads = (grad @ self.weight, grad.T @ self.x)
        if len(self.inputs) == 3:
            grads += (grad.sum(axis=0),)
        return grads


# Convolution and spatial ops


def conv_output_extent(size, pad_total, kernel, stride, dilation):
    return (size + pad_total - dilation * (kernel - 1) - 1) // stride + 1


class Conv2d(Function):
    """
    Grouped, dilated cross-correlation over NCHW input with OIHW weights.

    Windows are gathered one kernel offset at a time into a column buffer and
    contracted per group with a batched matmul.
    """

    def forward(self, x, weight, *bias, stride, pads, dilation, groups):
        n, c, h, w = x.shape
        o, cg, kh, kw = weight.shape
        top, bottom, left, right = pads
        ho = conv_output_extent(h, top + bottom, kh, stride, dilation)
        wo = conv_output_extent(w, left + right, kw, stride, dilation)
        if ho <= 0 or wo <= 0:
            raise ConfigError(f"conv2d output extent must be positive, got {ho}x{wo}")

        xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
        cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                r, s = i * dilation, j * dilation
                cols[:, :, i, j] = xp[:, :, r : r + stride * (ho - 1) + 1 : stride, s : s + stride * (wo - 1) + 1 : stride]

        self.cols = cols.reshape(n, groups, cg * kh * kw, ho * wo)
        self.w_g = weight.reshape(groups, o // groups, cg * kh * kw)
        self.meta = (x.shape, weight.shape, pads, stride, dilation, groups, ho, wo)

        out = np.matmul(self.w_g[None], self.cols).reshape(n, o, ho, wo)
        if bias:
            out = out + bias[0].reshape(1, o, 1, 1)
        return out

    def backward(self, grad):
        (n, c, h, w), wshape, (top, bottom, left, right), stride, dilation, groups, ho, wo = self.meta
        o, cg, kh, kw = wshape
        g = grad.reshape(n, groups, o // groups, ho * wo)

        dweight = np.matmul(g, self.cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(wshape)
        dcols = np.matmul(self.w_g.transpose(0, 2, 1)[None], g).reshape(n, c, kh, kw, ho, wo)

        dxp = np.zeros((n, c, h + top + bottom, w + left + right), dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                r, s = i * dilation, j * dilation
                dxp[:, :, r : r + stride * (ho - 1) + 1 : stride, s : s + stride * (wo - 1) + 1 : stride] += dcols[:, :, i, j]
        dx = dxp[:, :, top : top + h, left : left + w]

        grads = (dx, dweight)
        if len(self.inputs) == 3:
            grads += (grad.sum(axis=(0, 2, 3)),)
        return grads


class UpsampleNearest(Function):
    def forward(self, x, factor):
        self.factor = factor
        return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)

    def backward(self, grad):
        n, c, h, w = grad.shape
        f = self.factor
        return (grad.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5)),)


class GlobalAvgPool(Function):
    def forward(self, x):
        self.shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self.shape
        return (np.broadcast_to(grad[:, :, None, None] / (h * w), self.shape).copy(),)


class ShortcutPad(Function):
    """Parameter-free shortcut: spatial subsampling plus zero channel padding."""

    def forward(self, x, stride, out_channels):
        self.shape, self.stride = x.shape, stride
        extra = out_channels - x.shape[1]
        self.front = extra // 2
        y = x[:, :, ::stride, ::stride]
        return np.pad(y, ((0, 0), (self.front, extra - self.front), (0, 0), (0, 0)))

    def backward(self, grad):
        c = self.shape[1]
        dx = np.zeros(self.shape, dtype=grad.dtype)
        dx[:, :, :: self.stride, :: self.stride] = grad[:, self.front : self.front + c]
        return (dx,)


# Batch normalization


class ChannelMean(Function):
    def forward(self, x):
        self.shape = x.shape
        self.count = x.shape[0] * x.shape[2] * x.shape[3]
        return x.mean(axis=(0, 2, 3))

    def backward(self, grad):
        return (np.broadcast_to(grad[None, :, None, None] / self.count, self.shape).copy(),)


class ChannelVar(Function):
    """Biased per-channel variance over (N, H, W)."""

    def forward(self, x):
        self.count = x.shape[0] * x.shape[2] * x.shape[3]
        self.centered = x - x.mean(axis=(0, 2, 3), keepdims=True)
        return (self.centered**2).mean(axis=(0, 2, 3))

    def backward(self, grad):
        return (grad[None, :, None, None] * 2.0 * self.centered / self.count,)


class BatchNorm(Function):
    """
    Normalize with batch statistics (train) or given statistics (eval), then scale
    and shift per channel.
    """

    def forward(self, x, gamma, beta, mean, var, use_batch_stats, eps):
        self.use_batch_stats = use_batch_stats
        if use_batch_stats:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
        self.inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)[None, :, None, None]
        self.xhat = (x - np.asarray(mean, dtype=x.dtype)[None, :, None, None]) * self.inv_std
        self.gamma = gamma[None, :, None, None]
        self.count = x.shape[0] * x.shape[2] * x.shape[3]
        return self.gamma * self.xhat + beta[None, :, None, None]

    def backward(self, grad):
        dgamma = (grad * self.xhat).sum(axis=(0, 2, 3))
        dbeta = grad.sum(axis=(0, 2, 3))
        dxhat = grad * self.gamma
        if self.use_batch_stats:
            m = self.count
            dx = (self.inv_std / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - self.xhat * (dxhat * self.xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = dxhat * self.inv_std
        return dx, dgamma, dbeta


# Public functional API


def add(a, b):
    _require_same_shape("add", a, b)
    return Add.apply(a, b)


def add_scalar(x, value):
    return AddScalar.apply(x, value=value)


def mul_scalar(x, value):
    return MulScalar.apply(x, value=value)


def elementwise_mul(a, b):
    """Hadamard product of two tensors of identical shape."""
    _require_same_shape("elementwise_mul", a, b)
    return Mul.apply(a, b)


def power(x, exponent):
    return Power.apply(x, exponent=float(exponent))


def square(x):
    return Power.apply(x, exponent=2.0)


def sqrt(x):
    return Sqrt.apply(x)


def exp(x):
    return Exp.apply(x)


def log(x):
    return Log.apply(x)


def cos(x):
    return Cos.apply(x)


def arccos(x):
    return Arccos.apply(x)


def clip(x, low, high):
    return Clip.apply(x, low=low, high=high)


def relu(x):
    return Relu.apply(x)


def leaky_relu(x, slope=0.2):
    return LeakyRelu.apply(x, slope=slope)


def tanh(x):
    return Tanh.apply(x)


def sigmoid(x):
    return Sigmoid.apply(x)


def softmax(x, axis=-1):
    return Softmax.apply(x, axis=axis)


def log_softmax(x, axis=-1):
    return LogSoftmax.apply(x, axis=axis)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return Mean.apply(x, axis=axis, keepdims=keepdims)


def reshape(x, shape):
    if int(np.prod(shape)) != x.size and -1 not in shape:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    return Reshape.apply(x, shape=tuple(shape))


def concat(tensors, axis=1):
    return Concat.apply(*tensors, axis=axis)


def gather(x, index):
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ShapeError(f"gather: expected 2-D input and index with equal rows, got {x.shape} and {index.shape}")
    return Gather.apply(x, index=index)


def embedding(weight, indices):
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: index out of range for {weight.shape[0]} rows")
    return Embedding.apply(weight, indices=indices)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return MatMul.apply(a, b)


def linear(x, weight, bias=None):
    """Affine map x @ weight.T + bias for x of shape N x D and weight K x D."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    tensors = (x, weight) if bias is None else (x, weight, bias)
    return Linear.apply(*tensors)


def _normalize_padding(padding):
    if isinstance(padding, int):
        return (padding, padding, padding, padding)
    if len(padding) == 2:
        return (padding[0], padding[0], padding[1], padding[1])
    if len(padding) == 4:
        return tuple(int(p) for p in padding)
    raise ConfigError(f"padding must be an int, (h, w) or (top, bottom, left, right); got {padding}")


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1, groups=1):
    """
    2-D cross-correlation.

    Args:
        x: Input of shape N x C x H x W.
        weight: Kernel of shape O x (C / groups) x kH x kW.
        bias: Optional per-output-channel bias of shape O.
        padding: int, (h, w) or explicit (top, bottom, left, right) zero padding.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    if groups < 1 or x.shape[1] % groups or weight.shape[0] % groups:
        raise ShapeError(f"conv2d: channels {x.shape[1]}->{weight.shape[0]} not divisible by groups={groups}")
    if weight.shape[1] * groups != x.shape[1]:
        raise ShapeError(f"conv2d: weight expects {weight.shape[1] * groups} input channels, got {x.shape[1]}")
    if dilation < 1 or stride < 1:
        raise ConfigError(f"conv2d: stride and dilation must be >= 1 (stride={stride}, dilation={dilation})")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {weight.shape[0]} output channels")
    tensors = (x, weight) if bias is None else (x, weight, bias)
    return Conv2d.apply(*tensors, stride=stride, pads=_normalize_padding(padding), dilation=dilation, groups=groups)


def upsample_nearest(x, factor):
    if factor < 1:
        raise ConfigError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    return UpsampleNearest.apply(x, factor=int(factor))


def global_avg_pool(x):
    return GlobalAvgPool.apply(x)


def shortcut_pad(x, stride, out_channels):
    if out_channels < x.shape[1]:
        raise ShapeError(f"shortcut cannot shrink channels {x.shape[1]} -> {out_channels}")
    return ShortcutPad.apply(x, stride=stride, out_channels=out_channels)


def channel_mean(x):
    return ChannelMean.apply(x)


def channel_var(x):
    return ChannelVar.apply(x)


def batch_norm(x, gamma, beta, running_mean, running_var, mode="train", momentum=0.1, eps=1e-5, update_running=False):
    """
    Batch normalization over NCHW input.

    Train mode normalizes by the batch statistics, eval mode by the running buffers.
    The running buffers (plain numpy arrays) are only written when
    `update_running=True` in train mode, which is reserved for pretraining.

    Returns:
        (output, batch_mean, batch_var): the batch statistics are differentiable
        tensors of shape C, computed in either mode.
    """
    if eps <= 0:
        raise ConfigError(f"batch_norm eps must be positive, got {eps}")
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or np.shape(running_mean) != (c,) or np.shape(running_var) != (c,):
        raise ShapeError(f"batch_norm parameters do not match {c} channels")
    if x.shape[0] * x.shape[2] * x.shape[3] == 0:
        raise DataError("batch_norm received an empty batch")
    if mode not in ("train", "eval"):
        raise ConfigError(f"batch_norm mode must be 'train' or 'eval', got {mode}")

    batch_mean = channel_mean(x)
    batch_var = channel_var(x)
    out = BatchNorm.apply(
        x, gamma, beta,
        mean=running_mean, var=running_var, use_batch_stats=(mode == "train"), eps=eps,
    )
    if mode == "train" and update_running:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = batch_var.data * (m / max(m - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * batch_mean.data
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    return out, batch_mean, batch_var


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def to_tensor(data, dtype=None):
    return data if isinstance(data, Tensor) else Tensor(data, dtype=dtype)
