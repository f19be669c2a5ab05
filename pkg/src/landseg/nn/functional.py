"""Stateless forward/backward kernels for the layer zoo.

All kernels take and return (N, C, H, W) arrays.  Convolutions gather their
k*k taps into a channel-major column matrix and do one matrix product;
dilation and stride only change the slice arithmetic of the gather.
"""

import numpy as np


def effective_kernel(k, dilation):
    return k + (k - 1) * (dilation - 1)


def conv_out_extent(n, k, stride=1, dilation=1, padding=0):
    return (n + 2 * padding - effective_kernel(k, dilation)) // stride + 1


def tconv_out_extent(n, k, stride=1, padding=0, output_padding=0):
    return (n - 1) * stride - 2 * padding + k + output_padding


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _gather(xt, k, stride, dilation, ho, wo):
    """Tap matrix of shape (C, k, k, N, Ho, Wo) from a channel-major (C, N, H, W) array.

    Each tap is one strided slice copy, so the inner loops stay contiguous.
    """
    c, n = xt.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=xt.dtype)
    for i in range(k):
        r0 = i * dilation
        for j in range(k):
            c0 = j * dilation
            cols[:, i, j] = xt[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride]
    return cols


def _scatter(cols, shape, stride, dilation):
    """Adjoint of :func:`_gather`: accumulate taps into a zero (C, N, H, W) buffer."""
    _, k, _, _, ho, wo = cols.shape
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        r0 = i * dilation
        for j in range(k):
            c0 = j * dilation
            out[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride] += cols[:, i, j]
    return out


def _channel_major(x):
    return x.transpose(1, 0, 2, 3)


def conv2d(x, weight, bias=None, stride=1, dilation=1, padding=0):
    n, c, h, w = x.shape
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"only square kernels are supported, got {weight.shape}")
    if c != c_in:
        raise ValueError(f"input has {c} channels but the kernel expects {c_in}")
    ho = conv_out_extent(h, k, stride, dilation, padding)
    wo = conv_out_extent(w, k, stride, dilation, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(
            f"non-positive output extent {ho}x{wo} for input {h}x{w}, kernel {k}, "
            f"dilation {dilation}, padding {padding}"
        )
    cols = _gather(_channel_major(_pad(x, padding)), k, stride, dilation, ho, wo)
    out = weight.reshape(c_out, -1) @ cols.reshape(c * k * k, -1)
    out = out.reshape(c_out, n, ho, wo)
    if bias is not None:
        out += bias[:, None, None, None]
    return np.ascontiguousarray(_channel_major(out))


def conv2d_backward(x, weight, grad_out, stride=1, dilation=1, padding=0):
    """Return (grad_x, grad_weight, grad_bias) for :func:`conv2d`."""
    n, c, h, w = x.shape
    c_out, _, k, _ = weight.shape
    ho = conv_out_extent(h, k, stride, dilation, padding)
    wo = conv_out_extent(w, k, stride, dilation, padding)
    if grad_out.shape != (n, c_out, ho, wo):
        raise ValueError(f"grad_out shape {grad_out.shape} != forward output {(n, c_out, ho, wo)}")
    xpt = _channel_major(_pad(x, padding))
    cols = _gather(xpt, k, stride, dilation, ho, wo).reshape(c * k * k, -1)
    g = np.ascontiguousarray(_channel_major(grad_out)).reshape(c_out, -1)
    grad_w = (g @ cols.T).reshape(weight.shape)
    grad_b = g.sum(axis=1)
    gcols = (weight.reshape(c_out, -1).T @ g).reshape(c, k, k, n, ho, wo)
    gxp = _scatter(gcols, xpt.shape, stride, dilation)
    if padding:
        gxp = gxp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(_channel_major(gxp)), grad_w, grad_b


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """Scatter-accumulate adjoint of a strided convolution.

    `weight` has shape (C_in, C_out, k, k).  The uncropped buffer has extent
    (H - 1) * stride + k + output_padding; `padding` rows/columns are then
    trimmed from the leading edge.
    """
    n, c, h, w = x.shape
    c_in, c_out, k, _ = weight.shape
    if c != c_in:
        raise ValueError(f"input has {c} channels but the kernel expects {c_in}")
    if output_padding >= max(stride, 1) and output_padding > 0:
        raise ValueError(f"output_padding {output_padding} must be smaller than stride {stride}")
    ho = tconv_out_extent(h, k, stride, padding, output_padding)
    wo = tconv_out_extent(w, k, stride, padding, output_padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"non-positive transpose-conv output extent {ho}x{wo} for input {h}x{w}")
    hf = (h - 1) * stride + k + output_padding
    wf = (w - 1) * stride + k + output_padding
    xm = np.ascontiguousarray(_channel_major(x)).reshape(c, -1)
    taps = (weight.reshape(c, -1).T @ xm).reshape(c_out, k, k, n, h, w)
    full = _scatter(taps, (c_out, n, hf, wf), stride, 1)
    out = full[:, :, padding:padding + ho, padding:padding + wo]
    if bias is not None:
        out = out + bias[:, None, None, None]
    return np.ascontiguousarray(_channel_major(out))


def conv_transpose2d_backward(x, weight, grad_out, stride=1, padding=0, output_padding=0):
    n, c, h, w = x.shape
    c_in, c_out, k, _ = weight.shape
    ho = tconv_out_extent(h, k, stride, padding, output_padding)
    wo = tconv_out_extent(w, k, stride, padding, output_padding)
    if grad_out.shape != (n, c_out, ho, wo):
        raise ValueError(f"grad_out shape {grad_out.shape} != forward output {(n, c_out, ho, wo)}")
    hf = (h - 1) * stride + k + output_padding
    wf = (w - 1) * stride + k + output_padding
    gfull = np.zeros((c_out, n, hf, wf), dtype=grad_out.dtype)
    gfull[:, :, padding:padding + ho, padding:padding + wo] = _channel_major(grad_out)
    gtaps = _gather(gfull, k, stride, 1, h, w).reshape(c_out * k * k, -1)
    xm = np.ascontiguousarray(_channel_major(x)).reshape(c, -1)
    wm = weight.reshape(c, -1)
    grad_x = (wm @ gtaps).reshape(c, n, h, w)
    grad_w = (xm @ gtaps.T).reshape(weight.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(_channel_major(grad_x)), grad_w, grad_b


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def maxpool2(x):
    """2x2/stride-2 max pooling.  Returns (output, argmax) with argmax in 0..3.

    The argmax indexes the window in row-major order; ties go to the lowest
    index.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(argmax, grad_out):
    n, c, hh, wh = grad_out.shape
    g = np.zeros((n, c, hh, wh, 4), dtype=grad_out.dtype)
    np.put_along_axis(g, argmax[..., None], grad_out[..., None], axis=-1)
    return g.reshape(n, c, hh, wh, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * hh, 2 * wh)


def softmax_channels(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_backward(probs, grad_out):
    dot = (grad_out * probs).sum(axis=1, keepdims=True)
    return probs * (grad_out - dot)


def batchnorm_train(x, gamma, beta, eps):
    """Normalize with batch statistics.  Returns (out, cache, batch_mean, batch_var).

    Reductions run in float64; the elementwise work stays in the input dtype.
    """
    n, c, h, w = x.shape
    m = n * h * w
    if m < 2:
        raise ValueError(f"batch-norm training needs at least 2 values per channel, got {m}")
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    var = x.var(axis=(0, 2, 3), dtype=np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.astype(x.dtype)[None, :, None, None]) * inv_std.astype(x.dtype)[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out.astype(x.dtype, copy=False), (xhat, inv_std), mean, var


def batchnorm_eval(x, gamma, beta, running_mean, running_var, eps):
    scale = gamma / np.sqrt(running_var + eps)
    shift = beta - running_mean * scale
    return (x * scale[None, :, None, None] + shift[None, :, None, None]).astype(x.dtype, copy=False)


def batchnorm_train_backward(cache, gamma, grad_out):
    xhat, inv_std = cache
    m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    g_beta = grad_out.sum(axis=(0, 2, 3), dtype=np.float64)
    g_gamma = (grad_out * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
    dt = grad_out.dtype
    k = (gamma * inv_std / m).astype(dt)[None, :, None, None]
    grad_x = k * (m * grad_out - g_beta.astype(dt)[None, :, None, None] - xhat * g_gamma.astype(dt)[None, :, None, None])
    return grad_x.astype(dt, copy=False), g_gamma, g_beta


def batchnorm_eval_backward(gamma, running_var, eps, xhat, grad_out):
    scale = gamma / np.sqrt(running_var + eps)
    grad_x = grad_out * scale[None, :, None, None]
    g_gamma = (grad_out * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
    g_beta = grad_out.sum(axis=(0, 2, 3), dtype=np.float64)
    return grad_x, g_gamma, g_beta
