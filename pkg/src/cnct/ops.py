"""Dense NHWC tensor primitives with hand-derived backward passes.

Activations are plain numpy arrays laid out (batch, height, width, channels)
in float32 or float64. Convolution weights are laid out
(kernel_h, kernel_w, in_channels_per_group, out_channels); groups partition
both channel axes contiguously. Forward functions are pure; backward
functions take the upstream gradient plus whatever the forward needed and
return gradients in the same layouts as their inputs.

Reductions (means, variances, pooled averages, loss averages) accumulate in
float64 even for float32 inputs, then cast back. Matrix products stay in the
native dtype so they hit BLAS.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeMismatchError

SUPPORTED_DTYPES = (np.float32, np.float64)


def _check_nhwc(x, name="input"):
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeMismatchError(
            f"{name} must be a rank-4 (batch, height, width, channels) array, "
            f"got {getattr(x, 'shape', type(x))}"
        )
    if x.dtype.type not in SUPPORTED_DTYPES:
        raise ConfigError(f"{name} dtype must be float32 or float64, got {x.dtype}")


def _pair(v, what):
    if isinstance(v, int):
        v = (v, v)
    v = tuple(int(e) for e in v)
    if len(v) != 2 or any(e < 1 for e in v):
        raise ConfigError(f"{what} must be a positive int or pair, got {v}")
    return v


@dataclass(frozen=True)
class ConvParams:
    """Static configuration of a 2-d convolution.

    Attributes:
        in_channels: channels of the incoming tensor.
        out_channels: channels produced.
        kernel: (kh, kw) spatial extent.
        stride: (sh, sw) step between output positions.
        groups: channel groups; in/out channels must both divide evenly.
            groups == in_channels == out_channels gives a depthwise conv.
        padding: "same" (output ceil(size/stride)) or "valid" (no padding).
        has_bias: whether a per-output-channel bias is added.
    """

    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    groups: int = 1
    padding: str = "same"
    has_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel, "kernel"))
        object.__setattr__(self, "stride", _pair(self.stride, "stride"))
        if self.in_channels < 1 or self.out_channels < 1 or self.groups < 1:
            raise ConfigError(
                f"channel counts and groups must be positive, got "
                f"in={self.in_channels} out={self.out_channels} groups={self.groups}"
            )
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    @property
    def weight_shape(self):
        kh, kw = self.kernel
        return (kh, kw, self.in_channels // self.groups, self.out_channels)


def conv_output_hw(h, w, params):
    """Spatial output size for a ConvParams applied to an (h, w) input."""
    kh, kw = params.kernel
    sh, sw = params.stride
    if params.padding == "same":
        return -(-h // sh), -(-w // sw)
    if h < kh or w < kw:
        raise ShapeMismatchError(
            f"valid conv kernel {params.kernel} does not fit input {(h, w)}"
        )
    return (h - kh) // sh + 1, (w - kw) // sw + 1


def _same_pad_amounts(k):
    # Total padding k-1, split with the smaller half leading.
    lo = (k - 1) // 2
    return lo, (k - 1) - lo


def _pad_input(x, params):
    if params.padding == "valid":
        return x, (0, 0)
    kh, kw = params.kernel
    pt, pb = _same_pad_amounts(kh)
    pl, pr = _same_pad_amounts(kw)
    if pt == pb == pl == pr == 0:
        return x, (0, 0)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    return xp, (pt, pl)


def _patches(xp, kernel, stride):
    """Strided view (n, ho, wo, kh, kw, c) over a padded NHWC array."""
    kh, kw = kernel
    sh, sw = stride
    n, hp, wp, c = xp.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    sn, sh_, sw_, sc = xp.strides
    shape = (n, ho, wo, kh, kw, c)
    strides = (sn, sh_ * sh, sw_ * sw, sh_, sw_, sc)
    return np.lib.stride_tricks.as_strided(xp, shape, strides, writeable=False)


def _check_conv_args(x, params, weights, bias):
    _check_nhwc(x, "conv input")
    if x.shape[3] != params.in_channels:
        raise ShapeMismatchError(
            f"conv expects {params.in_channels} input channels, got {x.shape[3]}"
        )
    if weights.shape != params.weight_shape:
        raise ShapeMismatchError(
            f"conv weights must have shape {params.weight_shape} "
            f"(kh, kw, in/groups, out), got {weights.shape}"
        )
    if params.has_bias:
        if bias is None or bias.shape != (params.out_channels,):
            raise ShapeMismatchError(
                f"conv bias must have shape ({params.out_channels},), got "
                f"{None if bias is None else bias.shape}"
            )
    elif bias is not None:
        raise ConfigError("conv configured without bias but one was passed")


def conv2d(x, params, weights, bias=None):
    """Grouped 2-d convolution over an NHWC tensor.

    Args:
        x: (n, h, w, in_channels) activations.
        params: ConvParams; channel counts must match x and weights.
        weights: (kh, kw, in_channels // groups, out_channels).
        bias: (out_channels,) if params.has_bias, else None.

    Returns:
        (n, ho, wo, out_channels) with ho, wo from conv_output_hw.
    """
    _check_conv_args(x, params, weights, bias)
    kh, kw = params.kernel
    sh, sw = params.stride
    g = params.groups

    if (kh, kw) == (1, 1):
        # Pointwise fast path: subsample then a single matmul per group.
        xs = x[:, ::sh, ::sw, :]
        n, ho, wo, cin = xs.shape
        if g == 1:
            y = xs.reshape(-1, cin) @ weights.reshape(cin, -1)
            y = y.reshape(n, ho, wo, params.out_channels)
        else:
            xg = xs.reshape(n, ho, wo, g, cin // g)
            wg = weights.reshape(cin // g, g, params.out_channels // g)
            y = np.einsum("nhwgc,cgo->nhwgo", xg, wg, optimize=True)
            y = y.reshape(n, ho, wo, params.out_channels)
    else:
        xp, _ = _pad_input(x, params)
        pat = _patches(xp, params.kernel, params.stride)
        n, ho, wo = pat.shape[:3]
        if g == 1:
            y = np.tensordot(pat, weights, axes=([3, 4, 5], [0, 1, 2]))
        else:
            cpg = params.in_channels // g
            opg = params.out_channels // g
            pg = pat.reshape(n, ho, wo, kh, kw, g, cpg)
            wg = weights.reshape(kh, kw, cpg, g, opg)
            y = np.einsum("nhwijgc,ijcgo->nhwgo", pg, wg, optimize=True)
            y = y.reshape(n, ho, wo, params.out_channels)
    y = np.ascontiguousarray(y, dtype=x.dtype)
    if params.has_bias:
        y += bias
    return y


def conv2d_backward(x, params, weights, dy):
    """Gradients of conv2d. Returns (dx, dweights, dbias); dbias is None
    when the conv has no bias. Patches are recomputed from x rather than
    cached, trading a little compute for memory."""
    _check_conv_args(x, params, weights, bias=None if not params.has_bias else
                     np.zeros(params.out_channels, x.dtype))
    kh, kw = params.kernel
    sh, sw = params.stride
    g = params.groups
    n, h, w, cin = x.shape
    cout = params.out_channels
    dy = np.ascontiguousarray(dy, dtype=x.dtype)

    dbias = dy.sum(axis=(0, 1, 2)) if params.has_bias else None

    xp, (pt, pl) = _pad_input(x, params)
    pat = _patches(xp, params.kernel, params.stride)
    ho, wo = pat.shape[1:3]
    if dy.shape != (n, ho, wo, cout):
        raise ShapeMismatchError(
            f"upstream gradient shape {dy.shape} does not match conv output "
            f"{(n, ho, wo, cout)}"
        )

    if g == 1:
        dw = np.tensordot(pat, dy, axes=([0, 1, 2], [0, 1, 2]))
    else:
        cpg = cin // g
        opg = cout // g
        pg = pat.reshape(n, ho, wo, kh, kw, g, cpg)
        dyg = dy.reshape(n, ho, wo, g, opg)
        dw = np.einsum("nhwijgc,nhwgo->ijcgo", pg, dyg, optimize=True)
        dw = dw.reshape(params.weight_shape)
    dw = np.ascontiguousarray(dw, dtype=x.dtype)

    dxp = np.zeros_like(xp)
    if g == 1:
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(dy, weights[i, j], axes=([3], [1]))
                dxp[:, i:i + sh * ho:sh, j:j + sw * wo:sw, :] += contrib
    else:
        cpg = cin // g
        opg = cout // g
        dyg = dy.reshape(n, ho, wo, g, opg)
        wg = weights.reshape(kh, kw, cpg, g, opg)
        for i in range(kh):
            for j in range(kw):
                contrib = np.einsum("nhwgo,cgo->nhwgc", dyg, wg[i, j],
                                    optimize=True)
                dxp[:, i:i + sh * ho:sh, j:j + sw * wo:sw, :] += (
                    contrib.reshape(n, ho, wo, cin))
    dx = dxp[:, pt:pt + h, pl:pl + w, :] if dxp.shape != x.shape else dxp
    return np.ascontiguousarray(dx), dw, dbias


@dataclass
class BatchNormParams:
    """Learned scale/shift plus running statistics for one channel axis.

    running_mean and running_var are updated in training mode with an
    exponential moving average: new = (1 - momentum) * old + momentum * batch.
    """

    channels: int
    epsilon: float = 1e-5
    momentum: float = 0.1
    dtype: type = np.float32
    gamma: np.ndarray = field(default=None, repr=False)
    beta: np.ndarray = field(default=None, repr=False)
    running_mean: np.ndarray = field(default=None, repr=False)
    running_var: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError(f"batchnorm channels must be positive, got {self.channels}")
        if not (0.0 < self.epsilon):
            raise ConfigError(f"batchnorm epsilon must be positive, got {self.epsilon}")
        if self.gamma is None:
            self.gamma = np.ones(self.channels, self.dtype)
        if self.beta is None:
            self.beta = np.zeros(self.channels, self.dtype)
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels, self.dtype)
        if self.running_var is None:
            self.running_var = np.ones(self.channels, self.dtype)


def batchnorm_train(x, gamma, beta, eps=1e-5):
    """Normalize per channel with batch statistics over (n, h, w).

    Returns (y, cache, batch_mean, batch_var); the caller owns running-stat
    updates. cache feeds batchnorm_backward.
    """
    _check_nhwc(x, "batchnorm input")
    if gamma.shape != (x.shape[3],) or beta.shape != (x.shape[3],):
        raise ShapeMismatchError(
            f"batchnorm scale/shift must have shape ({x.shape[3]},), got "
            f"{gamma.shape} and {beta.shape}"
        )
    mean = np.mean(x, axis=(0, 1, 2), dtype=np.float64)
    var = np.var(x, axis=(0, 1, 2), dtype=np.float64)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    mean = mean.astype(x.dtype)
    xhat = (x - mean) * inv_std
    y = xhat * gamma + beta
    cache = (xhat, inv_std, gamma)
    return y, cache, mean, var.astype(x.dtype)


def batchnorm_backward(dy, cache):
    """Gradients of batchnorm_train. Returns (dx, dgamma, dbeta)."""
    xhat, inv_std, gamma = cache
    m = xhat.shape[0] * xhat.shape[1] * xhat.shape[2]
    dgamma = np.sum(dy * xhat, axis=(0, 1, 2), dtype=np.float64).astype(dy.dtype)
    dbeta = np.sum(dy, axis=(0, 1, 2), dtype=np.float64).astype(dy.dtype)
    dxhat = dy * gamma
    # Standard closed form folding the mean/var chain rules together.
    dx = (inv_std / m) * (m * dxhat
                          - np.sum(dxhat, axis=(0, 1, 2))
                          - xhat * np.sum(dxhat * xhat, axis=(0, 1, 2)))
    return dx.astype(dy.dtype, copy=False), dgamma, dbeta


def batchnorm_infer(x, gamma, beta, running_mean, running_var, eps=1e-5):
    """Normalize with stored running statistics (no batch coupling)."""
    _check_nhwc(x, "batchnorm input")
    inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
    return (x - running_mean) * inv_std * gamma + beta


def batchnorm(x, params, mode="infer", update_stats=True):
    """Mode-dispatching wrapper over a BatchNormParams bundle."""
    if mode == "train":
        y, _, mean, var = batchnorm_train(x, params.gamma, params.beta,
                                          params.epsilon)
        if update_stats:
            m = params.momentum
            params.running_mean = ((1 - m) * params.running_mean + m * mean).astype(
                params.running_mean.dtype)
            params.running_var = ((1 - m) * params.running_var + m * var).astype(
                params.running_var.dtype)
        return y
    if mode == "infer":
        return batchnorm_infer(x, params.gamma, params.beta,
                               params.running_mean, params.running_var,
                               params.epsilon)
    raise ConfigError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    # Subgradient 0 at exactly zero.
    return dy * (x > 0)


def add(a, b):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add requires equal shapes, got {a.shape} vs {b.shape}")
    return a + b


def concat_channels(tensors):
    hw = {t.shape[:3] for t in tensors}
    if len(hw) != 1:
        raise ShapeMismatchError(
            f"concat requires matching batch/height/width, got {sorted(hw)}"
        )
    return np.concatenate(tensors, axis=3)


def split_channels(dy, widths):
    out = []
    start = 0
    for w in widths:
        out.append(dy[..., start:start + w])
        start += w
    return out


def replicate_channels(x, r):
    """Tile the whole channel block r times: (a, b) -> (a, b, a, b, ...)."""
    _check_nhwc(x, "replicate input")
    if not isinstance(r, int) or r < 1:
        raise ConfigError(f"replication factor must be a positive int, got {r}")
    return np.tile(x, (1, 1, 1, r))


def replicate_channels_backward(dy, r):
    n, h, w, rc = dy.shape
    if rc % r:
        raise ShapeMismatchError(
            f"replicated gradient has {rc} channels, not divisible by r={r}"
        )
    return dy.reshape(n, h, w, r, rc // r).sum(axis=3)


def global_avg_pool(x):
    """Mean over height and width: (n, h, w, c) -> (n, c)."""
    _check_nhwc(x, "pool input")
    return np.mean(x, axis=(1, 2), dtype=np.float64).astype(x.dtype)


def global_avg_pool_backward(dy, x_shape):
    n, h, w, c = x_shape
    scale = 1.0 / (h * w)
    return np.broadcast_to((dy * scale)[:, None, None, :], x_shape).astype(
        dy.dtype).copy()


def max_pool(x, kernel=(3, 3), stride=(2, 2), padding="same"):
    """Max over sliding windows. Padding uses -inf so it never wins."""
    _check_nhwc(x, "pool input")
    kernel = _pair(kernel, "pool kernel")
    stride = _pair(stride, "pool stride")
    xp = _pad_for_pool(x, kernel, padding)
    pat = _patches(xp, kernel, stride)
    return pat.max(axis=(3, 4))


def _pad_for_pool(x, kernel, padding):
    if padding == "valid":
        return x
    if padding != "same":
        raise ConfigError(f"padding must be 'same' or 'valid', got {padding!r}")
    kh, kw = kernel
    pt, pb = _same_pad_amounts(kh)
    pl, pr = _same_pad_amounts(kw)
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)),
                  constant_values=-np.inf)


def max_pool_backward(dy, x, kernel=(3, 3), stride=(2, 2), padding="same"):
    """Routes each output gradient to the first maximum in its window."""
    kernel = _pair(kernel, "pool kernel")
    stride = _pair(stride, "pool stride")
    kh, kw = kernel
    sh, sw = stride
    xp = _pad_for_pool(x, kernel, padding)
    pat = _patches(xp, kernel, stride)
    n, ho, wo, _, _, c = pat.shape
    flat = pat.reshape(n, ho, wo, kh * kw, c)
    idx = flat.argmax(axis=3)  # first occurrence wins ties
    ki, kj = idx // kw, idx % kw

    nn, hh, ww, cc = np.indices((n, ho, wo, c), sparse=False)
    rows = hh * sh + ki
    cols = ww * sw + kj
    dxp = np.zeros(xp.shape, dtype=dy.dtype)
    np.add.at(dxp, (nn, rows, cols, cc), dy)
    if padding == "same":
        pt, _ = _same_pad_amounts(kh)
        pl, _ = _same_pad_amounts(kw)
        h, w = x.shape[1:3]
        return dxp[:, pt:pt + h, pl:pl + w, :]
    return dxp


def dense(x, weights, bias=None):
    """Affine map on flattened features: (n, d) @ (d, k) + (k,)."""
    if x.ndim != 2:
        raise ShapeMismatchError(f"dense input must be rank 2, got {x.shape}")
    if weights.ndim != 2 or weights.shape[0] != x.shape[1]:
        raise ShapeMismatchError(
            f"dense weights {weights.shape} do not match input features {x.shape[1]}"
        )
    y = x @ weights
    if bias is not None:
        y = y + bias
    return y


def dense_backward(dy, x, weights, has_bias=True):
    dx = dy @ weights.T
    dw = x.T @ dy
    db = dy.sum(axis=0) if has_bias else None
    return dx, dw, db


def softmax(logits):
    """Row-wise softmax, stabilized by subtracting the row max."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels.

    Args:
        logits: (n, k) raw scores.
        labels: (n,) ints in [0, k).

    Returns:
        (loss, probs): scalar float and the (n, k) softmax probabilities.
    """
    if logits.ndim != 2:
        raise ShapeMismatchError(f"logits must be rank 2, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatchError(
            f"labels shape {labels.shape} does not match batch size {n}"
        )
    if labels.min() < 0 or labels.max() >= k:
        raise ConfigError(f"labels must lie in [0, {k}), got range "
                          f"[{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1))
    nll = lse - z[np.arange(n), labels]
    loss = float(np.mean(nll, dtype=np.float64))
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    return loss, probs


def softmax_xent_backward(probs, labels):
    """Gradient of the mean cross-entropy with respect to the logits."""
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return d / n
