"""Hand-differentiated layer kernels for variable-length 1D sequence models.

Every kernel works on float64 numpy arrays laid out as ``[batch, channels,
length]`` and takes an optional boolean ``mask`` of shape ``[batch, length]``
whose rows are a prefix of ``True`` followed by tail padding. Forward functions
return ``(output, cache)``; the matching ``*_backward`` consumes the cache.
"""

from __future__ import annotations

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


def _check_mask(mask, batch, length):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (batch, length):
        raise ValueError(f"mask shape {mask.shape} does not match input ({batch}, {length})")
    return mask


def same_padding(window):
    """Left/right zero padding that keeps the output as long as the input."""
    left = (window - 1) // 2
    return left, window - 1 - left


def _to_cm(x):
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64).transpose(1, 0, 2))


def _from_cm(x):
    return np.ascontiguousarray(x.transpose(1, 0, 2))


# The ``*_cm`` kernels below take channel-major ``[C, B, L]`` arrays; the model
# runs its convolution stack in that layout. The public ``[B, C, L]`` kernels
# wrap them.

# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def conv1d_forward_cm(x, kernel, bias, mask=None):
    C, B, L = x.shape
    c_out, c_in, w = kernel.shape
    if C != c_in:
        raise ValueError(f"conv1d input has {C} channels but kernel expects {c_in}")
    if L < 1:
        raise ValueError("conv1d needs length >= 1")
    mask = _check_mask(mask, B, L)
    left, _ = same_padding(w)
    lp = L + w - 1
    # one GEMM for all taps: z[k, o, b, t] = sum_c kernel[o, c, k] * xpad[c, b, t]
    xpad = np.zeros((C, B, lp))
    xpad[:, :, left:left + L] = x
    xpad = xpad.reshape(C, B * lp)
    taps = kernel.transpose(2, 0, 1).reshape(w * c_out, C)
    z = (taps @ xpad).reshape(w, c_out, B, lp)
    out = z[0, :, :, :L].copy()
    for k in range(1, w):
        out += z[k, :, :, k:k + L]
    out += bias[:, None, None]
    if mask is not None:
        out *= mask
    return out, (xpad, taps, mask, (C, B, L, w))


def conv1d_backward_cm(dout, cache, need_input_grad=True):
    xpad, taps, mask, (C, B, L, w) = cache
    c_out = taps.shape[0] // w
    lp = L + w - 1
    if mask is not None:
        dout = dout * mask
    dz = np.zeros((w, c_out, B, lp))
    for k in range(w):
        dz[k, :, :, k:k + L] = dout
    dz = dz.reshape(w * c_out, B * lp)
    dkernel = np.ascontiguousarray((dz @ xpad.T).reshape(w, c_out, C).transpose(1, 2, 0))
    dbias = dout.sum(axis=(1, 2))
    if not need_input_grad:
        return None, dkernel, dbias
    left, _ = same_padding(w)
    dx = (taps.T @ dz).reshape(C, B, lp)[:, :, left:left + L]
    return np.ascontiguousarray(dx), dkernel, dbias


def conv1d_forward(x, kernel, bias, mask=None):
    """Cross-correlate ``x`` [B, C_in, L] with ``kernel`` [C_out, C_in, w].

    Zero "same" padding keeps the length; output positions where the mask is
    False are forced to zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"conv1d expects a [B, C, L] input, got shape {x.shape}")
    out, cache = conv1d_forward_cm(_to_cm(x), kernel, bias, mask)
    return _from_cm(out), cache


def conv1d_backward(dout, cache, need_input_grad=True):
    dx, dkernel, dbias = conv1d_backward_cm(_to_cm(dout), cache, need_input_grad)
    return (None if dx is None else _from_cm(dx)), dkernel, dbias


# --------------------------------------------------------------------------
# batch normalization (statistics over valid positions only)
# --------------------------------------------------------------------------

def _valid(a, mask):
    # [C, B, L] -> [C, N_valid] in batch-major order, independent of padding width
    return a.reshape(a.shape[0], -1) if mask is None else a[:, mask]


def batchnorm_forward_cm(x, gamma, beta, running_mean, running_var, mask=None,
                         train=True, momentum=BN_MOMENTUM, eps=BN_EPS):
    C, B, L = x.shape
    mask = _check_mask(mask, B, L)
    n_valid = B * L if mask is None else int(mask.sum())
    if n_valid == 0:
        raise ValueError("batchnorm needs at least one valid position")
    if train:
        if n_valid < 2:
            raise ValueError("batchnorm in train mode needs at least 2 valid positions")
        xv = _valid(x, mask)
        mean = xv.mean(axis=1)
        var = xv.var(axis=1)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
    if mask is not None:
        xhat *= mask
    out = gamma[:, None, None] * xhat + beta[:, None, None]
    if mask is not None:
        out *= mask
    return out, (xhat, gamma, inv_std, mask, train, n_valid)


def batchnorm_backward_cm(dout, cache):
    xhat, gamma, inv_std, mask, train, n_valid = cache
    if mask is not None:
        dout = dout * mask
    dgamma = (dout * xhat).sum(axis=(1, 2))
    dbeta = dout.sum(axis=(1, 2))
    if not train:
        return dout * (gamma * inv_std)[:, None, None], dgamma, dbeta
    scale = (gamma * inv_std / n_valid)[:, None, None]
    dx = scale * (n_valid * dout - dbeta[:, None, None] - xhat * dgamma[:, None, None])
    if mask is not None:
        dx *= mask
    return dx, dgamma, dbeta


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mask=None,
                      train=True, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel normalization of ``x`` [B, C, L].

    In train mode the statistics come from the valid positions of this batch
    and ``running_mean``/``running_var`` are updated in place with an
    exponential moving average. In infer mode the running statistics are used.
    Padded positions come out as zero.
    """
    out, cache = batchnorm_forward_cm(_to_cm(x), gamma, beta, running_mean, running_var,
                                      mask, train, momentum, eps)
    return _from_cm(out), cache


def batchnorm_backward(dout, cache):
    dx, dgamma, dbeta = batchnorm_backward_cm(_to_cm(dout), cache)
    return _from_cm(dx), dgamma, dbeta


# --------------------------------------------------------------------------
# activations, pooling, dense, dropout
# --------------------------------------------------------------------------

def relu_forward(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0), x


def relu_backward(dout, cache):
    # subgradient at exactly 0 is taken as 0
    return dout * (cache > 0)


def kmax_forward_cm(x, mask, k):
    if k < 1:
        raise ValueError(f"k-max pooling needs k >= 1, got {k}")
    C, B, L = x.shape
    mask = _check_mask(mask, B, L)
    n_valid = np.full(B, L) if mask is None else mask.sum(axis=1)
    key = x if mask is None else np.where(mask, x, -np.inf)
    order = np.argsort(-key, axis=2, kind="stable")
    idx = np.full((C, B, k), L)
    take = min(k, L)
    idx[:, :, :take] = order[:, :, :take]
    slot_ok = np.arange(k)[None, :] < np.minimum(n_valid, k)[:, None]
    idx = np.where(slot_ok, idx, L)
    idx.sort(axis=2)
    xpad = np.concatenate([x, np.zeros((C, B, 1))], axis=2)
    return np.take_along_axis(xpad, idx, axis=2), (idx, (C, B, L))


def kmax_backward_cm(dout, cache):
    idx, (C, B, L) = cache
    dxpad = np.zeros((C, B, L + 1))
    np.put_along_axis(dxpad, idx, dout, axis=2)
    return dxpad[:, :, :L]


def kmax_forward(x, mask, k):
    """Pick the ``k`` largest valid values per (batch, channel), keeping order.

    ``x`` is [B, C, L]; the result is [B, C, k]. Ties go to the earlier
    position. Rows with fewer than ``k`` valid positions are completed with
    zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    out, cache = kmax_forward_cm(_to_cm(x), mask, k)
    return _from_cm(out), cache


def kmax_backward(dout, cache):
    return _from_cm(kmax_backward_cm(_to_cm(dout), cache))


def dense_forward(x, weights, bias):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ValueError(f"dense input shape {x.shape} incompatible with weights {weights.shape}")
    return x @ weights + bias, (x, weights)


def dense_backward(dout, cache):
    x, weights = cache
    return dout @ weights.T, x.T @ dout, dout.sum(axis=0)


def dropout_forward(x, rate, train, seed=None):
    """Inverted dropout; identity at inference. ``seed`` may be an int or a Generator."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if not train or rate == 0.0:
        return x, None
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    scale = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * scale, scale


def dropout_backward(dout, cache):
    return dout if cache is None else dout * cache


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``).

    Returns ``(loss, probabilities)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    B, F = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= F):
        raise ValueError(f"labels must lie in [0, {F})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    loss = -log_p[np.arange(B), labels].mean()
    return float(loss), np.exp(log_p)


def softmax_cross_entropy_backward(probs, labels):
    B = probs.shape[0]
    grad = probs.copy()
    grad[np.arange(B), labels] -= 1.0
    return grad / B


# --------------------------------------------------------------------------
# layer objects (uniform interface, used for gradient checks)
# --------------------------------------------------------------------------

class Layer:
    """Minimal stateful wrapper: ``forward(x, mask)`` then ``backward(dout)``.

    After ``backward`` the parameter gradients sit in ``self.grads`` under the
    same keys as ``self.params``.
    """

    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, mask=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class Conv1d(Layer):
    def __init__(self, in_channels, out_channels, window, rng=None):
        super().__init__()
        rng = np.random.default_rng(rng)
        limit = np.sqrt(6.0 / ((in_channels + out_channels) * window))
        self.params["kernel"] = rng.uniform(-limit, limit, (out_channels, in_channels, window))
        self.params["bias"] = np.zeros(out_channels)

    def forward(self, x, mask=None):
        out, self._cache = conv1d_forward(x, self.params["kernel"], self.params["bias"], mask)
        return out

    def backward(self, dout):
        dx, self.grads["kernel"], self.grads["bias"] = conv1d_backward(dout, self._cache)
        return dx


class BatchNorm1d(Layer):
    def __init__(self, channels, train=True):
        super().__init__()
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.train = train

    def forward(self, x, mask=None):
        out, self._cache = batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.running_mean, self.running_var, mask, train=self.train)
        return out

    def backward(self, dout):
        dx, self.grads["gamma"], self.grads["beta"] = batchnorm_backward(dout, self._cache)
        return dx


class ReLU(Layer):
    def forward(self, x, mask=None):
        out, self._cache = relu_forward(x)
        return out

    def backward(self, dout):
        return relu_backward(dout, self._cache)


class KMaxPool(Layer):
    def __init__(self, k):
        super().__init__()
        self.k = k

    def forward(self, x, mask=None):
        out, self._cache = kmax_forward(x, mask, self.k)
        return out

    def backward(self, dout):
        return kmax_backward(dout, self._cache)


class Dense(Layer):
    def __init__(self, n_in, n_out, rng=None):
        super().__init__()
        rng = np.random.default_rng(rng)
        limit = np.sqrt(6.0 / (n_in + n_out))
        self.params["weights"] = rng.uniform(-limit, limit, (n_in, n_out))
        self.params["bias"] = np.zeros(n_out)

    def forward(self, x, mask=None):
        out, self._cache = dense_forward(x, self.params["weights"], self.params["bias"])
        return out

    def backward(self, dout):
        dx, self.grads["weights"], self.grads["bias"] = dense_backward(dout, self._cache)
        return dx


class Dropout(Layer):
    """Dropout with a fixed seed, so repeated forwards reuse one mask."""

    def __init__(self, rate, seed=0, train=True):
        super().__init__()
        self.rate, self.seed, self.train = rate, seed, train

    def forward(self, x, mask=None):
        out, self._cache = dropout_forward(x, self.rate, self.train, self.seed)
        return out

    def backward(self, dout):
        return dropout_backward(dout, self._cache)


class SoftmaxCrossEntropy(Layer):
    """Loss layer; ``forward`` returns the scalar loss as a 0-d array."""

    def __init__(self, labels):
        super().__init__()
        self.labels = np.asarray(labels)

    def forward(self, x, mask=None):
        loss, self._probs = softmax_cross_entropy(x, self.labels)
        return np.asarray(loss)

    def backward(self, dout):
        return float(dout) * softmax_cross_entropy_backward(self._probs, self.labels)


def finite_difference_check(layer, x, mask=None, eps=1e-5, floor=1e-6, seed=0):
    """Largest relative gap between analytic and central-difference gradients.

    The scalar probed is ``sum(layer(x) * R)`` for a fixed random ``R``; every
    component of the input and of each parameter is perturbed by ``±eps``.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    x = np.array(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    out = layer.forward(x, mask)
    proj = rng.standard_normal(out.shape)
    analytic = {"__input__": layer.backward(proj)}
    analytic.update({k: v.copy() for k, v in layer.grads.items()})
    targets = {"__input__": x, **layer.params}

    def objective():
        return float(np.sum(layer.forward(x, mask) * proj))

    worst = 0.0
    for name, arr in targets.items():
        numeric = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            orig = arr[i]
            arr[i] = orig + eps
            f_plus = objective()
            arr[i] = orig - eps
            f_minus = objective()
            arr[i] = orig
            numeric[i] = (f_plus - f_minus) / (2 * eps)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst
