"""Multiplication-free convolution.

A product ``x*w`` is approximated by ``mu_w * smin(x, w_tilde)`` where
``w_tilde = (mu_x / mu_w) * w`` brings both operands to the same mean
magnitude. Summed over a receptive field, a convolution then needs one
scalar multiply per output element instead of ``fh*fw*Cin``.

Training follows the approximate-forward / exact-backward scheme: the
forward pass runs on clipped operands with smin, the backward pass
differentiates the exact convolution of those same clipped operands and
masks the result with the clip gradient.
"""
from dataclasses import dataclass, field

import numpy as np

from minconv import kernels
from minconv.errors import DegenerateInputError, DimensionError, ZeroFilterError, ZeroInputStatisticsError
from minconv.kernels import smin as _smin_array
from minconv.tensor import Shape2D, col2im, cols_to_nchw, conv2d, im2col, nchw_to_cols

EXACT = "exact"
MIN_APPROX = "min_approx"
MODES = (EXACT, MIN_APPROX)
TRAIN = "train"
INFER = "infer"
PHASES = (TRAIN, INFER)

DEFAULT_GAMMA = 0.99


def normalize_mode(mode):
    """Accept ``approx`` as shorthand for ``min_approx``."""
    if mode == "approx":
        return MIN_APPROX
    if mode not in MODES:
        raise ValueError(f"unknown conv mode {mode!r}; expected one of {MODES + ('approx',)}")
    return mode


def smin(a, b):
    """Signed minimum, the replacement for ``a * b``.

    Same signs give ``min(|a|, |b|)``, differing signs give its negation.
    ``sign(0)`` counts as positive, so ``smin(x, 0) == 0``.
    Works on scalars and broadcastable arrays.
    """
    out = _smin_array(a, b)
    return out.item() if out.ndim == 0 else out


def clip(x, alpha):
    """Saturate to ``[-alpha, alpha]``."""
    if np.any(np.asarray(alpha) < 0):
        raise ValueError("clip bound must be non-negative")
    out = np.clip(x, -alpha, alpha)
    return out.item() if np.ndim(out) == 0 else out


def clip_grad(x, alpha):
    """Pass-through gradient of :func:`clip`: 1 on ``[-alpha, alpha]``, else 0."""
    if np.any(np.asarray(alpha) < 0):
        raise ValueError("clip bound must be non-negative")
    out = (np.abs(x) <= alpha).astype(np.result_type(x, np.float32) if np.ndim(x) else float)
    return out.item() if np.ndim(out) == 0 else out


@dataclass
class AbsMeanStats:
    """Mean-magnitude statistics for one conv layer.

    ``mu_w`` holds one value per output filter; ``mu_x_running`` is the
    exponentially averaged mean of ``|x|`` over the layer's input batches.
    """

    mu_w: np.ndarray
    mu_x_running: float = 0.0
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        self.mu_w = np.asarray(self.mu_w)
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if np.any(self.mu_w < 0) or self.mu_x_running < 0:
            raise ValueError("mean-magnitude statistics must be non-negative")


def filter_abs_mean(weights):
    """Per-filter ``mean(|w|)`` of a ``(Cout, ...)`` weight tensor."""
    return np.abs(weights).reshape(weights.shape[0], -1).mean(axis=1)


def rescale_weights(w_clipped, stats: AbsMeanStats, mu_x=None):
    """``w_tilde[k] = (mu_x / mu_w[k]) * w_clipped[k]``.

    ``mu_x`` defaults to the running input statistic.
    """
    mu_x = stats.mu_x_running if mu_x is None else mu_x
    mu_w = np.asarray(stats.mu_w)
    if mu_w.shape != (w_clipped.shape[0],):
        raise DimensionError(f"mu_w has shape {mu_w.shape}, expected ({w_clipped.shape[0]},)")
    if np.any(mu_w == 0):
        bad = np.flatnonzero(mu_w == 0).tolist()
        raise ZeroFilterError(f"filters {bad} have zero mean magnitude; rescaling is undefined")
    if mu_x == 0:
        raise ZeroInputStatisticsError("input mean magnitude is zero; rescaling is undefined")
    ratio = (mu_x / mu_w).astype(w_clipped.dtype)
    return w_clipped * ratio.reshape((-1,) + (1,) * (w_clipped.ndim - 1))


def update_running_mu(stats: AbsMeanStats, batch_x):
    """Fold one batch into the running input statistic.

    Returns ``(new_stats, batch_mean)``; the batch mean is what the current
    training step uses.
    """
    batch_x = np.asarray(batch_x)
    if batch_x.size == 0:
        raise DegenerateInputError("cannot take the mean magnitude of an empty batch")
    batch_mu = float(np.abs(batch_x).mean(dtype=np.float64))
    g = stats.gamma
    running = g * stats.mu_x_running + (1.0 - g) * batch_mu
    return AbsMeanStats(stats.mu_w.copy(), running, g), batch_mu


def approx_conv_cols(cols, w_tilde, mu_w):
    """Eq.-15 accumulation on an unfolded input; returns ``(rows, Cout)``."""
    acc = kernels.smin_accumulate(cols, w_tilde.reshape(w_tilde.shape[0], -1))
    kernels.count_scalar_mul(acc.size)
    return acc * mu_w.astype(acc.dtype)


def exact_conv_backward(grad_out, x_clipped, w_clipped, shape: Shape2D, cols=None, need_grad_x=True):
    """Gradients of the exact convolution ``z = x_clipped (*) w_clipped``.

    Returns ``(grad_x, grad_w)``; ``grad_x`` is None when ``need_grad_x`` is
    false. ``cols`` may pass a cached ``im2col(x_clipped)``.
    """
    n, _, h, w = x_clipped.shape
    oh, ow = shape.output_size(h, w)
    cout = w_clipped.shape[0]
    if grad_out.shape != (n, cout, oh, ow):
        raise DimensionError(f"grad_out shape {grad_out.shape} != expected {(n, cout, oh, ow)}")
    if cols is None:
        cols = im2col(x_clipped, shape)
    g2 = nchw_to_cols(grad_out)
    grad_w = (g2.T @ cols).reshape(w_clipped.shape)
    if not need_grad_x:
        return None, grad_w
    grad_cols = g2 @ w_clipped.reshape(cout, -1)
    grad_x = col2im(grad_cols, x_clipped.shape, shape)
    return grad_x, grad_w


@dataclass
class ApproxConvLayer:
    """Convolution with a switchable exact / min-approximate forward.

    ``forward`` in the ``train`` phase of a ``min_approx`` layer runs the
    per-batch steps: update the running ``mu_x``, clip the input to
    ``2*mu_x`` and each filter to ``2*mu_w[k]``, rescale to ``w_tilde`` and
    accumulate with smin. In the ``infer`` phase the running ``mu_x`` is
    frozen and inputs are not clipped.
    """

    weights: np.ndarray
    shape: Shape2D
    bias: np.ndarray = None
    stats: AbsMeanStats = None
    mode: str = EXACT
    phase: str = TRAIN
    # per-forward state consumed by backward
    w_clipped: np.ndarray = field(default=None, repr=False)
    w_tilde: np.ndarray = field(default=None, repr=False)
    mu_x: float = field(default=None, repr=False)
    _cache: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.mode = normalize_mode(self.mode)
        if self.weights.ndim != 4 or self.weights.shape[2:] != (self.shape.fh, self.shape.fw):
            raise DimensionError(f"weights {self.weights.shape} do not match {self.shape}")
        if self.bias is None:
            self.bias = np.zeros(self.weights.shape[0], dtype=self.weights.dtype)
        if self.stats is None:
            self.stats = AbsMeanStats(filter_abs_mean(self.weights))

    @property
    def out_channels(self):
        return self.weights.shape[0]

    def prepare(self, mu_x):
        """Clip the weights per filter and build ``w_tilde`` for input scale ``mu_x``."""
        mu_w = filter_abs_mean(self.weights)
        self.stats.mu_w = mu_w
        bound = (2.0 * mu_w).astype(self.weights.dtype).reshape(-1, 1, 1, 1)
        self.w_clipped = np.clip(self.weights, -bound, bound)
        self.mu_x = float(mu_x)
        self.w_tilde = rescale_weights(self.w_clipped, self.stats, mu_x=self.mu_x)
        return self.w_tilde

    def forward(self, x, phase=None):
        phase = self.phase if phase is None else phase
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        if x.ndim != 4 or x.shape[1] != self.weights.shape[1]:
            raise DimensionError(f"input {x.shape} incompatible with filters {self.weights.shape}")
        if phase == TRAIN:
            self.stats, batch_mu = update_running_mu(self.stats, x)
        if self.mode == EXACT:
            self._cache = {"x": x, "cols": im2col(x, self.shape), "x_mask": None}
            out2d = self._cache["cols"] @ self.weights.reshape(self.out_channels, -1).T
            kernels.count_conv_mul(out2d.size * self.weights[0].size)
            n, _, h, w = x.shape
            return cols_to_nchw(out2d + self.bias, n, *self.shape.output_size(h, w))
        if phase == TRAIN:
            mu_x = batch_mu
            x_mask = np.abs(x) <= 2.0 * mu_x
            x_in = np.clip(x, -2.0 * mu_x, 2.0 * mu_x).astype(x.dtype, copy=False)
        else:
            mu_x = self.stats.mu_x_running
            x_mask = None
            x_in = x
        self.prepare(mu_x)
        cols = im2col(x_in, self.shape)
        self._cache = {"x": x_in, "cols": cols, "x_mask": x_mask}
        n, _, h, w = x.shape
        out2d = approx_conv_cols(cols, self.w_tilde, self.stats.mu_w) + self.bias
        return cols_to_nchw(out2d, n, *self.shape.output_size(h, w))

    def backward(self, grad_out, need_grad_x=True):
        """Exact-convolution gradients masked by the clip gradients.

        Returns ``(grad_x, grad_w, grad_b)``.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        x_in, cols, x_mask = self._cache["x"], self._cache["cols"], self._cache["x_mask"]
        w_used = self.weights if self.mode == EXACT else self.w_clipped
        grad_x, grad_w = exact_conv_backward(grad_out, x_in, w_used, self.shape, cols=cols, need_grad_x=need_grad_x)
        if self.mode == MIN_APPROX:
            bound = 2.0 * self.stats.mu_w.reshape(-1, 1, 1, 1)
            grad_w = grad_w * (np.abs(self.weights) <= bound)
            if x_mask is not None and grad_x is not None:
                grad_x = grad_x * x_mask
        grad_b = grad_out.sum(axis=(0, 2, 3))
        return grad_x, grad_w.astype(self.weights.dtype, copy=False), grad_b


def approx_conv_forward(x, layer: ApproxConvLayer):
    """Forward a batch through ``layer`` using its current ``w_tilde``.

    For a ``min_approx`` layer the caller must already have clipped ``x``
    (train phase) and called ``layer.prepare``; the result is
    ``mu_w[k] * sum smin(x, w_tilde[k]) + b[k]``. For an ``exact`` layer
    this is the im2col convolution.
    """
    if x.ndim != 4 or x.shape[1] != layer.weights.shape[1]:
        raise DimensionError(f"input {x.shape} incompatible with filters {layer.weights.shape}")
    if layer.mode == EXACT:
        return conv2d(x, layer.weights, layer.shape, layer.bias)
    if layer.w_tilde is None:
        raise RuntimeError("layer.prepare(mu_x) must run before an approximate forward")
    n, _, h, w = x.shape
    out2d = approx_conv_cols(im2col(x, layer.shape), layer.w_tilde, layer.stats.mu_w) + layer.bias
    return cols_to_nchw(out2d, n, *layer.shape.output_size(h, w))
