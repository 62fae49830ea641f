"""Dense tensor helpers: receptive-field unfolding and the exact
convolution built on it.

Tensors are plain numpy arrays in NCHW layout; filters are
``(Cout, Cin, fh, fw)``. Unfolded rows list a receptive field channel-major,
then row-major inside each channel, so column ``c*fh*fw + i*fw + j`` holds
channel ``c`` at filter offset ``(i, j)``.
"""
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from minconv import kernels
from minconv.errors import DimensionError


@dataclass(frozen=True)
class Shape2D:
    """Filter geometry: extents, stride and symmetric zero padding."""

    fh: int
    fw: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.fh < 1 or self.fw < 1:
            raise DimensionError(f"filter extents must be >= 1, got {self.fh}x{self.fw}")
        if self.stride < 1:
            raise DimensionError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise DimensionError(f"padding must be >= 0, got {self.padding}")

    @classmethod
    def same(cls, fh, fw=None):
        """Stride-1 geometry that preserves spatial size (odd filters only)."""
        fw = fh if fw is None else fw
        if fh % 2 == 0 or fw % 2 == 0 or fh != fw:
            raise DimensionError("same padding needs a square, odd-sized filter")
        return cls(fh, fw, 1, fh // 2)

    def output_size(self, h, w):
        ph, pw = h + 2 * self.padding, w + 2 * self.padding
        if ph < self.fh or pw < self.fw:
            raise DimensionError(
                f"padded input {ph}x{pw} smaller than filter {self.fh}x{self.fw}"
            )
        return (ph - self.fh) // self.stride + 1, (pw - self.fw) // self.stride + 1


def _pad(x, p):
    if p == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return np.pad(x, widths)


def im2col(x, s: Shape2D):
    """Unfold a batch ``(N, C, H, W)`` into ``(N*outH*outW, C*fh*fw)``."""
    if x.ndim != 4:
        raise DimensionError(f"im2col expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    oh, ow = s.output_size(h, w)
    win = sliding_window_view(_pad(x, s.padding), (s.fh, s.fw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * s.stride + 1 : s.stride, : (ow - 1) * s.stride + 1 : s.stride]
    # (N, C, oh, ow, fh, fw) -> (N, oh, ow, C, fh, fw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * s.fh * s.fw)


def unfold(x, s: Shape2D):
    """Unfold one image ``(C, H, W)`` into ``(outH*outW, C*fh*fw)`` rows."""
    if x.ndim != 3:
        raise DimensionError(f"unfold expects a (C, H, W) image, got shape {x.shape}")
    return im2col(x[None], s)


def col2im(cols, x_shape, s: Shape2D):
    """Adjoint of :func:`im2col`: scatter-add rows back to ``x_shape``."""
    n, c, h, w = x_shape
    oh, ow = s.output_size(h, w)
    if cols.shape != (n * oh * ow, c * s.fh * s.fw):
        raise DimensionError(f"cols shape {cols.shape} does not match input {x_shape}")
    p = s.padding
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    kernels.col2im_accumulate(cols.reshape(n, oh, ow, c, s.fh, s.fw), out, s.stride)
    if p:
        out = out[:, :, p:-p, p:-p]
    return out


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def cols_to_nchw(out2d, n, oh, ow):
    """``(N*oh*ow, Cout)`` accumulator layout to NCHW."""
    return np.ascontiguousarray(out2d.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2))


def nchw_to_cols(y):
    n, c, oh, ow = y.shape
    return np.ascontiguousarray(y.transpose(0, 2, 3, 1)).reshape(n * oh * ow, c)


def _check_filters(x, weights):
    if weights.ndim != 4:
        raise DimensionError(f"filters must be (Cout, Cin, fh, fw), got {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} channels, filters expect {weights.shape[1]}")


def conv2d(x, weights, s: Shape2D, bias=None):
    """Exact convolution (cross-correlation) through im2col + matmul."""
    _check_filters(x, weights)
    if (weights.shape[2], weights.shape[3]) != (s.fh, s.fw):
        raise DimensionError(f"filter extents {weights.shape[2:]} differ from {s}")
    n, _, h, w = x.shape
    oh, ow = s.output_size(h, w)
    cols = im2col(x, s)
    wmat = weights.reshape(weights.shape[0], -1)
    kernels.count_conv_mul(cols.shape[0] * wmat.shape[0] * wmat.shape[1])
    out = matmul(cols, wmat.T)
    if bias is not None:
        out = out + bias
    return cols_to_nchw(out, n, oh, ow)
