"""Hot inner loops.

``smin_accumulate`` is the multiplication-free replacement for the
im2col matmul: ``out[r, k] = sum_t smin(cols[r, t], wt[k, t])``. It has a
numba implementation and a chunked numpy implementation; the module-level
name points at whichever ``minconv._backend`` selected.

The optional operation counter lets callers audit how many products and
smin evaluations a forward pass performs.
"""
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from minconv._backend import HAVE_NUMBA, USE_NUMBA, njit, prange


@dataclass
class OpCounter:
    conv_mul: int = 0
    smin: int = 0
    scalar_mul: int = 0
    per_layer: list = field(default_factory=list)

    def snapshot(self):
        return self.conv_mul, self.smin, self.scalar_mul


_active: list = []


@contextmanager
def counting():
    """Count conv-loop products, smin evaluations and residual scalar
    multiplies performed inside the ``with`` block."""
    counter = OpCounter()
    _active.append(counter)
    try:
        yield counter
    finally:
        _active.pop()


def count_conv_mul(n):
    for c in _active:
        c.conv_mul += int(n)


def count_smin(n):
    for c in _active:
        c.smin += int(n)


def count_scalar_mul(n):
    for c in _active:
        c.scalar_mul += int(n)


@njit(cache=True)
def smin_scalar(a, b):
    """Signed minimum: ``sign(a)*sign(b)*min(|a|, |b|)`` with sign(0) = +1."""
    aa = abs(a)
    bb = abs(b)
    m = aa if aa <= bb else bb
    if (a < 0) != (b < 0):
        return -m
    return m


def smin(a, b):
    """Elementwise signed minimum of two broadcastable arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    m = np.minimum(np.abs(a), np.abs(b))
    return np.where((a < 0) ^ (b < 0), -m, m)


# fastmath lets LLVM vectorise the select-and-add reduction; the
# reduction order is still fixed for a given build, so results are
# reproducible run to run.
@njit(parallel=True, fastmath=True, cache=True)
def _smin_accumulate_jit(cols, wt, out):
    rows, depth = cols.shape
    nfilt = wt.shape[0]
    zero = out.dtype.type(0)
    for r in prange(rows):
        for k in range(nfilt):
            acc = zero
            for t in range(depth):
                a = cols[r, t]
                b = wt[k, t]
                m = min(abs(a), abs(b))
                acc = acc - m if (a < 0) != (b < 0) else acc + m
            out[r, k] = acc
    return out


def _check(cols, wt):
    if cols.ndim != 2 or wt.ndim != 2 or cols.shape[1] != wt.shape[1]:
        from minconv.errors import DimensionError

        raise DimensionError(f"smin_accumulate operands {cols.shape} and {wt.shape} do not align")


def smin_accumulate_numba(cols, wt):
    _check(cols, wt)
    dtype = np.result_type(cols, wt)
    cols = np.ascontiguousarray(cols, dtype=dtype)
    wt = np.ascontiguousarray(wt, dtype=dtype)
    out = np.empty((cols.shape[0], wt.shape[0]), dtype=dtype)
    return _smin_accumulate_jit(cols, wt, out)


# elements of the (rows, filters, depth) broadcast materialised at once
_CHUNK_ELEMS = 1 << 22


def smin_accumulate_numpy(cols, wt):
    _check(cols, wt)
    dtype = np.result_type(cols, wt)
    rows, depth = cols.shape
    nfilt = wt.shape[0]
    out = np.empty((rows, nfilt), dtype=dtype)
    abs_w = np.abs(wt)[None]
    neg_w = (wt < 0)[None]
    step = max(1, _CHUNK_ELEMS // max(1, nfilt * depth))
    for start in range(0, rows, step):
        c = cols[start : start + step, None, :]
        m = np.minimum(np.abs(c), abs_w)
        np.negative(m, out=m, where=(c < 0) ^ neg_w)
        out[start : start + step] = m.sum(axis=2)
    return out


@njit(cache=True)
def _col2im_jit(blocks, out, stride):
    # blocks: (N, oh, ow, C, fh, fw); out: padded (N, C, H, W), accumulated in place
    n, oh, ow, c, fh, fw = blocks.shape
    for b in range(n):
        for u in range(oh):
            for v in range(ow):
                for ch in range(c):
                    for i in range(fh):
                        for j in range(fw):
                            out[b, ch, u * stride + i, v * stride + j] += blocks[b, u, v, ch, i, j]
    return out


def col2im_accumulate_numba(blocks, out, stride):
    return _col2im_jit(np.ascontiguousarray(blocks), out, stride)


def col2im_accumulate_numpy(blocks, out, stride):
    n, oh, ow, c, fh, fw = blocks.shape
    hi, wi = (oh - 1) * stride + 1, (ow - 1) * stride + 1
    # (N, C, fh, fw, oh, ow) so every offset slice below is contiguous
    t = np.ascontiguousarray(blocks.transpose(0, 3, 4, 5, 1, 2))
    for i in range(fh):
        for j in range(fw):
            out[:, :, i : i + hi : stride, j : j + wi : stride] += t[:, :, i, j]
    return out


def col2im_accumulate(blocks, out, stride):
    """Scatter-add unfolded receptive fields back into a padded image batch."""
    if USE_NUMBA:
        return col2im_accumulate_numba(blocks, out, stride)
    return col2im_accumulate_numpy(blocks, out, stride)


def smin_accumulate(cols, wt):
    """``out[r, k] = sum_t smin(cols[r, t], wt[k, t])`` on the active backend."""
    count_smin(cols.shape[0] * wt.shape[0] * wt.shape[1])
    if USE_NUMBA:
        return smin_accumulate_numba(cols, wt)
    return smin_accumulate_numpy(cols, wt)


__all__ = [
    "HAVE_NUMBA",
    "OpCounter",
    "col2im_accumulate",
    "col2im_accumulate_numba",
    "col2im_accumulate_numpy",
    "counting",
    "smin",
    "smin_accumulate",
    "smin_accumulate_numba",
    "smin_accumulate_numpy",
]
