"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_ckernels``.
Arrays are C-contiguous float32 or float64; outputs keep the input dtype.

Layout conventions
------------------
x      : (B, C, H, W) input maps
w      : (K, C, fh, fw) filters, cross-correlation (no kernel flip)
cols   : (B, C*fh*fw, OH*OW) patch matrix, row index ``c*fh*fw + i*fw + j``
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "numpy"


def im2col(x, fh, fw):
    B, C, H, W = x.shape
    oh, ow = H - fh + 1, W - fw + 1
    win = sliding_window_view(x, (fh, fw), axis=(2, 3))  # B,C,oh,ow,fh,fw
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * fh * fw, oh * ow)
    return np.ascontiguousarray(cols)


def col2im(dcols, x_shape, fh, fw):
    B, C, H, W = x_shape
    oh, ow = H - fh + 1, W - fw + 1
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    d = dcols.reshape(B, C, fh, fw, oh, ow)
    for i in range(fh):
        for j in range(fw):
            dx[:, :, i:i + oh, j:j + ow] += d[:, :, i, j]
    return dx


def conv2d_forward(x, w, b):
    """Valid cross-correlation. Returns ``(out, cols)``; keep cols for backward."""
    B, C, H, W = x.shape
    K, _, fh, fw = w.shape
    oh, ow = H - fh + 1, W - fw + 1
    cols = im2col(x, fh, fw)
    out = np.matmul(w.reshape(K, -1), cols)
    out += b[None, :, None]
    return out.reshape(B, K, oh, ow), cols


def conv2d_backward(dout, cols, w, x_shape, need_input=True):
    """Gradients of conv2d_forward. Batch terms are summed in index order."""
    K = w.shape[0]
    B = dout.shape[0]
    d2 = dout.reshape(B, K, -1)
    w2 = w.reshape(K, -1)
    dw = np.zeros_like(w2)
    for n in range(B):
        dw += d2[n] @ cols[n].T
    db = np.zeros(K, dtype=dout.dtype)
    for n in range(B):
        db += d2[n].sum(axis=1)
    dx = None
    if need_input:
        dcols = np.matmul(w2.T, d2)
        dx = col2im(dcols, x_shape, w.shape[2], w.shape[3])
    return dw.reshape(w.shape), db, dx


def tanh_avgpool_forward(z, size):
    """tanh followed by size x size boxcar pooling with stride ``size``.

    Trailing rows/cols not covered by a full block are dropped. Returns
    ``(pooled, act)`` where act = tanh(z) is kept for the backward pass.
    """
    B, K, H, W = z.shape
    ph, pw = H // size, W // size
    act = np.tanh(z)
    blocks = act[:, :, :ph * size, :pw * size].reshape(B, K, ph, size, pw, size)
    pooled = blocks.mean(axis=(3, 5))
    return pooled, act


def tanh_avgpool_backward(dpooled, act, size):
    B, K, ph, pw = dpooled.shape
    scale = dpooled.dtype.type(1.0 / (size * size))
    up = np.repeat(np.repeat(dpooled * scale, size, axis=2), size, axis=3)
    dz = np.zeros_like(act)
    dz[:, :, :ph * size, :pw * size] = up
    dz *= 1 - act * act
    return dz


def deform_argmax(m, coeffs, ax, ay):
    """Global max of the quadratic summed map, per sample.

    ``m`` is (B, h, w); the summed value at cell (x, y) is
    m + c1*(x-ax)**2 + c2*(y-ay)**2 + c3*(x-ax) + c4*(y-ay), evaluated
    left to right. Ties go to the first cell in row-major order.
    Returns ``(scores, locs)`` with locs an int64 (B, 2) array of (x, y).
    """
    B, h, w = m.shape
    dt = m.dtype.type
    c1, c2, c3, c4 = (dt(c) for c in coeffs)
    dx = (np.arange(h) - ax).astype(m.dtype)[:, None]
    dy = (np.arange(w) - ay).astype(m.dtype)[None, :]
    summed = m + c1 * (dx * dx) + c2 * (dy * dy) + c3 * dx + c4 * dy
    flat = summed.reshape(B, -1)
    idx = np.argmax(flat, axis=1)
    scores = flat[np.arange(B), idx]
    locs = np.stack([idx // w, idx % w], axis=1).astype(np.int64)
    return scores, locs
