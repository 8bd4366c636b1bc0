"""Tensor-level building blocks of the detector network.

Feature maps are numpy arrays shaped ``(C, H, W)`` for a single sample or
``(B, C, H, W)`` for a batch. "Convolution" means cross-correlation
throughout: filters are never flipped.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels

BCE_EPS = 1e-7


@dataclass
class FilterBank:
    weights: np.ndarray  # (K, C, fh, fw)
    biases: np.ndarray  # (K,)

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[0] < 1:
            raise ValueError(f"weights must be (K>=1, C, fh, fw), got {self.weights.shape}")
        if self.biases.shape != (self.weights.shape[0],):
            raise ValueError("one bias per filter required")

    @property
    def count(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]


def _as_batch(x):
    x = np.ascontiguousarray(x)
    return (x[None], True) if x.ndim == 3 else (x, False)


def conv2d_valid(x, bank):
    """Valid cross-correlation of a (C,H,W) or (B,C,H,W) input with a bank.

    out[k](y, x) = bias[k] + sum_{c,i,j} in[c](y+i, x+j) * w[k, c, i, j]
    """
    xb, single = _as_batch(x)
    w = np.ascontiguousarray(bank.weights, dtype=xb.dtype)
    b = np.ascontiguousarray(bank.biases, dtype=xb.dtype)
    _, C, H, W = xb.shape
    K, Cw, fh, fw = w.shape
    if Cw != C:
        raise ValueError(f"bank expects {Cw} input channels, input has {C}")
    if fh > H or fw > W:
        raise ValueError(f"filter {fh}x{fw} larger than input {H}x{W}")
    out, _ = kernels.conv2d_forward(xb, w, b)
    return out[0] if single else out


def avg_pool_boxcar(x, size=4, stride=4):
    """Mean over size x size blocks at the given stride; partial blocks dropped."""
    x = np.asarray(x)
    xb, single = _as_batch(x if x.dtype.kind == "f" else x.astype(np.float64))
    B, C, H, W = xb.shape
    if H < size or W < size:
        raise ValueError(f"input {H}x{W} smaller than pooling block {size}")
    oh, ow = (H - size) // stride + 1, (W - size) // stride + 1
    out = np.empty((B, C, oh, ow), dtype=xb.dtype)
    for i in range(oh):
        for j in range(ow):
            out[:, :, i, j] = xb[:, :, i * stride:i * stride + size,
                                 j * stride:j * stride + size].mean(axis=(2, 3))
    return out[0] if single else out


def activation(x):
    """Hidden nonlinearity (tanh)."""
    return np.tanh(x)


def output_sigmoid(z):
    """Logistic function, evaluated without overflow for large |z|."""
    z = np.asarray(z)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e))[()]


def bce_loss(y_hat, y, eps=BCE_EPS):
    """Binary cross-entropy with y_hat clamped to [eps, 1 - eps]."""
    p = np.clip(y_hat, eps, 1 - eps)
    return -(y * np.log(p) + (1 - y) * np.log(1 - p))


def bce_grad(y_hat, y, eps=BCE_EPS):
    """d bce / d y_hat; zero where the clamp is active."""
    y_hat = np.asarray(y_hat)
    inside = (y_hat > eps) & (y_hat < 1 - eps)
    safe = np.clip(y_hat, eps, 1 - eps)
    return np.where(inside, -y / safe + (1 - y) / (1 - safe), 0.0).astype(y_hat.dtype)


# 8 orientations x 4 scales x 2 phases = 64 filters
GABOR_ORIENTATIONS = 8
GABOR_SCALES = ((1.2, 3.5), (1.8, 5.0), (2.4, 7.0), (3.0, 9.0))  # (sigma, wavelength)
GABOR_PHASES = (0.0, np.pi / 2)
GABOR_SETTINGS = tuple((s, lam, ph) for s, lam in GABOR_SCALES for ph in GABOR_PHASES)
GABOR_ASPECT = 0.7


def gabor_kernel(size_h, size_w, theta, sigma, wavelength, phase, aspect=GABOR_ASPECT):
    """Real Gabor function sampled on a centered size_h x size_w grid.

    g = exp(-(u^2 + aspect^2 v^2) / (2 sigma^2)) * cos(2 pi u / wavelength + phase)
    with u = x cos(theta) + y sin(theta), v = -x sin(theta) + y cos(theta).

    Turning theta by pi negates u and v, so the even (phase 0) kernel is
    unchanged and the odd (phase pi/2) kernel flips sign.
    """
    ys = np.arange(size_h) - (size_h - 1) / 2.0
    xs = np.arange(size_w) - (size_w - 1) / 2.0
    y, x = np.meshgrid(ys, xs, indexing="ij")
    u = x * np.cos(theta) + y * np.sin(theta)
    v = -x * np.sin(theta) + y * np.cos(theta)
    env = np.exp(-(u ** 2 + (aspect * v) ** 2) / (2 * sigma ** 2))
    return env * np.cos(2 * np.pi * u / wavelength + phase)


def _zero_mean_unit_norm(w):
    w = w - w.mean()
    return w / np.linalg.norm(w)


def gabor_bank(count=64, f_h=9, f_w=9, in_channels=3):
    """Deterministic Gabor initialization for the first convolution.

    Filter k uses orientation ``(k // 8) * pi / 8`` and the ``k % 8``-th
    (sigma, wavelength, phase) setting; the same kernel is copied to every
    input channel, then the whole filter is made zero-mean, unit-norm.
    """
    per_orient = len(GABOR_SETTINGS)
    if count != GABOR_ORIENTATIONS * per_orient:
        raise ValueError(f"count must be {GABOR_ORIENTATIONS * per_orient} "
                         f"({GABOR_ORIENTATIONS} orientations x {per_orient} settings)")
    w = np.empty((count, in_channels, f_h, f_w))
    for k in range(count):
        theta = (k // per_orient) * np.pi / GABOR_ORIENTATIONS
        sigma, lam, phase = GABOR_SETTINGS[k % per_orient]
        g = gabor_kernel(f_h, f_w, theta, sigma, lam, phase)
        w[k] = _zero_mean_unit_norm(np.repeat(g[None], in_channels, axis=0))
    return FilterBank(w, np.zeros(count))


def glorot_uniform(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)
