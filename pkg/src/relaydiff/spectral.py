"""Orthonormal 2D DCT transforms and frequency-domain diagnostics.

Fields are plain numpy arrays whose last two axes are (H, W); any leading
axes (batch, channels) are carried along untouched. Coefficient (i, j) of a
frequency field sits at row i, column j, i.e. flat index i*W + j.

The DCT is the orthonormal type-II transform, so V^T V = I and

    sum(dct2(x)**2) == sum(x**2)

holds to round-off. It is computed as a separable pair of dense matrix
products, which is exact and fast enough for fields up to a few hundred
pixels on a side.

Radial spectra map coefficient (i, j) to the 1D frequency

    f = sqrt((pi*i/H)**2 + (pi*j/W)**2)   in [0, pi*sqrt(2))

and average the per-coefficient power inside uniform bins over
[0, pi*sqrt(2)].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

SNR_CAP = 1e12


class FieldError(ValueError):
    """Raised for malformed or non-finite field data."""


def check_field(x, name: str = "field") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise FieldError(f"{name} must have at least 2 dimensions, got shape {x.shape}")
    if x.shape[-1] < 1 or x.shape[-2] < 1:
        raise FieldError(f"{name} has an empty spatial axis: {x.shape}")
    if not np.all(np.isfinite(x)):
        raise FieldError(f"{name} contains NaN or Inf")
    return x


@lru_cache(maxsize=64)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix C with C[k, m] = a_k cos(pi (2m+1) k / 2n)."""
    if n < 1:
        raise ValueError("DCT size must be >= 1")
    k = np.arange(n)[:, None]
    m = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * m + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    c[0, :] = math.sqrt(1.0 / n)
    c.setflags(write=False)
    return c


def dct2(x) -> np.ndarray:
    """Orthonormal 2D DCT-II over the last two axes."""
    x = check_field(x)
    h, w = x.shape[-2:]
    return dct_matrix(h) @ x @ dct_matrix(w).T


def idct2(u) -> np.ndarray:
    """Inverse of :func:`dct2` (orthonormal DCT-III)."""
    u = check_field(u, "coefficients")
    h, w = u.shape[-2:]
    return dct_matrix(h).T @ u @ dct_matrix(w)


def _split_patches(x: np.ndarray, k: int) -> np.ndarray:
    h, w = x.shape[-2:]
    if h % k or w % k:
        raise FieldError(f"patch size {k} does not divide field shape {h}x{w}")
    return x.reshape(*x.shape[:-2], h // k, k, w // k, k)


def block_dct2(x, k: int) -> np.ndarray:
    """Per-patch orthonormal DCT on non-overlapping k x k patches.

    Frequency (a, b) of patch (p, q) is stored at (p*k + a, q*k + b), so a
    per-patch multiplier is the k x k multiplier tiled over the field.
    """
    x = check_field(x)
    c = dct_matrix(k)
    xb = _split_patches(x, k)
    ub = np.einsum("ai,...piqj,bj->...paqb", c, xb, c, optimize=True)
    return ub.reshape(x.shape)


def block_idct2(u, k: int) -> np.ndarray:
    u = check_field(u, "coefficients")
    c = dct_matrix(k)
    ub = _split_patches(u, k)
    xb = np.einsum("ai,...paqb,bj->...piqj", c, ub, c, optimize=True)
    return xb.reshape(u.shape)


def upsample_nearest(x, factor: int) -> np.ndarray:
    """Replicate every pixel into a factor x factor block."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsampling factor must be a positive integer, got {factor}")
    x = check_field(x)
    return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)


def downsample_mean(x, factor: int) -> np.ndarray:
    """Block-mean downsampling; the left inverse of :func:`upsample_nearest`."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"downsampling factor must be a positive integer, got {factor}")
    x = check_field(x)
    return _split_patches(x, factor).mean(axis=(-3, -1))


@dataclass(frozen=True)
class SpectrumCurve:
    """Radially binned 1D curve. Empty bins are omitted."""

    freq: np.ndarray
    power: np.ndarray
    counts: np.ndarray
    n_bins: int
    capped: int = 0

    def __len__(self) -> int:
        return len(self.freq)

    def to_csv(self) -> str:
        lines = ["freq,power"]
        lines += [f"{f:.10f},{p:.10e}" for f, p in zip(self.freq, self.power)]
        return "\n".join(lines) + "\n"


@lru_cache(maxsize=32)
def radial_frequency(h: int, w: int) -> np.ndarray:
    fi = np.pi * np.arange(h) / h
    fj = np.pi * np.arange(w) / w
    r = np.sqrt(fi[:, None] ** 2 + fj[None, :] ** 2)
    r.setflags(write=False)
    return r


@lru_cache(maxsize=32)
def _bin_index(h: int, w: int, n_bins: int) -> np.ndarray:
    r = radial_frequency(h, w)
    idx = np.floor(r / (np.pi * math.sqrt(2.0)) * n_bins).astype(np.int64)
    idx = np.clip(idx, 0, n_bins - 1)
    idx.setflags(write=False)
    return idx


def bin_values(values: np.ndarray, n_bins: int, capped: int = 0) -> SpectrumCurve:
    """Average a per-coefficient map (last two axes) over radial bins.

    Leading axes are averaged too, so passing a stack of per-field maps gives
    the corpus-mean curve.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape[-2:]
    idx = _bin_index(h, w, n_bins).ravel()
    flat = values.reshape(-1, h * w).mean(axis=0)
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=flat, minlength=n_bins)
    edges = np.linspace(0.0, np.pi * math.sqrt(2.0), n_bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    keep = counts > 0
    return SpectrumCurve(
        freq=centers[keep],
        power=sums[keep] / counts[keep],
        counts=counts[keep],
        n_bins=n_bins,
        capped=capped,
    )


def psd_curve(u, n_bins: int) -> SpectrumCurve:
    """Mean squared DCT coefficient per radial frequency bin.

    ``u`` holds DCT coefficients; leading axes are pooled into the mean.
    """
    u = check_field(u, "coefficients")
    return bin_values(u * u, n_bins)


def snr_curve(signal, noise, n_bins: int, cap: float = SNR_CAP) -> SpectrumCurve:
    """Mean of |signal / noise| per radial bin.

    Coefficients where the noise is exactly zero contribute ``cap``; the
    number of such coefficients is kept in ``SpectrumCurve.capped``.
    """
    signal = check_field(signal, "signal")
    noise = check_field(noise, "noise")
    if signal.shape != noise.shape:
        raise FieldError(f"shape mismatch: signal {signal.shape} vs noise {noise.shape}")
    a = np.abs(signal)
    b = np.abs(noise)
    zero = b == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(zero, cap, a / np.where(zero, 1.0, b))
    return bin_values(ratio, n_bins, capped=int(zero.sum()))
