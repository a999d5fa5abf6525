"""Seeded Gaussian, block and mixed noise fields.

Block noise of kernel size s averages an s x s window of iid Gaussian noise
on the torus:

    Block[s](eps)[y, x] = (1/s) * sum_{i,j < s} eps[y - i, x - j]

With per-entry variance sigma**2 in ``eps`` this has marginal variance
sigma**2 and covariance

    Cov(dx, dy) = sigma**2 / s**2 * max(0, s - dis(dx)) * max(0, s - dis(dy)),
    dis(d) = min(|d|, n - |d|)

where n is the axis length. The mixed noise used by the relay stage is

    (eps + alpha * Block[s](eps')) / sqrt(1 + alpha**2)

with eps, eps' independent, which keeps the variance at sigma**2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .spectral import check_field


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 1.0
    kernel: int = 4
    alpha: float = 0.15

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if int(self.kernel) != self.kernel or self.kernel < 1:
            raise ValueError(f"kernel must be a positive integer, got {self.kernel}")
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")


class RandomSource:
    """Deterministic Philox stream addressed by (seed, key path).

    ``spawn(i)`` derives an independent child stream, so work split across
    fields or sweep cells draws the same numbers regardless of scheduling.
    A single instance is stateful and must not be shared between threads.
    """

    def __init__(self, seed: int = 0, key: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def spawn(self, index: int) -> "RandomSource":
        return RandomSource(self.seed, self.key + (index,))

    def normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed}, key={self.key})"


def as_source(rng) -> RandomSource:
    if isinstance(rng, RandomSource):
        return rng
    if rng is None:
        return RandomSource(0)
    return RandomSource(int(rng))


def _shape(h: int, w: int, batch) -> tuple[int, ...]:
    if h < 1 or w < 1:
        raise ValueError(f"field shape must be positive, got {h}x{w}")
    if batch is None:
        return (h, w)
    if isinstance(batch, int):
        return (batch, h, w)
    return (*batch, h, w)


def gaussian_field(h: int, w: int, sigma: float, rng, batch=None) -> np.ndarray:
    """iid N(0, sigma**2) field of shape (*batch, h, w)."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    return sigma * as_source(rng).normal(_shape(h, w, batch))


def block_average(eps: np.ndarray, s: int) -> np.ndarray:
    """Apply Block[s] to an existing field (toroidal indexing on both axes)."""
    eps = check_field(eps, "noise")
    h, w = eps.shape[-2:]
    if s > min(h, w):
        raise ValueError(f"kernel {s} exceeds field size {h}x{w}")
    if s == 1:
        return eps.copy()
    rows = eps.copy()
    for i in range(1, s):
        rows += np.roll(eps, i, axis=-2)
    out = rows.copy()
    for j in range(1, s):
        out += np.roll(rows, j, axis=-1)
    return out / s


def block_average_adjoint(x: np.ndarray, s: int) -> np.ndarray:
    """Transpose of :func:`block_average` as a linear map."""
    x = np.asarray(x, dtype=np.float64)
    rows = x.copy()
    for i in range(1, s):
        rows += np.roll(x, -i, axis=-2)
    out = rows.copy()
    for j in range(1, s):
        out += np.roll(rows, -j, axis=-1)
    return out / s


def block_noise(h: int, w: int, spec: NoiseSpec, rng, batch=None) -> np.ndarray:
    if spec.kernel > min(h, w):
        raise ValueError(f"kernel {spec.kernel} exceeds field size {h}x{w}")
    eps = gaussian_field(h, w, spec.sigma, rng, batch)
    return block_average(eps, spec.kernel)


def toroidal_distance(d: int, n: int) -> int:
    d = abs(int(d)) % n
    return min(d, n - d)


def block_covariance_oracle(offset_x: int, offset_y: int, spec: NoiseSpec, h: int, w: int) -> float:
    """Analytic covariance of block noise at a pixel offset.

    ``offset_x`` runs along the width axis, ``offset_y`` along the height axis.
    """
    s = spec.kernel
    dx = toroidal_distance(offset_x, w)
    dy = toroidal_distance(offset_y, h)
    return spec.sigma**2 / s**2 * max(0, s - dx) * max(0, s - dy)


def mixed_noise(h: int, w: int, spec: NoiseSpec, rng, batch=None) -> np.ndarray:
    """(eps + alpha * Block[s](eps')) / sqrt(1 + alpha**2); eps is drawn first.

    With alpha == 0 the result equals ``gaussian_field`` on the same stream.
    """
    rng = as_source(rng)
    eps = gaussian_field(h, w, spec.sigma, rng, batch)
    if spec.alpha == 0:
        return eps
    blk = block_noise(h, w, spec, rng, batch)
    return (eps + spec.alpha * blk) / math.sqrt(1.0 + spec.alpha**2)


def mixed_noise_covariance(h: int, w: int, spec: NoiseSpec) -> np.ndarray:
    """Dense (h*w, h*w) pixel covariance of :func:`mixed_noise`."""
    n = h * w
    basis = np.eye(n).reshape(n, h, w)
    blk = block_average(basis, spec.kernel).reshape(n, n).T  # column c = Block(e_c)
    cov = (np.eye(n) + spec.alpha**2 * blk @ blk.T) / (1.0 + spec.alpha**2)
    return spec.sigma**2 * cov


def empirical_covariance(fields: np.ndarray, offset_x: int, offset_y: int) -> tuple[float, float]:
    """Torus-pooled covariance estimate at one offset and its standard error.

    Each field contributes the spatial mean of eps[y, x] * eps[y+dy, x+dx]
    (zero mean is known). These per-field means are iid across fields, so the
    standard error is their sample std over sqrt(n_fields).
    """
    fields = np.asarray(fields, dtype=np.float64)
    shifted = np.roll(fields, (-offset_y, -offset_x), axis=(-2, -1))
    per_field = (fields * shifted).mean(axis=(-2, -1)).ravel()
    n = per_field.size
    return float(per_field.mean()), float(per_field.std(ddof=1) / math.sqrt(n))



def per_field_autocovariance(fields: np.ndarray, radius: int) -> np.ndarray:
    """Spatial mean of eps[y, x] * eps[y+dy, x+dx] per field, for |dx|, |dy| <= radius.

    Shape (n_fields, 2r+1, 2r+1) indexed [b, dy + r, dx + r]; computed for all
    offsets at once with the FFT.
    """
    fields = np.asarray(fields, dtype=np.float64)
    h, w = fields.shape[-2:]
    spec = np.fft.rfft2(fields.reshape(-1, h, w))
    acf = np.fft.irfft2(spec * np.conj(spec), s=(h, w)) / (h * w)
    idx_y = np.arange(-radius, radius + 1) % h
    idx_x = np.arange(-radius, radius + 1) % w
    return acf[:, idx_y][:, :, idx_x]


def empirical_autocovariance(fields: np.ndarray, radius: int) -> tuple[np.ndarray, np.ndarray]:
    """All-offset version of :func:`empirical_covariance`: (mean, se) arrays."""
    per_field = per_field_autocovariance(fields, radius)
    n = per_field.shape[0]
    return per_field.mean(axis=0), per_field.std(axis=0, ddof=1) / math.sqrt(n)


def block_covariance_study(spec: NoiseSpec, size: int, n_fields: int, rng, radius: int = 2, chunk: int = 10_000):
    """Monte-Carlo covariance of block noise at all offsets within ``radius``.

    Fields are drawn in chunks from ``rng.spawn(i)`` to bound memory.
    Returns (mean, se, oracle), each (2r+1, 2r+1) indexed [dy + r, dx + r].
    """
    rng = as_source(rng)
    parts = []
    for i, start in enumerate(range(0, n_fields, chunk)):
        b = min(chunk, n_fields - start)
        parts.append(per_field_autocovariance(block_noise(size, size, spec, rng.spawn(i), b), radius))
    per_field = np.concatenate(parts)
    mean = per_field.mean(axis=0)
    se = per_field.std(axis=0, ddof=1) / math.sqrt(per_field.shape[0])
    r = np.arange(-radius, radius + 1)
    oracle = np.array([[block_covariance_oracle(dx, dy, spec, size, size) for dx in r] for dy in r])
    return mean, se, oracle
