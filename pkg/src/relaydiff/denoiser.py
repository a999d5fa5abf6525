"""Denoisers D(x_t, sigma) -> estimate of the clean field.

Every denoiser here is a callable ``D(x, sigma, label=None)`` working on
pixel fields of shape (..., H, W). ``sigma`` may be a scalar or one value per
leading batch item.

Three families:

* :class:`GaussianDenoiser` - exact posterior mean for a Gaussian prior that
  is diagonal in a DCT basis (the oracle used to verify the samplers).
* :class:`ConvDenoiser` - a three-layer 3x3 convolutional net with EDM
  preconditioning and hand-written backpropagation.
* :class:`GuidedDenoiser` - classifier-free guidance around any of the above.
"""

from __future__ import annotations

import io
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import spectral
from .blurschedule import (
    BlurOperator,
    ScheduleConfig,
    forward_corrupt,
    operator_at,
    time_from_sigma,
    truncated_sigma,
)
from .noise import mixed_noise, mixed_noise_covariance

SIGMA_DATA = 0.5


def _sigma_array(sigma, batch_shape) -> np.ndarray:
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(~(s > 0)):
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if s.ndim == 0:
        return s
    return s.reshape(s.shape + (1, 1))


def precondition_coeffs(sigma, sigma_data: float = SIGMA_DATA):
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(~(s > 0)):
        raise ValueError(f"sigma must be > 0, got {sigma}")
    denom = s**2 + sigma_data**2
    c_skip = sigma_data**2 / denom
    c_out = s * sigma_data / np.sqrt(denom)
    c_in = 1.0 / np.sqrt(denom)
    return c_skip, c_out, c_in


def precondition(raw, x, sigma, sigma_data: float = SIGMA_DATA) -> np.ndarray:
    """D = c_skip(sigma) * x + c_out(sigma) * raw."""
    raw = np.asarray(raw, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if raw.shape != x.shape:
        raise spectral.FieldError(f"shape mismatch: {raw.shape} vs {x.shape}")
    s = _sigma_array(sigma, x.shape[:-2])
    c_skip, c_out, _ = precondition_coeffs(s, sigma_data)
    return c_skip * x + c_out * raw


def cfg_combine(cond, uncond, w: float) -> np.ndarray:
    cond = np.asarray(cond, dtype=np.float64)
    uncond = np.asarray(uncond, dtype=np.float64)
    if cond.shape != uncond.shape:
        raise spectral.FieldError(f"shape mismatch: {cond.shape} vs {uncond.shape}")
    return uncond + w * (cond - uncond)


# ---------------------------------------------------------------------------
# Gaussian oracle


@dataclass(frozen=True, eq=False)
class GaussianToyPrior:
    """u_0 ~ N(mean, diag(var)) in a DCT basis.

    ``patch=None`` selects the global DCT, an integer k the per-patch DCT.
    """

    mean: np.ndarray
    var: np.ndarray
    patch: int | None = None

    def __post_init__(self):
        if self.mean.shape != self.var.shape:
            raise ValueError("prior mean and variance shapes differ")
        if np.any(~(self.var > 0)):
            raise ValueError("prior variances must be strictly positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mean.shape

    def to_freq(self, x):
        if self.patch is None:
            return spectral.dct2(x)
        return spectral.block_dct2(x, self.patch)

    def from_freq(self, u):
        if self.patch is None:
            return spectral.idct2(u)
        return spectral.block_idct2(u, self.patch)

    def sample(self, rng, n: int) -> np.ndarray:
        h, w = self.shape
        z = rng.normal((n, h, w))
        return self.from_freq(self.mean + np.sqrt(self.var) * z)

    def pixel_mean(self) -> np.ndarray:
        return self.from_freq(self.mean)


def analytic_denoiser(prior: GaussianToyPrior, u_t, sigma: float, blur: BlurOperator | None = None):
    """Per-frequency posterior mean of u_0 given u_t = d * u_0 + sigma * eps.

    E[u_0 | u_t] = mu + c d / (c d**2 + sigma**2) * (u_t - d mu)
    """
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    d = 1.0 if blur is None else blur.decay
    c, mu = prior.var, prior.mean
    gain = c * d / (c * d * d + sigma**2)
    return mu + gain * (u_t - d * mu)


class GaussianDenoiser:
    """Exact posterior-mean denoiser for a :class:`GaussianToyPrior`.

    The blur at a given sigma is recovered by inverting the stage schedule.
    With white noise (alpha == 0) and the prior diagonal in the blur basis,
    the posterior is per-frequency; otherwise it is solved densely using the
    mixed-noise covariance expressed in the prior basis.
    """

    def __init__(self, prior: GaussianToyPrior, cfg: ScheduleConfig):
        self.prior = prior
        self.cfg = cfg
        h, w = prior.shape
        probe = operator_at(1.0, cfg, h, w)
        if cfg.blurs and probe.patch != prior.patch:
            raise ValueError("prior basis must match the blur basis of a blurring stage")
        self.white = cfg.noise.alpha == 0
        self._noise_cov = None
        if not self.white:
            self._noise_cov = self._freq_noise_cov()

    def _freq_noise_cov(self) -> np.ndarray:
        h, w = self.prior.shape
        n = h * w
        cpix = mixed_noise_covariance(h, w, self.cfg.unit_noise)
        basis = self.prior.to_freq(np.eye(n).reshape(n, h, w)).reshape(n, n)  # row p = V^T e_p
        return basis.T @ cpix @ basis

    def blur_at(self, sigma: float) -> BlurOperator:
        t = min(max(time_from_sigma(sigma, self.cfg), 0.0), 1.0)
        h, w = self.prior.shape
        return operator_at(t, self.cfg, h, w)

    @lru_cache(maxsize=4)
    def _dense_gain(self, sigma: float) -> np.ndarray:
        d = self.blur_at(sigma).decay.ravel()
        c = self.prior.var.ravel()
        m = np.diag(c * d * d) + sigma**2 * self._noise_cov
        return np.linalg.solve(m, np.diag(c * d))  # K^T

    def __call__(self, x, sigma, label=None) -> np.ndarray:
        x = spectral.check_field(x)
        sig = np.asarray(sigma, dtype=np.float64)
        if sig.ndim:
            if np.all(sig == sig.flat[0]):
                sig = sig.flat[0]
            else:
                return np.stack([self(xi, si) for xi, si in zip(x, sig)])
        sig = float(sig)
        u = self.prior.to_freq(x)
        blur = self.blur_at(sig)
        if self.white:
            return self.prior.from_freq(analytic_denoiser(self.prior, u, sig, blur))
        h, w = self.prior.shape
        mu = self.prior.mean.ravel()
        d = blur.decay.ravel()
        r = u.reshape(-1, h * w) - d * mu
        uh = mu + r @ self._dense_gain(sig)
        return self.prior.from_freq(uh.reshape(u.shape))

    def posterior_variance(self, sigma: float) -> np.ndarray:
        """Per-frequency posterior variance (white-noise case)."""
        d = self.blur_at(sigma).decay
        c = self.prior.var
        return c * sigma**2 / (c * d * d + sigma**2)


class GuidedDenoiser:
    """uncond + w * (cond - uncond) around a class-conditional denoiser."""

    def __init__(self, base, scale: float):
        self.base = base
        self.scale = scale

    def __call__(self, x, sigma, label=None):
        if label is None:
            return self.base(x, sigma, None)
        return cfg_combine(self.base(x, sigma, label), self.base(x, sigma, None), self.scale)


class CountingDenoiser:
    """Wraps a denoiser and counts calls."""

    def __init__(self, base):
        self.base = base
        self.calls = 0

    def __call__(self, x, sigma, label=None):
        self.calls += 1
        return self.base(x, sigma, label)


# ---------------------------------------------------------------------------
# tiny conv net


def _conv3(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Circular 3x3 cross-correlation. a: (B, Ci, H, W), w: (Co, Ci, 3, 3)."""
    out = None
    for dy in range(3):
        for dx in range(3):
            s = np.roll(a, (1 - dy, 1 - dx), axis=(2, 3))
            term = np.einsum("bchw,oc->bohw", s, w[:, :, dy, dx], optimize=True)
            out = term if out is None else out + term
    return out


def _conv3_backward(a: np.ndarray, w: np.ndarray, g: np.ndarray):
    gw = np.empty_like(w)
    ga = np.zeros_like(a)
    for dy in range(3):
        for dx in range(3):
            s = np.roll(a, (1 - dy, 1 - dx), axis=(2, 3))
            gw[:, :, dy, dx] = np.einsum("bohw,bchw->oc", g, s, optimize=True)
            back = np.einsum("bohw,oc->bchw", g, w[:, :, dy, dx], optimize=True)
            ga += np.roll(back, (dy - 1, dx - 1), axis=(2, 3))
    return ga, gw


PARAM_ORDER = ("w1", "b1", "emb_sigma", "emb_class", "w2", "b2", "w3", "b3")
MAX_CLASSES = 8
MAX_PARAMS = 50_000


class ConvDenoiser:
    """conv3x3 -> tanh -> conv3x3 -> tanh -> conv3x3, wrapped in EDM preconditioning.

    The first layer also receives ``emb_sigma * ln(sigma)/4`` and, for
    labelled inputs, the row of ``emb_class`` for that label. Label -1 (or
    ``None``) means unconditional.
    """

    def __init__(self, params: dict[str, np.ndarray], sigma_data: float = SIGMA_DATA):
        missing = [k for k in PARAM_ORDER if k not in params]
        if missing:
            raise ValueError(f"missing parameters: {missing}")
        self.params = OrderedDict((k, np.asarray(params[k], dtype=np.float64)) for k in PARAM_ORDER)
        self.sigma_data = float(sigma_data)
        if self.n_classes > MAX_CLASSES:
            raise ValueError(f"at most {MAX_CLASSES} classes supported")
        if self.n_params > MAX_PARAMS:
            raise ValueError(f"parameter count {self.n_params} exceeds {MAX_PARAMS}")

    @classmethod
    def init(cls, rng, channels: int = 16, n_classes: int = 0, sigma_data: float = SIGMA_DATA):
        c = channels

        def he(shape, fan_in):
            return rng.normal(shape) * math.sqrt(1.0 / fan_in)

        params = {
            "w1": he((c, 1, 3, 3), 9),
            "b1": np.zeros(c),
            "emb_sigma": he((c,), 1),
            "emb_class": he((n_classes, c), 1) * 0.1,
            "w2": he((c, c, 3, 3), 9 * c),
            "b2": np.zeros(c),
            "w3": he((1, c, 3, 3), 9 * c) * 0.1,
            "b3": np.zeros(1),
        }
        return cls(params, sigma_data)

    @property
    def n_classes(self) -> int:
        return self.params["emb_class"].shape[0]

    @property
    def channels(self) -> int:
        return self.params["b1"].shape[0]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def _labels(self, label, b: int) -> np.ndarray | None:
        if label is None:
            return None
        lab = np.broadcast_to(np.asarray(label, dtype=np.int64), (b,))
        if np.any(lab >= self.n_classes) or np.any(lab < -1):
            raise ValueError(f"label out of range for {self.n_classes} classes: {label}")
        return lab

    def _forward(self, x, sigma, label):
        p = self.params
        x = spectral.check_field(x)
        squeeze = x.ndim == 2
        xb = x[None] if squeeze else x.reshape(-1, *x.shape[-2:])
        b = xb.shape[0]
        sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (b,))
        c_skip, c_out, c_in = precondition_coeffs(sig, self.sigma_data)
        c_noise = np.log(sig) / 4.0
        a0 = (c_in[:, None, None] * xb)[:, None]
        z1 = _conv3(a0, p["w1"]) + p["b1"][None, :, None, None]
        z1 = z1 + (c_noise[:, None] * p["emb_sigma"][None, :])[:, :, None, None]
        lab = self._labels(label, b)
        if lab is not None:
            onehot = np.zeros((b, self.n_classes))
            on = lab >= 0
            onehot[np.nonzero(on)[0], lab[on]] = 1.0
            z1 = z1 + (onehot @ p["emb_class"])[:, :, None, None]
        else:
            onehot = None
        h1 = np.tanh(z1)
        h2 = np.tanh(_conv3(h1, p["w2"]) + p["b2"][None, :, None, None])
        raw = (_conv3(h2, p["w3"]) + p["b3"][None, :, None, None])[:, 0]
        out = c_skip[:, None, None] * xb + c_out[:, None, None] * raw
        cache = (a0, h1, h2, c_out, c_noise, onehot)
        out = out[0] if squeeze else out.reshape(x.shape)
        return out, cache

    def __call__(self, x, sigma, label=None) -> np.ndarray:
        return self._forward(x, sigma, label)[0]

    def loss_and_grad(self, x_t, sigma, target, label=None):
        """Mean squared error of D(x_t, sigma) against ``target`` and its gradients."""
        p = self.params
        out, (a0, h1, h2, c_out, c_noise, onehot) = self._forward(x_t, sigma, label)
        target = np.asarray(target, dtype=np.float64)
        diff = out - target
        loss = float(np.mean(diff**2))
        g_out = (2.0 / diff.size) * diff.reshape(-1, *diff.shape[-2:])
        g_raw = (c_out[:, None, None] * g_out)[:, None]
        grads = {}
        grads["b3"] = g_raw.sum(axis=(0, 2, 3))
        g_h2, grads["w3"] = _conv3_backward(h2, p["w3"], g_raw)
        g_z2 = g_h2 * (1.0 - h2**2)
        grads["b2"] = g_z2.sum(axis=(0, 2, 3))
        g_h1, grads["w2"] = _conv3_backward(h1, p["w2"], g_z2)
        g_z1 = g_h1 * (1.0 - h1**2)
        grads["b1"] = g_z1.sum(axis=(0, 2, 3))
        per_chan = g_z1.sum(axis=(2, 3))  # (B, C)
        grads["emb_sigma"] = c_noise @ per_chan
        grads["emb_class"] = (
            onehot.T @ per_chan if onehot is not None else np.zeros_like(p["emb_class"])
        )
        _, grads["w1"] = _conv3_backward(a0, p["w1"], g_z1)
        return loss, OrderedDict((k, grads[k]) for k in PARAM_ORDER)

    def copy(self) -> "ConvDenoiser":
        return ConvDenoiser({k: v.copy() for k, v in self.params.items()}, self.sigma_data)

    def save(self, path) -> None:
        tensors = OrderedDict(self.params)
        tensors["sigma_data"] = np.array(self.sigma_data)
        Path(path).write_bytes(encode_checkpoint(tensors))

    @classmethod
    def load(cls, path) -> "ConvDenoiser":
        tensors = decode_checkpoint(Path(path).read_bytes())
        sd = float(tensors.pop("sigma_data", SIGMA_DATA))
        return cls(tensors, sd)


# ---------------------------------------------------------------------------
# loss


def corrupt(x, t, cfg: ScheduleConfig, rng):
    """Forward corruption for a batch with scalar or per-item t. Returns (x_t, sigma)."""
    x = spectral.check_field(x)
    t_arr = np.asarray(t, dtype=np.float64)
    if t_arr.ndim == 0:
        x_t, _, sigma = forward_corrupt(x, float(t_arr), cfg, rng, return_parts=True)
        return x_t, sigma
    # one noise draw for the whole batch, then per-item blur and scale
    h, w = x.shape[-2:]
    if t_arr.shape != x.shape[:1]:
        raise ValueError("per-item t must have one entry per batch item")
    noise = mixed_noise(h, w, cfg.unit_noise, rng, x.shape[:-2])
    t_hi = 1.0 if cfg.t_s < 1 else 1.0 - cfg.t_eps
    sig = np.array([truncated_sigma(min(max(ti, cfg.t_eps), t_hi), cfg) for ti in t_arr])
    blurred = np.stack([operator_at(float(ti), cfg, h, w).apply(xi) for ti, xi in zip(t_arr, x)])
    return blurred + sig.reshape(-1, *([1] * (x.ndim - 1))) * noise, sig


def rdm_loss(denoiser, x, t, cfg: ScheduleConfig, rng, label=None):
    """Pixel-mean ||D(x_t, sigma'(t)) - x||^2 with gradients when available.

    Returns ``(loss, grads)``; ``grads`` is ``None`` for denoisers without
    a ``loss_and_grad`` method.
    """
    x_t, sigma = corrupt(x, t, cfg, rng)
    if hasattr(denoiser, "loss_and_grad"):
        return denoiser.loss_and_grad(x_t, sigma, x, label)
    out = denoiser(x_t, sigma, label)
    return float(np.mean((out - x) ** 2)), None


# ---------------------------------------------------------------------------
# checkpoint container

MAGIC = b"RDMK"
FORMAT_VERSION = 1


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    """``RDMK`` | u32 version | u32 count | per tensor:
    u32 name_len | name (UTF-8) | u32 ndim | u32 dims... | f64 LE data (C order).
    All integers little-endian.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


class CheckpointError(ValueError):
    pass


def decode_checkpoint(data: bytes) -> "OrderedDict[str, np.ndarray]":
    if data[:4] != MAGIC:
        raise CheckpointError("not an RDMK checkpoint (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(data):
            raise CheckpointError("truncated checkpoint")
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        nbytes = 8 * n
        if pos + nbytes > len(data):
            raise CheckpointError("truncated checkpoint")
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
        out[name] = arr
    if pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return out
