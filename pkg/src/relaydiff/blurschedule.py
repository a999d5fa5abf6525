"""Blurring operators, noise/blur schedules and the forward corruption.

Heat dissipation for time tau is diagonal in the DCT basis:

    u_tau = exp(Lambda * tau) * u_0,   Lambda[i, j] = -pi**2 (i**2/H**2 + j**2/W**2)

The patch-wise variant applies the same dissipation to each k x k patch on
its own. In the per-patch DCT layout of :func:`spectral.block_dct2` its
multiplier is the k x k table tiled over the field, so every patch's DC
coefficient is kept and, as tau grows, each patch collapses to its mean.

Schedules, all driven by a shared t in (0, 1):

    sigma(t)      = exp(P_mean + P_std * Phi^-1(t))
    sigma'(t)     = sigma(F_U^-1(F_U(t_s) * F_U(t)))  = sigma(t_s * t)
    sigma_B(t)    = sigma_B_max * sin(pi t / 2)**2
    tau(t)        = sigma_B(t)**2 / 2
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from statistics import NormalDist

import numpy as np

from . import spectral
from .noise import NoiseSpec, mixed_noise

_STD_NORMAL = NormalDist()


def norm_ppf(p: float) -> float:
    """Standard normal quantile (stdlib implementation of Wichura's AS241)."""
    return _STD_NORMAL.inv_cdf(p)


def norm_cdf(x: float) -> float:
    return _STD_NORMAL.cdf(x)


def uniform_cdf(t: float) -> float:
    return min(max(t, 0.0), 1.0)


def uniform_ppf(p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability out of range: {p}")
    return p


@dataclass(frozen=True)
class ScheduleConfig:
    """Every knob of one diffusion stage.

    ``patch`` is the side of the patch-wise blur; 1 disables blurring, as
    does ``sigma_b_max == 0``. ``noise.sigma`` is ignored by the samplers,
    which scale unit noise by the schedule.
    """

    p_mean: float = -1.2
    p_std: float = 1.2
    t_s: float = 1.0
    sigma_b_max: float = 0.0
    n_steps: int = 20
    eta: float = 0.2
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(1.0, 4, 0.0))
    patch: int = 1
    sigma_data: float = 0.5
    t_eps: float = 1e-3
    fresh_correction_noise: bool = False

    def __post_init__(self):
        if not self.p_std > 0:
            raise ValueError("p_std must be > 0")
        if not 0 < self.t_s <= 1:
            raise ValueError(f"t_s must be in (0, 1], got {self.t_s}")
        if not 0 <= self.eta < 1:
            raise ValueError(f"eta must be in [0, 1), got {self.eta}")
        if self.sigma_b_max < 0:
            raise ValueError("sigma_b_max must be >= 0")
        if int(self.n_steps) != self.n_steps or self.n_steps < 0:
            raise ValueError("n_steps must be a non-negative integer")
        if int(self.patch) != self.patch or self.patch < 1:
            raise ValueError("patch must be a positive integer")
        if not 0 < self.t_eps < 0.5:
            raise ValueError("t_eps must be in (0, 0.5)")
        if not self.sigma_data > 0:
            raise ValueError("sigma_data must be > 0")

    def with_(self, **kw) -> "ScheduleConfig":
        return replace(self, **kw)

    @property
    def unit_noise(self) -> NoiseSpec:
        return replace(self.noise, sigma=1.0)

    @property
    def blurs(self) -> bool:
        return self.patch > 1 and self.sigma_b_max > 0


# ---------------------------------------------------------------------------
# operators


def lambda_matrix(h: int, w: int) -> np.ndarray:
    if h < 1 or w < 1:
        raise ValueError("shape must be positive")
    i = np.arange(h)[:, None]
    j = np.arange(w)[None, :]
    return -np.pi**2 * (i**2 / h**2 + j**2 / w**2)


@dataclass(frozen=True, eq=False)
class BlurOperator:
    """Diagonal per-frequency multiplier plus the basis it is diagonal in.

    ``patch is None`` means the global DCT basis; otherwise the per-patch
    DCT with that patch size.
    """

    decay: np.ndarray
    patch: int | None = None
    tau: float = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.decay.shape

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.decay == 1.0))

    def to_freq(self, x: np.ndarray) -> np.ndarray:
        if self.patch is None:
            return spectral.dct2(x)
        return spectral.block_dct2(x, self.patch)

    def from_freq(self, u: np.ndarray) -> np.ndarray:
        if self.patch is None:
            return spectral.idct2(u)
        return spectral.block_idct2(u, self.patch)

    def apply_freq(self, u: np.ndarray) -> np.ndarray:
        return self.decay * u

    def apply(self, x: np.ndarray) -> np.ndarray:
        """V D V^T x. An identity operator returns ``x`` without transforming."""
        x = spectral.check_field(x)
        if x.shape[-2:] != self.shape:
            raise spectral.FieldError(f"operator is {self.shape}, field is {x.shape[-2:]}")
        if self.is_identity:
            return x
        return self.from_freq(self.decay * self.to_freq(x))


def global_blur_operator(h: int, w: int, tau: float) -> BlurOperator:
    if tau < 0:
        raise ValueError("tau must be >= 0")
    return BlurOperator(np.exp(lambda_matrix(h, w) * tau), None, float(tau))


@lru_cache(maxsize=256)
def _patch_decay(h: int, w: int, k: int, tau: float) -> np.ndarray:
    table = np.exp(lambda_matrix(k, k) * tau)
    d = np.tile(table, (h // k, w // k))
    d.setflags(write=False)
    return d


def patch_blur_operator(h: int, w: int, k: int, tau: float) -> BlurOperator:
    """Patch-wise blur: D(i, j) = exp(-pi**2 ((i mod k)**2 + (j mod k)**2) tau / k**2)."""
    if k < 1 or h % k or w % k:
        raise ValueError(f"patch size {k} must divide field shape {h}x{w}")
    if tau < 0:
        raise ValueError("tau must be >= 0")
    return BlurOperator(_patch_decay(h, w, k, float(tau)), k, float(tau))


def identity_operator(h: int, w: int) -> BlurOperator:
    return BlurOperator(np.ones((h, w)), None, 0.0)


def operator_at(t: float, cfg: ScheduleConfig, h: int, w: int) -> BlurOperator:
    """Blur operator of a stage at time t (identity when the stage does not blur)."""
    if not cfg.blurs:
        if cfg.patch > 1 and h % cfg.patch == 0 and w % cfg.patch == 0:
            return patch_blur_operator(h, w, cfg.patch, 0.0)
        return identity_operator(h, w)
    return patch_blur_operator(h, w, cfg.patch, blur_schedule(t, cfg))


def patch_mean(x: np.ndarray, k: int) -> np.ndarray:
    return spectral.upsample_nearest(spectral.downsample_mean(x, k), k)


# ---------------------------------------------------------------------------
# schedules


def sigma_schedule(t: float, cfg: ScheduleConfig) -> float:
    if not 0.0 < t < 1.0:
        raise ValueError(f"t must lie in (0, 1), got {t}")
    return math.exp(norm_ppf(t) * cfg.p_std + cfg.p_mean)


def truncated_sigma(t: float, cfg: ScheduleConfig) -> float:
    if not 0.0 < t <= 1.0:
        raise ValueError(f"t must lie in (0, 1], got {t}")
    return sigma_schedule(uniform_ppf(uniform_cdf(cfg.t_s) * uniform_cdf(t)), cfg)


def time_from_sigma(sigma: float, cfg: ScheduleConfig) -> float:
    """Inverse of :func:`truncated_sigma`."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    return norm_cdf((math.log(sigma) - cfg.p_mean) / cfg.p_std) / cfg.t_s


def blur_schedule(t: float, cfg: ScheduleConfig) -> float:
    """Heat-dissipation time tau_t = (sigma_B_max sin^2(pi t / 2))^2 / 2."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    sigma_b = cfg.sigma_b_max * math.sin(t * math.pi / 2) ** 2
    return sigma_b**2 / 2


def time_grid(cfg: ScheduleConfig) -> np.ndarray:
    """Sampling times t_0 < ... < t_N, uniform over [t_eps, t_max].

    t_max is 1 when the schedule is truncated (sigma'(1) = sigma(t_s) is
    finite) and 1 - t_eps otherwise. Zero steps gives the single time t_max.
    """
    t_max = 1.0 if cfg.t_s < 1.0 else 1.0 - cfg.t_eps
    if cfg.n_steps == 0:
        return np.array([t_max])
    return np.linspace(cfg.t_eps, t_max, cfg.n_steps + 1)


def sigma_min(cfg: ScheduleConfig) -> float:
    return truncated_sigma(cfg.t_eps, cfg)


def sigma_max(cfg: ScheduleConfig) -> float:
    return truncated_sigma(float(time_grid(cfg)[-1]), cfg)


def schedule_table(cfg: ScheduleConfig, n: int = 101) -> str:
    """CSV ``t,sigma,sigma_trunc,tau`` over a uniform t grid inside (0, 1)."""
    rows = ["t,sigma,sigma_trunc,tau"]
    for t in np.linspace(cfg.t_eps, 1.0 - cfg.t_eps, n):
        t = float(t)
        rows.append(
            f"{t:.6f},{sigma_schedule(t, cfg):.10e},"
            f"{truncated_sigma(t, cfg):.10e},{blur_schedule(t, cfg):.10e}"
        )
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# forward process


def forward_corrupt(x, t: float, cfg: ScheduleConfig, rng, return_parts: bool = False):
    """x_t = V D_t V^T x + sigma'(t) * mixed unit noise.

    Times below ``cfg.t_eps`` use sigma'(t_eps) (the schedule's minimum noise).
    """
    x = spectral.check_field(x)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    h, w = x.shape[-2:]
    t_sig = min(max(t, cfg.t_eps), 1.0 if cfg.t_s < 1 else 1.0 - cfg.t_eps)
    sigma = truncated_sigma(t_sig, cfg)
    blurred = operator_at(t, cfg, h, w).apply(x)
    noise = mixed_noise(h, w, cfg.unit_noise, rng, x.shape[:-2] or None)
    x_t = blurred + sigma * noise
    if return_parts:
        return x_t, blurred, sigma
    return x_t
