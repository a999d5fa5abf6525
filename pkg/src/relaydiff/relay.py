"""Two-stage relay: low-resolution sampling, nearest upsampling, and a
patch-blur stage that continues from the upsampled result.

Also home to the toy data used in place of real image corpora, the proxy
quality metrics that stand in for FID, the eta / NFE-allocation sweeps and
the small training loop for the conv denoiser.

Effective NFE counts the low-resolution stage at one tenth:

    nfe = (2 * stage2_steps - 1) + ceil((2 * stage1_steps - 1) / 10)

(Heun uses 2N - 1 evaluations for N steps; zero steps cost nothing.)
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import spectral
from .blurschedule import ScheduleConfig, norm_cdf
from .denoiser import ConvDenoiser, GaussianDenoiser, GaussianToyPrior, rdm_loss
from .noise import NoiseSpec, RandomSource
from .sampler import sample

log = logging.getLogger(__name__)

ETA_GRID = (0.0, 0.10, 0.15, 0.20, 0.25, 0.30, 0.40, 0.50)
NFE_TOTALS = (20, 40, 80)
# n as a fraction of N in the "10n + (N/2 - n)" allocation
NFE_STRATEGIES = (("10n+(N/2-n) n=N/20", 20), ("10n+(N/2-n) n=N/10", 10), ("10n+(N/2-n) n=N/5", 5))


def default_stage1(n_steps: int = 20, eta: float = 0.2) -> ScheduleConfig:
    return ScheduleConfig(n_steps=n_steps, eta=eta, noise=NoiseSpec(1.0, 1, 0.0), patch=1, sigma_b_max=0.0, t_s=1.0)


def default_stage2(factor: int = 4, n_steps: int = 40, eta: float = 0.2) -> ScheduleConfig:
    return ScheduleConfig(
        n_steps=n_steps,
        eta=eta,
        noise=NoiseSpec(1.0, factor, 0.15),
        patch=factor,
        sigma_b_max=3.0,
        t_s=0.6,
    )


@dataclass(frozen=True)
class RelayConfig:
    low_res: int = 8
    factor: int = 4
    stage1: ScheduleConfig = field(default_factory=default_stage1)
    stage2: ScheduleConfig = field(default_factory=default_stage2)

    def __post_init__(self):
        if self.stage2.patch != self.factor:
            raise ValueError(f"stage-2 patch size {self.stage2.patch} must equal the factor {self.factor}")
        if self.stage1.blurs:
            raise ValueError("stage 1 must not blur")

    @property
    def high_res(self) -> int:
        return self.low_res * self.factor

    @property
    def nfe_split(self) -> tuple[int, int]:
        return self.stage1.n_steps, self.stage2.n_steps

    @property
    def effective_nfe(self) -> int:
        return effective_nfe(*self.nfe_split)

    def with_steps(self, stage1_steps: int, stage2_steps: int) -> "RelayConfig":
        return replace(
            self,
            stage1=self.stage1.with_(n_steps=stage1_steps),
            stage2=self.stage2.with_(n_steps=stage2_steps),
        )


def heun_nfe(steps: int) -> int:
    return max(0, 2 * steps - 1)


def effective_nfe(stage1_steps: int, stage2_steps: int) -> int:
    return heun_nfe(stage2_steps) + math.ceil(heun_nfe(stage1_steps) / 10)


def t_s_for_residual(beta0: float, cfg: ScheduleConfig) -> float:
    """Truncation point whose noise level sigma(t_s) equals the residual beta0."""
    return norm_cdf((math.log(beta0) - cfg.p_mean) / cfg.p_std)


def run_relay(cfg: RelayConfig, denoisers, rng: RandomSource, batch=None, label=None):
    """Stage 1 at low_res, nearest upsampling by ``factor``, relay stage 2.

    Returns ``(x_high, (trace1, trace2), x_low)``.
    """
    d1, d2 = denoisers
    x_low, trace1 = sample(d1, cfg.stage1, (cfg.low_res, cfg.low_res), rng.spawn(1), batch=batch, label=label)
    x_up = spectral.upsample_nearest(x_low, cfg.factor)
    x_high, trace2 = sample(d2, cfg.stage2, (cfg.high_res, cfg.high_res), rng.spawn(2), init=x_up, label=label)
    return x_high, (trace1, trace2), x_low


# ---------------------------------------------------------------------------
# toy priors and datasets


def power_law_variance(h: int, w: int, slope: float = 2.0, pixel_var: float = 0.25, knee: float = 1.0) -> np.ndarray:
    """Per-frequency variance c(f) ~ (1 + (f / f_knee)^2)^(-slope/2), scaled so
    that the mean per-pixel variance is ``pixel_var``. ``knee`` is in units of
    the lowest nonzero frequency pi/H."""
    r = spectral.radial_frequency(h, w)
    c = (1.0 + (r / (knee * np.pi / h)) ** 2) ** (-slope / 2.0)
    return c * (pixel_var * h * w / c.sum())


def power_law_prior(h: int, w: int, slope: float = 2.0, pixel_var: float = 0.25) -> GaussianToyPrior:
    return GaussianToyPrior(np.zeros((h, w)), power_law_variance(h, w, slope, pixel_var), None)


def relay_priors(low_res: int = 8, factor: int = 4, low_var: float = 0.25, detail_var: float = 0.02, slope: float = 2.0):
    """A pair of Gaussian priors that are exactly consistent under relay.

    High resolution: per-patch DCT coefficients are independent. Patch DC
    coefficients have variance factor**2 * low_var and the mean of an
    upsampled smooth pattern; within-patch frequencies follow a power law
    with mean per-pixel variance ``detail_var``.
    Low resolution: patch means of the above, i.e. iid pixels of variance
    ``low_var`` around the smooth pattern.
    """
    k = factor
    yy, xx = np.mgrid[0:low_res, 0:low_res] / low_res
    mean_low = 0.3 * np.cos(2 * np.pi * xx) * np.sin(np.pi * yy)
    prior_low = GaussianToyPrior(spectral.dct2(mean_low), np.full((low_res, low_res), low_var), None)

    ac = power_law_variance(k, k, slope, 1.0)
    ac[0, 0] = 0.0
    ac *= detail_var * k * k / ac.sum()
    ac[0, 0] = k * k * low_var
    hi = low_res * k
    var_high = np.tile(ac, (low_res, low_res))
    mean_high = spectral.block_dct2(spectral.upsample_nearest(mean_low, k), k)
    prior_high = GaussianToyPrior(mean_high, var_high, k)
    assert var_high.shape == (hi, hi)
    return prior_low, prior_high


def gaussian_relay_denoisers(cfg: RelayConfig, **prior_kw):
    prior_low, prior_high = relay_priors(cfg.low_res, cfg.factor, **prior_kw)
    d1 = GaussianDenoiser(prior_low, cfg.stage1)
    d2 = GaussianDenoiser(prior_high, cfg.stage2)
    return (d1, d2), (prior_low, prior_high)


@dataclass
class ToyDataset:
    """``kind`` is one of ``gaussian``, ``checkerboard`` or ``pgm``."""

    kind: str = "checkerboard"
    size: int = 8
    slope: float = 2.0
    pixel_var: float = 0.25
    contrast: float = 0.8
    path: str | None = None
    _images: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("gaussian", "checkerboard", "pgm"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "pgm":
            from .fileio import read_pgm_dir

            if self.path is None:
                raise ValueError("pgm dataset needs a path")
            self._images = read_pgm_dir(self.path)
            self.size = self._images.shape[-1]

    def prior(self) -> GaussianToyPrior:
        return power_law_prior(self.size, self.size, self.slope, self.pixel_var)

    def sample(self, rng: RandomSource, n: int) -> np.ndarray:
        if self.kind == "gaussian":
            return self.prior().sample(rng, n)
        if self.kind == "pgm":
            idx = rng.integers(0, len(self._images), size=n)
            return self._images[idx].copy()
        s = self.size
        cells = [c for c in (1, 2, 4) if s % c == 0 and c < s] or [1]
        cell = np.asarray(cells)[rng.integers(0, len(cells), size=n)]
        phase = rng.integers(0, 2, size=n)
        yy, xx = np.mgrid[0:s, 0:s]
        out = np.empty((n, s, s))
        for b in range(n):
            board = ((yy // cell[b] + xx // cell[b] + phase[b]) % 2) * 2 - 1
            out[b] = self.contrast * board
        return out


# ---------------------------------------------------------------------------
# proxy metrics


@dataclass
class QualityReport:
    spectral_distance: float
    mean_error: float
    var_error: float
    class_counts: dict[int, int] | None = None

    def row(self) -> list[str]:
        return [f"{self.spectral_distance:.6f}", f"{self.mean_error:.6f}", f"{self.var_error:.6f}"]


def quality_report(generated, reference, n_bins: int = 16, labels=None) -> QualityReport:
    """Proxy metrics between two corpora of equal field shape.

    spectral_distance: mean over radial bins of |ln(P_gen / P_ref)| of the
    corpus-mean PSDs. mean_error: mean absolute gap of per-pixel means.
    var_error: mean relative gap of per-pixel variances.
    """
    g = spectral.check_field(generated, "generated")
    r = spectral.check_field(reference, "reference")
    if g.shape[-2:] != r.shape[-2:]:
        raise spectral.FieldError("corpora differ in field shape")
    pg = spectral.psd_curve(spectral.dct2(g), n_bins).power
    pr = spectral.psd_curve(spectral.dct2(r), n_bins).power
    sd = float(np.mean(np.abs(np.log(pg / pr))))
    me = float(np.mean(np.abs(g.mean(axis=0) - r.mean(axis=0))))
    vg, vr = g.var(axis=0), r.var(axis=0)
    ve = float(np.mean(np.abs(vg - vr) / np.maximum(vr, 1e-300)))
    counts = None
    if labels is not None:
        lab, cnt = np.unique(np.asarray(labels), return_counts=True)
        counts = {int(a): int(b) for a, b in zip(lab, cnt)}
    return QualityReport(sd, me, ve, counts)


def balanced_labels(n: int, n_classes: int) -> np.ndarray:
    """Exact uniform class quotas (first n mod C classes get one extra)."""
    return np.arange(n) % n_classes


# ---------------------------------------------------------------------------
# sweeps


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("RDMK_THREADS", "1")))
    except ValueError:
        return 1


def _run_cells(fn, cells):
    n = _threads()
    if n == 1:
        return [fn(i, c) for i, c in enumerate(cells)]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(lambda ic: fn(*ic), enumerate(cells)))


def _reference(priors, n: int, rng: RandomSource) -> np.ndarray:
    return priors[1].sample(rng, n)


def nfe_grid(totals=NFE_TOTALS, strategies=NFE_STRATEGIES):
    """(N, label, stage1_steps, stage2_steps) for each total and allocation strategy."""
    grid = []
    for total in totals:
        for label, div in strategies:
            n = max(1, total // div)
            grid.append((total, label, 10 * n, total // 2 - n))
    return grid


def nfe_sweep(cfg: RelayConfig, denoisers, reference, rng: RandomSource, n_samples: int = 256, grid=None) -> str:
    """CSV ``total,strategy,stage1_steps,stage2_steps,effective_nfe,spectral_distance,mean_error,var_error``."""
    grid = nfe_grid() if grid is None else grid

    def cell(i, g):
        total, label, s1, s2 = g
        out, _, _ = run_relay(cfg.with_steps(s1, s2), denoisers, rng.spawn(i), batch=n_samples)
        q = quality_report(out, reference)
        return [str(total), label, str(s1), str(s2), str(effective_nfe(s1, s2))] + q.row()

    rows = _run_cells(cell, grid)
    header = "total,strategy,stage1_steps,stage2_steps,effective_nfe,spectral_distance,mean_error,var_error"
    return "\n".join([header] + [",".join(r) for r in rows]) + "\n"


def eta_sweep(cfg: RelayConfig, eta_values, denoisers, reference, rng: RandomSource, n_samples: int = 256) -> str:
    """CSV ``eta,mode,effective_nfe,spectral_distance,mean_error,var_error``; eta sets the stage-2 sampler."""

    def cell(i, eta):
        if not 0 <= eta < 1:
            raise ValueError(f"eta must be in [0, 1), got {eta}")
        c = replace(cfg, stage2=cfg.stage2.with_(eta=eta))
        out, _, _ = run_relay(c, denoisers, rng.spawn(i), batch=n_samples)
        q = quality_report(out, reference)
        return [f"{eta:.2f}", "ODE" if eta == 0 else "SDE", str(c.effective_nfe)] + q.row()

    rows = _run_cells(cell, list(eta_values))
    header = "eta,mode,effective_nfe,spectral_distance,mean_error,var_error"
    return "\n".join([header] + [",".join(r) for r in rows]) + "\n"


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainLog:
    rows: list[tuple[int, int, float, float]] = field(default_factory=list)

    @property
    def initial_eval(self) -> float:
        return self.rows[0][3]

    @property
    def final_eval(self) -> float:
        return self.rows[-1][3]

    def to_csv(self) -> str:
        lines = ["epoch,step,train_loss,eval_loss"]
        lines += [f"{e},{s},{tl:.10e},{el:.10e}" for e, s, tl, el in self.rows]
        return "\n".join(lines) + "\n"


class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _draw_t(rng: RandomSource, cfg: ScheduleConfig, n: int) -> np.ndarray:
    hi = 1.0 if cfg.t_s < 1 else 1.0 - cfg.t_eps
    return rng.uniform(cfg.t_eps, hi, size=n)


def train_toy(
    dataset: ToyDataset,
    cfg: ScheduleConfig,
    epochs: int,
    rng: RandomSource,
    steps_per_epoch: int = 50,
    batch: int = 16,
    lr: float = 2e-3,
    channels: int = 16,
    eval_size: int = 64,
    denoiser: ConvDenoiser | None = None,
):
    """Adam on the relay loss with t ~ U(0, 1) per item.

    The eval loss uses one fixed set of images, times and noise so it is
    comparable across epochs; it is logged before the first step (epoch 0)
    and after every epoch.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    net = denoiser.copy() if denoiser is not None else ConvDenoiser.init(rng.spawn(0), channels, 0, cfg.sigma_data)
    eval_x = dataset.sample(rng.spawn(1), eval_size)
    eval_t = _draw_t(rng.spawn(2), cfg, eval_size)

    def eval_loss():
        loss, _ = rdm_loss(net, eval_x, eval_t, cfg, rng.spawn(3))
        return loss

    opt = Adam(net.params, lr)
    trace = TrainLog()
    trace.rows.append((0, 0, float("nan"), eval_loss()))
    data_rng, t_rng, noise_rng = rng.spawn(4), rng.spawn(5), rng.spawn(6)
    step = 0
    for epoch in range(1, epochs + 1):
        running = 0.0
        for _ in range(steps_per_epoch):
            x = dataset.sample(data_rng, batch)
            t = _draw_t(t_rng, cfg, batch)
            loss, grads = rdm_loss(net, x, t, cfg, noise_rng)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at step {step}")
            opt.step(net.params, grads)
            running += loss
            step += 1
        ev = eval_loss()
        if not np.isfinite(ev):
            raise TrainingDiverged(f"eval loss became {ev} after epoch {epoch}")
        trace.rows.append((epoch, step, running / steps_per_epoch, ev))
        log.info("epoch %d step %d train %.5f eval %.5f", epoch, step, running / steps_per_epoch, ev)
    return net, trace


# ---------------------------------------------------------------------------
# resolution and SNR


@dataclass
class SnrShift:
    base: spectral.SpectrumCurve
    high: spectral.SpectrumCurve
    cutoff: float

    @property
    def low_mask(self) -> np.ndarray:
        return self.high.freq < self.cutoff

    @property
    def fraction_higher(self) -> float:
        m = self.low_mask
        return float(np.mean(self.high.power[m] > self.base.power[m]))

    def to_csv(self) -> str:
        lines = ["freq,snr_base,snr_high"]
        lines += [f"{f:.6f},{a:.6e},{b:.6e}" for f, a, b in zip(self.base.freq, self.base.power, self.high.power)]
        return "\n".join(lines) + "\n"


def snr_shift_study(corpus, factor: int, sigma: float, rng: RandomSource, n_bins: int = 64, cutoff: float = np.pi / 4) -> SnrShift:
    """SNR of a corpus noised at its own resolution versus its nearest-upsampled
    copy noised at ``factor`` times the resolution, with the same sigma.

    Both are measured on the high-resolution DCT grid so that bins refer to
    the same physical frequencies: the base pipeline (signal and its noise)
    is upsampled before the transform.
    """
    x = spectral.check_field(corpus, "corpus")
    h, w = x.shape[-2:]
    up = spectral.upsample_nearest(x, factor)
    sig = spectral.dct2(up)
    noise_base = spectral.dct2(spectral.upsample_nearest(sigma * rng.spawn(0).normal(x.shape), factor))
    noise_high = spectral.dct2(sigma * rng.spawn(1).normal(up.shape))
    return SnrShift(
        spectral.snr_curve(sig, noise_base, n_bins),
        spectral.snr_curve(sig, noise_high, n_bins),
        cutoff,
    )
