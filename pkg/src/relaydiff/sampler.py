"""Stochastic first/second-order sampler for patch-wise blurring diffusion.

Works in the frequency basis of the stage's blur operator, u = V^T x. One
step from t_n to t_{n-1}:

    gamma_n = sqrt(1 - eta**2) * sigma_{n-1} / sigma_n
    delta_n = eta * sigma_{n-1}
    d_n     = (u_n - u0_hat) / sigma_n
    u_{n-1} = (D_{n-1} + gamma_n (I - D_n)) u_n
              + sigma_n (gamma_n D_n - D_{n-1}) d_n + delta_n * eps

where eps is the transform of unit mixed (block + iid) noise. The Heun
variant re-evaluates the denoiser at u_{n-1} (except on the final step) and
repeats the update from u_n with (d_n + d_{n-1}) / 2, reusing eps.

With eta = 0 and D = I the update is u + (sigma_{n-1} - sigma_n) d_n, the
deterministic first-order EDM step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import spectral
from .blurschedule import (
    BlurOperator,
    ScheduleConfig,
    operator_at,
    time_grid,
    truncated_sigma,
)
from .noise import mixed_noise, mixed_noise_covariance


@dataclass
class SamplerState:
    n: int
    u: np.ndarray
    t: float
    sigma: float
    blur: BlurOperator


@dataclass
class SamplerTrace:
    rows: list[tuple[int, float, float, float, float]] = field(default_factory=list)
    states: list[SamplerState] | None = None
    grads: list[np.ndarray] | None = None
    nfe: int = 0
    last_d: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        lines = ["n,t,sigma,mean_abs_u,mean_abs_d"]
        for n, t, s, mu, md in self.rows:
            lines.append(f"{n},{t:.8f},{s:.10e},{mu:.10e},{md:.10e}")
        return "\n".join(lines) + "\n"


class Schedule:
    """Precomputed t_n, sigma_n and blur operators of a stage."""

    def __init__(self, cfg: ScheduleConfig, h: int, w: int):
        self.cfg = cfg
        self.shape = (h, w)
        self.t = time_grid(cfg)
        self.sigma = np.array([truncated_sigma(float(t), cfg) for t in self.t])
        self.blur = [operator_at(float(t), cfg, h, w) for t in self.t]

    @property
    def n_steps(self) -> int:
        return len(self.t) - 1

    def state(self, n: int, u: np.ndarray) -> SamplerState:
        return SamplerState(n, u, float(self.t[n]), float(self.sigma[n]), self.blur[n])


def gamma_coeff(eta: float, sigma_prev: float, sigma_n: float) -> float:
    return math.sqrt(1.0 - eta**2) * sigma_prev / sigma_n


def delta_coeff(eta: float, sigma_prev: float) -> float:
    return eta * sigma_prev


def draw_freq_noise(shape, blur: BlurOperator, cfg: ScheduleConfig, rng) -> np.ndarray:
    """Unit mixed noise expressed in the blur operator's basis."""
    h, w = shape[-2:]
    batch = shape[:-2] or None
    return blur.to_freq(mixed_noise(h, w, cfg.unit_noise, rng, batch))


def noise_freq_variance(blur: BlurOperator, cfg: ScheduleConfig) -> np.ndarray:
    """Per-coefficient variance of :func:`draw_freq_noise` (exact)."""
    h, w = blur.shape
    if cfg.noise.alpha == 0:
        return np.ones((h, w))
    n = h * w
    cpix = mixed_noise_covariance(h, w, cfg.unit_noise)
    basis = blur.to_freq(np.eye(n).reshape(n, h, w)).reshape(n, n)
    return np.einsum("pf,pq,qf->f", basis, cpix, basis).reshape(h, w)


def transition(u, d, eps, blur_n, blur_prev, sigma_n, sigma_prev, eta):
    g = gamma_coeff(eta, sigma_prev, sigma_n)
    dn, dp = blur_n.decay, blur_prev.decay
    out = (dp + g * (1.0 - dn)) * u + sigma_n * (g * dn - dp) * d
    if eta > 0:
        out = out + delta_coeff(eta, sigma_prev) * eps
    return out


def _prev_state(state: SamplerState, sched: Schedule | None, cfg: ScheduleConfig):
    if state.n < 1:
        raise ValueError("cannot step below t_0")
    if sched is None:
        sched = Schedule(cfg, *state.u.shape[-2:])
    return sched, sched.state(state.n - 1, None)


def euler_step(state: SamplerState, u0_hat, cfg: ScheduleConfig, rng, sched: Schedule | None = None, eps=None):
    """First-order update from t_n to t_{n-1} given a clean-field estimate in frequency space."""
    sched, prev = _prev_state(state, sched, cfg)
    u0_hat = np.asarray(u0_hat, dtype=np.float64)
    if u0_hat.shape != state.u.shape:
        raise spectral.FieldError("u0_hat shape differs from state")
    d = (state.u - u0_hat) / state.sigma
    if eps is None:
        eps = draw_freq_noise(state.u.shape, state.blur, cfg, rng) if cfg.eta > 0 else 0.0
    prev.u = transition(state.u, d, eps, state.blur, prev.blur, state.sigma, prev.sigma, cfg.eta)
    return prev


def _predict(denoiser, state: SamplerState, label) -> np.ndarray:
    x = state.blur.from_freq(state.u)
    return state.blur.to_freq(denoiser(x, state.sigma, label))


def heun_step(state: SamplerState, denoiser, cfg: ScheduleConfig, rng, sched: Schedule | None = None, label=None, trace=None):
    """Euler proposal plus, for n != 1, the averaged-gradient correction."""
    sched, prev = _prev_state(state, sched, cfg)
    u0_hat = _predict(denoiser, state, label)
    d_n = (state.u - u0_hat) / state.sigma
    eps = draw_freq_noise(state.u.shape, state.blur, cfg, rng) if cfg.eta > 0 else 0.0
    u_prev = transition(state.u, d_n, eps, state.blur, prev.blur, state.sigma, prev.sigma, cfg.eta)
    nfe = 1
    d_used = d_n
    if state.n != 1:
        prev.u = u_prev
        u0_prime = _predict(denoiser, prev, label)
        d_prev = (u_prev - u0_prime) / prev.sigma
        d_used = 0.5 * (d_n + d_prev)
        if cfg.fresh_correction_noise and cfg.eta > 0:
            eps = draw_freq_noise(state.u.shape, state.blur, cfg, rng)
        u_prev = transition(state.u, d_used, eps, state.blur, prev.blur, state.sigma, prev.sigma, cfg.eta)
        nfe = 2
    prev.u = u_prev
    if trace is not None:
        trace.nfe += nfe
        if trace.grads is not None:
            trace.grads.append(d_used)
        trace.last_d = d_used
    return prev


def initial_state(sched: Schedule, cfg: ScheduleConfig, rng, init=None, batch=None) -> SamplerState:
    """u_N for pure-noise (``init is None``) or relay start.

    Relay start: u_N = D_N V^T x_init + sigma_N * eps, the forward marginal
    at t_N around the given field.
    """
    h, w = sched.shape
    blur = sched.blur[-1]
    sigma = float(sched.sigma[-1])
    if init is None:
        shape = (h, w) if batch is None else (*np.atleast_1d(batch), h, w)
        eps = draw_freq_noise(shape, blur, cfg, rng)
        return sched.state(sched.n_steps, sigma * eps)
    init = spectral.check_field(init, "init")
    if init.shape[-2:] != (h, w):
        raise spectral.FieldError(f"init is {init.shape[-2:]}, stage expects {(h, w)}")
    eps = draw_freq_noise(init.shape, blur, cfg, rng)
    return sched.state(sched.n_steps, blur.decay * blur.to_freq(init) + sigma * eps)


def sample(denoiser, cfg: ScheduleConfig, shape, rng, init=None, batch=None, label=None, order: int = 2, keep_states: bool = False):
    """Run the sampler from t_N down to t_0; returns (x_0, trace)."""
    h, w = shape
    sched = Schedule(cfg, h, w)
    state = initial_state(sched, cfg, rng, init, batch)
    trace = SamplerTrace(states=[] if keep_states else None, grads=[] if keep_states else None)
    while True:
        if keep_states:
            trace.states.append(SamplerState(state.n, state.u.copy(), state.t, state.sigma, state.blur))
        row = [state.n, state.t, state.sigma, float(np.mean(np.abs(state.u))), 0.0]
        if state.n > 0:
            if order == 2:
                state = heun_step(state, denoiser, cfg, rng, sched, label, trace)
            else:
                u0_hat = _predict(denoiser, state, label)
                trace.last_d = (state.u - u0_hat) / state.sigma
                state = euler_step(state, u0_hat, cfg, rng, sched)
                trace.nfe += 1
                if trace.grads is not None:
                    trace.grads.append(trace.last_d)
            row[4] = float(np.mean(np.abs(trace.last_d)))
        trace.rows.append(tuple(row))
        if row[0] == 0:
            break
    return sched.blur[0].from_freq(state.u), trace


# ---------------------------------------------------------------------------
# marginal consistency


@dataclass
class ConsistencyReport:
    """Per-step, per-coefficient statistics of oracle-driven trajectories."""

    sigma: np.ndarray  # (N+1,)
    mean_err_sigmas: np.ndarray  # (N+1, H, W): (mean - D_n u0) / SE
    var_ratio: np.ndarray  # (N+1, H, W): empirical var / target var
    n_trajectories: int

    @property
    def max_abs_mean_err(self) -> float:
        return float(np.max(np.abs(self.mean_err_sigmas)))

    @property
    def var_ratio_range(self) -> tuple[float, float]:
        return float(self.var_ratio.min()), float(self.var_ratio.max())

    def to_csv(self) -> str:
        lines = ["n,freq_bin,mean_err_sigmas,var_ratio"]
        n_steps = self.mean_err_sigmas.shape[0] - 1
        for n in range(n_steps, -1, -1):
            me = self.mean_err_sigmas[n].ravel()
            vr = self.var_ratio[n].ravel()
            for f in range(me.size):
                lines.append(f"{n},{f},{me[f]:.6f},{vr[f]:.6f}")
        return "\n".join(lines) + "\n"


def marginal_consistency_check(u0, cfg: ScheduleConfig, n_trajectories: int, rng) -> ConsistencyReport:
    """Drive the transition with the true u_0 and compare every step's
    empirical marginal with N(D_n u_0, sigma_n**2 * noise variance)."""
    if n_trajectories < 1000:
        raise ValueError("need at least 1000 trajectories")
    u0 = np.asarray(u0, dtype=np.float64)
    h, w = u0.shape
    sched = Schedule(cfg, h, w)
    nvar = noise_freq_variance(sched.blur[-1], cfg)
    n_steps = sched.n_steps
    mean_err = np.empty((n_steps + 1, h, w))
    var_ratio = np.empty((n_steps + 1, h, w))

    def record(state):
        target_mean = state.blur.decay * u0
        target_var = state.sigma**2 * nvar
        m = state.u.mean(axis=0)
        v = state.u.var(axis=0, ddof=1)
        mean_err[state.n] = (m - target_mean) / np.sqrt(target_var / n_trajectories)
        var_ratio[state.n] = v / target_var

    top = sched.state(n_steps, None)
    eps = draw_freq_noise((n_trajectories, h, w), top.blur, cfg, rng)
    state = sched.state(n_steps, top.blur.decay * u0 + top.sigma * eps)
    record(state)
    u0_b = np.broadcast_to(u0, state.u.shape)
    while state.n > 0:
        state = euler_step(state, u0_b, cfg, rng, sched)
        record(state)
    return ConsistencyReport(sched.sigma.copy(), mean_err, var_ratio, n_trajectories)
