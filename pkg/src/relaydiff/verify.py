"""Self-check suites run by ``relaydiff verify``.

Each suite returns a :class:`SuiteResult` with a pass flag, a one-line
detail and a CSV body. Monte-Carlo suites control the family-wise error:
with m simultaneous z-tests the threshold is Phi^-1(1 - 0.0027 / (2 m)),
which is exactly 3 for a single test.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import spectral
from .blurschedule import (
    ScheduleConfig,
    blur_schedule,
    norm_ppf,
    patch_blur_operator,
    patch_mean,
    sigma_schedule,
    time_from_sigma,
    truncated_sigma,
)
from .denoiser import ConvDenoiser, GaussianToyPrior, analytic_denoiser, rdm_loss
from .noise import (
    NoiseSpec,
    RandomSource,
    block_covariance_study,
    empirical_covariance,
    gaussian_field,
    mixed_noise,
    mixed_noise_covariance,
)
from .sampler import Schedule, euler_step, marginal_consistency_check

FAMILY_LEVEL = 0.0027  # two-sided tail mass of a single 3-sigma test


def familywise_z(m: int, level: float = FAMILY_LEVEL) -> float:
    return norm_ppf(1.0 - level / (2.0 * max(m, 1)))


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    csv: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name:<12} {self.seconds:7.2f}s  {self.detail}"


def suite_dct(seed: int = 0) -> SuiteResult:
    rng = RandomSource(seed)
    rows = ["check,shape,max_abs_err"]
    worst = 0.0
    for h, w in ((8, 8), (16, 12), (32, 32), (5, 7)):
        x = rng.normal((3, h, w))
        c = spectral.dct2(x)
        err_rt = float(np.max(np.abs(spectral.idct2(c) - x)))
        err_pv = float(np.max(np.abs((c**2).sum(axis=(1, 2)) - (x**2).sum(axis=(1, 2)))))
        i = np.arange(h)[:, None]
        n = np.arange(h)[None, :]
        brute = np.sqrt(2.0 / h) * np.cos(np.pi * (2 * n + 1) * i / (2 * h))
        brute[0] /= np.sqrt(2.0)
        err_m = float(np.max(np.abs(brute - spectral.dct_matrix(h))))
        for name, e in (("roundtrip", err_rt), ("parseval", err_pv), ("matrix", err_m)):
            rows.append(f"{name},{h}x{w},{e:.3e}")
            worst = max(worst, e)
    x = rng.normal((2, 32, 32))
    e = float(np.max(np.abs(spectral.block_idct2(spectral.block_dct2(x, 4), 4) - x)))
    rows.append(f"block_roundtrip,32x32,{e:.3e}")
    worst = max(worst, e)
    return SuiteResult("dct", worst < 1e-9, f"max error {worst:.2e}", "\n".join(rows) + "\n")


def suite_covariance(seed: int = 0, n_fields: int = 20_000, size: int = 32, radius: int = 2) -> SuiteResult:
    rng = RandomSource(seed)
    kernels = (1, 2, 4)
    zc = familywise_z((2 * radius + 1) ** 2 * len(kernels))
    rows = ["s,dx,dy,empirical,oracle,se,z"]
    worst = 0.0
    for i, s in enumerate(kernels):
        mean, se, oracle = block_covariance_study(NoiseSpec(1.0, s, 0.0), size, n_fields, rng.spawn(i), radius)
        z = (mean - oracle) / se
        worst = max(worst, float(np.max(np.abs(z))))
        for a in range(2 * radius + 1):
            for b in range(2 * radius + 1):
                rows.append(f"{s},{b - radius},{a - radius},{mean[a, b]:.6e},{oracle[a, b]:.6e},{se[a, b]:.3e},{z[a, b]:.3f}")
    return SuiteResult("covariance", worst < zc, f"max |z| {worst:.2f} < {zc:.2f}", "\n".join(rows) + "\n")


def suite_mixed(seed: int = 0, n_fields: int = 20_000, size: int = 16) -> SuiteResult:
    rng = RandomSource(seed)
    ok = True
    a = mixed_noise(size, size, NoiseSpec(1.3, 4, 0.0), rng.spawn(0), 4)
    b = gaussian_field(size, size, 1.3, rng.spawn(0), 4)
    ok &= bool(np.array_equal(a, b))
    spec = NoiseSpec(1.0, 4, 0.15)
    fields = mixed_noise(size, size, spec, rng.spawn(1), n_fields)
    cov = mixed_noise_covariance(size, size, spec)
    offsets = [(dx, dy) for dy in range(0, 5) for dx in range(0, 5)]
    zc = familywise_z(len(offsets))
    rows = ["dx,dy,empirical,oracle,se,z"]
    worst = 0.0
    for dx, dy in offsets:
        m, se = empirical_covariance(fields, dx, dy)
        o = cov[0, dy * size + dx]
        z = (m - o) / se
        worst = max(worst, abs(z))
        rows.append(f"{dx},{dy},{m:.6e},{o:.6e},{se:.3e},{z:.3f}")
    ok &= worst < zc and abs(np.trace(cov) / cov.shape[0] - 1.0) < 1e-12
    return SuiteResult("mixed", bool(ok), f"alpha=0 identical; max |z| {worst:.2f} < {zc:.2f}", "\n".join(rows) + "\n")


def suite_schedule(seed: int = 0) -> SuiteResult:
    rng = RandomSource(seed)
    rows = ["t,t_s,sigma_trunc,sigma_direct,abs_err"]
    worst = 0.0
    for t, ts in zip(rng.uniform(0.01, 0.99, 100), rng.uniform(0.05, 1.0, 100)):
        cfg = ScheduleConfig(t_s=float(ts))
        a = truncated_sigma(float(t), cfg)
        b = sigma_schedule(float(t * ts), cfg)
        worst = max(worst, abs(a - b))
        back = time_from_sigma(a, cfg)
        worst = max(worst, abs(back - t))
        rows.append(f"{t:.6f},{ts:.6f},{a:.12e},{b:.12e},{abs(a - b):.3e}")
    cfg = ScheduleConfig(sigma_b_max=3.0)
    ends = blur_schedule(0.0, cfg) == 0.0 and blur_schedule(1.0, cfg) == 3.0**2 / 2
    ok = worst < 1e-12 and ends
    return SuiteResult("schedule", ok, f"max error {worst:.2e}; endpoints {'exact' if ends else 'WRONG'}", "\n".join(rows) + "\n")


def suite_ode(seed: int = 0, n_states: int = 100) -> SuiteResult:
    """eta = 0, identity blur, linear Gaussian denoiser vs the closed-form Euler step."""
    rng = RandomSource(seed)
    h = w = 8
    cfg = ScheduleConfig(eta=0.0, n_steps=20)
    prior = GaussianToyPrior(rng.normal((h, w)) * 0.1, rng.uniform(0.05, 1.0, (h, w)))
    sched = Schedule(cfg, h, w)
    rows = ["state,n,max_abs_err"]
    worst = 0.0
    for k in range(n_states):
        n = int(rng.integers(1, sched.n_steps + 1))
        u = rng.normal((h, w)) * float(sched.sigma[n])
        state = sched.state(n, u)
        u0 = analytic_denoiser(prior, u, state.sigma)
        nxt = euler_step(state, u0, cfg, rng, sched)
        d = (u - u0) / state.sigma
        expect = u + (sched.sigma[n - 1] - sched.sigma[n]) * d
        e = float(np.max(np.abs(nxt.u - expect)))
        worst = max(worst, e)
        rows.append(f"{k},{n},{e:.3e}")
    return SuiteResult("ode", worst < 1e-10, f"max step error {worst:.2e}", "\n".join(rows) + "\n")


def consistency_config(eta: float, alpha: float = 0.0) -> ScheduleConfig:
    return ScheduleConfig(t_s=0.6, sigma_b_max=3.0, n_steps=10, eta=eta, noise=NoiseSpec(1.0, 4, alpha), patch=4)


def suite_consistency(seed: int = 0, n_traj: int = 10_000, etas=(0.0, 0.2, 0.5), alpha: float = 0.15) -> SuiteResult:
    base = RandomSource(seed)
    u0 = base.spawn(0).normal((8, 8))
    m = 64 * 11 * len(etas)
    zc = familywise_z(m)
    vbound = zc * math.sqrt(2.0 / (n_traj - 1))
    parts, ok, worst_z, worst_v = [], True, 0.0, 0.0
    for i, eta in enumerate(etas):
        rep = marginal_consistency_check(u0, consistency_config(eta, alpha), n_traj, base.spawn(1 + i))
        worst_z = max(worst_z, rep.max_abs_mean_err)
        worst_v = max(worst_v, float(np.max(np.abs(rep.var_ratio - 1.0))))
        body = rep.to_csv().splitlines()
        parts += [f"{eta}," + line for line in body[1:]]
    ok = worst_z < zc and worst_v < vbound
    csv = "eta,n,freq_bin,mean_err_sigmas,var_ratio\n" + "\n".join(parts) + "\n"
    detail = f"max |z| {worst_z:.2f} < {zc:.2f}; max |var ratio - 1| {worst_v:.4f} < {vbound:.4f}"
    return SuiteResult("consistency", ok, detail, csv)


def fd_gradient_errors(seed: int, n_params: int = 20, h: float = 1e-5):
    """(name, index, analytic, numeric, relative error) for random parameters."""
    rng = RandomSource(seed)
    net = ConvDenoiser.init(rng.spawn(0), channels=4, n_classes=3)
    cfg = ScheduleConfig(patch=2, sigma_b_max=2.0, noise=NoiseSpec(1.0, 2, 0.15))
    x = rng.spawn(1).normal((3, 6, 6)) * 0.5
    t = rng.spawn(2).uniform(0.05, 0.95, 3)
    label = np.array([0, 2, -1])

    def loss():
        return rdm_loss(net, x, t, cfg, RandomSource(seed, (9,)), label)[0]

    _, grads = rdm_loss(net, x, t, cfg, RandomSource(seed, (9,)), label)
    names = [k for k in grads if grads[k].size]
    pick = rng.spawn(3)
    out = []
    for _ in range(n_params):
        name = names[int(pick.integers(0, len(names)))]
        idx = int(pick.integers(0, net.params[name].size))
        p = net.params[name].reshape(-1)
        old = p[idx]
        p[idx] = old + h
        lp = loss()
        p[idx] = old - h
        lm = loss()
        p[idx] = old
        num = (lp - lm) / (2 * h)
        ana = float(grads[name].reshape(-1)[idx])
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        out.append((name, idx, ana, num, rel))
    return out


def suite_gradient(seed: int = 0, n_seeds: int = 1) -> SuiteResult:
    rows = ["seed,param,index,analytic,numeric,rel_err"]
    worst = 0.0
    for s in range(seed, seed + n_seeds):
        for name, idx, a, nu, rel in fd_gradient_errors(s):
            worst = max(worst, rel)
            rows.append(f"{s},{name},{idx},{a:.10e},{nu:.10e},{rel:.3e}")
    return SuiteResult("gradient", worst < 1e-4, f"max relative error {worst:.2e}", "\n".join(rows) + "\n")


def terminal_tau(k: int, level: float = 1e-8) -> float:
    """Smallest tau with exp(-pi^2 tau / k^2) < level for the slowest AC mode, with margin."""
    return 1.01 * k * k * math.log(1.0 / level) / math.pi**2


def suite_patchblur(seed: int = 0) -> SuiteResult:
    rng = RandomSource(seed)
    rows = ["check,k,max_abs_err"]
    ok = True
    for k in (2, 4, 8):
        x = rng.normal((4, 32, 32))
        op = patch_blur_operator(32, 32, k, terminal_tau(k))
        e_term = float(np.max(np.abs(op.apply(x) - patch_mean(x, k))))
        const = patch_mean(x, k)
        e_fix = float(np.max(np.abs(patch_blur_operator(32, 32, k, 0.7).apply(const) - const)))
        # brute force: heat dissipation of each patch with its own global DCT
        tau = 0.3
        op2 = patch_blur_operator(32, 32, k, tau)
        y = op2.apply(x[0])
        lam = np.exp(-np.pi**2 * (np.arange(k)[:, None] ** 2 + np.arange(k)[None, :] ** 2) * tau / k**2)
        e_bf = 0.0
        for p in range(0, 32, k):
            for q in range(0, 32, k):
                ref = spectral.idct2(lam * spectral.dct2(x[0, p : p + k, q : q + k]))
                e_bf = max(e_bf, float(np.max(np.abs(y[p : p + k, q : q + k] - ref))))
        rows += [f"terminal,{k},{e_term:.3e}", f"fixed_point,{k},{e_fix:.3e}", f"per_patch_oracle,{k},{e_bf:.3e}"]
        ok &= e_term < 1e-6 and e_fix < 1e-12 and e_bf < 1e-12
    return SuiteResult("patchblur", bool(ok), "terminal state, fixed points and per-patch oracle", "\n".join(rows) + "\n")


SUITES = {
    "dct": suite_dct,
    "covariance": suite_covariance,
    "mixed": suite_mixed,
    "schedule": suite_schedule,
    "ode": suite_ode,
    "consistency": suite_consistency,
    "gradient": suite_gradient,
    "patchblur": suite_patchblur,
}


def run_suite(name: str, seed: int = 0) -> SuiteResult:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    start = time.perf_counter()
    try:
        res = SUITES[name](seed)
    except Exception as exc:  # a crashing suite is a failing suite
        res = SuiteResult(name, False, f"error: {exc!r}", "")
    res.seconds = time.perf_counter() - start
    return res


def verify_all(seed: int = 0, names=None) -> list[SuiteResult]:
    return [run_suite(n, seed) for n in (names or SUITES)]
