"""Command-line entry point: ``relaydiff <subcommand> [flags]``.

Settings come from (lowest to highest precedence) built-in defaults, a
``--config`` key=value file, ``--set key=value`` pairs and explicit flags.
Every flag's help names its config key. Exit codes: 0 success, 1 runtime
failure, 2 usage error (including unknown config keys).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass

import numpy as np

from . import __version__, spectral
from .blurschedule import ScheduleConfig, forward_corrupt, schedule_table
from .denoiser import ConvDenoiser, GaussianDenoiser
from .fileio import ConfigError, OutputDir, encode_pgm, read_config, read_pgm_dir
from .noise import NoiseSpec, RandomSource, block_covariance_study, block_noise, gaussian_field, mixed_noise
from .relay import (
    ETA_GRID,
    RelayConfig,
    ToyDataset,
    default_stage1,
    eta_sweep,
    gaussian_relay_denoisers,
    nfe_sweep,
    quality_report,
    run_relay,
    t_s_for_residual,
    train_toy,
)
from .sampler import sample
from .verify import SUITES, run_suite

log = logging.getLogger("relaydiff")


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s) -> tuple[float, ...]:
    if isinstance(s, (tuple, list)):
        return tuple(float(v) for v in s)
    return tuple(float(v) for v in str(s).split(",") if v.strip())


@dataclass(frozen=True)
class Key:
    type: object
    default: object
    help: str


KEYS: dict[str, Key] = {
    "seed": Key(int, 0, "random seed"),
    "out": Key(str, "out", "output directory"),
    # one diffusion stage (stage 2 for relay and sweep)
    "p_mean": Key(float, -1.2, "log-normal schedule mean P_mean"),
    "p_std": Key(float, 1.2, "log-normal schedule std P_std"),
    "t_s": Key(float, None, "truncation point t_s in (0, 1]"),
    "beta0": Key(float, None, "stage-1 residual noise; sets t_s so that sigma(t_s) = beta0"),
    "sigma_b_max": Key(float, None, "maximum blur scale sigma_B,max (0 disables blurring)"),
    "n_steps": Key(int, None, "sampling steps N"),
    "eta": Key(float, 0.2, "sampler stochasticity eta in [0, 1)"),
    "alpha": Key(float, None, "block-noise mixing weight alpha"),
    "kernel": Key(int, None, "block-noise kernel size s"),
    "patch": Key(int, None, "patch size of the patch-wise blur (1 disables)"),
    "sigma_data": Key(float, 0.5, "data scale used by the preconditioning"),
    "t_eps": Key(float, 1e-3, "lower end of the sampling time grid"),
    "fresh_correction_noise": Key(_bool, False, "draw new noise for the Heun correction"),
    "order": Key(int, 2, "sampler order: 1 (Euler) or 2 (Heun)"),
    # relay
    "low_res": Key(int, 8, "stage-1 resolution"),
    "factor": Key(int, 4, "upsampling factor (also the stage-2 patch size)"),
    "stage1_steps": Key(int, 20, "stage-1 sampling steps"),
    "stage1_eta": Key(float, 0.2, "stage-1 sampler eta"),
    "stage1_checkpoint": Key(str, None, "stage-1 RDMK checkpoint (default: Gaussian toy oracle)"),
    "stage2_checkpoint": Key(str, None, "stage-2 RDMK checkpoint (default: Gaussian toy oracle)"),
    "low_var": Key(float, 0.25, "Gaussian toy prior: per-pixel variance at low resolution"),
    "detail_var": Key(float, 0.02, "Gaussian toy prior: within-patch detail variance"),
    "samples": Key(int, 64, "number of generated or drawn fields"),
    "images": Key(int, 8, "number of PGM images to write"),
    # data
    "input": Key(str, None, "PGM file or directory of PGM files"),
    "dataset": Key(str, "gaussian", "toy dataset: gaussian, checkerboard or pgm"),
    "data_path": Key(str, None, "PGM corpus for dataset=pgm"),
    "size": Key(int, 32, "field size"),
    "bins": Key(int, 64, "number of radial frequency bins"),
    "snr_sigma": Key(float, None, "also write SNR curves against iid noise of this sigma"),
    "radius": Key(int, 2, "covariance offsets |dx|, |dy| <= radius"),
    "times": Key(_floats, (0.1, 0.3, 0.5, 0.7, 0.9), "comma-separated forward-process times"),
    # training
    "epochs": Key(int, 10, "training epochs"),
    "steps_per_epoch": Key(int, 50, "optimizer steps per epoch"),
    "batch": Key(int, 16, "training batch size"),
    "lr": Key(float, 2e-3, "Adam learning rate"),
    "channels": Key(int, 16, "conv-denoiser hidden channels"),
    "checkpoint": Key(str, None, "RDMK checkpoint for sampling (default: Gaussian toy oracle)"),
    # sweeps and verify
    "sweep": Key(str, "both", "which sweep: eta, nfe or both"),
    "etas": Key(_floats, ETA_GRID, "comma-separated eta grid"),
    "suite": Key(str, "all", f"verification suite: all or one of {', '.join(SUITES)}"),
}

STAGE = ("p_mean", "p_std", "t_s", "beta0", "sigma_b_max", "n_steps", "eta", "alpha", "kernel", "patch",
         "sigma_data", "t_eps", "fresh_correction_noise")
RELAY = ("low_res", "factor", "stage1_steps", "stage1_eta", "stage1_checkpoint", "stage2_checkpoint",
         "low_var", "detail_var", "samples", "images")
COMMANDS: dict[str, tuple[str, tuple[str, ...]]] = {
    "spectra": ("radially binned PSD (and optional SNR) curves of a corpus",
                ("input", "dataset", "data_path", "size", "samples", "bins", "snr_sigma")),
    "noise": ("block and mixed noise: covariance against the oracle, spectra, examples",
              ("size", "kernel", "alpha", "samples", "bins", "radius")),
    "forward": ("forward-process snapshots and the schedule table",
                ("input", "dataset", "data_path", "size", "times") + STAGE),
    "train": ("train the conv denoiser on a toy dataset",
              ("dataset", "data_path", "size", "epochs", "steps_per_epoch", "batch", "lr", "channels") + STAGE),
    "sample": ("sample one stage from pure noise",
               ("checkpoint", "dataset", "data_path", "size", "samples", "images", "order") + STAGE),
    "relay": ("two-stage relay run", RELAY + STAGE),
    "sweep": ("eta and NFE-allocation sweeps of the relay", ("sweep", "etas") + RELAY + STAGE),
    "verify": ("run the self-check suites", ("suite",)),
}
SHARED = ("seed", "out")

# stage defaults that differ between single-stage commands and the relay stage 2
SINGLE_STAGE = {"t_s": 1.0, "sigma_b_max": 0.0, "n_steps": 20, "alpha": 0.0, "kernel": 4, "patch": 1}
RELAY_STAGE2 = {"t_s": 0.6, "sigma_b_max": 3.0, "n_steps": 40, "alpha": 0.15, "kernel": None, "patch": None}


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relaydiff", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"relaydiff {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    for name, (desc, keys) in COMMANDS.items():
        p = sub.add_parser(name, help=desc, description=desc)
        p.add_argument("--config", help="key=value config file ('#' comments)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        for key in SHARED + keys:
            k = KEYS[key]
            default = "command-specific" if k.default is None else k.default
            if isinstance(default, tuple):
                default = ",".join(str(v) for v in default)
            p.add_argument(
                "--" + key.replace("_", "-"),
                dest=key,
                default=argparse.SUPPRESS,
                metavar=key.upper(),
                help=f"{k.help} [default: {default}] (config key: {key})",
            )
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    allowed = set(SHARED + COMMANDS[command][1])
    raw: dict[str, object] = {}
    if getattr(args, "config", None):
        try:
            raw.update(read_config(args.config, allowed))
        except ConfigError as exc:
            raise UsageError(str(exc)) from None
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in allowed:
            raise UsageError(f"unknown config key {key!r} for {command}")
        raw[key] = value
    for key in allowed:
        if hasattr(args, key):
            raw[key] = getattr(args, key)
    out = {}
    for key in allowed:
        spec = KEYS[key]
        if key in raw and raw[key] is not None:
            try:
                out[key] = spec.type(raw[key])
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad value for {key}: {raw[key]!r} ({exc})") from None
        else:
            out[key] = spec.default
    return out


def stage_config(s: dict, relay: bool) -> ScheduleConfig:
    base = RELAY_STAGE2 if relay else SINGLE_STAGE
    pick = {k: (s[k] if s.get(k) is not None else base[k]) for k in base}
    if relay:
        pick["patch"] = pick["patch"] or s["factor"]
        pick["kernel"] = pick["kernel"] or s["factor"]
    cfg = ScheduleConfig(
        p_mean=s["p_mean"],
        p_std=s["p_std"],
        t_s=pick["t_s"],
        sigma_b_max=pick["sigma_b_max"],
        n_steps=pick["n_steps"],
        eta=s["eta"],
        noise=NoiseSpec(1.0, pick["kernel"], pick["alpha"]),
        patch=pick["patch"],
        sigma_data=s["sigma_data"],
        t_eps=s["t_eps"],
        fresh_correction_noise=s["fresh_correction_noise"],
    )
    if s.get("beta0") is not None:
        cfg = cfg.with_(t_s=t_s_for_residual(s["beta0"], cfg))
    return cfg


def relay_config(s: dict) -> RelayConfig:
    st1 = default_stage1(s["stage1_steps"], s["stage1_eta"]).with_(
        p_mean=s["p_mean"], p_std=s["p_std"], sigma_data=s["sigma_data"], t_eps=s["t_eps"]
    )
    return RelayConfig(s["low_res"], s["factor"], st1, stage_config(s, relay=True))


def _dataset(s: dict) -> ToyDataset:
    return ToyDataset(s["dataset"], s["size"], path=s.get("data_path"))


def _corpus(s: dict, rng: RandomSource) -> np.ndarray:
    if s.get("input"):
        return read_pgm_dir(s["input"])
    return _dataset(s).sample(rng, s["samples"])


def _write_images(out: OutputDir, prefix: str, fields: np.ndarray, count: int) -> None:
    fields = fields.reshape(-1, *fields.shape[-2:])
    for i in range(min(count, len(fields))):
        out.write_bytes(f"{prefix}_{i:04d}.pgm", encode_pgm(fields[i]))


def _relay_denoisers(s: dict, cfg: RelayConfig):
    (d1, d2), priors = gaussian_relay_denoisers(cfg, low_var=s["low_var"], detail_var=s["detail_var"])
    if s.get("stage1_checkpoint"):
        d1 = ConvDenoiser.load(s["stage1_checkpoint"])
    if s.get("stage2_checkpoint"):
        d2 = ConvDenoiser.load(s["stage2_checkpoint"])
    return (d1, d2), priors


# ---------------------------------------------------------------------------
# subcommands


def cmd_spectra(s, out: OutputDir, rng: RandomSource) -> None:
    corpus = _corpus(s, rng.spawn(0))
    u = spectral.dct2(corpus)
    lines = ["image,freq,power"]
    for i, ui in enumerate(u):
        c = spectral.psd_curve(ui, s["bins"])
        lines += [f"{i},{f:.6f},{p:.10e}" for f, p in zip(c.freq, c.power)]
    out.write_text("psd_per_image.csv", "\n".join(lines) + "\n")
    out.write_text("psd_mean.csv", spectral.psd_curve(u, s["bins"]).to_csv())
    if s.get("snr_sigma"):
        h, w = corpus.shape[-2:]
        noise = spectral.dct2(gaussian_field(h, w, s["snr_sigma"], rng.spawn(1), len(corpus)))
        out.write_text("snr_mean.csv", spectral.snr_curve(u, noise, s["bins"]).to_csv())


def cmd_noise(s, out: OutputDir, rng: RandomSource) -> None:
    n, r = s["size"], s["radius"]
    k = s["kernel"] if s["kernel"] is not None else 4
    alpha = s["alpha"] if s["alpha"] is not None else 0.15
    spec = NoiseSpec(1.0, k, 0.0)
    mean, se, oracle = block_covariance_study(spec, n, s["samples"], rng.spawn(0), r)
    lines = ["dx,dy,empirical,se,oracle,z"]
    for a in range(2 * r + 1):
        for b in range(2 * r + 1):
            z = (mean[a, b] - oracle[a, b]) / se[a, b]
            lines.append(f"{b - r},{a - r},{mean[a, b]:.6e},{se[a, b]:.3e},{oracle[a, b]:.6e},{z:.3f}")
    out.write_text("covariance.csv", "\n".join(lines) + "\n")
    if n % k == 0:
        blk = spectral.psd_curve(spectral.dct2(block_noise(n, n, spec, rng.spawn(1), s["samples"])), s["bins"])
        low = gaussian_field(n // k, n // k, 1.0, rng.spawn(2), s["samples"])
        up = spectral.psd_curve(spectral.dct2(spectral.upsample_nearest(low, k)), s["bins"])
        lines = ["freq,psd_block,psd_upsampled_iid"]
        lines += [f"{f:.6f},{a:.10e},{b:.10e}" for f, a, b in zip(blk.freq, blk.power, up.power)]
        out.write_text("spectrum_equivalence.csv", "\n".join(lines) + "\n")
    example = mixed_noise(n, n, NoiseSpec(1.0, k, alpha), rng.spawn(3))
    out.write_bytes("mixed_noise.pgm", encode_pgm(np.tanh(example / 2)))


def cmd_forward(s, out: OutputDir, rng: RandomSource) -> None:
    cfg = stage_config(s, relay=False)
    x = _corpus({**s, "samples": 1}, rng.spawn(0))[0]
    out.write_bytes("input.pgm", encode_pgm(x))
    for i, t in enumerate(s["times"]):
        xt = forward_corrupt(x, t, cfg, rng.spawn(1 + i))
        out.write_bytes(f"forward_t{t:.3f}.pgm", encode_pgm(xt))
    out.write_text("schedule.csv", schedule_table(cfg))


def cmd_train(s, out: OutputDir, rng: RandomSource) -> None:
    cfg = stage_config(s, relay=False)
    net, trace = train_toy(
        _dataset(s), cfg, s["epochs"], rng, s["steps_per_epoch"], s["batch"], s["lr"], s["channels"]
    )
    out.write_text("train_log.csv", trace.to_csv())
    net.save(out.path("denoiser.rdmk"))
    print(f"eval loss {trace.initial_eval:.5f} -> {trace.final_eval:.5f}")


def cmd_sample(s, out: OutputDir, rng: RandomSource) -> None:
    cfg = stage_config(s, relay=False)
    n = s["size"]
    if s.get("checkpoint"):
        den = ConvDenoiser.load(s["checkpoint"])
    else:
        den = GaussianDenoiser(_dataset({**s, "dataset": "gaussian"}).prior(), cfg)
    x, trace = sample(den, cfg, (n, n), rng.spawn(0), batch=s["samples"], order=s["order"])
    out.write_text("trace.csv", trace.to_csv())
    _write_images(out, "sample", x, s["images"])
    if s["dataset"] != "pgm" or s.get("data_path"):
        ref = _dataset(s).sample(rng.spawn(1), s["samples"])
        q = quality_report(x, ref)
        out.write_text("quality.csv", "spectral_distance,mean_error,var_error\n" + ",".join(q.row()) + "\n")


def cmd_relay(s, out: OutputDir, rng: RandomSource) -> None:
    cfg = relay_config(s)
    dens, priors = _relay_denoisers(s, cfg)
    x, (tr1, tr2), x_low = run_relay(cfg, dens, rng.spawn(0), batch=s["samples"])
    out.write_text("trace_stage1.csv", tr1.to_csv())
    out.write_text("trace_stage2.csv", tr2.to_csv())
    _write_images(out, "relay", x, s["images"])
    _write_images(out, "stage1", x_low, s["images"])
    ref = priors[1].sample(rng.spawn(1), s["samples"])
    q = quality_report(x, ref)
    dev = float(np.mean(np.abs(spectral.downsample_mean(x, cfg.factor) - x_low)))
    lines = ["spectral_distance,mean_error,var_error,effective_nfe,patch_mean_deviation,residual_sigma"]
    lines.append(",".join(q.row()) + f",{cfg.effective_nfe},{dev:.6f},{tr2.rows[0][2]:.6f}")
    out.write_text("quality.csv", "\n".join(lines) + "\n")


def cmd_sweep(s, out: OutputDir, rng: RandomSource) -> None:
    cfg = relay_config(s)
    dens, priors = _relay_denoisers(s, cfg)
    ref = priors[1].sample(rng.spawn(0), s["samples"])
    if s["sweep"] not in ("eta", "nfe", "both"):
        raise UsageError(f"sweep must be eta, nfe or both, got {s['sweep']!r}")
    if s["sweep"] in ("eta", "both"):
        out.write_text("eta_sweep.csv", eta_sweep(cfg, s["etas"], dens, ref, rng.spawn(1), s["samples"]))
    if s["sweep"] in ("nfe", "both"):
        out.write_text("nfe_sweep.csv", nfe_sweep(cfg, dens, ref, rng.spawn(2), s["samples"]))


def cmd_verify(s, out: OutputDir, rng: RandomSource) -> int:
    names = list(SUITES) if s["suite"] == "all" else [s["suite"]]
    if any(n not in SUITES for n in names):
        raise UsageError(f"unknown suite {s['suite']!r}; choose all or one of {', '.join(SUITES)}")
    lines, failed, total = [], 0, 0.0
    for name in names:
        res = run_suite(name, s["seed"])
        out.write_text(f"verify_{name}.csv", res.csv)
        print(res.line(), flush=True)
        lines.append(res.line())
        failed += not res.passed
        total += res.seconds
    summary = f"{len(names) - failed}/{len(names)} suites passed in {total:.2f}s"
    print(summary)
    out.write_text("verify_summary.txt", "\n".join(lines + [summary]) + "\n")
    return 1 if failed else 0


HANDLERS = {
    "spectra": cmd_spectra,
    "noise": cmd_noise,
    "forward": cmd_forward,
    "train": cmd_train,
    "sample": cmd_sample,
    "relay": cmd_relay,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = resolve(args.command, args)
        if args.command in ("forward", "train", "sample"):
            stage_config(settings, relay=False)
        elif args.command in ("relay", "sweep"):
            relay_config(settings)
    except (UsageError, ValueError) as exc:
        parser.error(str(exc))  # exits 2
    out = OutputDir(settings["out"])
    rng = RandomSource(settings["seed"])
    try:
        code = HANDLERS[args.command](settings, out, rng) or 0
    except UsageError as exc:
        print(f"relaydiff {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"relaydiff {args.command}: error: {exc}", file=sys.stderr)
        return 1
    out.write_manifest(settings["seed"], {"command": args.command})
    return code


if __name__ == "__main__":
    sys.exit(main())
