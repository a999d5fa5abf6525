import subprocess
import sys

import numpy as np
import pytest

from relaydiff import cli
from relaydiff.fileio import read_pgm, write_pgm


def run(argv):
    try:
        return cli.main(argv)
    except SystemExit as exc:
        return exc.code


def test_verify_single_suite(tmp_path, capsys):
    code = run(["verify", "--suite", "covariance", "--seed", "7", "--out", str(tmp_path)])
    assert code == 0
    assert "PASS" in capsys.readouterr().out
    csv = (tmp_path / "verify_covariance.csv").read_text()
    assert csv.count("\n") > 5
    manifest = (tmp_path / "manifest.txt").read_text().splitlines()
    assert manifest[0] == "# seed=7"
    assert any(line.endswith("  verify_covariance.csv") for line in manifest)


def test_unknown_key_in_config_file(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("eta = 0.1\nwarp_factor = 9\n")
    assert run(["sample", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "warp_factor" in capsys.readouterr().err


def test_unknown_key_via_set(tmp_path, capsys):
    assert run(["relay", "--set", "warp_factor=9", "--out", str(tmp_path)]) == 2
    assert "warp_factor" in capsys.readouterr().err


def test_invalid_value_is_usage_error(tmp_path):
    assert run(["sample", "--eta", "1.5", "--out", str(tmp_path)]) == 2
    assert run(["sample", "--n-steps", "many", "--out", str(tmp_path)]) == 2


def test_runtime_failure_exits_one(tmp_path, capsys):
    code = run(["sample", "--checkpoint", str(tmp_path / "missing.rdmk"), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "o" / "manifest.txt").exists()


def test_precedence_flag_over_set_over_config(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("eta = 0.1\nn_steps = 3\nsize = 4\n")
    args = cli.build_parser().parse_args(["sample", "--config", str(cfg), "--set", "eta=0.3", "--set", "n_steps=5"])
    s = cli.resolve("sample", args)
    assert s["eta"] == 0.3 and s["n_steps"] == 5 and s["size"] == 4
    args = cli.build_parser().parse_args(["sample", "--config", str(cfg), "--set", "eta=0.3", "--eta", "0.4"])
    assert cli.resolve("sample", args)["eta"] == 0.4


def test_every_flag_names_its_config_key():
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        for action in p._actions:
            if action.dest in cli.KEYS:
                assert f"(config key: {action.dest})" in action.help, (name, action.dest)
                assert "[default:" in action.help


def test_spectra_on_pgm_directory(tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    rng = np.random.default_rng(0)
    for i in range(3):
        write_pgm(src / f"{i}.pgm", np.tanh(rng.normal(size=(16, 16))))
    out = tmp_path / "out"
    assert run(["spectra", "--input", str(src), "--bins", "8", "--out", str(out)]) == 0
    per = (out / "psd_per_image.csv").read_text().splitlines()
    assert per[0] == "image,freq,power"
    assert {line.split(",")[0] for line in per[1:]} == {"0", "1", "2"}
    assert (out / "psd_mean.csv").exists()


def test_same_seed_same_outputs(tmp_path):
    argv = ["relay", "--low-res", "4", "--factor", "2", "--stage1-steps", "3", "--n-steps", "3",
            "--samples", "4", "--images", "2", "--seed", "11"]
    assert run(argv + ["--out", str(tmp_path / "a")]) == 0
    assert run(argv + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "manifest.txt").read_text()
    assert a == (tmp_path / "b" / "manifest.txt").read_text()
    assert read_pgm(tmp_path / "a" / "relay_0000.pgm").shape == (8, 8)


@pytest.mark.parametrize(
    "argv",
    [
        ["noise", "--size", "8", "--samples", "200", "--kernel", "2"],
        ["forward", "--size", "8", "--times", "0.2,0.8"],
        ["train", "--size", "8", "--epochs", "1", "--steps-per-epoch", "2", "--channels", "4"],
        ["sample", "--size", "8", "--n-steps", "3", "--samples", "4"],
        ["sweep", "--sweep", "eta", "--etas", "0,0.3", "--low-res", "4", "--factor", "2",
         "--stage1-steps", "2", "--n-steps", "2", "--samples", "4"],
    ],
)
def test_subcommands_smoke(tmp_path, argv):
    assert run(argv + ["--out", str(tmp_path)]) == 0
    assert (tmp_path / "manifest.txt").exists()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "relaydiff.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "verify" in res.stdout
