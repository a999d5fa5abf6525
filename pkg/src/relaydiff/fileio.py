"""PGM images, CSV text, key=value configs and output manifests."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np


class PgmError(ValueError):
    pass


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """First ``count`` whitespace tokens of a PNM header, skipping comments."""
    out, pos, n = [], 0, len(data)
    while len(out) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmError("truncated PGM header")
        out.append(data[start:pos])
    return out, pos + 1  # single whitespace byte before the raster


def decode_pgm(data: bytes) -> np.ndarray:
    """Binary (P5) PGM to floats in [-1, 1]: v -> 2 v / maxval - 1."""
    (magic, w, h, maxval), pos = _tokens(data, 4)
    if magic != b"P5":
        raise PgmError(f"not a binary PGM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise PgmError(f"bad maxval {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h
    raster = np.frombuffer(data, dtype=dtype, count=count, offset=pos) if len(data) - pos >= count * np.dtype(dtype).itemsize else None
    if raster is None:
        raise PgmError("truncated PGM raster")
    return 2.0 * raster.reshape(h, w).astype(np.float64) / maxval - 1.0


def encode_pgm(x: np.ndarray, maxval: int = 255) -> bytes:
    """Floats in [-1, 1] (clipped) to a P5 PGM with the given maxval."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise PgmError("PGM needs a 2-D field")
    if not 0 < maxval < 65536:
        raise PgmError(f"bad maxval {maxval}")
    v = np.rint((np.clip(x, -1.0, 1.0) + 1.0) * maxval / 2.0)
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = x.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode() + v.astype(dtype).tobytes()


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def write_pgm(path, x: np.ndarray, maxval: int = 255) -> None:
    Path(path).write_bytes(encode_pgm(x, maxval))


def read_pgm_dir(path) -> np.ndarray:
    """All ``*.pgm`` files of a directory (sorted by name) or a single file, stacked."""
    p = Path(path)
    files = sorted(p.glob("*.pgm")) if p.is_dir() else [p] if p.is_file() else []
    if not files:
        raise PgmError(f"no .pgm files under {p}")
    images = [read_pgm(f) for f in files]
    if len({im.shape for im in images}) != 1:
        raise PgmError("PGM corpus images differ in size")
    return np.stack(images)


# ---------------------------------------------------------------------------
# configs


class ConfigError(ValueError):
    """Unknown key or malformed line; ``key`` names the offender when known."""

    def __init__(self, msg: str, key: str | None = None):
        super().__init__(msg)
        self.key = key


def parse_config(text: str, allowed=None) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if allowed is not None and key not in allowed:
            raise ConfigError(f"unknown config key {key!r}", key)
        out[key] = value
    return out


def read_config(path, allowed=None) -> dict[str, str]:
    return parse_config(Path(path).read_text(), allowed)


# ---------------------------------------------------------------------------
# outputs


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class OutputDir:
    """Collects written artifacts and emits ``manifest.txt``."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        if p not in self.files:
            self.files.append(p)
        return p

    def write_text(self, rel: str, text: str) -> Path:
        p = self.path(rel)
        p.write_text(text)
        return p

    def write_bytes(self, rel: str, data: bytes) -> Path:
        p = self.path(rel)
        p.write_bytes(data)
        return p

    def write_manifest(self, seed: int, extra: dict | None = None) -> Path:
        lines = [f"# seed={seed}"]
        for k, v in (extra or {}).items():
            lines.append(f"# {k}={v}")
        for p in sorted(self.files, key=lambda q: q.relative_to(self.root).as_posix()):
            lines.append(f"{sha256_file(p)}  {p.relative_to(self.root).as_posix()}")
        out = self.root / "manifest.txt"
        out.write_text("\n".join(lines) + "\n")
        return out
