"""Binary PPM/PGM reading and writing, plus 16-bit density heatmaps."""

from __future__ import annotations

import os
import re

import numpy as np

from .errors import ValidationError

_WS = b" \t\r\n"


class _HeaderReader:
    """Tokenizer for netpbm headers that keeps track of byte offsets."""

    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path
        self.comments: list[str] = []

    def token(self) -> tuple[bytes, int]:
        buf = self.buf
        while True:
            while self.pos < len(buf) and buf[self.pos] in _WS:
                self.pos += 1
            if self.pos < len(buf) and buf[self.pos : self.pos + 1] == b"#":
                end = buf.find(b"\n", self.pos)
                end = len(buf) if end < 0 else end
                self.comments.append(buf[self.pos + 1 : end].decode("ascii", "replace").strip())
                self.pos = end
                continue
            break
        start = self.pos
        while self.pos < len(buf) and buf[self.pos] not in _WS and buf[self.pos : self.pos + 1] != b"#":
            self.pos += 1
        if start == self.pos:
            raise ValidationError(f"{self.path}: unexpected end of header at byte {start}")
        return buf[start : self.pos], start

    def integer(self, what: str) -> int:
        tok, off = self.token()
        if not tok.isdigit():
            raise ValidationError(f"{self.path}: bad {what} {tok!r} at byte {off}")
        return int(tok)


def read_netpbm(path) -> tuple[np.ndarray, list[str]]:
    """Read a P5/P6 file; returns (uint array HxW or HxWx3, header comments)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    rd = _HeaderReader(buf, path)
    magic, off = rd.token()
    if magic not in (b"P5", b"P6"):
        raise ValidationError(f"{path}: unsupported magic {magic!r} at byte {off} (need P5 or P6)")
    width = rd.integer("width")
    height = rd.integer("height")
    maxval = rd.integer("maxval")
    if width == 0 or height == 0:
        raise ValidationError(f"{path}: zero-extent image {width}x{height}")
    if not 0 < maxval < 65536:
        raise ValidationError(f"{path}: maxval {maxval} out of range")
    if rd.pos >= len(buf) or buf[rd.pos] not in _WS:
        raise ValidationError(f"{path}: missing separator after header at byte {rd.pos}")
    start = rd.pos + 1
    channels = 3 if magic == b"P6" else 1
    bpv = 1 if maxval < 256 else 2
    expected = width * height * channels * bpv
    actual = len(buf) - start
    if actual < expected:
        raise ValidationError(
            f"{path}: truncated payload at byte {start}: expected {expected} bytes, got {actual}"
        )
    dtype = np.uint8 if bpv == 1 else np.dtype(">u2")
    arr = np.frombuffer(buf, dtype=dtype, count=width * height * channels, offset=start)
    arr = arr.reshape((height, width, 3) if channels == 3 else (height, width))
    return arr.astype(np.uint16 if bpv == 2 else np.uint8), rd.comments


def load_image(path) -> tuple[np.ndarray, tuple[int, int]]:
    """Load an 8-bit P6 or P5 file as a (1, 3, H, W) float array in [0, 1].

    Grayscale files are replicated to three channels. Returns the array and
    the original (width, height).
    """
    arr, _ = read_netpbm(path)
    if arr.dtype != np.uint8:
        raise ValidationError(f"{path}: only 8-bit images are supported as network input")
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    h, w = arr.shape[:2]
    img = arr.transpose(2, 0, 1)[None].astype(np.float32) / 255.0
    return img, (w, h)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary P6."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValidationError(f"write_ppm expects (H, W, 3) uint8, got {rgb.shape} {rgb.dtype}")
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb).tobytes())


def write_pgm(path, gray: np.ndarray, comment: str | None = None) -> None:
    """Write an (H, W) uint8 or uint16 array as binary P5 (16-bit is big-endian)."""
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype not in (np.uint8, np.uint16):
        raise ValidationError(f"write_pgm expects (H, W) uint8/uint16, got {gray.shape} {gray.dtype}")
    h, w = gray.shape
    maxval = 255 if gray.dtype == np.uint8 else 65535
    header = "P5\n" + (f"# {comment}\n" if comment else "") + f"{w} {h}\n{maxval}\n"
    payload = gray.astype(">u2").tobytes() if maxval == 65535 else gray.tobytes()
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)


def image_to_rgb8(img: np.ndarray) -> np.ndarray:
    """(1, 3, H, W) or (3, H, W) floats in [0, 1] -> (H, W, 3) uint8."""
    a = np.asarray(img)
    if a.ndim == 4:
        a = a[0]
    return np.clip(np.rint(a.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


_SCALE_RE = re.compile(r"^scale\s+(\S+)$")


def export_density_pgm(density: np.ndarray, path) -> float:
    """Save a non-negative map as 16-bit P5 with max -> 65535.

    The multiplier is written as ``# scale <value>`` so the map can be
    recovered as ``pixel / scale``. An all-zero map is stored with scale 1.
    """
    d = np.asarray(density, dtype=np.float64)
    if d.ndim == 4:
        d = d[0, 0]
    if d.ndim != 2:
        raise ValidationError(f"density map must be 2-D, got {d.shape}")
    if (d < 0).any() or not np.isfinite(d).all():
        raise ValidationError("density map must be finite and non-negative")
    peak = d.max() if d.size else 0.0
    scale = float(65535.0 / peak) if peak > 0 else 1.0
    q = np.clip(np.rint(d * scale), 0, 65535).astype(np.uint16)
    write_pgm(path, q, comment=f"scale {scale!r}")
    return scale


def import_density_pgm(path) -> np.ndarray:
    arr, comments = read_netpbm(path)
    scale = None
    for c in comments:
        m = _SCALE_RE.match(c)
        if m:
            scale = float(m.group(1))
    if scale is None or arr.ndim != 2:
        raise ValidationError(f"{path}: not a density heatmap (no scale comment)")
    return arr.astype(np.float64) / scale


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)
