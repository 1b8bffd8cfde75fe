"""Plain-text head annotation files.

Format: first line ``width height``, then one ``x y`` pair per line.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .groundtruth import HeadAnnotations


def write_annotations(ann: HeadAnnotations, path) -> None:
    w, h = ann.size
    lines = [f"{w} {h}"]
    lines += [f"{x!r} {y!r}" for x, y in ann.points.tolist()]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def _number(tok: str, lineno: int, path) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ValidationError(f"{path}:{lineno}: non-numeric token {tok!r}") from None
    if not np.isfinite(v):
        raise ValidationError(f"{path}:{lineno}: non-finite value {tok!r}")
    return v


def read_annotations(path) -> HeadAnnotations:
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValidationError(f"{path}:1: missing 'width height' line")
    head = lines[0].split()
    if len(head) != 2 or not all(t.isdigit() for t in head):
        raise ValidationError(f"{path}:1: expected integer 'width height', got {lines[0]!r}")
    w, h = int(head[0]), int(head[1])
    if w == 0 or h == 0:
        raise ValidationError(f"{path}:1: zero image extent {w}x{h}")
    pts = []
    for lineno, line in enumerate(lines[1:], start=2):
        toks = line.split()
        if not toks:
            continue
        if len(toks) != 2:
            raise ValidationError(f"{path}:{lineno}: expected 'x y', got {line!r}")
        x, y = (_number(t, lineno, path) for t in toks)
        if not (0 <= x < w and 0 <= y < h):
            raise ValidationError(f"{path}:{lineno}: point ({x}, {y}) outside [0,{w})x[0,{h})")
        pts.append((x, y))
    return HeadAnnotations(np.array(pts, dtype=np.float64).reshape(-1, 2), (w, h))
