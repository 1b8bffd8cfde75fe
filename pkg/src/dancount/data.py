"""Datasets: manifests on disk and in-memory samples with ground truth."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .annotations import read_annotations
from .config import TrainConfig
from .errors import ValidationError
from .groundtruth import HeadAnnotations, class_map, count_map, density_map
from .imageio import load_image
from .preprocess import preprocess
from .synth import MANIFEST, SynthImage


@dataclass
class ManifestEntry:
    image: str
    annotation: str
    split: str
    regime: Optional[str] = None


def read_manifest(data_dir) -> list[ManifestEntry]:
    """Parse ``manifest.txt``: ``image annotation split [regime]`` per line."""
    path = os.path.join(data_dir, MANIFEST)
    if not os.path.exists(path):
        raise ValidationError(f"{data_dir}: no {MANIFEST}")
    entries, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            toks = line.split()
            if not toks:
                continue
            if len(toks) not in (3, 4):
                raise ValidationError(f"{path}:{lineno}: expected 'image annotation split [regime]'")
            img, ann = (os.path.join(data_dir, t) for t in toks[:2])
            for f in (img, ann):
                if not os.path.exists(f):
                    raise ValidationError(f"{path}:{lineno}: missing file {f}")
            if img in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate image {toks[0]}")
            seen.add(img)
            entries.append(ManifestEntry(img, ann, toks[2], toks[3] if len(toks) == 4 else None))
    if not entries:
        raise ValidationError(f"{path}: empty manifest")
    return entries


@dataclass
class Sample:
    """One network-ready image with ground truth in the input frame."""

    name: str
    image: np.ndarray  # (3, S, S) float32
    annotations: HeadAnnotations
    density: np.ndarray  # (S, S)
    counts: np.ndarray  # (rows, cols)
    regime: Optional[str] = None

    @property
    def truth(self) -> float:
        return float(len(self.annotations))

    def classes(self, th: float) -> np.ndarray:
        return class_map(self.counts, th)


def make_sample(name: str, image: np.ndarray, ann: HeadAnnotations, config: TrainConfig,
                regime: Optional[str] = None) -> Sample:
    img, mapped, _ = preprocess(image, ann, config.input_size)
    dens = density_map(mapped, config.input_size, config.sigma_spec())
    return Sample(
        name=name,
        image=img[0].astype(np.float32),
        annotations=mapped,
        density=dens.astype(np.float32),
        counts=count_map(dens, config.grid),
        regime=regime,
    )


def samples_from_synth(items: Sequence[SynthImage], config: TrainConfig, prefix="synth") -> list[Sample]:
    out = []
    for i, it in enumerate(items):
        img = it.rgb.transpose(2, 0, 1)[None].astype(np.float32) / 255.0
        out.append(make_sample(f"{prefix}_{i:04d}", img, it.annotations, config, it.regime))
    return out


def load_dataset(data_dir, config: TrainConfig, split: Optional[str] = None) -> list[Sample]:
    """Load every manifest entry (optionally only one split) as samples."""
    out = []
    for e in read_manifest(data_dir):
        if split is not None and e.split != split:
            continue
        img, (w, h) = load_image(e.image)
        ann = read_annotations(e.annotation)
        if ann.size != (w, h):
            raise ValidationError(f"{e.annotation}: size {ann.size} does not match image {w}x{h}")
        out.append(make_sample(os.path.basename(e.image), img, ann, config, e.regime))
    if not out:
        raise ValidationError(f"{data_dir}: no samples for split {split!r}")
    return out


def flip_sample_arrays(image, density, counts, classes=None):
    """Horizontal mirror of an (image, density, counts[, classes]) tuple."""
    out = [image[..., ::-1], density[..., ::-1], counts[..., ::-1]]
    if classes is not None:
        out.append(classes[..., ::-1])
    return tuple(np.ascontiguousarray(a) for a in out)
