"""Procedural glyph datasets standing in for small natural-image benchmarks.

Every class is symmetric under a horizontal flip, so the standard
augmentation never changes a label.  In orientation-sensitive mode the
classes come in quarter-turn related groups (bar / column, T / inverted T,
...), which makes large-angle rotation a genuine out-of-distribution
augmentation whose outputs may even look like another class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datafile import Dataset

NOISE_PRESETS = {"low": 0.08, "medium": 0.25, "high": 0.6}

# strokes are segments ((r0, c0), (r1, c1)) in unit coordinates, row down
_H = [((0.5, 0.15), (0.5, 0.85))]
_V = [((0.15, 0.5), (0.85, 0.5))]


def _circle(n=16, radius=0.33):
    pts = [(0.5 + radius * math.sin(2 * math.pi * i / n), 0.5 + radius * math.cos(2 * math.pi * i / n)) for i in range(n + 1)]
    return list(zip(pts[:-1], pts[1:]))


def _poly(*pts, closed=False):
    pts = list(pts) + ([pts[0]] if closed else [])
    return list(zip(pts[:-1], pts[1:]))


GENERAL_GLYPHS = {
    "ring": _circle(),
    "box": _poly((0.2, 0.2), (0.2, 0.8), (0.8, 0.8), (0.8, 0.2), closed=True),
    "plus": _H + _V,
    "cross": [((0.2, 0.2), (0.8, 0.8)), ((0.2, 0.8), (0.8, 0.2))],
    "equals": [((0.35, 0.15), (0.35, 0.85)), ((0.65, 0.15), (0.65, 0.85))],
    "pillars": [((0.15, 0.35), (0.85, 0.35)), ((0.15, 0.65), (0.85, 0.65))],
    "diamond": _poly((0.15, 0.5), (0.5, 0.85), (0.85, 0.5), (0.5, 0.15), closed=True),
    "triangle": _poly((0.2, 0.5), (0.8, 0.85), (0.8, 0.15), closed=True),
    "hbeam": [((0.2, 0.25), (0.8, 0.25)), ((0.2, 0.75), (0.8, 0.75)), ((0.5, 0.25), (0.5, 0.75))],
    "dot": _poly((0.4, 0.4), (0.4, 0.6), (0.6, 0.6), (0.6, 0.4), closed=True) + [((0.45, 0.45), (0.55, 0.55)), ((0.45, 0.55), (0.55, 0.45))],
}

ORIENTED_GLYPHS = {
    "bar": _H,
    "column": _V,
    "tee": [((0.2, 0.15), (0.2, 0.85)), ((0.2, 0.5), (0.85, 0.5))],
    "up_tack": [((0.8, 0.15), (0.8, 0.85)), ((0.15, 0.5), (0.8, 0.5))],
    "caret": _poly((0.75, 0.15), (0.25, 0.5), (0.75, 0.85)),
    "vee": _poly((0.25, 0.15), (0.75, 0.5), (0.25, 0.85)),
    "cup": _poly((0.2, 0.2), (0.8, 0.2), (0.8, 0.8), (0.2, 0.8)),
    "cap": _poly((0.8, 0.2), (0.2, 0.2), (0.2, 0.8), (0.8, 0.8)),
    "equals": GENERAL_GLYPHS["equals"],
    "pillars": GENERAL_GLYPHS["pillars"],
}


@dataclass(frozen=True)
class GlyphSpec:
    n_classes: int = 10
    per_class: int = 200
    test_per_class: int = 100
    size: int = 16
    noise: float = NOISE_PRESETS["medium"]
    orientation_sensitive: bool = False
    seed: int = 0
    jitter: float = 1.5

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.size not in (16, 32):
            raise ValueError("glyph size must be 16 or 32")
        if self.n_classes > len(self.catalogue):
            raise ValueError(f"at most {len(self.catalogue)} glyph classes are available")
        if self.per_class < 1 or self.test_per_class < 0:
            raise ValueError("per_class must be >= 1 and test_per_class >= 0")

    @property
    def catalogue(self) -> dict:
        return ORIENTED_GLYPHS if self.orientation_sensitive else GENERAL_GLYPHS

    @property
    def class_names(self) -> list[str]:
        return list(self.catalogue)[: self.n_classes]


def _segment_distance(rr, cc, a, b):
    (r0, c0), (r1, c1) = a, b
    dr, dc = r1 - r0, c1 - c0
    denom = dr * dr + dc * dc
    t = np.clip(((rr - r0) * dr + (cc - c0) * dc) / denom, 0.0, 1.0) if denom > 0 else np.zeros_like(rr)
    return np.hypot(rr - (r0 + t * dr), cc - (c0 + t * dc))


def render_glyph(strokes, size: int, rng: np.random.Generator, noise: float, jitter: float) -> np.ndarray:
    """Rasterise strokes under a random similarity jitter plus pixel noise."""
    scale = rng.uniform(0.8, 1.05) * size
    shift = rng.uniform(-jitter, jitter, size=2)
    thickness = rng.uniform(1.0, 1.8) * size / 16
    intensity = rng.uniform(170, 255)
    centre = (size - 1) / 2
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    dist = np.full((size, size), np.inf)
    for a, b in strokes:
        pa = ((a[0] - 0.5) * scale + centre + shift[0], (a[1] - 0.5) * scale + centre + shift[1])
        pb = ((b[0] - 0.5) * scale + centre + shift[0], (b[1] - 0.5) * scale + centre + shift[1])
        dist = np.minimum(dist, _segment_distance(rr, cc, pa, pb))
    ink = np.clip(thickness / 2 + 0.5 - dist, 0.0, 1.0) * intensity
    ink += rng.normal(0.0, noise * 255.0, size=ink.shape)
    return np.clip(np.rint(ink), 0, 255).astype(np.uint8)[:, :, None]


def _render_split(spec: GlyphSpec, per_class: int, seed_tag: int) -> Dataset:
    strokes = [spec.catalogue[name] for name in spec.class_names]
    n = per_class * spec.n_classes
    images = np.empty((n, spec.size, spec.size, 1), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        label = i % spec.n_classes
        rng = np.random.default_rng([spec.seed, seed_tag, i])
        images[i] = render_glyph(strokes[label], spec.size, rng, spec.noise, spec.jitter * spec.size / 16)
        labels[i] = label
    return Dataset(images, labels, spec.n_classes)


def generate_glyphs(spec: GlyphSpec) -> tuple[Dataset, Dataset]:
    """(train, test); the two splits use disjoint seed streams."""
    return _render_split(spec, spec.per_class, 0), _render_split(spec, spec.test_per_class, 1)
