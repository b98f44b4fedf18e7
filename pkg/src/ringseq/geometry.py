"""Concentric ring partition of a lesion disc and patch-sequence construction.

Sequences come in three modes:

* ``SOS``: K ordered sets of patches, innermost ring first.
* ``SOP``: the same patches flattened in (ring, angle) order.
* ``ROP``: a seeded random permutation of the SOP list.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .imageio import Image, LesionAnnotation

SOS, SOP, ROP = "SOS", "SOP", "ROP"
MODES = (SOS, SOP, ROP)


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class GeometryConfig:
    K: int = 3
    side: int = 32
    arc_step: float | None = None  # None -> side / 2
    n_min: int = 4

    @property
    def step(self) -> float:
        return self.side / 2 if self.arc_step is None else self.arc_step


@dataclass(frozen=True)
class RingPartition:
    cx: float
    cy: float
    boundaries: tuple

    @property
    def K(self) -> int:
        return len(self.boundaries) - 1

    def ring_of(self, dist: float) -> int:
        """1-based ring index for a distance in [0, r)."""
        b = self.boundaries
        if dist < 0 or dist >= b[-1]:
            raise GeometryError(f"distance {dist} outside [0, {b[-1]})")
        for i in range(1, len(b)):
            if dist < b[i]:
                return i
        raise AssertionError("unreachable")


@dataclass(frozen=True)
class Center:
    set_index: int
    angle: float
    x: float
    y: float
    raw_x: float  # before border clamping
    raw_y: float


@dataclass(eq=False)
class Patch:
    set_index: int
    angle: float
    center: tuple
    side: int
    data: np.ndarray  # (side, side, channels) float64 in [0, 1]


@dataclass(eq=False)
class PatchSequence:
    mode: str
    label: int
    sets: list = field(default_factory=list)  # SOS only
    flat: list = field(default_factory=list)  # SOP / ROP

    def patches(self) -> list:
        return [p for s in self.sets for p in s] if self.mode == SOS else list(self.flat)

    def __len__(self):
        return len(self.sets) if self.mode == SOS else len(self.flat)


def partition(ann: LesionAnnotation, K: int) -> RingPartition:
    if K < 1:
        raise GeometryError(f"K must be >= 1, got {K}")
    if not ann.r > 0:
        raise GeometryError(f"radius must be positive, got {ann.r}")
    bounds = tuple([0.0] + [ann.r * i / K for i in range(1, K)] + [float(ann.r)])
    return RingPartition(ann.cx, ann.cy, bounds)


def ring_counts(part: RingPartition, side: int, arc_step: float, n_min: int) -> list[int]:
    counts = []
    for i in range(1, part.K + 1):
        mid = (part.boundaries[i - 1] + part.boundaries[i]) / 2
        if mid < side / 2:
            counts.append(1)
        else:
            counts.append(max(n_min, math.ceil(2 * math.pi * mid / arc_step)))
    return counts


def sample_centers(
    part: RingPartition,
    side: int,
    arc_step: float,
    n_min: int,
    width: int,
    height: int,
) -> list[Center]:
    """Patch centers on each ring's mid-circle, clamped so side x side windows fit the image."""
    if side < 2 or not arc_step > 0 or n_min < 1:
        raise GeometryError("need side >= 2, arc_step > 0, n_min >= 1")
    if width < side or height < side:
        raise GeometryError(f"{width}x{height} image cannot hold a {side}px patch")
    half = side / 2
    out = []
    for i, n in enumerate(ring_counts(part, side, arc_step, n_min), start=1):
        mid = (part.boundaries[i - 1] + part.boundaries[i]) / 2
        if n == 1 and mid < half:
            # too small for a ring of patches: the central disc uses its
            # centroid, an outer annulus one point on its mid-circle
            pts = [(0.0, part.cx, part.cy)] if i == 1 else [(0.0, part.cx + mid, part.cy)]
        else:
            pts = []
            for j in range(n):
                a = 2 * math.pi * j / n
                pts.append((a, part.cx + mid * math.cos(a), part.cy + mid * math.sin(a)))
        for a, rx, ry in pts:
            x = min(max(rx, half), width - half)
            y = min(max(ry, half), height - half)
            out.append(Center(i, a, x, y, rx, ry))
    return out


def window_origin(x: float, y: float, side: int) -> tuple[int, int]:
    # round half up, so a center at k + side/2 maps to origin k
    return math.floor(x - side / 2 + 0.5), math.floor(y - side / 2 + 0.5)


def extract_patch(img: Image, center, side: int, set_index: int = 1, angle: float = 0.0) -> Patch:
    x, y = center
    x0, y0 = window_origin(x, y, side)
    if x0 < 0 or y0 < 0 or x0 + side > img.width or y0 + side > img.height:
        raise GeometryError(f"{side}px window at ({x}, {y}) leaves the {img.width}x{img.height} image")
    data = img.pixels[y0:y0 + side, x0:x0 + side, :].astype(np.float64) / 255.0
    return Patch(set_index, angle, (x, y), side, data)


def to_sop(seq: PatchSequence) -> PatchSequence:
    if seq.mode != SOS:
        raise GeometryError("to_sop expects an SOS sequence")
    flat = sorted(seq.patches(), key=lambda p: (p.set_index, p.angle))
    return PatchSequence(SOP, seq.label, flat=flat)


def to_rop(seq: PatchSequence, rng: np.random.Generator) -> PatchSequence:
    sop = to_sop(seq) if seq.mode == SOS else seq
    order = rng.permutation(len(sop.flat))
    return PatchSequence(ROP, seq.label, flat=[sop.flat[k] for k in order])


def build_sequence(
    img: Image,
    ann: LesionAnnotation,
    cfg: GeometryConfig,
    mode: str = SOS,
    rng: np.random.Generator | None = None,
) -> PatchSequence:
    if mode not in MODES:
        raise GeometryError(f"unknown mode {mode!r}")
    ann.check_bounds(img)
    part = partition(ann, cfg.K)
    centers = sample_centers(part, cfg.side, cfg.step, cfg.n_min, img.width, img.height)
    sets = [[] for _ in range(cfg.K)]
    for c in centers:
        sets[c.set_index - 1].append(extract_patch(img, (c.x, c.y), cfg.side, c.set_index, c.angle))
    seq = PatchSequence(SOS, ann.label, sets=sets)
    if mode == SOP:
        return to_sop(seq)
    if mode == ROP:
        if rng is None:
            raise GeometryError("ROP needs an rng")
        return to_rop(seq, rng)
    return seq


def set_dropout(seq: PatchSequence, p: float, rng: np.random.Generator) -> PatchSequence:
    """Drop each patch with probability ``p``; an emptied set keeps one random patch."""
    if not 0 <= p < 1:
        raise GeometryError(f"dropout probability must be in [0, 1), got {p}")
    if seq.mode != SOS:
        raise GeometryError("set_dropout applies to SOS sequences")
    if p == 0:
        return replace(seq, sets=[list(s) for s in seq.sets])
    new_sets = []
    for s in seq.sets:
        keep = rng.random(len(s)) >= p
        kept = [q for q, k in zip(s, keep) if k]
        if not kept:
            kept = [s[int(rng.integers(len(s)))]]
        new_sets.append(kept)
    return replace(seq, sets=new_sets)


def downscale(img: Image, target_w: int, target_h: int) -> Image:
    """Nearest neighbour: target pixel i samples source index floor(i * src / target)."""
    if target_w < 1 or target_h < 1:
        raise GeometryError("target dimensions must be >= 1")
    ys = (np.arange(target_h) * img.height) // target_h
    xs = (np.arange(target_w) * img.width) // target_w
    return Image(img.pixels[ys][:, xs])
