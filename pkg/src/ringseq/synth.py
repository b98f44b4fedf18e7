"""Synthetic lesion images whose class lives in the radial order of textures.

Every lesion is a disc of ``K_gen`` equal-width annuli, each filled with one
texture primitive.  A primitive is a +/-1 binary pattern scaled by the
amplitude and by a smooth radial envelope (zero on ring boundaries, peak at
the ring's mid-radius), added to the same base level.  All primitives thus
share one pixel histogram and differ only in spatial structure:

* ``hstripes``, ``vstripes``: bands ``period`` px wide
* ``checker``: ``period`` px checkerboard
* ``diagonal``: 45 degree bands (used when K_gen >= 4)
* ``fine_*``: the same at half the period (used when K_gen >= 5)

The envelope keeps a patch centred on one ring from reading its neighbours'
texture, so the label cannot be guessed from any single patch.

RADIAL_PERMUTATION: class c paints the c-th permutation of the first K_gen
primitives, innermost ring first (see :func:`class_orders`).  Every class
uses the same textures; only their radial order carries the label.

PROFILE: class c gets its own radial intensity profile (plateau offset per
ring), an easier task that any variant should solve.
"""
from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass

import numpy as np

from .imageio import DatasetManifest, Image, LesionAnnotation, write_image, write_manifest

RADIAL_PERMUTATION, PROFILE = "RADIAL_PERMUTATION", "PROFILE"
PRIMITIVES = ("hstripes", "vstripes", "checker", "diagonal", "fine_h", "fine_v", "fine_checker", "fine_diagonal")
BASE = 0.5
AMPLITUDE = 0.2
PERIOD = 4


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    mode: str = RADIAL_PERMUTATION
    n_train: int = 400
    n_test: int = 200
    image_size: int = 256
    classes: int = 4
    K_gen: int = 3
    noise_sigma: float = 0.05
    amplitude: float = AMPLITUDE
    period: int = PERIOD
    seed: int = 0
    patch_side: int = 32
    channels: int = 1

    def validate(self) -> None:
        if self.mode not in (RADIAL_PERMUTATION, PROFILE):
            raise SynthError(f"unknown mode {self.mode!r}")
        if self.classes < 2:
            raise SynthError("need at least 2 classes")
        if self.K_gen < 1 or self.K_gen > len(PRIMITIVES):
            raise SynthError(f"K_gen must be in 1..{len(PRIMITIVES)}")
        if self.image_size < 4 * self.patch_side:
            raise SynthError(f"image_size must be >= 4 * patch_side = {4 * self.patch_side}")
        if self.mode == RADIAL_PERMUTATION and self.classes > math.factorial(self.K_gen):
            raise SynthError(
                f"{self.classes} classes exceed the {math.factorial(self.K_gen)} orderings of K_gen={self.K_gen} rings"
            )
        if self.channels not in (1, 3):
            raise SynthError("channels must be 1 or 3")


def class_orders(classes: int, K_gen: int) -> list[tuple]:
    """Primitive index per ring (inner -> outer) for every class.

    Permutations are listed by (outermost primitive, then lexicographic), so
    consecutive classes share their outer ring and differ further inside.
    For K_gen=3 the order is 120, 210, 021, 201, 012, 102.
    """
    perms = sorted(itertools.permutations(range(K_gen)), key=lambda q: (q[-1], q))
    return perms[:classes]


def primitive_field(name: str, xs: np.ndarray, ys: np.ndarray, period: int = PERIOD) -> np.ndarray:
    """+1/-1 pattern of a texture primitive at integer pixel coordinates."""
    p = period
    if name.startswith("fine_"):
        p, name = max(1, period // 2), name[5:]
    if name in ("hstripes", "h"):
        bit = (ys // p) % 2
    elif name in ("vstripes", "v"):
        bit = (xs // p) % 2
    elif name == "checker":
        bit = (xs // p + ys // p) % 2
    elif name == "diagonal":
        bit = ((xs + ys) // p) % 2
    else:
        raise SynthError(f"unknown primitive {name!r}")
    return np.where(bit == 0, 1.0, -1.0)


def ring_envelope(u: np.ndarray) -> np.ndarray:
    """Texture amplitude at ring coordinate u (ring k spans [k, k+1)).

    sin^2 bump peaking at each annulus mid-radius and vanishing on its
    boundaries; the central disc uses cos^2 peaking at the centroid.
    """
    frac = u - np.floor(u)
    return np.where(u < 1, np.cos(np.pi * u / 2) ** 2, np.sin(np.pi * frac) ** 2)


def profile_levels(classes: int, K_gen: int) -> np.ndarray:
    """(classes, K_gen) intensity offsets; class c ramps with slope depending on c."""
    ring = np.arange(K_gen) / max(K_gen - 1, 1)
    slopes = np.linspace(-1.0, 1.0, classes)
    return AMPLITUDE * slopes[:, None] * (2 * ring[None, :] - 1)


def render(cfg: SynthConfig, label: int, rng: np.random.Generator):
    """One image plus its exact generation centroid and radius."""
    s = cfg.image_size
    cx = rng.uniform(0.25 * s, 0.75 * s)
    cy = rng.uniform(0.25 * s, 0.75 * s)
    r = rng.uniform(0.15 * s, 0.30 * s)
    ys, xs = np.mgrid[0:s, 0:s]
    field = BASE + rng.normal(0.0, cfg.noise_sigma, size=(s, s))
    # pixel centers at integer coordinates
    dist = np.hypot(xs - cx, ys - cy)
    ring = np.floor(dist / r * cfg.K_gen).astype(int)
    inside = ring < cfg.K_gen
    if cfg.mode == RADIAL_PERMUTATION:
        order = class_orders(cfg.classes, cfg.K_gen)[label]
        env = ring_envelope(dist / r * cfg.K_gen)
        for k, prim in enumerate(order):
            m = inside & (ring == k)
            field[m] += cfg.amplitude * env[m] * primitive_field(PRIMITIVES[prim], xs[m], ys[m], cfg.period)
    else:
        levels = profile_levels(cfg.classes, cfg.K_gen)[label]
        for k in range(cfg.K_gen):
            field[inside & (ring == k)] += levels[k]
    px = np.clip(np.floor(field * 255.0 + 0.5), 0, 255).astype(np.uint8)
    if cfg.channels == 3:
        px = np.repeat(px[:, :, None], 3, axis=2)
    return Image(px), cx, cy, r


def generate(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Write images under ``out_dir/images`` and ``out_dir/manifest.json``.

    Labels cycle through the classes so both splits are balanced.  Image i
    (train first, then test) draws from its own stream seeded by (seed, i).
    """
    cfg.validate()
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    ext = "pgm" if cfg.channels == 1 else "ppm"
    splits = {"train": [], "test": []}
    index = 0
    for split, n in (("train", cfg.n_train), ("test", cfg.n_test)):
        for j in range(n):
            label = j % cfg.classes
            rng = np.random.default_rng([cfg.seed, index])
            img, cx, cy, r = render(cfg, label, rng)
            rel = f"images/{split}_{j:05d}.{ext}"
            write_image(img, os.path.join(out_dir, rel))
            splits[split].append(LesionAnnotation(rel, cx, cy, r, label))
            index += 1
    names = [f"class{c}" for c in range(cfg.classes)]
    manifest = DatasetManifest(names, splits["train"], splits["test"], root=str(out_dir))
    write_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest
