import hashlib
import itertools
import os

import numpy as np
import pytest

from ringseq import synth
from ringseq.imageio import read_image, read_manifest
from ringseq.synth import PROFILE, RADIAL_PERMUTATION, SynthConfig, SynthError


def _tree_digest(root):
    h = hashlib.sha256()
    for dirpath, _, files in sorted(os.walk(root)):
        for f in sorted(files):
            p = os.path.join(dirpath, f)
            h.update(os.path.relpath(p, root).encode())
            with open(p, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def test_class_orders_documented_assignment():
    orders = synth.class_orders(6, 3)
    assert orders == [(1, 2, 0), (2, 1, 0), (0, 2, 1), (2, 0, 1), (0, 1, 2), (1, 0, 2)]
    assert synth.class_orders(4, 3) == orders[:4]
    assert len(set(orders)) == 6 and set(orders) == set(itertools.permutations(range(3)))


def test_too_many_classes():
    with pytest.raises(SynthError, match="7 classes"):
        SynthConfig(classes=7, K_gen=3).validate()
    SynthConfig(classes=7, K_gen=3, mode=PROFILE).validate()
    with pytest.raises(SynthError):
        SynthConfig(image_size=100, patch_side=32).validate()
    with pytest.raises(SynthError):
        SynthConfig(classes=1).validate()


def test_primitives_are_balanced_sign_patterns():
    ys, xs = np.mgrid[0:64, 0:64]
    for name in synth.PRIMITIVES:
        f = synth.primitive_field(name, xs, ys, 4)
        assert set(np.unique(f)) == {-1.0, 1.0}
        assert f.mean() == 0.0


def test_envelope_vanishes_on_ring_boundaries():
    u = np.array([1.0, 2.0, 3.0 - 1e-12, 0.0, 0.5, 1.5, 2.5])
    env = synth.ring_envelope(u)
    assert np.allclose(env[:3], 0.0, atol=1e-12)
    assert np.allclose(env[3:], [1.0, 0.5, 1.0, 1.0])


def test_generate_writes_manifest_and_images(tmp_path):
    cfg = SynthConfig(n_train=6, n_test=4, image_size=64, patch_side=16, seed=2)
    m = synth.generate(cfg, tmp_path)
    back = read_manifest(tmp_path / "manifest.json")
    assert len(back.train) == 6 and len(back.test) == 4
    assert back.classes == ["class0", "class1", "class2", "class3"]
    assert [a.label for a in back.train] == [0, 1, 2, 3, 0, 1]
    assert back.train == m.train
    img = read_image(back.resolve(back.train[0]))
    assert (img.width, img.height, img.channels) == (64, 64, 1)
    for a in back.train + back.test:
        assert 16 <= a.cx <= 48 and 16 <= a.cy <= 48
        assert 0.15 * 64 <= a.r <= 0.3 * 64


def test_generation_is_byte_identical(tmp_path):
    cfg = SynthConfig(n_train=5, n_test=3, image_size=64, patch_side=16, seed=11, channels=3)
    synth.generate(cfg, tmp_path / "a")
    synth.generate(cfg, tmp_path / "b")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    synth.generate(SynthConfig(n_train=5, n_test=3, image_size=64, patch_side=16, seed=12, channels=3), tmp_path / "c")
    assert _tree_digest(tmp_path / "a") != _tree_digest(tmp_path / "c")


@pytest.mark.parametrize("label", range(4))
def test_render_paints_the_class_order(label):
    cfg = SynthConfig(image_size=128, noise_sigma=0.0, patch_side=16)
    img, cx, cy, r = synth.render(cfg, label, np.random.default_rng(label))
    px = img.pixels[:, :, 0].astype(float) / 255.0
    ys, xs = np.mgrid[0:128, 0:128]
    u = np.hypot(xs - cx, ys - cy) / r * cfg.K_gen
    strong = synth.ring_envelope(u) > 0.3  # well away from ring boundaries
    order = synth.class_orders(cfg.classes, cfg.K_gen)[label]
    for k in range(cfg.K_gen):
        m = strong & (np.floor(u) == k)
        sign = np.sign(px[m] - synth.BASE)
        agree = {name: np.mean(sign == synth.primitive_field(name, xs[m], ys[m])) for name in synth.PRIMITIVES[:3]}
        assert agree[synth.PRIMITIVES[order[k]]] == 1.0
        assert max(v for n, v in agree.items() if n != synth.PRIMITIVES[order[k]]) < 0.8


def _class_histograms(cfg, n):
    hist = np.zeros((cfg.classes, 256))
    s = cfg.image_size
    ys, xs = np.mgrid[0:s, 0:s]
    for j in range(n):
        c = j % cfg.classes
        img, cx, cy, r = synth.render(cfg, c, np.random.default_rng([cfg.seed, j]))
        disc = np.hypot(xs - cx, ys - cy) < r
        hist[c] += np.bincount(img.pixels[:, :, 0][disc], minlength=256) / disc.sum()
    return hist / (n // cfg.classes)


def _max_tv(hist):
    k = hist.shape[0]
    return max(0.5 * np.abs(hist[a] - hist[b]).sum() for a in range(k) for b in range(a + 1, k))


def test_lesion_histograms_match_across_classes():
    hist = _class_histograms(SynthConfig(image_size=256, classes=4, seed=0), 1000)
    assert _max_tv(hist) < 0.02


def test_histogram_oracle_detects_profile_classes():
    hist = _class_histograms(SynthConfig(mode=PROFILE, image_size=64, patch_side=16, classes=4, seed=0), 80)
    assert _max_tv(hist) > 0.2


def test_rings_are_assigned_by_radius():
    # noise-free and flat amplitude to read the rendered texture back out
    cfg = SynthConfig(image_size=128, noise_sigma=0.0, amplitude=0.2, patch_side=16, mode=RADIAL_PERMUTATION)
    img, cx, cy, r = synth.render(cfg, 0, np.random.default_rng(3))
    px = img.pixels[:, :, 0].astype(float) / 255.0
    s = cfg.image_size
    ys, xs = np.mgrid[0:s, 0:s]
    d = np.hypot(xs - cx, ys - cy)
    assert np.allclose(px[d >= r], synth.BASE, atol=1 / 255)
    assert np.abs(px[d < r] - synth.BASE).max() > 0.1
