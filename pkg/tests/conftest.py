import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from ringseq import synth  # noqa: E402
from ringseq.imageio import read_manifest  # noqa: E402


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """8 train / 8 test grayscale 64px images, 4 classes; returns the manifest path."""
    out = tmp_path_factory.mktemp("tiny")
    cfg = synth.SynthConfig(n_train=8, n_test=8, image_size=64, patch_side=8, seed=5)
    synth.generate(cfg, out)
    return out / "manifest.json"


@pytest.fixture(scope="session")
def tiny_manifest(tiny_dataset):
    return read_manifest(tiny_dataset)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
