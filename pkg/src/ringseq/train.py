"""Optimizers and the training loop.

Randomness is split into four independent streams derived from the master
seed (init, shuffle, dropout, rop) so that changing how one consumer draws
numbers never shifts another.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import geometry, models
from .geometry import GeometryConfig
from .imageio import DatasetManifest, read_image
from .models import IMAGE, ROP, SOP, SOS, VARIANTS, VOTE, EncoderConfig, ModelParams

STREAMS = ("init", "shuffle", "dropout", "rop")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    variant: str = SOS
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    optimizer: str = "adam"  # "adam" | "sgd"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout_p: float = 0.25
    K: int = 3
    patch_side: int = 32
    arc_step: float | None = None
    n_min: int = 4
    feature_dim: int = 64
    hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        self.variant = str(self.variant).upper()
        self.optimizer = str(self.optimizer).lower()
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout_p must be in [0, 1)")
        if not 1 <= self.K <= 8:
            raise ConfigError("K must be in 1..8")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON at line {e.lineno}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc)

    @property
    def geometry(self) -> GeometryConfig:
        return GeometryConfig(self.K, self.patch_side, self.arc_step, self.n_min)


@dataclass
class TrainReport:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    wall_time: float = 0.0

    def to_csv(self) -> str:
        # wall time stays out so identical runs give identical files
        rows = ["epoch,loss,accuracy"]
        rows += [f"{i},{l!r},{a!r}" for i, (l, a) in enumerate(zip(self.loss, self.accuracy), start=1)]
        return "\n".join(rows) + "\n"


def seed_streams(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}


# ---------------------------------------------------------------- optimizers


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """In-place bias-corrected Adam update; increments ``state.t``."""
    state.t += 1
    t = state.t
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        params[k] -= lr * mhat / (np.sqrt(vhat) + eps)


def sgd_momentum_step(params: dict, grads: dict, velocity: dict, lr=1e-3, momentum=0.9) -> None:
    """v <- momentum * v + g ; theta <- theta - lr * v (in place)."""
    for k, g in grads.items():
        v = velocity[k]
        v *= momentum
        v += g
        params[k] -= lr * v


class Optimizer:
    def __init__(self, cfg: TrainConfig, params: ModelParams):
        self.cfg = cfg
        self.params = params
        if cfg.optimizer == "adam":
            self.state = AdamState(params.zeros_like(), params.zeros_like())
        else:
            self.state = params.zeros_like()

    def step(self, grads: dict) -> None:
        c = self.cfg
        if c.optimizer == "adam":
            adam_step(self.params.tensors, grads, self.state, c.lr, c.beta1, c.beta2, c.eps)
        else:
            sgd_momentum_step(self.params.tensors, grads, self.state, c.lr, c.momentum)


# ---------------------------------------------------------------- data


class SampleCache:
    """Decoded images and their full SOS patch sequences, built once."""

    def __init__(self, manifest: DatasetManifest, annotations, geo: GeometryConfig, need_image: bool = False,
                 enc: EncoderConfig | None = None):
        self.annotations = list(annotations)
        self.base = []
        self.images = []
        for ann in self.annotations:
            img = read_image(manifest.resolve(ann))
            self.base.append(geometry.build_sequence(img, ann, geo, SOS))
            if need_image:
                self.images.append(models.image_input(img, enc))
        if self.annotations:
            first = self.base[0].sets[0][0].data
            self.channels = first.shape[2]
        else:
            self.channels = 3

    def __len__(self):
        return len(self.annotations)


def training_input(cache: SampleCache, i: int, variant: str, dropout_p: float, rngs: dict):
    """Model input for sample ``i`` during training (set dropout for SOS only)."""
    base = cache.base[i]
    if variant == SOS:
        return models.sequence_input(geometry.set_dropout(base, dropout_p, rngs["dropout"]), SOS)
    if variant == ROP:
        return models.sequence_input(geometry.to_rop(base, rngs["rop"]), ROP)
    if variant == SOP:
        return models.sequence_input(geometry.to_sop(base), SOP)
    if variant == VOTE:
        return models.sequence_input(geometry.to_sop(base), VOTE)
    return cache.images[i]


def _predicted(logits, variant) -> int:
    return models.vote(logits) if variant == VOTE else int(np.argmax(logits))


def fit(manifest: DatasetManifest, cfg: TrainConfig, threads: int = 1, log=None,
        cache: SampleCache | None = None):
    """Train one variant; returns (params, report).

    Each sample runs its own forward/backward (optionally on worker threads);
    batch gradients are summed in ascending sample order and divided by the
    batch size, so the thread count never changes the result.
    """
    if not manifest.train:
        raise ValueError("training split is empty")
    t0 = time.perf_counter()
    rngs = seed_streams(cfg.seed)
    if cache is None:
        enc_side = EncoderConfig(cfg.patch_side)
        cache = SampleCache(manifest, manifest.train, cfg.geometry, need_image=(cfg.variant == IMAGE), enc=enc_side)
    enc = EncoderConfig(cfg.patch_side, cache.channels, feature_dim=cfg.feature_dim)
    params = models.init_params(cfg.variant, enc, len(manifest.classes), cfg.hidden, rngs["init"])
    params.meta = {"K": cfg.K, "arc_step": cfg.arc_step, "n_min": cfg.n_min, "classes": list(manifest.classes)}
    opt = Optimizer(cfg, params)
    labels = [a.label for a in cache.annotations]
    report = TrainReport()
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for epoch in range(cfg.epochs):
            order = rngs["shuffle"].permutation(len(cache))
            tot_loss, correct = 0.0, 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                inputs = [training_input(cache, i, cfg.variant, cfg.dropout_p, rngs) for i in idx]
                jobs = list(zip(inputs, (labels[i] for i in idx)))
                work = lambda job: models.loss_and_grads(job[0], job[1], params)  # noqa: E731
                results = list(pool.map(work, jobs)) if pool else [work(j) for j in jobs]
                total = params.zeros_like()
                for (loss, grads, logits), (_, y) in zip(results, jobs):
                    for k in total:
                        total[k] += grads[k]
                    tot_loss += loss
                    correct += _predicted(logits, cfg.variant) == y
                for k in total:
                    total[k] /= len(idx)
                opt.step(total)
            report.loss.append(tot_loss / len(order))
            report.accuracy.append(correct / len(order))
            if log:
                log(f"epoch {epoch + 1}/{cfg.epochs} loss {report.loss[-1]:.4f} acc {report.accuracy[-1]:.4f}")
    finally:
        if pool:
            pool.shutdown()
    report.wall_time = time.perf_counter() - t0
    return params, report


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
