"""Accuracy, recall, confusion matrices, one-vs-rest ROC/AUC and embedding export."""
from __future__ import annotations

import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import geometry, models, nn
from .geometry import GeometryConfig
from .imageio import DatasetManifest
from .models import IMAGE, ROP, SOP, SOS, VOTE, ModelParams
from .train import SampleCache


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # thresholds[0] = +inf for the (0, 0) point


@dataclass
class EvalResult:
    accuracy: float
    recall: np.ndarray
    precision: np.ndarray
    confusion: np.ndarray
    probs: np.ndarray  # (n, C)
    preds: np.ndarray
    labels: np.ndarray


def confusion_matrix(truth, preds, n_classes: int) -> np.ndarray:
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(truth, dtype=int), np.asarray(preds, dtype=int)), 1)
    return m


def summarize(truth, preds, n_classes: int):
    """(accuracy, recall, precision, confusion); empty classes give NaN recall/precision."""
    if len(truth) == 0:
        raise ValueError("nothing to evaluate")
    m = confusion_matrix(truth, preds, n_classes)
    diag = np.diag(m).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = diag / m.sum(axis=1)
        precision = diag / m.sum(axis=0)
    return float(diag.sum() / m.sum()), recall, precision, m


def eval_input(cache: SampleCache, i: int, variant: str, rng: np.random.Generator):
    """Model input for evaluation: the full sequence, never set dropout."""
    base = cache.base[i]
    if variant == SOS:
        return models.sequence_input(base, SOS)
    if variant == ROP:
        return models.sequence_input(geometry.to_rop(base, rng), ROP)
    if variant in (SOP, VOTE):
        return models.sequence_input(geometry.to_sop(base), variant)
    return cache.images[i]


def predict(params: ModelParams, inp):
    """(predicted class, class probability row) for one input."""
    logits, _ = models.forward(inp, params)
    if params.variant == VOTE:
        return models.vote(logits), nn.softmax(logits).mean(axis=0)
    p = nn.softmax(logits)
    return int(np.argmax(logits)), p


def params_geometry(params: ModelParams, K: int | None = None) -> GeometryConfig:
    """Sampling geometry recorded in the checkpoint; ``K`` overrides the ring count."""
    meta = params.meta
    return GeometryConfig(K if K is not None else meta.get("K", 3), params.encoder.patch_side,
                          meta.get("arc_step"), meta.get("n_min", 4))


def evaluate(params: ModelParams, manifest: DatasetManifest, annotations=None, K: int | None = None, seed: int = 0,
             threads: int = 1, geo: GeometryConfig | None = None, cache: SampleCache | None = None) -> EvalResult:
    anns = manifest.test if annotations is None else annotations
    if not anns:
        raise ValueError("test split is empty")
    geo = geo or params_geometry(params, K)
    if cache is None:
        cache = SampleCache(manifest, anns, geo, need_image=(params.variant == IMAGE), enc=params.encoder)
    rng = np.random.default_rng(seed)
    inputs = [eval_input(cache, i, params.variant, rng) for i in range(len(cache))]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            out = list(pool.map(lambda x: predict(params, x), inputs))
    else:
        out = [predict(params, x) for x in inputs]
    preds = np.array([o[0] for o in out])
    probs = np.stack([o[1] for o in out])
    labels = np.array([a.label for a in cache.annotations])
    acc, recall, precision, m = summarize(labels, preds, params.n_classes)
    return EvalResult(acc, recall, precision, m, probs, preds, labels)


# ---------------------------------------------------------------- ROC / AUC


def roc_curve(scores, truths) -> RocCurve:
    """Step ROC from thresholds at each distinct score, highest first.

    A sample counts as positive-predicted when ``score >= threshold``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths).astype(bool)
    n_pos = int(truths.sum())
    n_neg = len(truths) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    t = truths[order]
    tp = np.cumsum(t)
    fp = np.cumsum(~t)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]  # end of each tie block
    fpr = np.r_[0.0, fp[last] / n_neg]
    tpr = np.r_[0.0, tp[last] / n_pos]
    return RocCurve(fpr, tpr, np.r_[np.inf, s[last]])


def auc(curve: RocCurve) -> float:
    return float(np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) / 2))


def macro_auc(curves) -> float:
    curves = list(curves)
    return float(np.mean([auc(c) for c in curves]))


def one_vs_rest(probs: np.ndarray, labels) -> dict:
    """class index -> RocCurve, skipping classes absent from (or filling) ``labels``."""
    labels = np.asarray(labels)
    out = {}
    for c in range(probs.shape[1]):
        pos = labels == c
        if pos.any() and (~pos).any():
            out[c] = roc_curve(probs[:, c], pos)
    return out


# ---------------------------------------------------------------- file writers


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return "nan" if np.isnan(x) else repr(float(x))
    return str(x)


def report_csv(result: EvalResult, classes) -> str:
    rows = ["metric,class,value", f"accuracy,,{_fmt(result.accuracy)}"]
    for c, name in enumerate(classes):
        rows.append(f"precision,{name},{_fmt(result.precision[c])}")
        rows.append(f"recall,{name},{_fmt(result.recall[c])}")
    curves = one_vs_rest(result.probs, result.labels)
    for c, curve in curves.items():
        rows.append(f"auc,{classes[c]},{_fmt(auc(curve))}")
    if curves:
        rows.append(f"macro_auc,,{_fmt(macro_auc(curves.values()))}")
    return "\n".join(rows) + "\n"


def roc_csv(result: EvalResult, classes) -> str:
    rows = ["class,threshold,fpr,tpr"]
    for c, curve in one_vs_rest(result.probs, result.labels).items():
        for th, f, t in zip(curve.thresholds, curve.fpr, curve.tpr):
            rows.append(f"{classes[c]},{_fmt(th)},{_fmt(f)},{_fmt(t)}")
    return "\n".join(rows) + "\n"


def confusion_csv(result: EvalResult, classes) -> str:
    rows = ["truth\\pred," + ",".join(classes)]
    for c, name in enumerate(classes):
        rows.append(name + "," + ",".join(str(int(v)) for v in result.confusion[c]))
    return "\n".join(rows) + "\n"


def export_embeddings(params: ModelParams, manifest: DatasetManifest, annotations=None, K: int | None = None,
                      seed: int = 0, cache: SampleCache | None = None) -> str:
    """CSV of the head-input feature per sample: sample_id,label,f0..f{n-1}."""
    anns = manifest.test if annotations is None else annotations
    geo = params_geometry(params, K)
    if cache is None:
        cache = SampleCache(manifest, anns, geo, need_image=(params.variant == IMAGE), enc=params.encoder)
    rng = np.random.default_rng(seed)
    dim = params.head_input_dim
    buf = io.StringIO()
    buf.write("sample_id,label," + ",".join(f"f{k}" for k in range(dim)) + "\n")
    for i, ann in enumerate(cache.annotations):
        feat = models.head_features(eval_input(cache, i, params.variant, rng), params)
        buf.write(f"{ann.image_path},{ann.label}," + ",".join(_fmt(v) for v in feat) + "\n")
    return buf.getvalue()
