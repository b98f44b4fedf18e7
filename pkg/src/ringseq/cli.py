"""``ringseq`` command line.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.  Outputs go to
files; stdout gets a one-line summary per command.  ``--seed`` always beats
the seed in a config file.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from . import evaluation, geometry, models, stats, synth, train
from .imageio import Image, read_image, read_manifest, write_image
from .models import VARIANTS
from .train import TrainConfig

TABLE_ORDER = ("IMAGE", "VOTE", "ROP", "SOP", "SOS")


class CliError(Exception):
    pass


def _write(path, text: str) -> None:
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _load_config(path, variant=None, seed=None, epochs=None) -> TrainConfig:
    doc = {}
    if path:
        cfg = TrainConfig.from_json(path)
        doc = train.config_dict(cfg)
    if variant is not None:
        doc["variant"] = variant
    if seed is not None:
        doc["seed"] = seed
    if epochs is not None:
        doc["epochs"] = epochs
    return TrainConfig.from_dict(doc)


def _manifest(path):
    if not os.path.exists(path):
        raise CliError(f"manifest not found: {path}")
    return read_manifest(path)


def cmd_gen_data(a) -> str:
    mode = {"radial-permutation": synth.RADIAL_PERMUTATION, "profile": synth.PROFILE}[a.mode]
    cfg = synth.SynthConfig(mode=mode, n_train=a.n_train, n_test=a.n_test, image_size=a.size,
                            classes=a.classes, K_gen=a.k_gen, noise_sigma=a.noise, seed=a.seed,
                            channels=a.channels, patch_side=a.patch_side)
    try:
        synth.generate(cfg, a.out)
    except synth.SynthError as e:
        raise CliError(str(e)) from None
    return f"wrote {a.n_train + a.n_test} images and {os.path.join(a.out, 'manifest.json')}"


def cmd_train(a) -> str:
    manifest = _manifest(a.manifest)
    cfg = _load_config(a.config, a.variant, a.seed, a.epochs)
    params, report = train.fit(manifest, cfg, threads=a.threads,
                               log=(lambda s: print(s, file=sys.stderr)) if a.verbose else None)
    models.save_checkpoint(params, a.out)
    report_path = a.report or a.out + ".train.csv"
    _write(report_path, report.to_csv())
    return (f"{cfg.variant}: {cfg.epochs} epochs, final loss {report.loss[-1]:.4f}, "
            f"train acc {report.accuracy[-1]:.4f} -> {a.out}")


def cmd_eval(a) -> str:
    if not os.path.exists(a.ckpt):
        raise CliError(f"checkpoint not found: {a.ckpt}")
    params = models.load_checkpoint(a.ckpt)
    manifest = _manifest(a.manifest)
    if params.n_classes != len(manifest.classes):
        raise CliError(f"checkpoint has {params.n_classes} classes, manifest {len(manifest.classes)}")
    geo = evaluation.params_geometry(params, a.k)
    cache = train.SampleCache(manifest, manifest.test, geo, need_image=(params.variant == "IMAGE"),
                              enc=params.encoder)
    res = evaluation.evaluate(params, manifest, geo=geo, seed=a.seed, threads=a.threads, cache=cache)
    classes = manifest.classes
    _write(a.report, evaluation.report_csv(res, classes))
    if a.roc:
        _write(a.roc, evaluation.roc_csv(res, classes))
    if a.confusion:
        _write(a.confusion, evaluation.confusion_csv(res, classes))
    if a.embeddings:
        _write(a.embeddings, evaluation.export_embeddings(params, manifest, K=geo.K, seed=a.seed, cache=cache))
    return f"{params.variant}: test accuracy {res.accuracy:.4f} on {len(res.labels)} images"


def compare_table(manifest, cfg: TrainConfig, variants=TABLE_ORDER, threads: int = 1, log=None):
    """Train and evaluate each variant with one config; returns (csv text, {variant: EvalResult})."""
    C = len(manifest.classes)
    rows = ["variant,acc," + ",".join(f"recall_{c}" for c in range(C))]
    results = {}
    train_cache = train.SampleCache(manifest, manifest.train, cfg.geometry, need_image="IMAGE" in variants,
                                    enc=models.EncoderConfig(cfg.patch_side))
    test_cache = train.SampleCache(manifest, manifest.test, cfg.geometry, need_image="IMAGE" in variants,
                                   enc=models.EncoderConfig(cfg.patch_side))
    for v in variants:
        vcfg = TrainConfig.from_dict({**train.config_dict(cfg), "variant": v})
        params, _ = train.fit(manifest, vcfg, threads=threads, cache=train_cache)
        res = evaluation.evaluate(params, manifest, geo=vcfg.geometry, seed=cfg.seed, threads=threads,
                                  cache=test_cache)
        results[v] = res
        rows.append(f"{v.lower()},{evaluation._fmt(res.accuracy)}," +
                    ",".join(evaluation._fmt(x) for x in res.recall))
        if log:
            log(f"{v}: acc {res.accuracy:.4f}")
    return "\n".join(rows) + "\n", results


def cmd_compare(a) -> str:
    manifest = _manifest(a.manifest)
    cfg = _load_config(a.config, None, a.seed, a.epochs)
    variants = tuple(v.upper() for v in a.variants.split(",")) if a.variants else TABLE_ORDER
    for v in variants:
        if v not in VARIANTS:
            raise CliError(f"unknown variant {v!r}")
    text, results = compare_table(manifest, cfg, variants, a.threads,
                                  log=(lambda s: print(s, file=sys.stderr)) if a.verbose else None)
    _write(a.out, text)
    return " ".join(f"{v.lower()}={r.accuracy:.4f}" for v, r in results.items())


def cmd_stats(a) -> str:
    if not os.path.exists(a.readers):
        raise CliError(f"reader CSV not found: {a.readers}")
    records = stats.read_readers(a.readers)
    report = stats.reader_report(records)
    _write(a.out, json.dumps(report, indent=1) + "\n")
    return f"analysed {len(records)} readers -> {a.out}"


def cmd_extract_patches(a) -> str:
    manifest = _manifest(a.manifest)
    anns = manifest.train if a.split == "train" else manifest.test
    if not 0 <= a.index < len(anns):
        raise CliError(f"index {a.index} out of range for {len(anns)} {a.split} annotations")
    ann = anns[a.index]
    img = read_image(manifest.resolve(ann))
    seq = geometry.build_sequence(img, ann, geometry.GeometryConfig(a.k, a.side), geometry.SOP)
    os.makedirs(a.out, exist_ok=True)
    ext = "pgm" if img.channels == 1 else "ppm"
    rows = [("set_index", "angle", "cx", "cy")]
    for n, p in enumerate(seq.flat):
        px = (p.data * 255.0 + 0.5).astype("uint8")
        write_image(Image(px), os.path.join(a.out, f"patch_{n:04d}.{ext}"))
        rows.append((p.set_index, repr(p.angle), repr(p.center[0]), repr(p.center[1])))
    with open(os.path.join(a.out, "layout.csv"), "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    return f"wrote {len(seq.flat)} patches to {a.out}"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ringseq", description="Sequential ring-patch lesion classification")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--mode", choices=("radial-permutation", "profile"), default="radial-permutation")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--n-train", type=int, default=400)
    g.add_argument("--n-test", type=int, default=200)
    g.add_argument("--size", type=int, default=256)
    g.add_argument("--k-gen", type=int, default=3)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--patch-side", type=int, default=32, help="patch size the lesion margins are sized for")
    g.add_argument("--channels", type=int, choices=(1, 3), default=1)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--manifest", required=True)
    t.add_argument("--variant", type=str.upper, choices=VARIANTS)
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--report", help="train report CSV (default: <out>.train.csv)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--threads", type=int, default=1)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--roc")
    e.add_argument("--confusion")
    e.add_argument("--embeddings")
    e.add_argument("--k", type=int, help="override the ring count stored in the checkpoint")
    e.add_argument("--seed", type=int, default=0, help="ROP permutation seed")
    e.add_argument("--threads", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="train and evaluate every variant")
    c.add_argument("--manifest", required=True)
    c.add_argument("--config")
    c.add_argument("--out", required=True)
    c.add_argument("--variants", help="comma list, default image,vote,rop,sop,sos")
    c.add_argument("--seed", type=int)
    c.add_argument("--epochs", type=int)
    c.add_argument("--threads", type=int, default=1)
    c.add_argument("--verbose", action="store_true")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("stats", help="reader-study statistics")
    s.add_argument("--readers", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stats)

    x = sub.add_parser("extract-patches", help="dump the sampled patches of one annotation")
    x.add_argument("--manifest", required=True)
    x.add_argument("--index", type=int, required=True)
    x.add_argument("--k", type=int, default=3)
    x.add_argument("--side", type=int, default=32)
    x.add_argument("--split", choices=("train", "test"), default="train")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_extract_patches)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        msg = args.func(args)
    except (CliError, ValueError, OSError, KeyError) as e:
        print(f"ringseq {args.command}: error: {e}", file=sys.stderr)
        return 1
    print(msg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
