"""Desk-scale reproduction run: augmented vs unaugmented training.

Trains the full schedule twice on the same corpus, once with rotation
augmentation and once without, and reports for each model the miss rate
on the held-out (validation) crops plus the scene-level log-average miss
rate. Usage::

    python -m jointcar.desk_scale --corpus DIR --output-dir OUT [--set KEY=VALUE ...]

If ``--corpus`` does not exist, a synthetic corpus is written there first.
"""
import argparse
import json
import logging
import os
import time

import numpy as np

from . import evaluation
from . import model as net
from .dataset import load_test_scenes, load_training_set, split_validation
from .trainer import build_config, train_pipeline

log = logging.getLogger(__name__)


def crop_miss_rate(params, crops):
    """Fraction of positive crops scored below 0.5, and the overall error rate."""
    x = np.stack([c.stack for c in crops])
    y = np.array([c.label for c in crops])
    p = net.predict(params, x)
    pos = y == 1
    miss = float(np.mean(p[pos] < 0.5)) if pos.any() else float("nan")
    err = float(np.mean((p >= 0.5) != pos))
    return miss, err


def run_one(crops, scenes, cfg, out_dir):
    t0 = time.time()
    params, results, _ = train_pipeline(crops, cfg, out_dir)
    train_s = time.time() - t0
    _, val = split_validation(crops[:cfg.max_crops] if cfg.max_crops else crops, cfg.val_fraction)
    miss, err = crop_miss_rate(params, val)
    out = {"augment": cfg.augment, "train_seconds": round(train_s, 1),
           "n_val": len(val), "n_val_pos": sum(c.label for c in val),
           "val_miss_rate": miss, "val_error_rate": err,
           "stages": [{"stage": r.stage, "epochs": r.epochs_run, "train_loss": r.train_loss,
                       "val_loss": r.val_loss, "val_accuracy": r.val_accuracy} for r in results]}
    if scenes:
        curve, _ = evaluation.evaluate_scenes(params, scenes, cfg)
        evaluation.write_outputs(curve, out_dir, cfg.threshold)
        out["scene_lamr"] = curve.lamr
    return out


def desk_scale(corpus, out_dir, overrides=(), with_scenes=True):
    """Run both arms; returns the report dict and writes ``report.json``."""
    crops = load_training_set(corpus)
    scenes = []
    truth = os.path.join(corpus, "trueLocations.txt")
    if with_scenes and os.path.exists(truth):
        scenes = load_test_scenes(os.path.join(corpus, "test"), truth)
    report = {"corpus": os.path.abspath(corpus), "n_crops": len(crops), "overrides": list(overrides)}
    for arm, flag in (("augmented", "true"), ("unaugmented", "false")):
        cfg = build_config(overrides=list(overrides) + [("augment", flag)])
        arm_dir = os.path.join(out_dir, arm)
        os.makedirs(arm_dir, exist_ok=True)
        log.info("desk-scale arm %s", arm)
        report[arm] = run_one(crops, scenes, cfg, arm_dir)
    a, u = report["augmented"]["val_miss_rate"], report["unaugmented"]["val_miss_rate"]
    report["augmented_within_10pct"] = a <= 0.10
    report["augmented_better"] = a < u
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=1)
    return report


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--corpus", required=True)
    ap.add_argument("--output-dir", required=True)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--synth-seed", type=int, default=0)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    if not os.path.exists(args.corpus):
        from .synth import write_corpus
        write_corpus(args.corpus, seed=args.synth_seed)
    overrides = [tuple(s.split("=", 1)) for s in args.set]
    os.makedirs(args.output_dir, exist_ok=True)
    report = desk_scale(args.corpus, args.output_dir, overrides)
    print(json.dumps(report, indent=1))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
