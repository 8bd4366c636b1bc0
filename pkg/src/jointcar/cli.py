"""Command-line entry point: ``jointcar <subcommand> [options]``.

Exit status is 0 on success, 2 for usage or configuration errors and 1
for failures while running.
"""
import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import evaluation
from . import model as net
from .dataset import CorpusFormatError, TruthParseError, load_test_scenes, load_training_set
from .trainer import ConfigError, TrainConfig, config_keys, load_config, train_pipeline

log = logging.getLogger("jointcar")

GRADCHECK_LIMIT = 1e-3
SUBCOMMANDS = ("prepare", "train", "eval", "detect", "gradcheck", "synth")


class UsageError(Exception):
    pass


def _config_epilog():
    lines = ["config keys (file `key = value` lines or --set key=value; "
             "precedence: --set > file > default):"]
    for key, default in config_keys():
        if isinstance(default, bool):
            default = str(default).lower()
        desc = TrainConfig.HELP.get(key, "part geometry: level f_h f_w anchor_x anchor_y mirror_of")
        lines.append(f"  {key:<18} default {default!s:<16} {desc}")
    return "\n".join(lines)


def _common(p, output=True):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads for corpus loading and scene scoring (default 1); "
                        "results do not depend on it since merges happen in a fixed order")
    if output:
        p.add_argument("--output-dir", help="directory for every file this command writes")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")


def build_parser():
    epilog = _config_epilog()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="jointcar", description="Part-based car detector.",
                                     epilog=epilog, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True
    parser.subcommand_parsers = sub.choices

    p = sub.add_parser("prepare", help="validate a corpus and write a manifest",
                       epilog=epilog, formatter_class=fmt)
    _common(p)
    p = sub.add_parser("train", help="run the three-stage training schedule",
                       epilog=epilog, formatter_class=fmt)
    _common(p)
    p = sub.add_parser("eval", help="sliding-window evaluation of a checkpoint on test scenes",
                       epilog=epilog, formatter_class=fmt)
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint file (or config key checkpoint)")
    p = sub.add_parser("detect", help="score one PGM image and print windows above threshold",
                       epilog=epilog, formatter_class=fmt)
    _common(p, output=False)
    p.add_argument("--checkpoint", help="checkpoint file (or config key checkpoint)")
    p.add_argument("image", help="PGM scene")
    p = sub.add_parser("gradcheck", help="finite-difference check of the full network",
                       epilog=epilog, formatter_class=fmt)
    _common(p)
    p.add_argument("--batch", type=int, default=8, help="random batch size (default 8)")
    p.add_argument("--epsilon", type=float, default=1e-5, help="finite-difference step")
    p = sub.add_parser("synth", help="write a synthetic corpus in the UIUC layout",
                       epilog=epilog, formatter_class=fmt)
    _common(p)
    p.add_argument("--n-pos", type=int, default=550)
    p.add_argument("--n-neg", type=int, default=500)
    p.add_argument("--n-test", type=int, default=40)
    return parser


def _overrides(args):
    pairs = []
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    if args.seed is not None:
        pairs.append(("seed", str(args.seed)))
    return pairs


def _output_dir(args):
    out = args.output_dir or os.path.join("runs", args.command)
    os.makedirs(out, exist_ok=True)
    return out


def _pool(args):
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return ThreadPoolExecutor(args.threads) if args.threads > 1 else None


def _test_paths(cfg):
    test_dir = cfg.test_dir or os.path.join(cfg.data_root, "test")
    truth = cfg.truth_file or os.path.join(cfg.data_root, "trueLocations.txt")
    return test_dir, truth


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def cmd_prepare(args, cfg):
    out = _output_dir(args)
    pool = _pool(args)
    crops = load_training_set(cfg.data_root, pool)
    manifest = {"data_root": os.path.abspath(cfg.data_root),
                "n_crops": len(crops),
                "n_pos": sum(c.label for c in crops),
                "n_neg": sum(1 - c.label for c in crops),
                "files": {c.source_id: _sha256(os.path.join(cfg.data_root, c.source_id))
                          for c in crops}}
    if cfg.augment:
        from .dataset import augmentation_angles
        manifest["n_augmented"] = len(crops) * len(augmentation_angles(cfg.aug_max_deg,
                                                                       cfg.aug_step_deg))
    test_dir, truth = _test_paths(cfg)
    if os.path.exists(truth):
        scenes = load_test_scenes(test_dir, truth)
        manifest["n_scenes"] = len(scenes)
        manifest["n_truths"] = sum(len(s.ground_truths) for s in scenes)
    path = os.path.join(out, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    print(f"{manifest['n_crops']} crops ({manifest['n_pos']} pos, {manifest['n_neg']} neg); "
          f"manifest written to {path}")
    return 0


def cmd_train(args, cfg):
    out = _output_dir(args)
    crops = load_training_set(cfg.data_root, _pool(args))
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())
    _, results, _ = train_pipeline(crops, cfg, out)
    for r in results:
        print(f"stage {r.stage}: {r.epochs_run} epochs, train loss {r.train_loss:.5f} "
              f"acc {r.train_accuracy:.4f}, val loss {r.val_loss:.5f} acc {r.val_accuracy:.4f}")
    final = os.path.join(out, "final.ckpt")
    print(f"final checkpoint {final} sha256 {_sha256(final)}")
    return 0


def _checkpoint(args, cfg):
    path = args.checkpoint or cfg.checkpoint
    if not path:
        raise UsageError(f"{args.command}: a checkpoint is required (--checkpoint PATH)")
    if not os.path.exists(path):
        raise UsageError(f"checkpoint not found: {path}")
    return net.load_params(path)


def cmd_eval(args, cfg):
    params = _checkpoint(args, cfg)
    out = _output_dir(args)
    test_dir, truth = _test_paths(cfg)
    scenes = load_test_scenes(test_dir, truth)
    pool = _pool(args)
    curve, _ = evaluation.evaluate_scenes(params, scenes, cfg, pool)
    evaluation.write_outputs(curve, out, cfg.threshold)
    tp, fp, fn = curve.counts_at(cfg.threshold)
    print(f"lamr {curve.lamr:.6f} (tp {tp}, fp {fp}, fn {fn} at threshold {cfg.threshold}; "
          f"{curve.n_scenes} scenes, {curve.n_truths} truths)")
    return 0


def cmd_detect(args, cfg):
    from .dataset import TestScene
    from .image_io import load_pgm
    params = _checkpoint(args, cfg)
    scene = TestScene(load_pgm(args.image), [], os.path.basename(args.image))
    recs = evaluation.sliding_window_scores(scene, params, cfg.stride_r, cfg.stride_c)
    recs = evaluation.non_max_suppression(recs, cfg.nms_radius_r, cfg.nms_radius_c)
    print("row,col,score")
    for d in recs:
        if d.score >= cfg.threshold:
            print(f"{d.row},{d.col},{d.score:.6f}")
    return 0


def cmd_gradcheck(args, cfg):
    from .nn.gradcheck import grad_check
    out = args.output_dir
    rng = np.random.default_rng(cfg.seed)
    p = net.init_stage1(rng, np.float64, cfg.specs(), cfg.deformation_mode, cfg.visibility_mode)
    p = net.grow_to_stage3(net.grow_to_stage2(p, rng), rng)
    x = rng.standard_normal((args.batch, 3, 84, 28))
    y = (np.arange(args.batch) % 2).astype(np.float64)
    res = grad_check(p, x, y, epsilon=args.epsilon, seed=cfg.seed)
    print(res)
    print(f"max relative error {res.max_rel_error:.3e}")
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "gradcheck.txt"), "w") as fh:
            fh.write(f"{res}\nmax_rel_error {res.max_rel_error:.6e}\n")
    if not res.max_rel_error < GRADCHECK_LIMIT:
        print(f"FAIL: error above {GRADCHECK_LIMIT}", file=sys.stderr)
        return 1
    return 0


def cmd_synth(args, cfg):
    from .synth import write_corpus
    out = _output_dir(args)
    write_corpus(out, args.n_pos, args.n_neg, args.n_test, seed=cfg.seed)
    print(f"synthetic corpus written to {out}")
    return 0


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval,
            "detect": cmd_detect, "gradcheck": cmd_gradcheck, "synth": cmd_synth}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
    except (ConfigError, OSError) as exc:
        print(f"jointcar: config error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        parser.subcommand_parsers[args.command].print_usage(sys.stderr)
        print(f"jointcar: error: {exc}", file=sys.stderr)
        return 2
    except (CorpusFormatError, TruthParseError, FileNotFoundError, ValueError,
            FloatingPointError, OSError) as exc:
        print(f"jointcar: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
