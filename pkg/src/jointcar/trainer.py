"""Multi-stage training.

Stage 1 trains the Gabor-initialized first convolution with a linear
readout. Stage 2 swaps the readout for the part filters, the deformation
layer and a logistic head over the 8 part scores. Stage 3 adds the
visibility head and fine-tunes everything jointly. Each stage starts from
the previous stage's weights.
"""
import csv
import logging
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import model as net
from .dataset import augment_rotations, minibatches, split_validation
from .deformation import default_part_layout, layout_from_config, layout_to_config
from .nn.core import bce_grad, bce_loss
from .nn.optim import TrainingDivergence, clip_grad_norm, sgd_step
from .visibility import VisibilityParams, visibility_backward, visibility_forward

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def _default_layout_cfg():
    return layout_to_config(default_part_layout())


@dataclass
class TrainConfig:
    data_root: str = "data"
    test_dir: str = ""
    truth_file: str = ""
    checkpoint: str = ""
    seed: int = 0
    batch_size: int = 32
    stage1_epochs: int = 20
    stage2_epochs: int = 20
    stage3_epochs: int = 30
    stage1_lr: float = 0.01
    stage2_lr: float = 0.01
    stage3_lr: float = 0.001
    stage1_momentum: float = 0.9
    stage2_momentum: float = 0.9
    stage3_momentum: float = 0.9
    augment: bool = True
    aug_max_deg: float = 10.0
    aug_step_deg: float = 1.0
    deformation_mode: str = "quadratic"
    visibility_mode: str = "hierarchical"
    patience: int = 5
    val_fraction: float = 0.1
    target_loss: float = 0.0
    freeze_conv1: bool = False
    grad_clip: float = 1.0
    head_warmup_iters: int = 200
    max_crops: int = 0
    stride_r: int = 4
    stride_c: int = 4
    nms_radius_r: int = 20
    nms_radius_c: int = 50
    match_tol_r: int = 10
    match_tol_c: int = 25
    threshold: float = 0.5
    layout: dict = field(default_factory=_default_layout_cfg)

    HELP = {
        "data_root": "corpus root (pos/, neg/, test/, trueLocations.txt)",
        "test_dir": "test scene directory (default: <data_root>/test)",
        "truth_file": "ground-truth file (default: <data_root>/trueLocations.txt)",
        "checkpoint": "checkpoint to load for eval/detect",
        "seed": "single source of all randomness",
        "batch_size": "minibatch size",
        "stage1_epochs": "epoch budget, stage 1",
        "stage2_epochs": "epoch budget, stage 2",
        "stage3_epochs": "epoch budget, stage 3 (joint)",
        "stage1_lr": "learning rate, stage 1",
        "stage2_lr": "learning rate, stage 2",
        "stage3_lr": "learning rate, stage 3",
        "stage1_momentum": "SGD momentum, stage 1",
        "stage2_momentum": "SGD momentum, stage 2",
        "stage3_momentum": "SGD momentum, stage 3",
        "augment": "rotation augmentation of training crops",
        "aug_max_deg": "largest augmentation angle",
        "aug_step_deg": "augmentation angle step",
        "deformation_mode": "quadratic | learned",
        "visibility_mode": "hierarchical | logistic",
        "patience": "early-stop patience in epochs (needs a validation split)",
        "val_fraction": "fraction of sources held out for validation",
        "target_loss": "stop a stage once its training loss reaches min(this, previous stage's); 0 disables",
        "freeze_conv1": "keep conv1 fixed in stages 2 and 3",
        "grad_clip": "rescale each minibatch gradient to this global L2 norm at most (0 disables)",
        "head_warmup_iters": "L-BFGS iterations fitting a newly added score head on frozen "
                             "part scores before joint training (0 disables)",
        "max_crops": "use only the first N training crops (0 = all)",
        "stride_r": "sliding-window row stride",
        "stride_c": "sliding-window column stride",
        "nms_radius_r": "NMS row radius",
        "nms_radius_c": "NMS column radius",
        "match_tol_r": "detection/truth row tolerance",
        "match_tol_c": "detection/truth column tolerance",
        "threshold": "detect: minimum score to print",
    }

    def stage(self, k):
        return (getattr(self, f"stage{k}_epochs"), getattr(self, f"stage{k}_lr"),
                getattr(self, f"stage{k}_momentum"))

    def specs(self):
        return layout_from_config(self.layout)

    def validate(self):
        for k in (1, 2, 3):
            epochs, lr, mom = self.stage(k)
            if epochs < 1:
                raise ConfigError(f"stage{k}_epochs must be >= 1, got {epochs}")
            if lr <= 0:
                raise ConfigError(f"stage{k}_lr must be > 0, got {lr}")
            if not 0 <= mom < 1:
                raise ConfigError(f"stage{k}_momentum must be in [0, 1), got {mom}")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0")
        if self.head_warmup_iters < 0:
            raise ConfigError("head_warmup_iters must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.deformation_mode not in ("quadratic", "learned"):
            raise ConfigError(f"deformation_mode must be quadratic or learned")
        if self.visibility_mode not in ("hierarchical", "logistic"):
            raise ConfigError(f"visibility_mode must be hierarchical or logistic")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.aug_step_deg <= 0 or self.aug_max_deg < 0 or self.aug_max_deg > 10:
            raise ConfigError("need aug_step_deg > 0 and 0 <= aug_max_deg <= 10")
        if min(self.stride_r, self.stride_c) < 1:
            raise ConfigError("strides must be >= 1")
        try:
            self.specs()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def to_text(self):
        lines = []
        for f in fields(self):
            if f.name == "layout":
                lines += [f"{k} = {v}" for k, v in self.layout.items()]
            else:
                v = getattr(self, f.name)
                lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


def config_keys():
    """Every accepted key with its default, in declaration order."""
    d = TrainConfig()
    out = []
    for f in fields(TrainConfig):
        if f.name == "layout":
            out += list(d.layout.items())
        else:
            out.append((f.name, getattr(d, f.name)))
    return out


def _coerce(name, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_config_text(text):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def build_config(file_pairs=(), overrides=()):
    """Defaults, then file entries, then overrides. Unknown keys are rejected."""
    cfg = TrainConfig()
    names = {f.name for f in fields(TrainConfig)} - {"layout"}
    for key, raw in list(file_pairs) + list(overrides):
        if key in names:
            setattr(cfg, key, _coerce(key, raw, getattr(TrainConfig(), key)))
        elif key in cfg.layout:
            cfg.layout[key] = raw
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return cfg.validate()


def load_config(path=None, overrides=()):
    pairs = []
    if path:
        with open(path) as fh:
            pairs = parse_config_text(fh.read())
    return build_config(pairs, overrides)


def _seed(cfg, *tags):
    return int(np.random.SeedSequence([cfg.seed, *tags]).generate_state(1)[0])


def evaluate_crops(params, crops, batch_size=256):
    """Mean BCE loss and accuracy (threshold 0.5) over labeled crops."""
    if not crops:
        return float("nan"), float("nan")
    total, correct = 0.0, 0
    for i in range(0, len(crops), batch_size):
        chunk = crops[i:i + batch_size]
        x = np.stack([c.stack for c in chunk])
        y = np.array([c.label for c in chunk], dtype=np.float64)
        p = net.forward(params, x)[0].astype(np.float64)
        total += float(np.sum(bce_loss(p, y)))
        correct += int(np.sum((p >= 0.5) == (y == 1)))
    return total / len(crops), correct / len(crops)


def part_scores(params, crops, batch_size=256):
    """(N, n_parts) float64 part scores of ``crops`` under the current weights."""
    out = []
    for i in range(0, len(crops), batch_size):
        x = np.stack([c.stack for c in crops[i:i + batch_size]])
        out.append(net.forward(params, x)[1]["scores"])
    return np.concatenate(out).astype(np.float64)


def fit_head(params, crops, max_iter, l2=1e-5):
    """Fit only the score head on fixed part scores, in place.

    A freshly grown head starts far from the previous stage's solution;
    fitting it alone first (8 inputs, so L-BFGS on precomputed scores is
    cheap) lets joint training start near the previous stage's loss. The
    ``l2`` penalty on the head weights keeps its sigmoids out of
    saturation, where SGD could no longer move them. Returns the head-only
    training loss (without the penalty).
    """
    from scipy.optimize import minimize

    scores = part_scores(params, crops)
    labels = np.array([c.label for c in crops], dtype=np.float64)
    head = params.head()
    keys = sorted(head.arrays)
    shapes = [head.arrays[k].shape for k in keys]
    sizes = [int(np.prod(sh)) for sh in shapes]

    def unpack(theta):
        parts = np.split(theta, np.cumsum(sizes)[:-1])
        arrays = {k: p.reshape(sh) for k, p, sh in zip(keys, parts, shapes)}
        return VisibilityParams(head.mode, head.levels, arrays)

    def objective(theta):
        vp = unpack(theta)
        y, cache = visibility_forward(scores, vp)
        loss = float(np.mean(bce_loss(y, labels)))
        grads, _ = visibility_backward(bce_grad(y, labels) / len(labels), cache, vp)
        grad = np.concatenate([grads[k].ravel() for k in keys])
        return loss + 0.5 * l2 * float(theta @ theta), grad + l2 * theta

    theta0 = np.concatenate([head.arrays[k].astype(np.float64).ravel() for k in keys])
    start = objective(theta0)[0]
    res = minimize(objective, theta0, jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter})
    if res.fun >= start:
        return float(np.mean(bce_loss(visibility_forward(scores, unpack(theta0))[0], labels)))
    for k, v in unpack(res.x).arrays.items():
        head.arrays[k][...] = v
    return float(np.mean(bce_loss(visibility_forward(scores, unpack(res.x))[0], labels)))


@dataclass
class StageResult:
    stage: int
    epochs_run: int
    train_loss: float
    train_accuracy: float
    val_loss: float = float("nan")
    val_accuracy: float = float("nan")


def train_stage(params, stage, train, val, cfg, log_rows, stop_at=None):
    """Train ``params`` in place for one stage; returns (params, StageResult)."""
    epochs, lr, momentum = cfg.stage(stage)
    freeze = cfg.freeze_conv1 and stage > 1
    velocity = None
    best, best_val, stale = None, np.inf, 0
    epochs_run = 0
    for epoch in range(1, epochs + 1):
        epochs_run = epoch
        running, seen = 0.0, 0
        for batch in minibatches(train, cfg.batch_size, _seed(cfg, stage, epoch)):
            loss, grads, _ = net.loss_and_grads(params, batch.stacks, batch.labels, freeze)
            if not np.isfinite(loss):
                raise TrainingDivergence(f"stage {stage} epoch {epoch}: loss is {loss}")
            clip_grad_norm(grads, cfg.grad_clip)
            velocity = sgd_step(params, grads, lr, momentum, velocity)
            running += loss * len(batch)
            seen += len(batch)
        train_loss = running / seen
        if stop_at is not None:
            train_loss, _ = evaluate_crops(params, train)
        val_loss, val_acc = evaluate_crops(params, val)
        log_rows.append({"epoch": epoch, "stage": stage, "train_loss": train_loss,
                         "val_loss": val_loss, "val_accuracy": val_acc})
        log.info("stage %d epoch %d train_loss %.5f val_loss %.5f val_acc %.4f",
                 stage, epoch, train_loss, val_loss, val_acc)
        if val:
            if val_loss < best_val:
                best, best_val, stale = params.copy(), val_loss, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("stage %d: early stop after %d epochs", stage, epoch)
                    break
        if stop_at is not None and train_loss <= stop_at:
            break
    if best is not None:
        params = best
    tl, ta = evaluate_crops(params, train)
    vl, va = evaluate_crops(params, val)
    return params, StageResult(stage, epochs_run, tl, ta, vl, va)


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "stage", "train_loss", "val_loss",
                                           "val_accuracy"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in r.items()})


def prepare_training_data(crops, cfg):
    """Optional subset, validation split, then augmentation of the training side."""
    if cfg.max_crops:
        crops = crops[:cfg.max_crops]
    train, val = split_validation(crops, cfg.val_fraction)
    if cfg.augment:
        train = augment_rotations(train, cfg.aug_max_deg, cfg.aug_step_deg)
    return train, val


def train_pipeline(crops, cfg, output_dir=None, stages=(1, 2, 3)):
    """Run the staged schedule. Returns (final params, [StageResult], log rows).

    Checkpoints ``stage1.ckpt``, ``stage2.ckpt``, ``final.ckpt`` and the
    per-epoch ``train_log.csv`` are written when ``output_dir`` is given.
    """
    cfg.validate()
    train, val = prepare_training_data(crops, cfg)
    if not train:
        raise ValueError("no training crops after the validation split")
    log.info("training on %d crops, validating on %d", len(train), len(val))
    rows, results = [], []
    specs = cfg.specs()
    params = net.init_stage1(np.random.default_rng(_seed(cfg, 101)), specs=specs,
                             deformation_mode=cfg.deformation_mode,
                             visibility_mode=cfg.visibility_mode)
    prev = None
    for stage in stages:
        if stage == 2:
            params = net.grow_to_stage2(params, np.random.default_rng(_seed(cfg, 102)))
        elif stage == 3:
            params = net.grow_to_stage3(params, np.random.default_rng(_seed(cfg, 103)))
        if stage > 1 and cfg.head_warmup_iters:
            head_loss = fit_head(params, train, cfg.head_warmup_iters)
            log.info("stage %d: head warm-up loss %.5f", stage, head_loss)
        stop_at = None
        if cfg.target_loss > 0:
            stop_at = cfg.target_loss if prev is None else min(cfg.target_loss, prev)
        params, res = train_stage(params, stage, train, val, cfg, rows, stop_at)
        results.append(res)
        prev = res.train_loss
        if output_dir:
            name = "final.ckpt" if stage == stages[-1] else f"stage{stage}.ckpt"
            net.save_params(os.path.join(output_dir, name), params)
    if output_dir:
        write_log(os.path.join(output_dir, "train_log.csv"), rows)
    return params, results, rows
