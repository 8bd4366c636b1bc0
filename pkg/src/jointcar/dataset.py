"""UIUC-style corpus ingestion, rotation augmentation and minibatching.

Corpus layout::

    root/
      pos/*.pgm          40x100 car crops        (label 1)
      neg/*.pgm          40x100 background crops (label 0)
      test/test-<N>.pgm  single-scale test scenes
      trueLocations.txt  one line per scene: ``N: (r,c) (r,c) ...``

A flat ``TrainImages/`` directory holding ``pos-*.pgm`` / ``neg-*.pgm``
(the original UIUC distribution) is accepted in place of pos/ and neg/.
Truth coordinates are 0-based (row, col) of the window's upper-left
corner, the convention of the UIUC ``trueLocations.txt`` files.
"""
import hashlib
import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .image_io import build_channel_stack, load_pgm, rotate_about_center, window_to_input

log = logging.getLogger(__name__)

WINDOW_H, WINDOW_W = 40, 100


class CorpusFormatError(ValueError):
    pass


class TruthParseError(ValueError):
    def __init__(self, lineno, line, reason):
        super().__init__(f"line {lineno}: {reason}: {line!r}")
        self.lineno = lineno


@dataclass
class LabeledCrop:
    stack: np.ndarray  # (3, 84, 28)
    label: int
    source_id: str
    rotation_deg: float = 0.0
    window: np.ndarray = field(default=None, repr=False)  # 40x100 source, kept for augmentation

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if not -10 - 1e-9 <= self.rotation_deg <= 10 + 1e-9:
            raise ValueError(f"rotation_deg out of range: {self.rotation_deg}")


@dataclass
class TestScene:
    image: np.ndarray
    ground_truths: list
    scene_id: str

    def __post_init__(self):
        h, w = self.image.shape
        for r, c in self.ground_truths:
            if not (0 <= r <= h - WINDOW_H and 0 <= c <= w - WINDOW_W):
                raise CorpusFormatError(
                    f"scene {self.scene_id}: anchor {(r, c)} does not fit a "
                    f"{WINDOW_H}x{WINDOW_W} window in a {h}x{w} image")


@dataclass
class Batch:
    stacks: np.ndarray  # (B, 3, 84, 28)
    labels: np.ndarray  # (B,)

    def __post_init__(self):
        if len(self.stacks) != len(self.labels) or len(self.labels) < 1:
            raise ValueError("batch needs equal, non-zero numbers of stacks and labels")

    def __len__(self):
        return len(self.labels)


def crop_from_window(window, label, source_id, rotation_deg=0.0):
    window = np.asarray(window, dtype=np.float64)
    img = rotate_about_center(window, rotation_deg) if rotation_deg else window
    stack = build_channel_stack(window_to_input(img))
    return LabeledCrop(stack=stack.astype(np.float32), label=label,
                       source_id=source_id, rotation_deg=float(rotation_deg),
                       window=window)


def _training_files(root):
    pos_dir, neg_dir = os.path.join(root, "pos"), os.path.join(root, "neg")
    if os.path.isdir(pos_dir) or os.path.isdir(neg_dir):
        out = []
        for sub, label in ((pos_dir, 1), (neg_dir, 0)):
            if os.path.isdir(sub):
                out += [(os.path.join(sub, f), label)
                        for f in sorted(os.listdir(sub)) if f.lower().endswith(".pgm")]
        return out
    flat = os.path.join(root, "TrainImages")
    if os.path.isdir(flat):
        out = []
        for f in sorted(os.listdir(flat)):
            if f.lower().endswith(".pgm") and f[:4] in ("pos-", "neg-"):
                out.append((os.path.join(flat, f), 1 if f.startswith("pos-") else 0))
        return out
    return []


def load_training_set(root, pool=None):
    """Load labeled crops, sorted by filename within pos/ then neg/.

    ``pool`` may be a ``concurrent.futures`` executor; results keep the
    sorted order regardless.
    """
    if not os.path.isdir(root):
        raise FileNotFoundError(f"corpus root not found: {root}")
    files = _training_files(root)
    if not files:
        raise CorpusFormatError(f"no training PGMs under {root} (expected pos/ and neg/)")

    def load(item):
        path, label = item
        img = load_pgm(path)
        if img.shape != (WINDOW_H, WINDOW_W):
            raise CorpusFormatError(
                f"{path}: expected {WINDOW_H}x{WINDOW_W} crop, got {img.shape[0]}x{img.shape[1]}")
        rel = os.path.relpath(path, root)
        return crop_from_window(img, label, rel)

    crops = list(pool.map(load, files)) if pool else [load(f) for f in files]
    n_pos = sum(c.label for c in crops)
    log.info("loaded %d training crops (%d positive, %d negative)",
             len(crops), n_pos, len(crops) - n_pos)
    return crops


_TRUTH_LINE = re.compile(r"^\s*(\d+)\s*:\s*(.*?)\s*$")
_PAIR = re.compile(r"\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)")


def parse_truth_file(text):
    """Parse ``N: (r,c) (r,c) ...`` lines into ``{N: [(r, c), ...]}``.

    Blank lines are skipped. A scene listed with no pairs has no cars.
    """
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        m = _TRUTH_LINE.match(line)
        if not m:
            raise TruthParseError(lineno, line, "expected 'index: (row,col) ...'")
        rest = m.group(2)
        pairs = [(int(a), int(b)) for a, b in _PAIR.findall(rest)]
        if _PAIR.sub("", rest).strip():
            raise TruthParseError(lineno, line, "unparsable location list")
        out.setdefault(int(m.group(1)), []).extend(pairs)
    return out


def load_test_scenes(root, truth_file):
    """Pair ``test-<N>.pgm`` scenes under ``root`` with their truth anchors."""
    with open(truth_file) as fh:
        truths = parse_truth_file(fh.read())
    scenes = []
    for idx in sorted(truths):
        path = os.path.join(root, f"test-{idx}.pgm")
        if not os.path.exists(path):
            raise CorpusFormatError(f"truth file references scene {idx} but {path} is missing")
        scenes.append(TestScene(load_pgm(path), truths[idx], str(idx)))
    log.info("loaded %d test scenes with %d ground truths",
             len(scenes), sum(len(s.ground_truths) for s in scenes))
    return scenes


def augmentation_angles(max_deg, step_deg):
    if step_deg <= 0:
        raise ValueError(f"step_deg must be positive, got {step_deg}")
    if max_deg < 0:
        raise ValueError(f"max_deg must be non-negative, got {max_deg}")
    n = int(round(2 * max_deg / step_deg))
    return [-max_deg + k * step_deg for k in range(n + 1)]


def augment_rotations(crops, max_deg, step_deg):
    """Every crop at every angle in [-max_deg, max_deg] spaced by step_deg.

    Rotation is applied to the 40x100 source window before the resize.
    The 0-degree variant reuses the original crop object.
    """
    angles = augmentation_angles(max_deg, step_deg)
    out = []
    for crop in crops:
        for a in angles:
            if a == 0:
                out.append(crop)
            else:
                if crop.window is None:
                    raise ValueError(f"{crop.source_id}: source window not retained")
                out.append(crop_from_window(crop.window, crop.label, crop.source_id, a))
    return out


def minibatches(crops, batch_size, seed):
    """One epoch of batches in a seed-determined shuffled order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not crops:
        raise ValueError("no crops to batch")
    order = np.random.default_rng(seed).permutation(len(crops))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield Batch(np.stack([crops[i].stack for i in idx]),
                    np.array([crops[i].label for i in idx], dtype=np.float32))


def is_validation(source_id, fraction):
    """Deterministic hash split: roughly ``fraction`` of sources are held out."""
    if fraction <= 0:
        return False
    digest = hashlib.sha256(source_id.encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2.0**64 < fraction


def split_validation(crops, fraction=0.1):
    train = [c for c in crops if not is_validation(c.source_id, fraction)]
    val = [c for c in crops if is_validation(c.source_id, fraction)]
    return train, val


def stack_arrays(crops):
    """(N, 3, 84, 28) float32 stacks and (N,) labels."""
    return (np.stack([c.stack for c in crops]).astype(np.float32),
            np.array([c.label for c in crops], dtype=np.float32))
