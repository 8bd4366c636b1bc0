import os
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointcar.dataset import (
    Batch, CorpusFormatError, LabeledCrop, TruthParseError, augment_rotations,
    augmentation_angles, crop_from_window, load_test_scenes, load_training_set, minibatches,
    parse_truth_file, split_validation,
)
from jointcar.image_io import save_pgm


def _crops(n, seed=0):
    rng = np.random.default_rng(seed)
    return [crop_from_window(rng.integers(0, 256, (40, 100)).astype(float), i % 2, f"c{i}")
            for i in range(n)]


def _write_corpus(root, n_pos=2, n_neg=2, seed=0):
    rng = np.random.default_rng(seed)
    for sub, n in (("pos", n_pos), ("neg", n_neg)):
        os.makedirs(root / sub, exist_ok=True)
        for i in range(n):
            save_pgm(root / sub / f"{sub}-{i}.pgm", rng.integers(0, 256, (40, 100)))


def test_load_training_set(tmp_path):
    _write_corpus(tmp_path, 3, 2)
    crops = load_training_set(str(tmp_path))
    assert [c.label for c in crops] == [1, 1, 1, 0, 0]
    assert [c.source_id for c in crops] == sorted(c.source_id for c in crops[:3]) + \
        sorted(c.source_id for c in crops[3:])
    assert crops[0].stack.shape == (3, 84, 28)


def test_load_is_deterministic_and_pool_safe(tmp_path):
    from concurrent.futures import ThreadPoolExecutor
    _write_corpus(tmp_path, 4, 4)
    a = load_training_set(str(tmp_path))
    with ThreadPoolExecutor(3) as pool:
        b = load_training_set(str(tmp_path), pool)
    assert [c.source_id for c in a] == [c.source_id for c in b]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.stack, y.stack)


def test_single_positive(tmp_path):
    _write_corpus(tmp_path, 1, 0)
    crops = load_training_set(str(tmp_path))
    assert len(crops) == 1 and crops[0].label == 1


def test_flat_uiuc_layout(tmp_path):
    os.makedirs(tmp_path / "TrainImages")
    save_pgm(tmp_path / "TrainImages" / "pos-0.pgm", np.zeros((40, 100)))
    save_pgm(tmp_path / "TrainImages" / "neg-0.pgm", np.zeros((40, 100)))
    assert sorted(c.label for c in load_training_set(str(tmp_path))) == [0, 1]


def test_empty_and_missing_dirs(tmp_path):
    with pytest.raises(CorpusFormatError):
        load_training_set(str(tmp_path))
    with pytest.raises(FileNotFoundError):
        load_training_set(str(tmp_path / "nope"))


def test_wrong_crop_size_names_file(tmp_path):
    os.makedirs(tmp_path / "pos")
    save_pgm(tmp_path / "pos" / "bad.pgm", np.zeros((41, 100)))
    with pytest.raises(CorpusFormatError, match="bad.pgm"):
        load_training_set(str(tmp_path))


def test_truth_parsing():
    assert parse_truth_file("3: (25, 48)\n") == {3: [(25, 48)]}
    got = parse_truth_file("0: (1,2) (3,4)\n\n1:\n")
    assert got == {0: [(1, 2), (3, 4)], 1: []}
    with pytest.raises(TruthParseError) as exc:
        parse_truth_file("0: (1,2)\n3: banana\n")
    assert exc.value.lineno == 2


def test_load_test_scenes(tmp_path):
    save_pgm(tmp_path / "test-0.pgm", np.zeros((60, 120)))
    truth = tmp_path / "truth.txt"
    truth.write_text("0: (5, 10)\n")
    scenes = load_test_scenes(str(tmp_path), str(truth))
    assert scenes[0].ground_truths == [(5, 10)] and scenes[0].scene_id == "0"
    truth.write_text("0: (5, 10)\n1: (0, 0)\n")
    with pytest.raises(CorpusFormatError):
        load_test_scenes(str(tmp_path), str(truth))


def test_scene_anchor_must_fit(tmp_path):
    save_pgm(tmp_path / "test-0.pgm", np.zeros((60, 120)))
    truth = tmp_path / "truth.txt"
    truth.write_text("0: (25, 10)\n")
    with pytest.raises(CorpusFormatError):
        load_test_scenes(str(tmp_path), str(truth))


def test_augmentation_counts_and_labels():
    crops = _crops(3)
    out = augment_rotations(crops, 10, 1)
    assert len(out) == 3 * 21
    assert Counter(c.label for c in out) == Counter({0: 42, 1: 21})
    assert sorted({c.rotation_deg for c in out}) == list(range(-10, 11))
    assert augment_rotations(crops, 0, 1) == crops


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.sampled_from([0.5, 1, 2, 5]))
def test_augmentation_formula(k, step):
    max_deg = k * step
    if max_deg > 10:
        max_deg = step * (10 // step)
    assert len(augmentation_angles(max_deg, step)) == int(2 * max_deg / step + 1)


def test_augmentation_bad_step():
    with pytest.raises(ValueError):
        augment_rotations(_crops(1), 10, 0)


def test_rotation_field_validated():
    with pytest.raises(ValueError):
        LabeledCrop(np.zeros((3, 84, 28)), 1, "x", 11.0)
    with pytest.raises(ValueError):
        LabeledCrop(np.zeros((3, 84, 28)), 2, "x", 0.0)


def test_minibatch_examples():
    crops = _crops(10)
    sizes = [len(b) for b in minibatches(crops, 4, seed=0)]
    assert sizes == [4, 4, 2]
    a = [b.labels.tolist() for b in minibatches(crops, 4, 5)]
    b = [b.labels.tolist() for b in minibatches(crops, 4, 5)]
    assert a == b
    order = lambda s: [tuple(x.stacks[:, 0, 0, 0]) for x in minibatches(crops, 10, s)]
    assert order(1) != order(2)
    with pytest.raises(ValueError):
        list(minibatches([], 4, 0))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(1, 5), st.integers(0, 1000))
def test_epoch_coverage(n, bs, seed):
    crops = _crops(n)
    seen = np.concatenate([b.stacks for b in minibatches(crops, bs, seed)])
    key = lambda a: sorted(map(bytes, (s.tobytes() for s in a)))
    assert key(seen.astype(np.float32)) == key(np.stack([c.stack for c in crops]).astype(np.float32))


def test_batch_invariants():
    with pytest.raises(ValueError):
        Batch(np.zeros((2, 3, 84, 28)), np.zeros(3))
    with pytest.raises(ValueError):
        Batch(np.zeros((0, 3, 84, 28)), np.zeros(0))


def test_validation_split_is_deterministic():
    crops = _crops(200)
    t1, v1 = split_validation(crops, 0.1)
    t2, v2 = split_validation(crops, 0.1)
    assert [c.source_id for c in v1] == [c.source_id for c in v2]
    assert len(t1) + len(v1) == 200 and 5 <= len(v1) <= 40
