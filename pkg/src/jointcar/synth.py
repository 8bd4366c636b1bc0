"""Synthetic corpus in the UIUC single-scale layout.

Used when the real car data is not at hand (tests, CI, smoke runs). Cars
are drawn as side views: a body slab, a cabin with two windows, two
wheels with hubs, plus random shading, small tilts and sensor noise.
Negatives mix clutter textures, random boxes and lines, and car fragments
cut off at the window border, so the task is not solvable from mean
intensity alone.
"""
import os

import numpy as np

from .dataset import WINDOW_H, WINDOW_W
from .image_io import rotate_about_center, save_pgm

TILT_SD = 4.0
TILT_MAX = 10.0


def _disk(h, w, cy, cx, r):
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _background(rng, h, w):
    """Smooth random shading plus blocky clutter."""
    base = rng.uniform(60, 190)
    gy, gx = rng.uniform(-0.6, 0.6, 2)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = base + gy * (yy - h / 2) + gx * (xx - w / 2)
    coarse = rng.normal(0, rng.uniform(4, 18), ((h + 7) // 8, (w + 7) // 8))
    img += np.kron(coarse, np.ones((8, 8)))[:h, :w]
    for _ in range(rng.integers(0, 4)):
        r0, c0 = rng.integers(0, h), rng.integers(0, w)
        img[r0:r0 + rng.integers(3, 20), c0:c0 + rng.integers(3, 40)] += rng.uniform(-60, 60)
    return img


def draw_car(rng, img, top, left, scale=1.0):
    """Paint a side-view car whose 40x100 box starts at (top, left)."""
    h, w = img.shape
    s = scale
    body = rng.uniform(20, 110) if rng.random() < 0.5 else rng.uniform(150, 235)
    glass = np.clip(body + rng.choice([-1, 1]) * rng.uniform(40, 80), 0, 255)
    yy, xx = np.mgrid[0:h, 0:w]
    ry, rx = yy - top, xx - left
    nose = rng.uniform(4, 9) * s
    slab = (ry >= 16 * s) & (ry <= 31 * s) & (rx >= nose) & (rx <= 100 * s - nose)
    cab_l, cab_r = rng.uniform(24, 34) * s, rng.uniform(64, 76) * s
    slope = rng.uniform(0.6, 1.4)
    cabin = ((ry >= 5 * s) & (ry < 16 * s)
             & (rx >= cab_l + slope * (16 * s - ry)) & (rx <= cab_r - slope * (16 * s - ry) * 0.5))
    img[slab | cabin] = body + rng.normal(0, 3)
    mid = (cab_l + cab_r) / 2
    win = ((ry >= 7 * s) & (ry < 15 * s)
           & (rx >= cab_l + slope * (16 * s - ry) + 2) & (rx <= cab_r - slope * (16 * s - ry) * 0.5 - 2)
           & (np.abs(rx - mid) > 1.5))
    img[win] = glass
    tire = rng.uniform(5, 30)
    wr = rng.uniform(6.5, 8.5) * s
    for cx in (rng.uniform(20, 27) * s, rng.uniform(73, 80) * s):
        img[_disk(h, w, top + 31 * s, left + cx, wr)] = tire
        img[_disk(h, w, top + 31 * s, left + cx, wr * 0.45)] = rng.uniform(120, 200)
    return img


def car_crop(rng):
    """A 40x100 positive crop with a random tilt ~ N(0, 4 deg) clipped to 10."""
    pad = 12
    img = _background(rng, WINDOW_H + 2 * pad, WINDOW_W + 2 * pad)
    dy, dx = rng.integers(-2, 3, 2)
    draw_car(rng, img, pad + dy, pad + dx, scale=rng.uniform(0.92, 1.0))
    if rng.random() < 0.3:
        # occluder over one end of the car
        wid = int(rng.integers(15, 35))
        c0 = pad if rng.random() < 0.5 else pad + WINDOW_W - wid
        r0 = pad + int(rng.integers(0, 20))
        img[r0:, c0:c0 + wid] = rng.uniform(0, 255) + rng.normal(0, 5, img[r0:, c0:c0 + wid].shape)
    tilt = float(np.clip(rng.normal(0, TILT_SD), -TILT_MAX, TILT_MAX))
    img = rotate_about_center(img, tilt)[pad:pad + WINDOW_H, pad:pad + WINDOW_W]
    return _finish(rng, img)


def background_crop(rng):
    img = _background(rng, WINDOW_H + 24, WINDOW_W + 24)
    kind = rng.integers(0, 3)
    if kind == 1:
        # a car shifted far enough that only a fragment remains
        shift_c = rng.choice([-1, 1]) * rng.integers(55, 90)
        shift_r = rng.integers(-20, 21)
        draw_car(rng, img, 12 + shift_r, 12 + shift_c)
    elif kind == 2:
        for _ in range(rng.integers(2, 6)):
            r = rng.integers(0, img.shape[0])
            img[r:r + rng.integers(1, 4)] += rng.uniform(-70, 70)
        for _ in range(rng.integers(0, 3)):
            img[_disk(*img.shape, rng.uniform(0, img.shape[0]), rng.uniform(0, img.shape[1]),
                      rng.uniform(3, 9))] = rng.uniform(0, 255)
    img = rotate_about_center(img, float(rng.uniform(-10, 10)))[12:12 + WINDOW_H, 12:12 + WINDOW_W]
    return _finish(rng, img)


def _finish(rng, img):
    img = img + rng.normal(0, rng.uniform(2, 8), img.shape)
    return np.clip(np.round(img), 0, 255)


def make_scene(rng, height=None, width=None, max_cars=2):
    """A scene with 0..max_cars non-overlapping cars; returns (image, anchors)."""
    height = height or int(rng.integers(90, 140))
    width = width or int(rng.integers(180, 300))
    img = _background(rng, height, width)
    anchors = []
    for _ in range(int(rng.integers(0, max_cars + 1))):
        for _attempt in range(20):
            r = int(rng.integers(0, height - WINDOW_H + 1))
            c = int(rng.integers(0, width - WINDOW_W + 1))
            if all(abs(r - a) >= WINDOW_H or abs(c - b) >= WINDOW_W for a, b in anchors):
                anchors.append((r, c))
                draw_car(rng, img, r, c)
                break
    return _finish(rng, img), sorted(anchors)


def write_corpus(root, n_pos=550, n_neg=500, n_test=40, seed=0):
    """Write pos/, neg/, test/ and trueLocations.txt under ``root``."""
    rng = np.random.default_rng(seed)
    for sub in ("pos", "neg", "test"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    for i in range(n_pos):
        save_pgm(os.path.join(root, "pos", f"pos-{i}.pgm"), car_crop(rng))
    for i in range(n_neg):
        save_pgm(os.path.join(root, "neg", f"neg-{i}.pgm"), background_crop(rng))
    lines = []
    for i in range(n_test):
        img, anchors = make_scene(rng)
        save_pgm(os.path.join(root, "test", f"test-{i}.pgm"), img)
        lines.append(f"{i}: " + " ".join(f"({r},{c})" for r, c in anchors))
    with open(os.path.join(root, "trueLocations.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return root
