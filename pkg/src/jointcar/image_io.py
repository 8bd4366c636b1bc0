"""PGM decoding/encoding and construction of the three-channel network input.

Gray images are plain 2-D float64 numpy arrays (rows x cols). The network
input is a ``(3, 84, 28)`` array:

* channel 0: the Y plane at full resolution;
* channel 1: Y, U, V at half resolution tiled into quadrants
  (top-left Y, top-right U, bottom-left V, bottom-right zero);
* channel 2: Sobel magnitudes of the half-resolution Y, U, V planes and
  their per-pixel maximum, tiled in the same quadrant order.

Each channel is then shifted/scaled to zero mean and unit variance.
"""
import re

import numpy as np

INPUT_H, INPUT_W = 84, 28
HALF_H, HALF_W = INPUT_H // 2, INPUT_W // 2
CONSTANT_VAR = 1e-8


class PGMError(ValueError):
    """Malformed or truncated PGM data."""


class UnsupportedFormatError(PGMError):
    pass


class UnsupportedDepthError(PGMError):
    pass


_TOKEN = re.compile(rb"\s*(?:#[^\n\r]*[\r\n]\s*)*")


def _header_tokens(data, count):
    """Read ``count`` whitespace-separated header tokens after the magic.

    Comments run from ``#`` to end of line. Returns the tokens and the
    offset just past the single whitespace byte that ends the last one.
    """
    pos = 2
    tokens = []
    while len(tokens) < count:
        m = _TOKEN.match(data, pos)
        pos = m.end()
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise PGMError(f"bad or missing header field {len(tokens) + 1}")
        tokens.append(int(data[start:pos]))
    if pos >= len(data) and count:
        raise PGMError("header not terminated")
    if not data[pos:pos + 1].isspace():
        raise PGMError("header field not followed by whitespace")
    return tokens, pos + 1


def read_pgm(data):
    """Decode P5 (binary) or P2 (ASCII) PGM bytes into a float64 array.

    Values are exact for maxval 255; any other maxval is rescaled onto
    [0, 255].
    """
    data = bytes(data)
    magic = data[:2]
    if magic not in (b"P5", b"P2"):
        raise UnsupportedFormatError(f"not a PGM file (magic {magic!r})")
    (width, height, maxval), offset = _header_tokens(data, 3)
    if width < 1 or height < 1:
        raise PGMError(f"bad dimensions {width}x{height}")
    if maxval < 1:
        raise PGMError(f"bad maxval {maxval}")
    if maxval > 255:
        raise UnsupportedDepthError(f"maxval {maxval} > 255 not supported")
    n = width * height
    if magic == b"P5":
        payload = data[offset:offset + n]
        if len(payload) < n:
            raise PGMError(f"truncated payload: {len(payload)} of {n} bytes")
        pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
    else:
        fields = data[offset:].split()
        if len(fields) < n:
            raise PGMError(f"truncated payload: {len(fields)} of {n} samples")
        try:
            pixels = np.array([int(f) for f in fields[:n]], dtype=np.float64)
        except ValueError as exc:
            raise PGMError(f"non-numeric sample: {exc}") from None
    if pixels.max(initial=0) > maxval:
        raise PGMError("sample exceeds maxval")
    if maxval != 255:
        pixels = pixels * (255.0 / maxval)
    return pixels.reshape(height, width)


def write_pgm(img, binary=True):
    """Encode an 8-bit image as P5 (default) or P2 bytes with maxval 255."""
    a = np.asarray(img)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"expected a non-empty 2-D image, got shape {a.shape}")
    if a.min() < 0 or a.max() > 255 or not np.all(a == np.round(a)):
        raise ValueError("pixel values must be integers in [0, 255]")
    px = a.astype(np.uint8)
    h, w = px.shape
    if binary:
        return b"P5\n%d %d\n255\n" % (w, h) + px.tobytes()
    lines = [b" ".join(b"%d" % v for v in row) for row in px]
    return b"P2\n%d %d\n255\n" % (w, h) + b"\n".join(lines) + b"\n"


def load_pgm(path):
    with open(path, "rb") as fh:
        return read_pgm(fh.read())


def save_pgm(path, img, binary=True):
    with open(path, "wb") as fh:
        fh.write(write_pgm(img, binary=binary))


def _bilinear_sample(img, rows, cols):
    """Sample img at float coordinates with nearest-border replication."""
    h, w = img.shape
    rows = np.clip(rows, 0, h - 1)
    cols = np.clip(cols, 0, w - 1)
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = rows - r0
    fc = cols - c0
    top = img[r0, c0] * (1 - fc) + img[r0, c1] * fc
    bot = img[r1, c0] * (1 - fc) + img[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def _resize_matrix(n_in, n_out):
    """(n_out, n_in) linear interpolation weights, pixel-center aligned."""
    m = np.zeros((n_out, n_in))
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    rows = np.arange(n_out)
    m[rows, i0] += 1 - f
    m[rows, i1] += f
    return m


def resize_bilinear(img, out_h, out_w):
    """Bilinear resize with pixel-center alignment and clamped borders."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    # separable: rows then cols; weights of each output sum to one
    return _resize_matrix(h, out_h) @ img @ _resize_matrix(w, out_w).T


def rotate_about_center(img, degrees):
    """Rotate counter-clockwise by ``degrees`` about the image center.

    Output keeps the input size. Each output pixel samples the inverse
    rotation bilinearly; samples falling outside replicate the border.
    """
    if abs(degrees) > 90:
        raise ValueError(f"|degrees| must be <= 90, got {degrees}")
    img = np.asarray(img, dtype=np.float64)
    if degrees == 0:
        return img.copy()
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = np.deg2rad(degrees)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # image rows grow downward, so a CCW turn on screen flips the y sign
    dy, dx = yy - cy, xx - cx
    src_x = cx + dx * np.cos(t) - dy * np.sin(t)
    src_y = cy + dx * np.sin(t) + dy * np.cos(t)
    return _bilinear_sample(img, src_y, src_x)


SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()


def sobel_magnitude(img):
    """sqrt(gx**2 + gy**2) with 3x3 Sobel kernels and replicated borders.

    Works on the last two axes, so a stack of images is accepted too.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim < 2 or img.shape[-2] < 3 or img.shape[-1] < 3:
        raise ValueError(f"image must be at least 3x3, got {img.shape}")
    pad = [(0, 0)] * (img.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(img, pad, mode="edge")
    h, w = img.shape[-2:]
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    for i in range(3):
        for j in range(3):
            win = p[..., i:i + h, j:j + w]
            if SOBEL_X[i, j]:
                gx += SOBEL_X[i, j] * win
            if SOBEL_Y[i, j]:
                gy += SOBEL_Y[i, j] * win
    return np.hypot(gx, gy)


def downsample2(img):
    """2x2 block average over the last two axes."""
    h, w = img.shape[-2:]
    lead = img.shape[:-2]
    a = img[..., :h // 2 * 2, :w // 2 * 2]
    return a.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))


def gray_to_yuv(gray):
    """Grayscale source: Y is the intensity, U and V are identically zero."""
    gray = np.asarray(gray, dtype=np.float64)
    return gray, np.zeros_like(gray), np.zeros_like(gray)


def tile_quadrants(planes):
    """Place up to four (..., 42, 14) planes into (..., 84, 28), zeros elsewhere.

    Order: top-left, top-right, bottom-left, bottom-right.
    """
    lead = np.shape(planes[0])[:-2]
    out = np.zeros(lead + (INPUT_H, INPUT_W))
    slots = [(0, 0), (0, HALF_W), (HALF_H, 0), (HALF_H, HALF_W)]
    for plane, (r, c) in zip(planes, slots):
        out[..., r:r + HALF_H, c:c + HALF_W] = plane
    return out


def normalize_channel(plane):
    """Zero mean, unit variance over the last two axes; near-constant planes
    become all zeros."""
    plane = np.asarray(plane, dtype=np.float64)
    mean = plane.mean(axis=(-2, -1), keepdims=True)
    var = plane.var(axis=(-2, -1), keepdims=True)
    flat = var < CONSTANT_VAR
    out = (plane - mean) / np.sqrt(np.where(flat, 1.0, var))
    return np.where(flat, 0.0, out)


def edge_planes(crop):
    """The four half-resolution edge maps (Y, U, V, max) before tiling."""
    y, u, v = (downsample2(p) for p in gray_to_yuv(crop))
    edges = [sobel_magnitude(p) for p in (y, u, v)]
    edges.append(np.maximum(np.maximum(edges[0], edges[1]), edges[2]))
    return edges


def raw_channels(crop):
    """The three input planes before normalization: (..., 3, 84, 28)."""
    crop = np.asarray(crop, dtype=np.float64)
    if crop.shape[-2:] != (INPUT_H, INPUT_W):
        raise ValueError(f"crop must be {INPUT_H}x{INPUT_W}, got {crop.shape[-2:]}")
    y, u, v = gray_to_yuv(crop)
    small = [downsample2(p) for p in (y, u, v)]
    return np.stack([y, tile_quadrants(small), tile_quadrants(edge_planes(crop))], axis=-3)


def build_channel_stack(crop):
    """(3, 84, 28) normalized network input from an 84x28 grayscale crop.

    A (N, 84, 28) stack of crops gives (N, 3, 84, 28).
    """
    return normalize_channel(raw_channels(crop))


def window_to_input(window):
    """Map 40x100 landscape crops to the 84x28 portrait network geometry.

    Rotates 90 degrees clockwise so rows run along the car length, then
    resizes bilinearly. Accepts a single window or an (N, 40, 100) stack.
    """
    window = np.asarray(window, dtype=np.float64)
    turned = np.rot90(window, k=-1, axes=(-2, -1))
    h, w = turned.shape[-2:]
    if (h, w) == (INPUT_H, INPUT_W):
        return turned.copy()
    ry = _resize_matrix(h, INPUT_H)
    rx = _resize_matrix(w, INPUT_W)
    return ry @ turned @ rx.T
