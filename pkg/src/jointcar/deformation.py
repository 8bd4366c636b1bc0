"""Part filters and the deformation layer.

Each of the 8 parts owns a filter over the 64 pooled feature maps
(19 x 5 grid). Its detection map M is summed with weighted deformation
maps, and the part score is the global maximum of that summed map.

Grid convention: x indexes rows, y indexes columns. With the quadratic
model the four deformation maps around the anchor (ax, ay) are

    d1 = (x - ax)**2,  d2 = (y - ay)**2,  d3 = x - ax,  d4 = y - ay

and the summed map is B = M + c1*d1 + c2*d2 + c3*d3 + c4*d4. The constant
c5 = c3**2/(4 c1) + c4**2/(4 c2) shifts every cell equally, so it is left
out of B (it cannot move the argmax and is not learned).
"""
from dataclasses import dataclass, field

import numpy as np

from .nn import kernels

FEATURE_H, FEATURE_W = 19, 5
N_PARTS = 4 * 2
DEGENERATE_COEFF = 1e-12
INIT_QUADRATIC = -0.05


@dataclass(frozen=True)
class PartSpec:
    part_id: int
    level: int
    f_h: int
    f_w: int
    anchor: tuple  # (ax, ay) on this part's detection-map grid
    mirror_of: int = None

    def __post_init__(self):
        if not 1 <= self.level <= 3:
            raise ValueError(f"part {self.part_id}: level must be 1..3")
        if not (1 <= self.f_h <= FEATURE_H and 1 <= self.f_w <= FEATURE_W):
            raise ValueError(f"part {self.part_id}: filter {self.f_h}x{self.f_w} "
                             f"does not fit the {FEATURE_H}x{FEATURE_W} feature grid")
        ax, ay = self.anchor
        h, w = self.map_shape
        if not (0 <= ax < h and 0 <= ay < w):
            raise ValueError(f"part {self.part_id}: anchor {self.anchor} outside {h}x{w} map")

    @property
    def map_shape(self):
        return FEATURE_H - self.f_h + 1, FEATURE_W - self.f_w + 1


def _mirror(spec, part_id):
    # flipping the car left/right reverses the row axis of the portrait grid
    h, _ = spec.map_shape
    ax, ay = spec.anchor
    return PartSpec(part_id, spec.level, spec.f_h, spec.f_w, (h - 1 - ax, ay), spec.part_id)


def default_part_layout():
    """Four parts for one viewing direction plus their mirror images.

    Level 1: two 5x3 wheel-region filters; level 2: one 10x4 filter;
    level 3: the full 15x5 filter (15 rows by 5 columns).
    """
    one_view = [
        PartSpec(1, 1, 5, 3, (2, 1), 5),
        PartSpec(2, 1, 5, 3, (12, 1), 6),
        PartSpec(3, 2, 10, 4, (4, 1), 7),
        PartSpec(4, 3, 15, 5, (2, 0), 8),
    ]
    mirrored = [_mirror(s, s.part_id + 4) for s in one_view]
    return one_view + mirrored


def validate_layout(specs):
    if len(specs) != N_PARTS:
        raise ValueError(f"exactly {N_PARTS} parts required, got {len(specs)}")
    ids = [s.part_id for s in specs]
    if ids != list(range(1, N_PARTS + 1)):
        raise ValueError(f"part ids must be 1..{N_PARTS} in order, got {ids}")
    by_id = {s.part_id: s for s in specs}
    for s in specs:
        if s.mirror_of is None:
            continue
        other = by_id.get(s.mirror_of)
        if other is None:
            raise ValueError(f"part {s.part_id}: mirror_of {s.mirror_of} does not exist")
        if (other.f_h, other.f_w) != (s.f_h, s.f_w) or other.level != s.level:
            raise ValueError(f"parts {s.part_id} and {other.part_id} are mirrors "
                             "but differ in size or level")
    return specs


def layout_to_config(specs):
    """``partN -> "level f_h f_w ax ay mirror_of"`` (mirror_of 0 = none)."""
    return {f"part{s.part_id}": f"{s.level} {s.f_h} {s.f_w} {s.anchor[0]} {s.anchor[1]} "
                                f"{s.mirror_of or 0}" for s in specs}


def layout_from_config(cfg):
    specs = []
    for pid in range(1, N_PARTS + 1):
        try:
            level, fh, fw, ax, ay, mirror = (int(v) for v in cfg[f"part{pid}"].split())
        except (KeyError, ValueError) as exc:
            raise ValueError(f"bad or missing part{pid} entry: {exc}") from None
        specs.append(PartSpec(pid, level, fh, fw, (ax, ay), mirror or None))
    return validate_layout(specs)


@dataclass
class DeformationBasis:
    maps: np.ndarray  # (4, h, w): d1..d4
    anchor: tuple

    @property
    def shape(self):
        return self.maps.shape[1:]


def quadratic_basis(map_h, map_w, anchor):
    ax, ay = anchor
    if not (0 <= ax < map_h and 0 <= ay < map_w):
        raise ValueError(f"anchor {anchor} outside {map_h}x{map_w} map")
    dx = (np.arange(map_h, dtype=np.float64) - ax)[:, None] * np.ones((1, map_w))
    dy = np.ones((map_h, 1)) * (np.arange(map_w, dtype=np.float64) - ay)[None, :]
    return DeformationBasis(np.stack([dx * dx, dy * dy, dx, dy]), (ax, ay))


def summed_map(m, coeffs, basis):
    """B = M + sum_n c_n D_n (c5 omitted)."""
    m = np.asarray(m)
    if m.shape != basis.shape:
        raise ValueError(f"map {m.shape} and basis {basis.shape} differ")
    out = m.astype(np.result_type(m, np.float64), copy=True)
    for c, d in zip(coeffs, basis.maps):
        out = out + c * d
    return out


def part_score(b):
    """Global max of the summed map and its (x, y); ties go row-major first."""
    b = np.asarray(b)
    if b.size == 0:
        raise ValueError("empty map")
    idx = int(np.argmax(b))
    x, y = divmod(idx, b.shape[1])
    return b[x, y].item(), (x, y)


def deformation_backward(ds, loc, basis):
    """Gradients through the max: only the winning cell receives signal.

    Returns dM (one nonzero entry, ds, at loc) and dc_n = ds * d_n(loc).
    """
    h, w = basis.shape
    x, y = loc
    if not (0 <= x < h and 0 <= y < w):
        raise RuntimeError(f"argmax location {loc} outside {h}x{w} map")
    dm = np.zeros((h, w))
    dm[x, y] = ds
    dc = ds * basis.maps[:, x, y]
    return dm, dc


@dataclass
class QuadraticExpansion:
    summed: np.ndarray  # linear form, plus c5 when defined
    c5: float = None
    center: tuple = None
    completed_square: np.ndarray = None
    degenerate: bool = False


def expand_quadratic(coeffs, anchor, m):
    """Evaluate the quadratic deformation both as a linear basis expansion and
    in completed-square form.

    The completed square m + c1 (x - ax + c3/(2 c1))**2 + c2 (y - ay + c4/(2 c2))**2
    equals the linear form plus c5. With |c1| or |c2| below 1e-12 the square
    form, c5 and the center are undefined; the linear form is still returned.
    """
    c1, c2, c3, c4 = (float(c) for c in coeffs)
    m = np.asarray(m, dtype=np.float64)
    basis = quadratic_basis(*m.shape, anchor)
    linear = summed_map(m, (c1, c2, c3, c4), basis)
    if abs(c1) < DEGENERATE_COEFF or abs(c2) < DEGENERATE_COEFF:
        return QuadraticExpansion(summed=linear, degenerate=True)
    ax, ay = anchor
    c5 = c3 ** 2 / (4 * c1) + c4 ** 2 / (4 * c2)
    xs = np.arange(m.shape[0])[:, None]
    ys = np.arange(m.shape[1])[None, :]
    square = m + c1 * (xs - ax + c3 / (2 * c1)) ** 2 + c2 * (ys - ay + c4 / (2 * c2)) ** 2
    center = (ax - c3 / (2 * c1), ay - c4 / (2 * c2))
    return QuadraticExpansion(summed=linear + c5, c5=c5, center=center,
                              completed_square=square)


def project_coeffs(coeffs):
    """Keep c1, c2 <= 0 so the quadratic terms act as a cost, in place."""
    np.minimum(coeffs[:, :2], 0, out=coeffs[:, :2])
    return coeffs


@dataclass
class PartModel:
    """Part filters and deformation parameters for all 8 parts.

    ``mode`` is "quadratic" (learn c1..c4 per part over fixed basis maps)
    or "learned" (N=1, c=1: learn the whole deformation map per part).
    """
    specs: list
    filters: list  # per part (64, f_h, f_w)
    biases: np.ndarray  # (8,)
    coeffs: np.ndarray = None  # (8, 4), quadratic mode
    deform_maps: list = None  # per part (h, w), learned mode
    mode: str = "quadratic"
    bases: list = field(init=False, repr=False)

    def __post_init__(self):
        validate_layout(self.specs)
        if self.mode not in ("quadratic", "learned"):
            raise ValueError(f"unknown deformation mode {self.mode!r}")
        self.bases = [quadratic_basis(*s.map_shape, s.anchor) for s in self.specs]

    @classmethod
    def initialize(cls, rng, specs=None, mode="quadratic", channels=64, dtype=np.float32):
        from .nn.core import glorot_uniform
        specs = validate_layout(specs or default_part_layout())
        filters = [None] * len(specs)
        for s in specs:
            i = s.part_id - 1
            if s.mirror_of is not None and filters[s.mirror_of - 1] is not None:
                filters[i] = filters[s.mirror_of - 1][:, ::-1, :].copy()
            else:
                fan = channels * s.f_h * s.f_w
                filters[i] = glorot_uniform(rng, (channels, s.f_h, s.f_w), fan, s.f_h * s.f_w)
        filters = [f.astype(dtype) for f in filters]
        model = cls(specs, filters, np.zeros(len(specs), dtype=dtype), mode=mode)
        if mode == "quadratic":
            c = np.zeros((len(specs), 4), dtype=dtype)
            c[:, :2] = INIT_QUADRATIC
            model.coeffs = c
        else:
            model.deform_maps = [
                (INIT_QUADRATIC * (b.maps[0] + b.maps[1])).astype(dtype) for b in model.bases]
        return model


def part_detection_maps(features, model):
    """Per-part valid cross-correlation of (64,19,5) or (B,64,19,5) features."""
    f = np.ascontiguousarray(features)
    single = f.ndim == 3
    if single:
        f = f[None]
    if f.shape[2:] != (FEATURE_H, FEATURE_W):
        raise ValueError(f"features must be {FEATURE_H}x{FEATURE_W}, got {f.shape[2:]}")
    maps = []
    for s, w, b in zip(model.specs, model.filters, model.biases):
        if w.shape[1] > f.shape[2] or w.shape[2] > f.shape[3]:
            raise ValueError(f"part {s.part_id} filter larger than feature map")
        wk = np.ascontiguousarray(w[None], dtype=f.dtype)
        out, _ = kernels.conv2d_forward(f, wk, np.array([b], dtype=f.dtype))
        maps.append(out[0, 0] if single else out[:, 0])
    return maps
