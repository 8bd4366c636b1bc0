"""Label estimation from the 8 part scores.

Two heads are available:

logistic
    y = sigmoid(w . s + b)

hierarchical
    One hidden unit per part, grouped by part level. Level-1 units see only
    their own part score; each higher-level unit also sees the previous
    level's hidden vector:

        h1_j     = sigmoid(g1_j s_j + b1_j)
        h{l+1}_j = sigmoid(h_l . W_l[:, j] + g{l+1}_j s_j + b{l+1}_j)
        y        = sigmoid(h_top . w_out + b_out)
"""
from dataclasses import dataclass

import numpy as np

from .nn.core import glorot_uniform, output_sigmoid


class VisibilityError(ValueError):
    pass


def _sig(z):
    return output_sigmoid(z)


@dataclass
class VisibilityParams:
    mode: str
    levels: list  # per level, the 0-based part indices of its hidden units
    arrays: dict

    @classmethod
    def zeros(cls, mode, levels, dtype=np.float64):
        levels = [list(l) for l in levels]
        n_parts = sum(len(l) for l in levels)
        if mode == "logistic":
            arrays = {"w": np.zeros(n_parts, dtype), "b": np.zeros(1, dtype)}
        elif mode == "hierarchical":
            arrays = {}
            for i, units in enumerate(levels, 1):
                arrays[f"g{i}"] = np.zeros(len(units), dtype)
                arrays[f"b{i}"] = np.zeros(len(units), dtype)
                if i < len(levels):
                    arrays[f"W{i}"] = np.zeros((len(units), len(levels[i])), dtype)
            arrays["w_out"] = np.zeros(len(levels[-1]), dtype)
            arrays["b_out"] = np.zeros(1, dtype)
        else:
            raise ValueError(f"unknown visibility mode {mode!r}")
        return cls(mode, levels, arrays)

    @classmethod
    def initialize(cls, rng, mode, levels, score_weights=None, dtype=np.float32):
        """Random inter-level and readout weights; score gains start from
        ``score_weights`` (e.g. a previously trained logistic head) or 1."""
        p = cls.zeros(mode, levels, np.float64)
        a = p.arrays
        if mode == "logistic":
            a["w"][:] = glorot_uniform(rng, a["w"].shape, len(a["w"]), 1)
        else:
            for i, units in enumerate(p.levels, 1):
                a[f"g{i}"][:] = 1.0 if score_weights is None else score_weights[units]
                if f"W{i}" in a:
                    W = a[f"W{i}"]
                    W[:] = glorot_uniform(rng, W.shape, *W.shape)
            a["w_out"][:] = glorot_uniform(rng, a["w_out"].shape, len(a["w_out"]), 1)
        for k in a:
            a[k] = a[k].astype(dtype)
        return p


def levels_from_specs(specs):
    """Group 0-based part indices by level, in part-id order."""
    top = max(s.level for s in specs)
    return [[s.part_id - 1 for s in specs if s.level == lvl] for lvl in range(1, top + 1)]


def visibility_forward(scores, params):
    """scores (8,) or (B, 8) -> (y_hat, cache)."""
    s = np.asarray(scores)
    single = s.ndim == 1
    if single:
        s = s[None]
    if not np.all(np.isfinite(s)):
        raise VisibilityError("non-finite part score")
    a = params.arrays
    cache = {"s": s, "single": single}
    if params.mode == "logistic":
        y = _sig(s @ a["w"] + a["b"][0])
    else:
        h = None
        for i, units in enumerate(params.levels, 1):
            z = s[:, units] * a[f"g{i}"] + a[f"b{i}"]
            if h is not None:
                z = z + h @ a[f"W{i - 1}"]
            h = _sig(z)
            cache[f"h{i}"] = h
        y = _sig(h @ a["w_out"] + a["b_out"][0])
    cache["y"] = y
    return (y[0] if single else y), cache


def visibility_backward(dy, cache, params):
    """Gradients of sum(dy * y_hat) w.r.t. the visibility parameters and scores.

    Returns ``(grads, d_scores)``; grads has the same keys as params.arrays.
    """
    if cache is None or "y" not in cache:
        raise RuntimeError("visibility_backward called without a forward cache")
    s, y = cache["s"], cache["y"]
    dy = np.asarray(dy, dtype=y.dtype).reshape(-1)
    a = params.arrays
    grads = {}
    ds = np.zeros_like(s)
    dz = dy * y * (1 - y)
    if params.mode == "logistic":
        grads["w"] = s.T @ dz
        grads["b"] = np.array([dz.sum()], dtype=y.dtype)
        ds += dz[:, None] * a["w"]
    else:
        n = len(params.levels)
        top = cache[f"h{n}"]
        grads["w_out"] = top.T @ dz
        grads["b_out"] = np.array([dz.sum()], dtype=y.dtype)
        dh = dz[:, None] * a["w_out"]
        for i in range(n, 0, -1):
            units = params.levels[i - 1]
            h = cache[f"h{i}"]
            dzl = dh * h * (1 - h)
            grads[f"g{i}"] = (dzl * s[:, units]).sum(axis=0)
            grads[f"b{i}"] = dzl.sum(axis=0)
            ds[:, units] += dzl * a[f"g{i}"]
            if i > 1:
                grads[f"W{i - 1}"] = cache[f"h{i - 1}"].T @ dzl
                dh = dzl @ a[f"W{i - 1}"].T
    return grads, (ds[0] if cache["single"] else ds)
