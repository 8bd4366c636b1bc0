"""The full detector network and its parameter set.

Pipeline for a batch x of shape (B, 3, 84, 28)::

    conv1 9x9 (64 maps, 76x20) -> tanh -> 4x4 boxcar pool (64x19x5)
      stage 1: linear readout over the pooled features -> sigmoid
      stage 2+: 8 part filters -> deformation layer -> 8 scores
                -> logistic head (stage 2) / visibility head (stage 3)

All learnable arrays live in ``NetworkParams.groups`` under unique names;
component views (PartModel, VisibilityParams) share memory with them.
"""
from dataclasses import dataclass, field

import numpy as np

from .deformation import PartModel, default_part_layout, layout_from_config, layout_to_config
from .nn import kernels
from .nn.core import bce_grad, bce_loss, gabor_bank, glorot_uniform, output_sigmoid
from .visibility import VisibilityParams, levels_from_specs, visibility_backward, visibility_forward

POOL = 4
FEATURES = (64, 19, 5)


@dataclass
class NetworkParams:
    stage: int
    groups: dict
    specs: list = field(default_factory=default_part_layout)
    deformation_mode: str = "quadratic"
    visibility_mode: str = "hierarchical"

    def meta(self):
        m = {"stage": self.stage, "deformation_mode": self.deformation_mode,
             "visibility_mode": self.visibility_mode}
        m.update(layout_to_config(self.specs))
        return m

    @classmethod
    def from_meta(cls, meta, groups):
        return cls(int(meta["stage"]), groups, layout_from_config(meta),
                   meta["deformation_mode"], meta["visibility_mode"])

    @property
    def dtype(self):
        return self.groups["conv1.weight"].dtype

    def astype(self, dtype):
        return NetworkParams(self.stage, {k: v.astype(dtype) for k, v in self.groups.items()},
                             list(self.specs), self.deformation_mode, self.visibility_mode)

    def copy(self):
        return self.astype(self.dtype)

    def part_model(self):
        g = self.groups
        n = len(self.specs)
        pm = PartModel(self.specs, [g[f"part{i}.weight"] for i in range(1, n + 1)],
                       g["parts.bias"], mode=self.deformation_mode)
        if self.deformation_mode == "quadratic":
            pm.coeffs = g["deform.coeffs"]
        else:
            pm.deform_maps = [g[f"deform{i}.map"] for i in range(1, n + 1)]
        return pm

    def head(self):
        """The score head in use at this stage."""
        if self.stage == 2 or self.visibility_mode == "logistic":
            return VisibilityParams("logistic", levels_from_specs(self.specs),
                                    {"w": self.groups["logistic.w"], "b": self.groups["logistic.b"]})
        prefix = "vis."
        arrays = {k[len(prefix):]: v for k, v in self.groups.items() if k.startswith(prefix)}
        return VisibilityParams("hierarchical", levels_from_specs(self.specs), arrays)

    def n_scalars(self):
        return sum(v.size for v in self.groups.values())


def init_stage1(rng, dtype=np.float32, specs=None, deformation_mode="quadratic",
                visibility_mode="hierarchical"):
    bank = gabor_bank(64, 9, 9, 3)
    c, h, w = FEATURES
    fan = c * h * w
    groups = {
        "conv1.weight": bank.weights.astype(dtype),
        "conv1.bias": bank.biases.astype(dtype),
        "head.weight": glorot_uniform(rng, FEATURES, fan, 1).astype(dtype),
        "head.bias": np.zeros(1, dtype),
    }
    return NetworkParams(1, groups, specs or default_part_layout(), deformation_mode, visibility_mode)


def grow_to_stage2(params, rng):
    """Drop the stage-1 readout; add part filters, deformation and a logistic head."""
    dtype = params.dtype
    pm = PartModel.initialize(rng, params.specs, params.deformation_mode, dtype=dtype)
    groups = {k: v.copy() for k, v in params.groups.items() if k.startswith("conv1.")}
    for i, f in enumerate(pm.filters, 1):
        groups[f"part{i}.weight"] = f
    groups["parts.bias"] = pm.biases
    if pm.mode == "quadratic":
        groups["deform.coeffs"] = pm.coeffs
    else:
        for i, d in enumerate(pm.deform_maps, 1):
            groups[f"deform{i}.map"] = d
    n = len(params.specs)
    groups["logistic.w"] = glorot_uniform(rng, (n,), n, 1).astype(dtype)
    groups["logistic.b"] = np.zeros(1, dtype)
    return NetworkParams(2, groups, params.specs, params.deformation_mode, params.visibility_mode)


def grow_to_stage3(params, rng):
    """Add the visibility head, seeding its score gains from the logistic head."""
    groups = {k: v.copy() for k, v in params.groups.items()}
    if params.visibility_mode == "hierarchical":
        w = groups.pop("logistic.w")
        groups.pop("logistic.b")
        vis = VisibilityParams.initialize(rng, "hierarchical", levels_from_specs(params.specs),
                                          score_weights=w.astype(np.float64), dtype=params.dtype)
        for k, v in vis.arrays.items():
            groups[f"vis.{k}"] = v
    return NetworkParams(3, groups, params.specs, params.deformation_mode, params.visibility_mode)


def _part_forward(pooled, params):
    pm = params.part_model()
    B = pooled.shape[0]
    n = len(pm.specs)
    scores = np.empty((B, n), dtype=pooled.dtype)
    locs = np.empty((B, n, 2), dtype=np.int64)
    part_cols = []
    for i, spec in enumerate(pm.specs):
        w = np.ascontiguousarray(pm.filters[i][None])
        m, cols = kernels.conv2d_forward(pooled, w, pm.biases[i:i + 1])
        m = m[:, 0]
        part_cols.append(cols)
        if pm.mode == "quadratic":
            s, loc = kernels.deform_argmax(np.ascontiguousarray(m), pm.coeffs[i], *spec.anchor)
        else:
            summed = (m + pm.deform_maps[i]).reshape(B, -1)
            idx = np.argmax(summed, axis=1)
            s = summed[np.arange(B), idx]
            loc = np.stack([idx // m.shape[2], idx % m.shape[2]], axis=1)
        scores[:, i] = s
        locs[:, i] = loc
    return scores, locs, part_cols


def forward(params, x):
    """Class probabilities for a batch, plus the cache for ``backward``."""
    x = np.ascontiguousarray(x, dtype=params.dtype)
    g = params.groups
    z1, cols = kernels.conv2d_forward(x, g["conv1.weight"], g["conv1.bias"])
    pooled, act = kernels.tanh_avgpool_forward(z1, POOL)
    cache = {"x_shape": x.shape, "cols": cols, "act": act, "pooled": pooled}
    if params.stage == 1:
        logit = np.tensordot(pooled, g["head.weight"], axes=3) + g["head.bias"][0]
        y = output_sigmoid(logit).astype(params.dtype)
        cache["y"] = y
        return y, cache
    scores, locs, part_cols = _part_forward(pooled, params)
    y, head_cache = visibility_forward(scores, params.head())
    cache.update(scores=scores, locs=locs, part_cols=part_cols, head=head_cache, y=y)
    return y, cache


def score_margins(params, x):
    """Per sample and part, the gap between the best and second-best summed cell.

    Used to detect argmax near-ties before finite differencing.
    """
    x = np.ascontiguousarray(x, dtype=params.dtype)
    g = params.groups
    z1, _ = kernels.conv2d_forward(x, g["conv1.weight"], g["conv1.bias"])
    pooled, _ = kernels.tanh_avgpool_forward(z1, POOL)
    pm = params.part_model()
    out = np.full((x.shape[0], len(pm.specs)), np.inf)
    for i, spec in enumerate(pm.specs):
        w = np.ascontiguousarray(pm.filters[i][None])
        m = kernels.conv2d_forward(pooled, w, pm.biases[i:i + 1])[0][:, 0]
        if pm.mode == "quadratic":
            d = pm.bases[i].maps
            summed = m + np.tensordot(pm.coeffs[i].astype(np.float64), d, axes=1)
        else:
            summed = m + pm.deform_maps[i]
        flat = np.sort(summed.reshape(len(m), -1), axis=1)
        if flat.shape[1] > 1:
            out[:, i] = flat[:, -1] - flat[:, -2]
    return out


def backward(params, cache, dy, freeze_conv1=False):
    """Gradients of sum_b dy_b * y_b. Returns a dict keyed like params.groups."""
    g = params.groups
    dt = params.dtype
    dy = np.asarray(dy, dtype=dt)
    grads = {}
    pooled = cache["pooled"]
    if params.stage == 1:
        y = cache["y"]
        dlogit = dy * y * (1 - y)
        grads["head.weight"] = np.tensordot(dlogit, pooled, axes=1)
        grads["head.bias"] = np.array([dlogit.sum()], dtype=dt)
        dpooled = dlogit[:, None, None, None] * g["head.weight"]
    else:
        hgrads, ds = visibility_backward(dy, cache["head"], params.head())
        prefix = "logistic." if params.head().mode == "logistic" else "vis."
        for k, v in hgrads.items():
            grads[prefix + k] = v.astype(dt)
        pm = params.part_model()
        locs = cache["locs"]
        B = pooled.shape[0]
        dpooled = np.zeros_like(pooled)
        dbias = np.zeros(len(pm.specs), dtype=dt)
        dcoeffs = np.zeros((len(pm.specs), 4), dtype=dt)
        rows = np.arange(B)
        for i, spec in enumerate(pm.specs):
            h, w = spec.map_shape
            lx, ly = locs[:, i, 0], locs[:, i, 1]
            dm = np.zeros((B, 1, h, w), dtype=dt)
            dm[rows, 0, lx, ly] = ds[:, i]
            wk = np.ascontiguousarray(pm.filters[i][None])
            dw, db, dp = kernels.conv2d_backward(dm, cache["part_cols"][i], wk, pooled.shape)
            grads[f"part{i + 1}.weight"] = dw[0]
            dbias[i] = db[0]
            dpooled += dp
            if pm.mode == "quadratic":
                basis_at = pm.bases[i].maps[:, lx, ly]  # (4, B)
                dcoeffs[i] = basis_at @ ds[:, i].astype(np.float64)
            else:
                dmap = np.zeros((h, w), dtype=dt)
                np.add.at(dmap, (lx, ly), ds[:, i])
                grads[f"deform{i + 1}.map"] = dmap
        grads["parts.bias"] = dbias
        if pm.mode == "quadratic":
            grads["deform.coeffs"] = dcoeffs
    if freeze_conv1:
        grads["conv1.weight"] = np.zeros_like(g["conv1.weight"])
        grads["conv1.bias"] = np.zeros_like(g["conv1.bias"])
    else:
        dz1 = kernels.tanh_avgpool_backward(np.ascontiguousarray(dpooled), cache["act"], POOL)
        dw1, db1, _ = kernels.conv2d_backward(dz1, cache["cols"], g["conv1.weight"],
                                              cache["x_shape"], need_input=False)
        grads["conv1.weight"] = dw1
        grads["conv1.bias"] = db1
    return {k: grads[k] for k in g}


def loss_and_grads(params, x, labels, freeze_conv1=False):
    """Mean BCE over the batch and its gradient for every parameter group."""
    y, cache = forward(params, x)
    labels = np.asarray(labels, dtype=params.dtype)
    loss = float(np.mean(bce_loss(y.astype(np.float64), labels.astype(np.float64))))
    dy = bce_grad(y, labels) / len(labels)
    return loss, backward(params, cache, dy, freeze_conv1), y


def loss(params, x, labels):
    y, _ = forward(params, x)
    return float(np.mean(bce_loss(y.astype(np.float64), np.asarray(labels, dtype=np.float64))))


def predict(params, x, batch_size=256):
    """Car probabilities for an (N, 3, 84, 28) array, evaluated in chunks."""
    out = []
    for i in range(0, len(x), batch_size):
        out.append(forward(params, x[i:i + batch_size])[0])
    return np.concatenate(out) if out else np.zeros(0, dtype=params.dtype)


def save_params(path, params):
    from .nn import checkpoint
    return checkpoint.save(path, params.meta(), params.groups)


def load_params(path):
    from .nn import checkpoint
    meta, groups = checkpoint.load(path)
    return NetworkParams.from_meta(meta, groups)
