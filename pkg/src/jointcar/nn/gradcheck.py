"""Central finite-difference check of the network's analytic gradients."""
from dataclasses import dataclass, field

import numpy as np

from .. import model as net
from .core import bce_loss

ABS_FLOOR = 1e-7


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_group: dict = field(default_factory=dict)
    n_checked: int = 0
    flagged_scalars: int = 0
    flagged_samples: int = 0

    def __str__(self):
        lines = [f"max relative error {self.max_rel_error:.3e} over {self.n_checked} scalars "
                 f"({self.flagged_scalars} near-tie scalars, {self.flagged_samples} "
                 f"near-tie samples skipped)"]
        lines += [f"  {k:<16s} {v:.3e}" for k, v in self.per_group.items()]
        return "\n".join(lines)


def rel_error(a, n, floor=ABS_FLOOR):
    """|a - n| / max(|a|, |n|, floor); the floor keeps ~zero gradients from
    turning round-off into large relative errors."""
    return abs(a - n) / max(abs(a), abs(n), floor)


def _loss_and_locs(params, x, labels):
    y, cache = net.forward(params, x)
    loss = float(np.mean(bce_loss(y, labels)))
    return loss, cache.get("locs")


def grad_check(params, x, labels, epsilon=1e-5, per_group=20, seed=0, groups=None,
               tie_factor=10.0):
    """Compare analytic gradients with (L(p+eps) - L(p-eps)) / (2 eps).

    Runs in float64. Every deformation coefficient is checked; other groups
    contribute ``per_group`` randomly chosen scalars (all of them if fewer).
    Samples whose part argmax is within ``tie_factor * epsilon`` of a tie
    are dropped from the batch, and any scalar whose perturbation still
    moves an argmax is skipped and counted as flagged.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    p = params.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    flagged_samples = 0
    if p.stage > 1:
        keep = np.all(net.score_margins(p, x) > tie_factor * epsilon, axis=1)
        flagged_samples = int((~keep).sum())
        x, labels = x[keep], labels[keep]
        if len(labels) == 0:
            raise ValueError("every sample sits on an argmax near-tie")
    _, grads, _ = net.loss_and_grads(p, x, labels)
    _, base_locs = _loss_and_locs(p, x, labels)
    rng = np.random.default_rng(seed)
    result = GradCheckResult(0.0)
    result.flagged_samples = flagged_samples
    for name, arr in p.groups.items():
        if groups is not None and name not in groups:
            continue
        flat = arr.reshape(-1)
        if name == "deform.coeffs" or flat.size <= per_group:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, per_group, replace=False))
        worst = 0.0
        for j in idx:
            orig = flat[j]
            flat[j] = orig + epsilon
            lp, locs_p = _loss_and_locs(p, x, labels)
            flat[j] = orig - epsilon
            lm, locs_m = _loss_and_locs(p, x, labels)
            flat[j] = orig
            moved = base_locs is not None and not (np.array_equal(locs_p, base_locs)
                                                   and np.array_equal(locs_m, base_locs))
            if moved:
                result.flagged_scalars += 1
                continue
            numeric = (lp - lm) / (2 * epsilon)
            worst = max(worst, rel_error(grads[name].reshape(-1)[j], numeric))
            result.n_checked += 1
        result.per_group[name] = worst
        result.max_rel_error = max(result.max_rel_error, worst)
    return result
