"""SGD with momentum over named parameter groups."""
import numpy as np

from ..deformation import project_coeffs


class TrainingDivergence(FloatingPointError):
    """Raised when a gradient or loss stops being finite."""


def sgd_step(params, grads, lr, momentum, velocity=None):
    """One in-place update: v <- momentum*v - lr*g ; p <- p + v.

    ``params`` is a NetworkParams (or any object with a ``groups`` dict).
    Groups are visited in manifest order; deformation c1/c2 are projected
    onto (-inf, 0] afterwards. Returns the velocity dict.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient in group {name!r}")
    if velocity is None:
        velocity = {name: np.zeros_like(p) for name, p in params.groups.items()}
    for name, p in params.groups.items():
        g = grads.get(name)
        if g is None:
            continue
        v = velocity[name]
        v *= p.dtype.type(momentum)
        v -= p.dtype.type(lr) * g.astype(p.dtype, copy=False)
        p += v
    if "deform.coeffs" in params.groups:
        project_coeffs(params.groups["deform.coeffs"])
    return velocity


def clip_grad_norm(grads, max_norm):
    """Scale all groups together so the global L2 norm is at most ``max_norm``.

    Returns the norm before clipping. ``max_norm <= 0`` leaves grads alone.
    """
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= g.dtype.type(scale)
    return norm
