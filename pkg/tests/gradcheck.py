"""Central finite differences against analytic gradients.

ReLU networks are piecewise smooth.  When a unit's pre-activation crosses
zero inside the stencil, the forward and backward one-sided slopes disagree
and the central difference straddles a kink.  Only then is the step shrunk
(1e-5 -> 1e-6 -> 1e-7); the comparison is always a central difference, and a
wrong analytic gradient still fails at every step size.
"""
import numpy as np

STEPS = (1e-5, 1e-6, 1e-7)
REL_TOL = 1e-4
KINK_TOL = 1e-3
ABS_FLOOR = 1e-9  # both gradients below this count as agreeing zeros
ROUNDOFF = 8 * np.finfo(np.float64).eps


def rel_error(a: float, n: float, floor: float = ABS_FLOOR) -> float:
    scale = max(abs(a), abs(n))
    if scale < floor:
        return 0.0
    return abs(a - n) / scale


def numeric_partial(loss_fn, flat, j, steps=STEPS):
    """Central difference of ``loss_fn`` w.r.t. ``flat[j]``.

    Returns (value, step used, noise floor).  Slopes below the floor,
    roughly eps * |f| / h, cannot be told apart from zero in float64.
    """
    old = flat[j]
    f0 = loss_fn()
    for h in steps:
        flat[j] = old + h
        up = loss_fn()
        flat[j] = old - h
        down = loss_fn()
        flat[j] = old
        central = (up - down) / (2 * h)
        floor = max(ABS_FLOOR, ROUNDOFF * max(abs(f0), abs(up), abs(down)) / h)
        if rel_error((up - f0) / h, (f0 - down) / h, floor) <= KINK_TOL:
            break
    return central, h, floor


def check_layers(loss_fn, layers, grads, rng, n_coords=6, stats=None):
    """Worst relative error over ``n_coords`` random weight and bias entries of every layer.

    ``loss_fn()`` must re-read the layer arrays, which are perturbed in place.
    ``stats`` (a dict) collects how many entries needed a smaller step.
    """
    worst = 0.0
    for layer, (gW, gb) in zip(layers, grads):
        for arr, g in ((layer.W, gW), (layer.b, gb)):
            flat, gflat = arr.reshape(-1), np.asarray(g).reshape(-1)
            for j in rng.choice(flat.size, size=min(n_coords, flat.size), replace=False):
                num, h, floor = numeric_partial(loss_fn, flat, j)
                worst = max(worst, rel_error(float(gflat[j]), num, floor))
                if stats is not None:
                    stats["checked"] = stats.get("checked", 0) + 1
                    stats["shrunk"] = stats.get("shrunk", 0) + (h != STEPS[0])
    return worst
