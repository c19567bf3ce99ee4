import numpy as np

from latentstack import autodiff as ad
from latentstack.oracle import finite_difference_grad


def tape_loss(build):
    """Evaluate ``build()`` under a tape; returns the scalar loss tensor."""
    with ad.Tape():
        return build()


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(build, params, rng=None, max_coords=None, step=1e-6):
    """Compare tape gradients of ``build()`` with central differences.

    With ``max_coords`` only that many random coordinates of each parameter
    are perturbed. Returns the worst norm-wise relative error.
    """
    with ad.Tape():
        loss = build()
        analytic = ad.grad(loss, params)

    def value():
        return build().item()

    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        num = np.zeros(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            hi = value()
            flat[i] = orig - step
            lo = value()
            flat[i] = orig
            num[j] = (hi - lo) / (2 * step)
        worst = max(worst, relative_error(g.reshape(-1)[idx], num))
    return worst


__all__ = ["gradcheck", "relative_error", "tape_loss", "finite_difference_grad"]
