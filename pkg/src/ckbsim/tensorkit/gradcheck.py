import numpy as np

from .tensor import no_grad


def _relative_error(analytic, numeric, floor):
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)


def grad_check(f, params, eps=1e-5, max_entries=None, seed=0, floor=1e-6):
    """Compare reverse-mode gradients of the scalar ``f()`` with central
    finite differences and return the largest relative error.

    ``params`` is a sequence of tensors or a mapping of named tensors whose
    storage is perturbed in place.  With ``max_entries`` only that many
    randomly chosen entries per tensor are probed.  The denominator of the
    relative error is ``|analytic| + |numeric|`` floored at ``floor`` so that
    entries with vanishing gradient compare in absolute terms.
    """
    tensors = list(params.values()) if isinstance(params, dict) else list(params)
    for t in tensors:
        t.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, grad in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            indices = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                indices = rng.choice(flat.size, size=max_entries, replace=False)
            for i in indices:
                original = flat[i]
                flat[i] = original + eps
                up = float(f().data)
                flat[i] = original - eps
                down = float(f().data)
                flat[i] = original
                numeric = (up - down) / (2 * eps)
                err = _relative_error(grad.reshape(-1)[i], numeric, floor)
                worst = max(worst, float(err))
    return worst
