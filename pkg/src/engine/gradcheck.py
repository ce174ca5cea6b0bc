"""Central finite-difference checks of analytic gradients.

Run these under ``precision(np.float64)``; at float32 the difference
quotients are dominated by rounding.
"""
import numpy as np

from src.engine.tensor import no_grad

DEFAULT_STEP = 1e-5
# gradients this small count as zero; central differences leave O(step^2) residue
ABSOLUTE_FLOOR = 1e-6


def relative_error(analytic, numeric, floor=ABSOLUTE_FLOOR):
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numerical_gradient(fn, tensor, entries, step=DEFAULT_STEP):
    """d fn() / d tensor at the flat positions ``entries``."""
    flat = tensor.data.reshape(-1)
    grads = np.zeros(len(entries))
    with no_grad():
        for k, i in enumerate(entries):
            original = flat[i]
            flat[i] = original + step
            plus = float(fn().data)
            flat[i] = original - step
            minus = float(fn().data)
            flat[i] = original
            grads[k] = (plus - minus) / (2.0 * step)
    return grads


def trainable_entries(tensor):
    """Flat positions the optimizer may move; frozen entries carry no gradient."""
    mask = getattr(tensor, 'trainable_mask', None)
    if mask is None:
        return np.arange(tensor.size)
    return np.flatnonzero(mask)


def check_gradients(fn, tensors, step=DEFAULT_STEP, max_entries=None, rng=None):
    """Compare backprop against central differences for every tensor.

    ``fn`` rebuilds the scalar loss from the current tensor values. Returns
    ``{name: relative error}``; tensors are keyed by ``name`` or position.
    Entries pinned by a ``trainable_mask`` are skipped. When ``max_entries``
    is set, only that many randomly chosen entries of each tensor are
    perturbed.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    fn().backward()
    errors = {}
    for position, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        entries = trainable_entries(t)
        if len(entries) == 0:
            continue
        if max_entries is not None and len(entries) > max_entries:
            entries = np.sort(rng.choice(entries, size=max_entries, replace=False))
        numeric = numerical_gradient(fn, t, entries, step)
        key = getattr(t, 'name', '') or str(position)
        errors[key] = relative_error(analytic.reshape(-1)[entries], numeric)
    return errors
