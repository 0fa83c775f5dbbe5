"""Central finite differences, kept apart from the analytic backward passes."""

import numpy as np


def numerical_gradient(f, param, step=1e-5):
    """dF/dparam by central differences, perturbing ``param`` in place."""
    grad = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = param[idx]
        param[idx] = orig + step
        fp = f()
        param[idx] = orig - step
        fm = f()
        param[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    """||a - n|| / max(||a|| + ||n||, floor) over one parameter tensor."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if not a.size:
        return 0.0
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), floor))


def check_model_gradients(model, inputs, targets, loss="mse", step=1e-5, training=True):
    """Relative error per parameter tensor of ``model`` (a Sequential).

    Dropout layers are frozen so every forward pass reuses the same mask.
    """
    from twinforge.nn.network import backprop, compute_loss

    dropouts = model.dropouts()
    for d in dropouts:
        d.freeze = True
    try:
        _, grads = backprop(model, inputs, targets, loss=loss, training=training)

        def f():
            return compute_loss(model, inputs, targets, loss=loss, training=training)

        return {
            key: relative_error(grads[key], numerical_gradient(f, p, step))
            for key, p, _ in model.parameters()
        }
    finally:
        for d in dropouts:
            d.freeze = False
