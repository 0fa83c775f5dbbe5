"""Layer stacks, losses and one-call reverse-mode gradients."""

import numpy as np

from twinforge.exceptions import DimensionError, NumericError, ValidationError
from twinforge.nn.layers import Dense

LOSSES = ("mse", "cross_entropy")


class Sequential:
    """Plain ordered stack of layers."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training=training)
        return x

    __call__ = forward

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def parameters(self):
        """Flat list of (key, param, grad) triples in a stable order."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                out.append((f"{i}.{layer.kind}.{name}", p, layer.grads[name]))
        return out

    @property
    def n_params(self):
        return sum(layer.n_params for layer in self.layers)

    def dropouts(self):
        return [layer for layer in self.layers if layer.kind == "dropout"]


def mse_loss(pred, target):
    """Mean over every element, and dL/dpred."""
    diff = pred - target
    with np.errstate(over="ignore", invalid="ignore"):
        per_sample = np.mean(diff.reshape(len(diff), -1) ** 2, axis=1)
    return per_sample, 2.0 * diff / diff.size


def cross_entropy_loss(probs, labels):
    """Mean negative log-likelihood of integer labels, and dL/dprobs."""
    n = len(labels)
    picked = probs[np.arange(n), labels]
    with np.errstate(divide="ignore"):
        per_sample = -np.log(picked)
    grad = np.zeros_like(probs)
    grad[np.arange(n), labels] = -1.0 / (n * np.maximum(picked, np.finfo(float).tiny))
    return per_sample, grad


def _check_finite(per_sample):
    bad = np.flatnonzero(~np.isfinite(per_sample))
    if bad.size:
        raise NumericError(f"non-finite loss at batch index {bad[0]}", batch_index=int(bad[0]))


def compute_loss(model, inputs, targets, loss="mse", training=False):
    """Forward pass and scalar loss without touching gradients."""
    out = model.forward(inputs, training=training)
    per_sample = _loss_terms(out, targets, loss)[0]
    _check_finite(per_sample)
    return float(np.mean(per_sample))


def _loss_terms(out, targets, loss):
    if loss == "mse":
        targets = np.asarray(targets, dtype=np.float64)
        if targets.shape != out.shape:
            raise DimensionError(f"target shape {targets.shape} != output shape {out.shape}")
        return mse_loss(out, targets)
    if loss == "cross_entropy":
        labels = np.asarray(targets)
        if labels.ndim != 1 or len(labels) != len(out):
            raise DimensionError("cross-entropy targets must be one integer label per sample")
        if labels.min() < 0 or labels.max() >= out.shape[1]:
            raise ValidationError("label out of range for the model output")
        return cross_entropy_loss(out, labels.astype(np.intp))
    raise ValidationError(f"unknown loss {loss!r}; expected one of {LOSSES}")


def backprop(model, inputs, targets, loss="mse", training=True):
    """Run forward + backward on one batch.

    Returns ``(loss_value, grads)`` where ``grads`` maps parameter keys (as in
    :meth:`Sequential.parameters`) to freshly copied gradient arrays. Layer
    gradient buffers are reset first, so they hold exactly this batch's
    gradients afterwards.
    """
    model.zero_grad()
    out = model.forward(inputs, training=training)
    per_sample, dout = _loss_terms(out, targets, loss)
    _check_finite(per_sample)
    last = model.layers[-1]
    if loss == "cross_entropy" and isinstance(last, Dense) and last.activation == "softmax":
        # fused softmax + NLL gradient avoids dividing by tiny probabilities
        onehot = np.zeros_like(out)
        onehot[np.arange(len(out)), np.asarray(targets, dtype=np.intp)] = 1.0
        dz = (out - onehot) / len(out)
        dx = last.backward_preactivation(dz)
        for layer in reversed(model.layers[:-1]):
            dx = layer.backward(dx)
    else:
        model.backward(dout)
    grads = {key: g.copy() for key, _, g in model.parameters()}
    return float(np.mean(per_sample)), grads
