"""Feed-forward layers with cached forward state for reverse-mode gradients.

Every layer works on float64 batches whose leading axis is the batch axis and
exposes its trainable arrays through ``params`` and the matching gradients
through ``grads`` (same keys, same shapes).
"""

import numpy as np

from twinforge.exceptions import DimensionError, ValidationError

ACTIVATIONS = ("tanh", "relu", "sigmoid", "linear", "softmax")


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x):
    shifted = x - np.max(x, axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=-1, keepdims=True)


def activate(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return sigmoid(z)
    if name == "linear":
        return z
    if name == "softmax":
        return softmax(z)
    raise ValidationError(f"unknown activation {name!r}")


def activation_backward(name, y, z, dy):
    """Map dL/dy to dL/dz given the activation output ``y`` and input ``z``."""
    if name == "tanh":
        return dy * (1.0 - y * y)
    if name == "relu":
        return dy * (z > 0)
    if name == "sigmoid":
        return dy * y * (1.0 - y)
    if name == "linear":
        return dy
    if name == "softmax":
        return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))
    raise ValidationError(f"unknown activation {name!r}")


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base class: stateless layers simply keep empty ``params``."""

    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}

    def zero_grad(self):
        for name, p in self.params.items():
            g = self.grads.get(name)
            if g is None or g.shape != p.shape:
                self.grads[name] = np.zeros_like(p)
            else:
                g[...] = 0.0

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    @property
    def n_params(self):
        return sum(p.size for p in self.params.values())


class Dense(Layer):
    """Affine map ``activation(x @ W.T + b)`` with ``W`` stored as (out, in)."""

    kind = "dense"

    def __init__(self, n_in, n_out, activation="linear", rng=None):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {activation!r}")
        rng = np.random.default_rng(rng)
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.activation = activation
        self.params["W"] = uniform_init(rng, (self.n_out, self.n_in), self.n_in)
        self.params["b"] = np.zeros(self.n_out)
        self.zero_grad()
        self._cache = None

    @property
    def W(self):
        return self.params["W"]

    @property
    def b(self):
        return self.params["b"]

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"dense layer expects {self.n_in} inputs, got {x.shape[-1]}")
        z = x @ self.params["W"].T + self.params["b"]
        y = activate(self.activation, z)
        self._cache = (x, z, y)
        return y

    def backward(self, dout):
        x, z, y = self._cache
        return self.backward_preactivation(activation_backward(self.activation, y, z, dout))

    def backward_preactivation(self, dz):
        """Backward pass when dL/dz is already known (fused softmax + cross-entropy)."""
        x = self._cache[0]
        self.grads["W"] += dz.T @ x
        self.grads["b"] += dz.sum(axis=0)
        return dz @ self.params["W"]


class LayerNorm(Layer):
    """Per-sample normalization over the feature axis with learned gain and shift."""

    kind = "layernorm"

    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.dim = int(dim)
        self.eps = eps
        self.params["gamma"] = np.ones(self.dim)
        self.params["beta"] = np.zeros(self.dim)
        self.zero_grad()
        self._cache = None

    def forward(self, x, training=False):
        if x.shape[-1] != self.dim:
            raise DimensionError(f"layer norm expects {self.dim} features, got {x.shape[-1]}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv_std
        self._cache = (xhat, inv_std)
        return xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, dout):
        xhat, inv_std = self._cache
        self.grads["gamma"] += np.sum(dout * xhat, axis=0)
        self.grads["beta"] += np.sum(dout, axis=0)
        dxhat = dout * self.params["gamma"]
        return inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        )


class Dropout(Layer):
    """Inverted dropout. Identity outside training mode.

    ``freeze`` keeps the most recent mask for every later training-mode call,
    which makes the layer deterministic for finite-difference checks.
    """

    kind = "dropout"

    def __init__(self, rate, rng=None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)
        self.rng = np.random.default_rng(rng)
        self.freeze = False
        self._mask = None
        self._frozen = None

    def forward(self, x, training=False):
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        if self.freeze and self._frozen is not None and self._frozen.shape == x.shape:
            self._mask = self._frozen
        else:
            keep = 1.0 - self.rate
            self._mask = (self.rng.random(x.shape) < keep) / keep
            self._frozen = self._mask
        return x * self._mask

    def backward(self, dout):
        if self._mask is None:
            return dout
        return dout * self._mask


def dense_forward(layer, x):
    """Evaluate a single dense layer on a vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return layer.forward(x[None, :])[0]
    return layer.forward(x)
