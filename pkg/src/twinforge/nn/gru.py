"""Gated recurrent units and the bidirectional sequence wrapper.

The cell follows the gate equations with the reset gate applied *after* the
recurrent candidate product::

    r_t = sigmoid(W_xr x_t + W_hr h_{t-1} + b_r)
    z_t = sigmoid(W_xz x_t + W_hz h_{t-1} + b_z)
    h_t = (1 - z_t) * h_{t-1} + z_t * tanh(W_xh x_t + r_t * (W_hh h_{t-1}) + b_h)

Internally the three input projections (and the three recurrent ones) are
stacked so a time step costs two matrix products.
"""

import numpy as np

from twinforge.exceptions import DimensionError, ValidationError
from twinforge.nn.layers import Layer, sigmoid, uniform_init

GATES = ("r", "z", "h")
GRU_PARAM_NAMES = ("W_xr", "W_hr", "b_r", "W_xz", "W_hz", "b_z", "W_xh", "W_hh", "b_h")


class GRUCell:
    """One GRU cell; weights stored (out, in) like :class:`Dense`."""

    def __init__(self, input_size, hidden_size, rng=None):
        rng = np.random.default_rng(rng)
        self.input_size = int(input_size)
        self.hidden_size = int(hidden_size)
        D, H = self.input_size, self.hidden_size
        # fan-in of every gate is the concatenated [x, h] vector
        fan_in = D + H
        self.params = {}
        for name in GRU_PARAM_NAMES:
            if name.startswith("b_"):
                self.params[name] = np.zeros(H)
            elif name.startswith("W_x"):
                self.params[name] = uniform_init(rng, (H, D), fan_in)
            else:
                self.params[name] = uniform_init(rng, (H, H), fan_in)
        self.grads = {}
        self.zero_grad()
        self._cache = None

    def zero_grad(self):
        for k, p in self.params.items():
            g = self.grads.get(k)
            if g is None or g.shape != p.shape:
                self.grads[k] = np.zeros_like(p)
            else:
                g[...] = 0.0

    def _stacked(self):
        p = self.params
        Wx = np.concatenate([p["W_xr"], p["W_xz"], p["W_xh"]], axis=0)
        Wh = np.concatenate([p["W_hr"], p["W_hz"], p["W_hh"]], axis=0)
        bx = np.concatenate([p["b_r"], p["b_z"], p["b_h"]])
        return Wx, Wh, bx

    def _check_input(self, x):
        if x.shape[-1] != self.input_size:
            raise DimensionError(
                f"GRU cell expects input size {self.input_size}, got {x.shape[-1]}"
            )

    def step(self, x_t, h_prev):
        """Single step on a batch (B, D) with state (B, H)."""
        x_t = np.asarray(x_t, dtype=np.float64)
        h_prev = np.asarray(h_prev, dtype=np.float64)
        self._check_input(x_t)
        if h_prev.shape[-1] != self.hidden_size:
            raise DimensionError(
                f"GRU cell expects hidden size {self.hidden_size}, got {h_prev.shape[-1]}"
            )
        Wx, Wh, bx = self._stacked()
        H = self.hidden_size
        gx = x_t @ Wx.T + bx
        gh = h_prev @ Wh.T
        r = sigmoid(gx[..., :H] + gh[..., :H])
        z = sigmoid(gx[..., H : 2 * H] + gh[..., H : 2 * H])
        c = np.tanh(gx[..., 2 * H :] + r * gh[..., 2 * H :])
        return (1.0 - z) * h_prev + z * c

    def run(self, X, reverse=False):
        """Process ``X`` (B, T, D) from a zero state; return the last hidden state."""
        X = np.asarray(X, dtype=np.float64)
        self._check_input(X)
        B, T, _ = X.shape
        H = self.hidden_size
        Wx, Wh, bx = self._stacked()
        GX = X @ Wx.T + bx
        order = range(T - 1, -1, -1) if reverse else range(T)
        h = np.zeros((B, H))
        steps = []
        for t in order:
            gx = GX[:, t]
            gh = h @ Wh.T
            r = sigmoid(gx[:, :H] + gh[:, :H])
            z = sigmoid(gx[:, H : 2 * H] + gh[:, H : 2 * H])
            u = gh[:, 2 * H :]
            c = np.tanh(gx[:, 2 * H :] + r * u)
            h_new = (1.0 - z) * h + z * c
            steps.append((t, h, r, z, u, c))
            h = h_new
        self._cache = (X, Wx, Wh, steps)
        return h

    def backward(self, dh_last):
        """Backpropagation through time from dL/dh_T; returns dL/dX (B, T, D)."""
        X, Wx, Wh, steps = self._cache
        H = self.hidden_size
        dGX = np.zeros(X.shape[:2] + (3 * H,))
        dWh = np.zeros_like(Wh)
        dh = dh_last
        for t, h_prev, r, z, u, c in reversed(steps):
            dz = dh * (c - h_prev)
            dc = dh * z
            dac = dc * (1.0 - c * c)
            dr = dac * u
            du = dac * r
            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            dGX[:, t, :H] = dar
            dGX[:, t, H : 2 * H] = daz
            dGX[:, t, 2 * H :] = dac
            dgh = np.concatenate([dar, daz, du], axis=1)
            dWh += dgh.T @ h_prev
            dh = dh * (1.0 - z) + dgh @ Wh
        dWx = np.einsum("btk,btd->kd", dGX, X)
        dbx = dGX.sum(axis=(0, 1))
        g = self.grads
        for i, gate in enumerate(GATES):
            sl = slice(i * H, (i + 1) * H)
            g[f"W_x{gate}"] += dWx[sl]
            g[f"b_{gate}"] += dbx[sl]
        g["W_hr"] += dWh[:H]
        g["W_hz"] += dWh[H : 2 * H]
        g["W_hh"] += dWh[2 * H :]
        return dGX @ Wx


class BiGRU(Layer):
    """Runs one cell forward and one backward over a sequence.

    Input is (B, T, D), or (B, T) which is read as D=1. Output is the
    concatenation ``[h_forward_T ; h_backward_T]`` of shape (B, 2H).
    """

    kind = "bigru"

    def __init__(self, input_size, hidden_size, rng=None):
        super().__init__()
        rng = np.random.default_rng(rng)
        self.input_size = int(input_size)
        self.hidden_size = int(hidden_size)
        self.forward_cell = GRUCell(input_size, hidden_size, rng)
        self.backward_cell = GRUCell(input_size, hidden_size, rng)
        self._link()
        self._squeezed = False

    def _link(self):
        self.params = {}
        self.grads = {}
        for prefix, cell in (("forward", self.forward_cell), ("backward", self.backward_cell)):
            for k in GRU_PARAM_NAMES:
                self.params[f"{prefix}.{k}"] = cell.params[k]
                self.grads[f"{prefix}.{k}"] = cell.grads[k]

    def zero_grad(self):
        self.forward_cell.zero_grad()
        self.backward_cell.zero_grad()
        self._link()

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=np.float64)
        self._squeezed = x.ndim == 2
        if self._squeezed:
            x = x[:, :, None]
        if x.ndim != 3:
            raise DimensionError(f"BiGRU expects (batch, time, features), got shape {x.shape}")
        if x.shape[1] == 0:
            raise ValidationError("BiGRU needs a non-empty sequence")
        hf = self.forward_cell.run(x)
        hb = self.backward_cell.run(x, reverse=True)
        return np.concatenate([hf, hb], axis=1)

    def backward(self, dout):
        H = self.hidden_size
        dx = self.forward_cell.backward(dout[:, :H]) + self.backward_cell.backward(dout[:, H:])
        return dx[:, :, 0] if self._squeezed else dx


def gru_step(cell, x_t, h_prev):
    """h_t for a single vector input (or a batch, passed through unchanged)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if x_t.ndim == 1:
        return cell.step(x_t[None, :], h_prev[None, :])[0]
    return cell.step(x_t, h_prev)


def bigru_forward(layer, sequence):
    """Encode a list of input vectors into the 2H concatenated final states."""
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.size == 0 or len(seq) == 0:
        raise ValidationError("bigru_forward needs a non-empty sequence")
    if seq.ndim == 1:
        seq = seq[:, None]
    return layer.forward(seq[None, :, :])[0]
