"""Encoder/decoder MLP pair mapping states to latent observables and back.

Both networks have an input layer, three hidden ReLU layers of one width,
and a linear output layer.  Weights live as plain numpy arrays; they are
wrapped into tape variables (or constants, for frozen evaluations) per loss
computation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DifferentiableMatrix
from .errors import ContractViolation

N_HIDDEN_LAYERS = 3


@dataclass
class Autoencoder:
    """Network weights; ``enc_*[i]``/``dec_*[i]`` is layer i of four.

    ``input_shift``/``input_scale`` are optional per-dimension data
    standardization buffers set by the training system.  They are not
    trainable and ``encode``/``decode`` do not apply them: callers feeding
    raw physical states go through :meth:`normalize` first.
    """

    enc_w: list
    enc_b: list
    dec_w: list
    dec_b: list
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    @classmethod
    def init(cls, n_state, n_latent, hidden, seed):
        """Uniform(+-sqrt(6 / fan_in)) weights, zero biases."""
        if n_latent < n_state:
            raise ContractViolation(
                f"latent dimension {n_latent} must be >= state dimension {n_state}"
            )
        rng = np.random.default_rng([seed, 0x5EED])
        enc_dims = [n_state] + [hidden] * N_HIDDEN_LAYERS + [n_latent]
        dec_dims = [n_latent] + [hidden] * N_HIDDEN_LAYERS + [n_state]

        def layers(dims):
            ws, bs = [], []
            for fan_in, fan_out in zip(dims[:-1], dims[1:]):
                bound = np.sqrt(6.0 / fan_in)
                ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
                bs.append(np.zeros((fan_out, 1)))
            return ws, bs

        enc_w, enc_b = layers(enc_dims)
        dec_w, dec_b = layers(dec_dims)
        return cls(enc_w=enc_w, enc_b=enc_b, dec_w=dec_w, dec_b=dec_b)

    @property
    def n_state(self):
        return self.enc_w[0].shape[1]

    @property
    def n_latent(self):
        return self.enc_w[-1].shape[0]

    def parameters(self):
        """Flat list of arrays in a fixed order (weights then bias per layer)."""
        out = []
        for w, b in zip(self.enc_w, self.enc_b):
            out.extend((w, b))
        for w, b in zip(self.dec_w, self.dec_b):
            out.extend((w, b))
        return out

    def set_parameters(self, arrays):
        n = len(self.enc_w)
        it = iter(arrays)
        for i in range(n):
            self.enc_w[i] = next(it)
            self.enc_b[i] = next(it)
        for i in range(n):
            self.dec_w[i] = next(it)
            self.dec_b[i] = next(it)

    def wrap(self, tape=None):
        """Tape variables (or constants when ``tape`` is None) for one pass."""
        make = (lambda a: tape.variable(a)) if tape is not None else ad.constant
        return WrappedAutoencoder(
            enc=[(make(w), make(b)) for w, b in zip(self.enc_w, self.enc_b)],
            dec=[(make(w), make(b)) for w, b in zip(self.dec_w, self.dec_b)],
        )

    def set_normalization(self, shift, scale):
        self.input_shift = np.asarray(shift, dtype=np.float64).reshape(-1, 1)
        self.input_scale = np.asarray(scale, dtype=np.float64).reshape(-1, 1)

    def normalize(self, values):
        """Physical states -> the standardized coordinates training used."""
        if self.input_shift is None:
            return np.asarray(values, dtype=np.float64)
        return (np.asarray(values, dtype=np.float64) - self.input_shift) / self.input_scale

    def denormalize(self, values):
        if self.input_shift is None:
            return np.asarray(values, dtype=np.float64)
        return np.asarray(values, dtype=np.float64) * self.input_scale + self.input_shift


@dataclass
class WrappedAutoencoder:
    enc: list
    dec: list

    def parameters(self):
        out = []
        for w, b in self.enc:
            out.extend((w, b))
        for w, b in self.dec:
            out.extend((w, b))
        return out

    def weight_matrices(self):
        return [w for w, _ in self.enc] + [w for w, _ in self.dec]


def _apply_mlp(layers, x):
    out = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        out = ad.add_bias(ad.matmul(w, out), b)
        if i < last:
            out = ad.relu(out)
    return out


def encode(wrapped, batch):
    """Per-snapshot encoder application; columns are snapshots."""
    if batch.rows != wrapped.enc[0][0].cols:
        raise ContractViolation(
            f"encoder expects {wrapped.enc[0][0].cols} rows, got {batch.rows}"
        )
    return _apply_mlp(wrapped.enc, batch)


def decode(wrapped, latent):
    """Mirror of encode."""
    if latent.rows != wrapped.dec[0][0].cols:
        raise ContractViolation(
            f"decoder expects {wrapped.dec[0][0].cols} rows, got {latent.rows}"
        )
    return _apply_mlp(wrapped.dec, latent)


def weight_penalty(wrapped):
    """Sum of squared entries of all weight matrices (biases excluded)."""
    total = None
    for w in wrapped.weight_matrices():
        term = ad.sum_squares(w)
        total = term if total is None else ad.add(total, term)
    return total


def check_finite(matrix, context):
    if not np.all(np.isfinite(matrix.values)):
        from .errors import NumericalError

        raise NumericalError(f"non-finite activations in {context}")
    return matrix
