"""Shared numerical oracles for the test suite."""

import numpy as np

from khdm.autodiff import DifferentiableMatrix, constant, matmul


def fd_gradient(f, x, step=1e-6):
    """Central finite-difference gradient of a scalar function of an array.

    Mutates a private copy entry by entry, so ``f`` must read ``x`` fresh on
    every call.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.ravel()
    flat_g = grad.ravel()
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + step
        f_plus = f(x)
        flat_x[i] = orig - step
        f_minus = f(x)
        flat_x[i] = orig
        flat_g[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def rel_err(actual, expected):
    scale = max(np.linalg.norm(np.asarray(expected).ravel()), 1e-300)
    return np.linalg.norm((np.asarray(actual) - np.asarray(expected)).ravel()) / scale


def scalar_sum(mat):
    """Sum of all entries of a tape matrix, as a 1x1 node."""
    left = constant(np.ones((1, mat.rows)))
    right = constant(np.ones((mat.cols, 1)))
    return matmul(matmul(left, mat), right)


def matrix_with_spectrum(rng, m, n, singular_values):
    """Random matrix with a prescribed singular spectrum."""
    s = np.asarray(singular_values, dtype=np.float64)
    k = s.size
    qu, _ = np.linalg.qr(rng.standard_normal((m, k)))
    qv, _ = np.linalg.qr(rng.standard_normal((n, k)))
    return (qu * s[None, :]) @ qv.T


def as_const(values):
    return DifferentiableMatrix(np.asarray(values, dtype=np.float64))
