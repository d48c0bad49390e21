"""Largest Lyapunov exponent via tangent-vector growth.

A unit tangent vector is advanced alongside the base trajectory with the
variational equation dw/dt = J(y(t)) w, renormalized at fixed intervals; the
exponent is the time-averaged log growth across renormalizations.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, DivergenceError
from .systems import (
    DIVERGENCE_NORM,
    integrate_batch,
    jacobian,
    rhs,
    rk4_step,
    sampling_box,
)


def lyapunov_from_rhs(f, jac, x0, dt, horizon, n_renorm, seed=0):
    """Exponent estimate for an arbitrary smooth vector field.

    ``f`` maps (d,) -> (d,); ``jac`` maps (d,) -> (d, d).  The tangent vector
    starts in a random direction drawn from ``seed``.
    """
    if horizon <= 0.0 or dt <= 0.0:
        raise ContractViolation("horizon and dt must be positive")
    n_renorm = int(n_renorm)
    if n_renorm < 1:
        raise ContractViolation("need at least one renormalization interval")
    steps_per_interval = max(1, int(round(horizon / (n_renorm * dt))))

    d = np.asarray(x0, dtype=np.float64).shape[0]

    def augmented(z):
        y, w = z[:d], z[d:]
        return np.concatenate([f(y), jac(y) @ w])

    rng = np.random.default_rng(seed)
    w = rng.standard_normal(d)
    w /= np.linalg.norm(w)
    z = np.concatenate([np.asarray(x0, dtype=np.float64), w])

    log_growth = 0.0
    for interval in range(n_renorm):
        for _ in range(steps_per_interval):
            z = rk4_step(augmented, z, dt)
        norm_y = np.linalg.norm(z[:d])
        if not np.isfinite(norm_y) or norm_y > DIVERGENCE_NORM:
            raise DivergenceError(
                f"base trajectory diverged in renormalization interval {interval}",
                step_index=interval,
            )
        growth = np.linalg.norm(z[d:])
        log_growth += np.log(growth)
        z[d:] /= growth
    total_time = n_renorm * steps_per_interval * dt
    return float(log_growth / total_time)


def largest_lyapunov(spec, horizon=500.0, n_renorm=500, seed=0, dt=0.005, burn_in=None):
    """Largest exponent of a named ODE system, in inverse time units.

    The base point is drawn from the system's sampling box and settled onto
    the attractor before measuring.
    """
    low, high, default_burn = sampling_box(spec)
    burn = default_burn if burn_in is None else float(burn_in)
    rng = np.random.default_rng(seed)
    x0 = low + (high - low) * rng.random(low.shape[0])
    f = rhs(spec)
    settled = integrate_batch(f, x0[:, None], dt, int(round(burn / dt)), record=False)[
        :, 0
    ]
    if not np.all(np.isfinite(settled)):
        raise DivergenceError(f"{spec.name} burn-in diverged")
    return lyapunov_from_rhs(
        f, jacobian(spec), settled, dt=dt, horizon=horizon, n_renorm=n_renorm, seed=seed
    )
