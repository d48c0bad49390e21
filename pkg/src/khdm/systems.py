"""Dynamical systems and the fixed-step RK4 integrator.

Right-hand sides are vectorized: they accept a state of shape ``(d,)`` or a
batch ``(d, m)`` and return the same shape, so one integrator call can
advance many trajectories at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DivergenceError

DIVERGENCE_NORM = 1e8

ODE_SYSTEMS = ("vanderpol", "lorenz63", "rossler", "lorenz96")
SYSTEM_NAMES = ODE_SYSTEMS + ("ks",)

_DEFAULT_PARAMS = {
    "vanderpol": {"mu": 1.5},
    "lorenz63": {"sigma": 10.0, "rho": 28.0, "b": 8.0 / 3.0},
    "rossler": {"a": 0.1, "b": 0.1, "c": 14.0},
    "lorenz96": {"forcing": 8.0},
    "ks": {"length": 11.0},
}

_DEFAULT_DIM = {"vanderpol": 2, "lorenz63": 3, "rossler": 3, "lorenz96": 5, "ks": 12}

# Initial-condition sampling boxes (low, high per coordinate) and burn-in
# horizons chosen to land samples on each system's attractor before any data
# is recorded.
_SAMPLING = {
    "vanderpol": (np.array([-2.0, -2.0]), np.array([2.0, 2.0]), 10.0),
    "lorenz63": (
        np.array([-15.0, -20.0, 0.0]),
        np.array([15.0, 20.0, 40.0]),
        10.0,
    ),
    "rossler": (
        np.array([-10.0, -10.0, 0.0]),
        np.array([10.0, 10.0, 10.0]),
        50.0,  # slow timescale needs a long settle
    ),
    "lorenz96": (None, None, 10.0),  # box built from state_dim at call time
}


@dataclass(frozen=True)
class SystemSpec:
    """Named dynamical system with parameter values and state dimension."""

    name: str
    params: dict = field(default_factory=dict)
    state_dim: int = 0

    def param(self, key):
        return float(self.params[key])


def make_spec(name, state_dim=None, **overrides):
    """SystemSpec with default parameters, optionally overridden."""
    if name not in SYSTEM_NAMES:
        raise ContractViolation(
            f"unknown system {name!r}; expected one of {', '.join(SYSTEM_NAMES)}"
        )
    params = dict(_DEFAULT_PARAMS[name])
    for key, value in overrides.items():
        if key not in params:
            raise ContractViolation(f"{name} has no parameter {key!r}")
        params[key] = float(value)
    dim = int(state_dim) if state_dim is not None else _DEFAULT_DIM[name]
    # lorenz96 size and the KS POD mode count are free; the others are fixed.
    if name not in ("lorenz96", "ks") and dim != _DEFAULT_DIM[name]:
        raise ContractViolation(f"{name} has fixed state dimension {_DEFAULT_DIM[name]}")
    return SystemSpec(name=name, params=params, state_dim=dim)


def rhs(spec):
    """Vectorized time derivative for an ODE system."""
    if spec.name == "vanderpol":
        mu = spec.param("mu")

        def f(y):
            return np.stack([y[1], -y[0] + mu * (1.0 - y[0] ** 2) * y[1]])

        return f
    if spec.name == "lorenz63":
        sigma, rho, b = spec.param("sigma"), spec.param("rho"), spec.param("b")

        def f(y):
            return np.stack(
                [
                    sigma * (y[1] - y[0]),
                    rho * y[0] - y[1] - y[0] * y[2],
                    -b * y[2] + y[0] * y[1],
                ]
            )

        return f
    if spec.name == "rossler":
        a, b, c = spec.param("a"), spec.param("b"), spec.param("c")

        def f(y):
            return np.stack([-y[1] - y[2], y[0] + a * y[1], b + y[2] * (y[0] - c)])

        return f
    if spec.name == "lorenz96":
        forcing = spec.param("forcing")

        def f(y):
            return (np.roll(y, -1, axis=0) - np.roll(y, 2, axis=0)) * np.roll(
                y, 1, axis=0
            ) - y + forcing

        return f
    raise ContractViolation(f"{spec.name} is not an ODE system")


def jacobian(spec):
    """Jacobian of the right-hand side at a single state ``(d,)``."""
    if spec.name == "vanderpol":
        mu = spec.param("mu")

        def jac(y):
            return np.array(
                [
                    [0.0, 1.0],
                    [-1.0 - 2.0 * mu * y[0] * y[1], mu * (1.0 - y[0] ** 2)],
                ]
            )

        return jac
    if spec.name == "lorenz63":
        sigma, rho, b = spec.param("sigma"), spec.param("rho"), spec.param("b")

        def jac(y):
            return np.array(
                [
                    [-sigma, sigma, 0.0],
                    [rho - y[2], -1.0, -y[0]],
                    [y[1], y[0], -b],
                ]
            )

        return jac
    if spec.name == "rossler":
        a, c = spec.param("a"), spec.param("c")

        def jac(y):
            return np.array(
                [
                    [0.0, -1.0, -1.0],
                    [1.0, a, 0.0],
                    [y[2], 0.0, y[0] - c],
                ]
            )

        return jac
    if spec.name == "lorenz96":
        def jac(y):
            d = y.shape[0]
            m = np.zeros((d, d))
            for i in range(d):
                m[i, (i + 1) % d] = y[(i - 1) % d]
                m[i, (i - 2) % d] = -y[(i - 1) % d]
                m[i, (i - 1) % d] = y[(i + 1) % d] - y[(i - 2) % d]
                m[i, i] = -1.0
            return m

        return jac
    raise ContractViolation(f"{spec.name} is not an ODE system")


def sampling_box(spec):
    """(low, high, burn_in) for drawing initial conditions."""
    if spec.name == "lorenz96":
        low = np.full(spec.state_dim, -5.0)
        high = np.full(spec.state_dim, 5.0)
        return low, high, _SAMPLING["lorenz96"][2]
    if spec.name in _SAMPLING:
        return _SAMPLING[spec.name]
    raise ContractViolation(f"no sampling box defined for {spec.name}")


def rk4_step(f, y, dt):
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_batch(f, y0, dt, n_steps, record=True):
    """Advance a batch of states ``(d, m)`` by ``n_steps`` RK4 steps.

    Returns the full ``(d, n_steps + 1, m)`` history when ``record`` is set,
    otherwise just the final states.  Overflowing trajectories are allowed to
    run to inf/nan; callers inspect the result for divergence so that healthy
    batch members are unaffected.
    """
    y = np.array(y0, dtype=np.float64)
    out = None
    if record:
        out = np.empty((y.shape[0], n_steps + 1) + y.shape[1:])
        out[:, 0] = y
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, n_steps + 1):
            y = rk4_step(f, y, dt)
            if record:
                out[:, step] = y
    return out if record else y


def rk4_integrate(spec, x0, dt, n_steps, t0=0.0):
    """Classical fixed-step RK4 trajectory of an ODE system.

    Raises :class:`DivergenceError` naming the first step at which the state
    norm exceeds 1e8.
    """
    from .data import Trajectory  # local import avoids a module cycle

    if dt <= 0.0:
        raise ContractViolation(f"dt must be positive, got {dt}")
    x0 = np.asarray(x0, dtype=np.float64)
    if not np.all(np.isfinite(x0)):
        raise ContractViolation("initial state contains non-finite entries")
    if spec.name == "ks":
        raise ContractViolation("ks is a PDE; use ks_generate instead")
    if x0.shape != (spec.state_dim,):
        raise ContractViolation(
            f"initial state must have shape ({spec.state_dim},), got {x0.shape}"
        )
    values = integrate_batch(rhs(spec), x0[:, None], dt, int(n_steps))[:, :, 0]
    norms = np.linalg.norm(values, axis=0)
    bad = ~np.isfinite(norms) | (norms > DIVERGENCE_NORM)
    if np.any(bad):
        step = int(np.argmax(bad))
        raise DivergenceError(
            f"{spec.name} trajectory diverged at step {step} (|y| > {DIVERGENCE_NORM:.0e})",
            step_index=step,
        )
    return Trajectory(values=values, dt=float(dt), t0=float(t0))
