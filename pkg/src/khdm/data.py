"""Trajectory datasets: sampling, persistence, and batching helpers.

The binary dataset layout is:

    header  magic "KHDM" | version u32 | N_s u32 | columns u32 | N_C u32
            | dt f64 | seed u64        (little-endian)
    body    N_C trajectory blocks, each N_s x columns of little-endian
            float64 in column-major order.
"""

from __future__ import annotations

import csv
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DataFormatError, DivergenceError
from .systems import (
    DIVERGENCE_NORM,
    SystemSpec,
    integrate_batch,
    rhs,
    sampling_box,
)

MAGIC = b"KHDM"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIIdQ")

MAX_IC_RETRIES = 8


def worker_count():
    """Worker cap from the KHDM_THREADS environment variable (default 1)."""
    raw = os.environ.get("KHDM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass
class Trajectory:
    """Uniformly sampled path: column j holds the state at t0 + j * dt."""

    values: np.ndarray  # (state_dim, n_steps + 1)
    dt: float
    t0: float = 0.0

    @property
    def state_dim(self):
        return self.values.shape[0]

    @property
    def n_columns(self):
        return self.values.shape[1]

    def times(self):
        return self.t0 + self.dt * np.arange(self.n_columns)


@dataclass
class Dataset:
    """Trajectories of identical shape sharing one time step."""

    trajectories: list
    system: SystemSpec | None = None
    seed: int | None = None

    def __post_init__(self):
        if not self.trajectories:
            raise ContractViolation("dataset needs at least one trajectory")
        first = self.trajectories[0]
        for t in self.trajectories:
            if t.values.shape != first.values.shape or t.dt != first.dt:
                raise ContractViolation("all trajectories must share shape and dt")

    @property
    def n_traj(self):
        return len(self.trajectories)

    @property
    def state_dim(self):
        return self.trajectories[0].state_dim

    @property
    def n_columns(self):
        return self.trajectories[0].n_columns

    @property
    def dt(self):
        return self.trajectories[0].dt

    def stacked(self, indices=None):
        """Flat (state_dim, n_columns * k) block, trajectory-major columns."""
        if indices is None:
            indices = range(self.n_traj)
        return np.concatenate([self.trajectories[i].values for i in indices], axis=1)

    def subset(self, indices):
        return Dataset(
            trajectories=[self.trajectories[i] for i in indices],
            system=self.system,
            seed=self.seed,
        )


def _draw_initial_condition(rng, low, high):
    return low + (high - low) * rng.random(low.shape[0])


def sample_dataset(spec, n_traj, t_f, dt, seed, burn_in=None):
    """Sample trajectories from a system's attractor.

    Initial conditions are drawn per trajectory from stream
    ``default_rng([seed, index])``, integrated through the burn-in (which is
    discarded), then recorded for t in [0, t_f].  Identical arguments always
    reproduce the identical dataset, bit for bit, regardless of worker count.
    """
    if spec.name == "ks":
        raise ContractViolation("use the KS pipeline for the ks system")
    n_steps = int(round(t_f / dt))
    if abs(n_steps * dt - t_f) > 1e-9 * max(1.0, abs(t_f)):
        raise ContractViolation(f"t_f={t_f} is not an integer multiple of dt={dt}")
    low, high, default_burn = sampling_box(spec)
    burn = default_burn if burn_in is None else float(burn_in)
    n_burn = int(round(burn / dt))
    f = rhs(spec)

    def make_one(index):
        rng = np.random.default_rng([seed, index])
        for _ in range(MAX_IC_RETRIES):
            x0 = _draw_initial_condition(rng, low, high)
            settled = integrate_batch(f, x0[:, None], dt, n_burn, record=False)
            if not np.all(np.isfinite(settled)):
                continue
            values = integrate_batch(f, settled, dt, n_steps)[:, :, 0]
            norms = np.linalg.norm(values, axis=0)
            if np.all(np.isfinite(norms)) and np.max(norms) <= DIVERGENCE_NORM:
                return Trajectory(values=values, dt=float(dt))
        raise DivergenceError(
            f"trajectory {index} of {spec.name} diverged in {MAX_IC_RETRIES} resampling attempts"
        )

    workers = min(worker_count(), n_traj)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trajectories = list(pool.map(make_one, range(n_traj)))
    else:
        trajectories = [make_one(i) for i in range(n_traj)]
    return Dataset(trajectories=trajectories, system=spec, seed=int(seed))


def white_noise_dataset(state_dim, n_traj, n_columns, dt, seed):
    """IID Gaussian "trajectories" for estimator null tests."""
    rng = np.random.default_rng(seed)
    trajectories = [
        Trajectory(values=rng.standard_normal((state_dim, n_columns)), dt=float(dt))
        for _ in range(n_traj)
    ]
    return Dataset(trajectories=trajectories, system=None, seed=int(seed))


def save_dataset(path, dataset):
    header = _HEADER.pack(
        MAGIC,
        DATASET_VERSION,
        dataset.state_dim,
        dataset.n_columns,
        dataset.n_traj,
        float(dataset.dt),
        int(dataset.seed or 0),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for traj in dataset.trajectories:
            fh.write(np.asfortranarray(traj.values, dtype="<f8").tobytes(order="F"))


def load_dataset(path, system=None):
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) != _HEADER.size:
            raise DataFormatError(f"{path}: truncated header")
        magic, version, state_dim, n_columns, n_traj, dt, seed = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}")
        if version != DATASET_VERSION:
            raise DataFormatError(f"{path}: unsupported dataset version {version}")
        block = state_dim * n_columns * 8
        trajectories = []
        for k in range(n_traj):
            buf = fh.read(block)
            if len(buf) != block:
                raise DataFormatError(f"{path}: truncated trajectory block {k}")
            values = np.frombuffer(buf, dtype="<f8").reshape(
                (state_dim, n_columns), order="F"
            )
            trajectories.append(Trajectory(values=values.copy(), dt=dt))
    return Dataset(trajectories=trajectories, system=system, seed=seed)


def export_dataset_csv(path, dataset):
    """Plain-text export for small datasets: one row per snapshot."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["trajectory", "column", "t"] + [f"y{i + 1}" for i in range(dataset.state_dim)]
        )
        for k, traj in enumerate(dataset.trajectories):
            times = traj.times()
            for j in range(traj.n_columns):
                writer.writerow(
                    [k, j, f"{times[j]:.12g}"]
                    + [f"{v:.17g}" for v in traj.values[:, j]]
                )
