"""Mutual information estimation and the averaged lagged self-information.

The workhorse estimator is the k-nearest-neighbour (Kraskov) variant-1
estimator under the Chebyshev metric, in nats.  A plug-in histogram
estimator ships alongside purely as a cross-check oracle.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma

from .errors import ContractViolation

DEFAULT_K = 3
MIN_SAMPLES = 50

# An estimate within this many nats of the k-NN ceiling psi(N) - psi(k)
# indicates a (near-)deterministic relation between the inputs.
_CEILING_MARGIN = 0.5


class DegenerateDensityWarning(UserWarning):
    """The joint sample density is singular (constant series, duplicates,
    or an exactly deterministic relation)."""


def mutual_information(x, y, k=DEFAULT_K, min_samples=MIN_SAMPLES):
    """KSG variant-1 estimate of I(X, Y) in nats for scalar samples.

    Counts marginal neighbours strictly inside each point's k-th joint
    Chebyshev neighbour distance.  Symmetric in its arguments down to the
    last bit.  Degenerate inputs produce a DegenerateDensityWarning but the
    estimator output is still returned.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ContractViolation(f"length mismatch: {x.size} vs {y.size}")
    n = x.size
    if n < min_samples:
        raise ContractViolation(f"need at least {min_samples} samples, got {n}")
    if k < 1 or k >= n:
        raise ContractViolation(f"k must lie in [1, {n - 1}], got {k}")

    degenerate = bool(np.ptp(x) == 0.0 or np.ptp(y) == 0.0)
    joint = np.column_stack([x, y])
    tree = cKDTree(joint)
    eps = tree.query(joint, k=k + 1, p=np.inf)[0][:, k]
    if np.any(eps == 0.0):
        degenerate = True
        eps = np.where(eps == 0.0, np.finfo(np.float64).tiny, eps)

    def strict_counts(values):
        order = np.argsort(values, kind="stable")
        sorted_vals = values[order]
        lo = np.searchsorted(sorted_vals, values - eps, side="right")
        hi = np.searchsorted(sorted_vals, values + eps, side="left")
        return hi - lo - 1  # exclude the point itself

    n_x = strict_counts(x)
    n_y = strict_counts(y)
    estimate = float(
        digamma(k) + digamma(n) - np.mean(digamma(n_x + 1) + digamma(n_y + 1))
    )
    ceiling = float(digamma(n) - digamma(k))
    if degenerate or estimate > ceiling - _CEILING_MARGIN:
        warnings.warn(
            "degenerate joint density; mutual-information estimate is a "
            "resolution-limited lower bound",
            DegenerateDensityWarning,
            stacklevel=2,
        )
    return estimate


def mutual_information_binned(x, y, bins=32):
    """Plug-in histogram estimate of I(X, Y) in nats; cross-check oracle."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ContractViolation(f"length mismatch: {x.size} vs {y.size}")
    joint, _, _ = np.histogram2d(x, y, bins=bins)
    p_xy = joint / joint.sum()
    p_x = p_xy.sum(axis=1, keepdims=True)
    p_y = p_xy.sum(axis=0, keepdims=True)
    mask = p_xy > 0
    return float(np.sum(p_xy[mask] * np.log(p_xy[mask] / (p_x @ p_y)[mask])))


@dataclass
class ALSITable:
    """Lagged pairwise information averaged over an ensemble of paths.

    ``values[n, v, m]`` is the ensemble-average MI between dimension n and
    dimension v shifted forward by m steps, in nats.
    """

    values: np.ndarray  # (dims, dims, max_lag + 1)
    dims: int
    max_lag: int
    source: str  # "original" or "latent"

    def pair(self, n, v):
        return self.values[n, v, :]


def alsi(dataset, max_lag, k=DEFAULT_K, source="original"):
    """Averaged lagged self-information over all ordered dimension pairs.

    For each trajectory, lag m pairs the first T - m samples of dimension n
    with the last T - m samples of dimension v (overlap-trimmed, no
    wraparound); the per-trajectory estimates are averaged in trajectory
    order.
    """
    n_columns = dataset.n_columns
    dims = dataset.state_dim
    if max_lag >= n_columns - 1:
        raise ContractViolation(f"max_lag={max_lag} leaves no lagged overlap")
    if n_columns - max_lag < MIN_SAMPLES:
        raise ContractViolation(
            f"max_lag={max_lag} leaves fewer than {MIN_SAMPLES} overlapping samples"
        )
    values = np.zeros((dims, dims, max_lag + 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateDensityWarning)
        for traj in dataset.trajectories:
            block = traj.values
            for m in range(max_lag + 1):
                head = block[:, : n_columns - m]
                tail = block[:, m:]
                for n in range(dims):
                    for v in range(dims):
                        values[n, v, m] += mutual_information(head[n], tail[v], k)
    values /= dataset.n_traj
    return ALSITable(values=values, dims=dims, max_lag=max_lag, source=source)


def first_local_maximum(series):
    """Index of the first local maximum (boundaries count); global argmax
    fallback for monotone series."""
    s = np.asarray(series, dtype=np.float64)
    if s.size == 1:
        return 0
    if s[0] > s[1]:
        return 0
    for i in range(1, s.size - 1):
        if s[i] >= s[i - 1] and s[i] > s[i + 1]:
            return i
    if s[-1] > s[-2]:
        return s.size - 1
    return int(np.argmax(s))


@dataclass
class PairComparison:
    n: int
    v: int
    l1_mean: float  # mean absolute difference over lags
    l1_sum: float  # absolute difference summed over lags
    peak_original: int
    peak_latent: int
    peak_shift: int  # latent minus original; negative = shifted to shorter lags


def alsi_compare(original, latent):
    """Per-pair distances and peak shifts between two ALSI tables."""
    if (original.dims, original.max_lag) != (latent.dims, latent.max_lag):
        raise ContractViolation("ALSI tables have mismatched dims or lag range")
    out = []
    for n in range(original.dims):
        for v in range(original.dims):
            diff = np.abs(original.pair(n, v) - latent.pair(n, v))
            peak_o = first_local_maximum(original.pair(n, v))
            peak_l = first_local_maximum(latent.pair(n, v))
            out.append(
                PairComparison(
                    n=n + 1,
                    v=v + 1,
                    l1_mean=float(diff.mean()),
                    l1_sum=float(diff.sum()),
                    peak_original=peak_o,
                    peak_latent=peak_l,
                    peak_shift=peak_l - peak_o,
                )
            )
    return out


def alsi_csv(table):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["n", "v", "m", "value_nats", "source"])
    for n in range(table.dims):
        for v in range(table.dims):
            for m in range(table.max_lag + 1):
                writer.writerow(
                    [n + 1, v + 1, m, f"{table.values[n, v, m]:.10g}", table.source]
                )
    return buf.getvalue()


def comparison_csv(comparisons):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(
        ["n", "v", "l1_mean", "l1_sum", "peak_original", "peak_latent", "peak_shift"]
    )
    for c in comparisons:
        writer.writerow(
            [c.n, c.v, f"{c.l1_mean:.10g}", f"{c.l1_sum:.10g}",
             c.peak_original, c.peak_latent, c.peak_shift]
        )
    return buf.getvalue()
