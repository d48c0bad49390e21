"""Hankel observable stacks, (global) EDMD fits, iterated reconstruction,
and spectral diagnostics.

Data flows through this module as flat 2-D matrices whose columns are
snapshots, trajectory-major: column ``k * T + j`` is time step j of
trajectory k.  Everything on the fitting path is built from tape ops, so the
same code serves plain diagnostics (constant inputs) and training
(gradients flow back through the Hankel gather, the pseudoinverse, and the
matrix powers).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DifferentiableMatrix, constant
from .errors import ContractViolation, DegenerateDataError

EIGENPAIR_RESIDUAL_TOL = 1e-8
EIGVEC_CONDITION_LIMIT = 1e12


def _as_matrix(values):
    if isinstance(values, DifferentiableMatrix):
        return values
    return constant(np.asarray(values, dtype=np.float64))


@dataclass
class HankelStack:
    """Delay-embedded snapshot matrices for a batch of trajectories.

    Rows are dimension-major blocks of ``n_ob_bar`` delays each; columns are
    trajectory-major blocks of ``n_w - 1`` window positions each.
    """

    psi_minus: DifferentiableMatrix
    psi_plus: DifferentiableMatrix
    n_ob_bar: int
    n_w: int
    n_dim: int
    n_traj: int

    @property
    def n_ob(self):
        return self.n_dim * self.n_ob_bar


@dataclass
class KoopmanFit:
    """Global transfer operator and observable-to-state mode map."""

    k_a: DifferentiableMatrix  # (n_ob, n_ob)
    k_m_bar: DifferentiableMatrix  # (n_target_dim, n_ob)
    svd_rank: int
    scope: str  # "global" or "local"
    stack: HankelStack = field(repr=False)
    targets: DifferentiableMatrix = field(repr=False)


@dataclass
class SpectrumReport:
    """Complex eigenstructure of a fitted operator (diagnostics only)."""

    discrete_eigenvalues: np.ndarray  # ell
    continuous_rates: np.ndarray  # log(ell) / dt
    eigenvector_matrix: np.ndarray
    phi_minus: np.ndarray
    phi_plus: np.ndarray
    koopman_modes: np.ndarray
    eigvec_condition: float
    max_eigenpair_residual: float
    ill_conditioned: bool


def _window_length(n_columns, n_ob_bar):
    return n_columns + 1 - n_ob_bar


def hankel_indices(n_dim, n_columns, n_traj, n_ob_bar, shift):
    """Gather index grids mapping a flat batch onto a Hankel snapshot matrix.

    Row ``d * n_ob_bar + l`` of trajectory block k reads the dimension-d
    signal delayed by l steps; the column for window position j reads source
    column ``k * n_columns + j + l + shift``.
    """
    n_w = _window_length(n_columns, n_ob_bar)
    delays = np.arange(n_ob_bar)
    dims = np.arange(n_dim)
    rows_src = np.repeat(dims, n_ob_bar)  # length n_ob
    positions = np.arange(n_w - 1)
    traj_offsets = np.arange(n_traj) * n_columns
    cols_src = (
        traj_offsets[None, :, None]
        + positions[None, None, :]
        + np.tile(delays, n_dim)[:, None, None]
        + shift
    ).reshape(n_dim * n_ob_bar, n_traj * (n_w - 1))
    rows = np.broadcast_to(rows_src[:, None], cols_src.shape)
    return rows, cols_src


def build_hankel(batch, n_traj, n_ob_bar):
    """Delay-embed a flat trajectory batch into shifted Hankel matrices.

    ``batch`` is ``(n_dim, T * n_traj)``; with ``n_ob_bar`` delays per
    dimension the window length is ``N_w = T + 1 - n_ob_bar``, psi_minus
    takes window columns 1..N_w-1 and psi_plus columns 2..N_w of each
    trajectory block.  ``n_ob_bar = 1`` reduces both to the plain snapshot
    matrices.
    """
    batch = _as_matrix(batch)
    if batch.cols % n_traj:
        raise ContractViolation(
            f"{batch.cols} columns do not split into {n_traj} equal trajectories"
        )
    n_columns = batch.cols // n_traj
    n_ob_bar = int(n_ob_bar)
    if not 1 <= n_ob_bar <= n_columns - 1:
        raise ContractViolation(
            f"n_ob_bar={n_ob_bar} outside [1, {n_columns - 1}] for {n_columns} columns"
        )
    n_w = _window_length(n_columns, n_ob_bar)
    if n_w < 2:
        raise ContractViolation(f"window length {n_w} leaves no snapshot pair")
    minus = ad.gather(batch, *hankel_indices(batch.rows, n_columns, n_traj, n_ob_bar, 0))
    plus = ad.gather(batch, *hankel_indices(batch.rows, n_columns, n_traj, n_ob_bar, 1))
    return HankelStack(
        psi_minus=minus,
        psi_plus=plus,
        n_ob_bar=n_ob_bar,
        n_w=n_w,
        n_dim=batch.rows,
        n_traj=n_traj,
    )


def select_block_columns(batch, n_traj, start, count):
    """Columns ``start .. start + count - 1`` of each trajectory block."""
    batch = _as_matrix(batch)
    if batch.cols % n_traj:
        raise ContractViolation(
            f"{batch.cols} columns do not split into {n_traj} equal blocks"
        )
    width = batch.cols // n_traj
    if start < 0 or count < 1 or start + count > width:
        raise ContractViolation(
            f"column selection [{start}, {start + count}) outside 0..{width}"
        )
    positions = np.arange(count) + start
    cols = (np.arange(n_traj)[:, None] * width + positions[None, :]).reshape(-1)
    rows = np.broadcast_to(np.arange(batch.rows)[:, None], (batch.rows, cols.size))
    cols = np.broadcast_to(cols[None, :], (batch.rows, cols.size))
    return ad.gather(batch, rows, cols)


def trajectory_block(batch, n_traj, index):
    """All columns of one trajectory block, as its own matrix."""
    batch = _as_matrix(batch)
    width = batch.cols // n_traj
    values = batch.values[:, index * width : (index + 1) * width]
    if batch.tape is None:
        return constant(values)
    rows = np.broadcast_to(np.arange(batch.rows)[:, None], values.shape)
    cols = np.broadcast_to(
        (np.arange(width) + index * width)[None, :], values.shape
    )
    return ad.gather(batch, rows, cols)


def window_columns(batch, n_traj, n_w, start=0):
    """Columns ``start .. start + n_w - 2`` of each trajectory block.

    With the default start this selects the snapshots aligned to window
    positions 1..N_w-1, the targets the mode map is fitted against.
    """
    return select_block_columns(batch, n_traj, start, n_w - 1)


def _fit(stack, targets, rel_tol, scope):
    targets = _as_matrix(targets)
    expected = stack.n_traj * (stack.n_w - 1)
    if targets.cols != expected:
        raise ContractViolation(
            f"targets have {targets.cols} columns; stack implies {expected}"
        )
    if not np.any(stack.psi_minus.values):
        raise DegenerateDataError("all-zero observable matrix; nothing to fit")
    pm = stack.psi_minus.values
    if pm.shape[1] > 1 and np.all(pm == pm[:, :1]):
        raise DegenerateDataError("zero-variance observables; nothing to fit")
    factors = ad.svd(stack.psi_minus, rel_tol)
    if factors.rank == 0:
        raise DegenerateDataError("observable matrix truncated to rank zero")
    # pseudoinverse of psi_minus, kept differentiable through the SVD adjoint
    pinv = ad.matmul(
        ad.scale_cols(factors.w, ad.reciprocal(factors.s)), ad.transpose(factors.u)
    )
    k_a = ad.matmul(stack.psi_plus, pinv)
    k_m_bar = ad.matmul(targets, pinv)
    return KoopmanFit(
        k_a=k_a,
        k_m_bar=k_m_bar,
        svd_rank=factors.rank,
        scope=scope,
        stack=stack,
        targets=targets,
    )


def fit_global(stack, targets, rel_tol=ad.DEFAULT_REL_TOL):
    """Least-squares operator over all trajectory blocks at once.

    ``k_a`` advances observable columns one step; ``k_m_bar`` maps observable
    columns onto the target snapshots (fitted over every window column, which
    over-determines the mode problem as much as the data allows).
    """
    return _fit(stack, targets, rel_tol, scope="global")


def fit_local(stack, targets, rel_tol=ad.DEFAULT_REL_TOL):
    """Single-trajectory fit; identical arithmetic to fit_global at N_B = 1."""
    if stack.n_traj != 1:
        raise ContractViolation(
            f"local fit expects a single-trajectory stack, got {stack.n_traj}"
        )
    return _fit(stack, targets, rel_tol, scope="local")


def reconstruct(fit, stack, n_st):
    """Advance the observable matrix n_st steps and map back to snapshots.

    Column j (1-based within each trajectory block) of the result estimates
    the target snapshot at window-start time ``j + n_st``: entries with
    ``j + n_st <= N_w - 1`` are reconstructions, later ones are iterated
    reconstructions or forecasts.
    """
    if n_st < 0:
        raise ContractViolation(f"n_st must be non-negative, got {n_st}")
    advanced = ad.matrix_power_apply(fit.k_a, int(n_st), stack.psi_minus)
    return ad.matmul(fit.k_m_bar, advanced)


def reconstruction_errors(predicted, truth, n_traj, n_st):
    """Per-trajectory error measures of a shifted prediction.

    ``predicted`` columns are window starts 1..N_w-1 per trajectory and
    predict truth columns ``j + n_st`` (1-based).  Relative Frobenius errors
    are reported over the in-window range (j + n_st <= N_w - 1) and over the
    full comparable range (j + n_st <= T), the latter including iterated
    reconstruction; columns beyond the data are genuine forecasts and have no
    error.

    ``rel_error_worst_snapshot`` is the worst single-snapshot error relative
    to the snapshot's deviation from the trajectory mean: a value above 1
    means that at some instant the prediction is worse than just predicting
    the mean, the natural reading of a failed reconstruction.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    n_cols_pred = predicted.shape[1] // n_traj
    n_columns = truth.shape[1] // n_traj
    n_w = n_cols_pred + 1
    results = []
    for k in range(n_traj):
        pred = predicted[:, k * n_cols_pred : (k + 1) * n_cols_pred]
        true_block = truth[:, k * n_columns : (k + 1) * n_columns]
        # prediction column j (0-based) targets truth column j + n_st
        n_compare = min(n_cols_pred, n_columns - n_st)
        n_window = min(n_cols_pred, max(0, (n_w - 1) - n_st))
        aligned_truth = true_block[:, n_st : n_st + n_compare]
        diff = pred[:, :n_compare] - aligned_truth
        denom_full = np.linalg.norm(aligned_truth)
        full = np.linalg.norm(diff) / denom_full if denom_full > 0 else np.inf
        if n_window > 0:
            denom_win = np.linalg.norm(aligned_truth[:, :n_window])
            window = (
                np.linalg.norm(diff[:, :n_window]) / denom_win
                if denom_win > 0
                else np.inf
            )
        else:
            window = np.nan
        anomaly = aligned_truth - aligned_truth.mean(axis=1, keepdims=True)
        anomaly_norms = np.linalg.norm(anomaly, axis=0)
        safe = np.where(anomaly_norms > 0, anomaly_norms, np.inf)
        worst = float(np.max(np.linalg.norm(diff, axis=0) / safe))
        results.append(
            {
                "trajectory": k,
                "rel_error_window": float(window),
                "rel_error_full": float(full),
                "rel_error_worst_snapshot": worst,
                "columns_compared": int(n_compare),
                "forecast_columns": int(n_cols_pred - n_compare),
            }
        )
    return results


def max_relative_error(error_rows, key="rel_error_full"):
    """Largest per-trajectory relative error, as a percentage."""
    return 100.0 * max(row[key] for row in error_rows)


def spectrum(fit, dt):
    """Eigendecomposition diagnostics of a fitted operator.

    This path is complex-valued and deliberately outside the gradient tape.
    Koopman modes solve the initial-snapshot problem X = K_M Phi_0 in the
    least-squares sense over the batch's window-start columns.
    """
    k_a = fit.k_a.values
    ell, vecs = np.linalg.eig(k_a)
    residuals = np.linalg.norm(k_a @ vecs - vecs * ell[None, :], axis=0)
    max_residual = float(np.max(residuals)) if residuals.size else 0.0
    cond = float(np.linalg.cond(vecs))
    ill = not np.isfinite(cond) or cond > EIGVEC_CONDITION_LIMIT
    phi_minus = np.linalg.solve(vecs, fit.stack.psi_minus.values)
    phi_plus = np.linalg.solve(vecs, fit.stack.psi_plus.values)
    with np.errstate(divide="ignore", invalid="ignore"):
        rates = np.log(ell.astype(np.complex128)) / dt
    # window-start columns, one per trajectory block
    width = fit.stack.n_w - 1
    starts = np.arange(fit.stack.n_traj) * width
    phi0 = phi_minus[:, starts]
    x0 = fit.targets.values[:, starts]
    modes, *_ = np.linalg.lstsq(phi0.T, x0.T.astype(np.complex128), rcond=None)
    return SpectrumReport(
        discrete_eigenvalues=ell,
        continuous_rates=rates,
        eigenvector_matrix=vecs,
        phi_minus=phi_minus,
        phi_plus=phi_plus,
        koopman_modes=modes.T,
        eigvec_condition=cond,
        max_eigenpair_residual=max_residual,
        ill_conditioned=ill,
    )


def save_fit(path, fit):
    """Persist a fit's matrices in the block envelope, tagged by name."""
    from .envelope import write_blocks

    write_blocks(
        path,
        matrices={
            "k_a": fit.k_a.values,
            "k_m_bar": fit.k_m_bar.values,
            "psi_minus": fit.stack.psi_minus.values,
            "psi_plus": fit.stack.psi_plus.values,
            "targets": fit.targets.values,
        },
        texts={
            "meta": (
                f"scope={fit.scope}\nsvd_rank={fit.svd_rank}\n"
                f"n_ob_bar={fit.stack.n_ob_bar}\nn_w={fit.stack.n_w}\n"
                f"n_dim={fit.stack.n_dim}\nn_traj={fit.stack.n_traj}\n"
            )
        },
    )


def load_fit(path):
    """Rebuild a KoopmanFit (as constants) from a fit envelope."""
    from .envelope import read_blocks

    matrices, texts = read_blocks(path)
    meta = dict(
        line.split("=", 1) for line in texts["meta"].splitlines() if line.strip()
    )
    stack = HankelStack(
        psi_minus=constant(matrices["psi_minus"]),
        psi_plus=constant(matrices["psi_plus"]),
        n_ob_bar=int(meta["n_ob_bar"]),
        n_w=int(meta["n_w"]),
        n_dim=int(meta["n_dim"]),
        n_traj=int(meta["n_traj"]),
    )
    return KoopmanFit(
        k_a=constant(matrices["k_a"]),
        k_m_bar=constant(matrices["k_m_bar"]),
        svd_rank=int(meta["svd_rank"]),
        scope=meta["scope"],
        stack=stack,
        targets=constant(matrices["targets"]),
    )


def hdmd_pipeline(dataset, n_ob_bar, n_st, rel_tol=ad.DEFAULT_REL_TOL, indices=None):
    """End-to-end Hankel DMD on a dataset: fit, reconstruct, per-path errors.

    Observables are the delayed copies of every state dimension; the mode map
    targets the raw states, so errors measure state reconstruction quality.
    """
    flat = dataset.stacked(indices)
    n_traj = dataset.n_traj if indices is None else len(list(indices))
    stack = build_hankel(flat, n_traj, n_ob_bar)
    targets = window_columns(flat, n_traj, stack.n_w)
    fit = fit_global(stack, targets, rel_tol)
    predicted = reconstruct(fit, stack, n_st)
    errors = reconstruction_errors(predicted.values, flat, n_traj, n_st)
    return fit, predicted, errors
