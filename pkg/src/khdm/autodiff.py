"""Dense-matrix reverse-mode automatic differentiation.

All values are 64-bit real matrices.  A :class:`GradientTape` records
operations in execution order; :meth:`GradientTape.gradient` replays them in
reverse, so any composition of the ops in this module, including the
SVD-backed least-squares solve, is differentiable with one reverse sweep.

Matrices without a tape are constants: operations on them evaluate eagerly
and record nothing, which lets the same numerical code serve both training
(gradients needed) and diagnostics (values only).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, ConvergenceError

# Guard width for the reciprocal spectral-gap factors in the SVD adjoint.
SVD_GUARD_EPS = 1e-12

# Relative singular-value truncation defaults: tight for diagnostics,
# looser inside training where the pseudoinverse conditioning matters more
# than the last digits.
DEFAULT_REL_TOL = 1e-10
TRAINING_REL_TOL = 1e-8


class GradientTape:
    """Ordered operation record for one reverse sweep.

    A tape is a single-threaded unit of work.  Matrices are immutable values,
    so several tapes may run concurrently as long as each is driven by one
    thread.
    """

    def __init__(self):
        self._nodes = []
        self._next_id = 0

    def _register(self):
        i = self._next_id
        self._next_id += 1
        return i

    def _record(self, inputs, outputs, backward):
        in_ids = tuple(
            m.tape_id if (m is not None and m.tape is self) else None for m in inputs
        )
        out_ids = tuple(m.tape_id for m in outputs)
        self._nodes.append((in_ids, out_ids, backward))

    def variable(self, values):
        """Create a leaf matrix whose gradient this tape will track."""
        return DifferentiableMatrix(values, tape=self)

    def gradient(self, loss, sources):
        """Gradients of a scalar loss node with respect to ``sources``.

        The sweep visits every recorded node exactly once, in reverse
        execution order, and accumulates contributions in that fixed order,
        so repeated calls return bitwise-identical arrays.
        """
        if loss.tape is not self:
            raise ContractViolation("loss node does not belong to this tape")
        if loss.shape != (1, 1):
            raise ContractViolation(f"loss must be 1x1, got {loss.shape}")
        grads = {loss.tape_id: np.ones((1, 1))}
        for in_ids, out_ids, backward in reversed(self._nodes):
            outs = [grads.get(i) for i in out_ids]
            if all(g is None for g in outs):
                continue
            in_grads = backward(*outs)
            for iid, g in zip(in_ids, in_grads):
                if iid is None or g is None:
                    continue
                held = grads.get(iid)
                grads[iid] = g if held is None else held + g
        return [
            grads.get(s.tape_id, np.zeros(s.shape)) if s.tape is self else np.zeros(s.shape)
            for s in sources
        ]

    def __len__(self):
        return len(self._nodes)


class DifferentiableMatrix:
    """2-D float64 value, optionally linked into a gradient tape.

    Treat instances as immutable: ops return new matrices and never write
    into operands, which is what makes tapes replayable and thread-safe.
    """

    __slots__ = ("values", "tape", "tape_id")

    def __init__(self, values, tape=None):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 2:
            raise ContractViolation(f"expected a 2-D matrix, got ndim={arr.ndim}")
        self.values = arr
        self.tape = tape
        self.tape_id = tape._register() if tape is not None else None

    @property
    def shape(self):
        return self.values.shape

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    def item(self):
        if self.shape != (1, 1):
            raise ContractViolation(f"item() requires a 1x1 matrix, got {self.shape}")
        return float(self.values[0, 0])

    def detach(self):
        """Same values, unlinked from any tape."""
        return DifferentiableMatrix(self.values, tape=None)

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __repr__(self):
        tag = "const" if self.tape is None else f"tape:{self.tape_id}"
        return f"DifferentiableMatrix({self.rows}x{self.cols}, {tag})"


def constant(values):
    """Matrix not attached to any tape."""
    return DifferentiableMatrix(values, tape=None)


def variable(values, tape):
    """Leaf matrix tracked by ``tape``."""
    return tape.variable(values)


def _joint_tape(*matrices):
    tape = None
    for m in matrices:
        if m is None or m.tape is None:
            continue
        if tape is None:
            tape = m.tape
        elif tape is not m.tape:
            raise ContractViolation("operands belong to different tapes")
    return tape


# ---------------------------------------------------------------------------
# basic ops
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product with adjoints dA = G B^T and dB = A^T G."""
    if a.cols != b.rows:
        raise ContractViolation(
            f"matmul dimension mismatch: {a.rows}x{a.cols} @ {b.rows}x{b.cols}"
        )
    tape = _joint_tape(a, b)
    out = DifferentiableMatrix(a.values @ b.values, tape)
    if tape is not None:
        av, bv = a.values, b.values
        need_a, need_b = a.tape is not None, b.tape is not None

        def backward(g):
            ga = g @ bv.T if need_a else None
            gb = av.T @ g if need_b else None
            return ga, gb

        tape._record((a, b), (out,), backward)
    return out


def transpose(a):
    tape = a.tape
    out = DifferentiableMatrix(a.values.T, tape)
    if tape is not None:
        tape._record((a,), (out,), lambda g: (g.T,))
    return out


def add(a, b):
    if a.shape != b.shape:
        raise ContractViolation(f"add shape mismatch: {a.shape} vs {b.shape}")
    tape = _joint_tape(a, b)
    out = DifferentiableMatrix(a.values + b.values, tape)
    if tape is not None:
        need_a, need_b = a.tape is not None, b.tape is not None
        tape._record(
            (a, b), (out,), lambda g: (g if need_a else None, g if need_b else None)
        )
    return out


def subtract(a, b):
    if a.shape != b.shape:
        raise ContractViolation(f"subtract shape mismatch: {a.shape} vs {b.shape}")
    tape = _joint_tape(a, b)
    out = DifferentiableMatrix(a.values - b.values, tape)
    if tape is not None:
        need_a, need_b = a.tape is not None, b.tape is not None
        tape._record(
            (a, b), (out,), lambda g: (g if need_a else None, -g if need_b else None)
        )
    return out


def add_bias(a, bias):
    """Add a column vector to every column of ``a``."""
    if bias.cols != 1 or bias.rows != a.rows:
        raise ContractViolation(
            f"bias must be {a.rows}x1, got {bias.rows}x{bias.cols}"
        )
    tape = _joint_tape(a, bias)
    out = DifferentiableMatrix(a.values + bias.values, tape)
    if tape is not None:
        need_a, need_b = a.tape is not None, bias.tape is not None

        def backward(g):
            ga = g if need_a else None
            gb = g.sum(axis=1, keepdims=True) if need_b else None
            return ga, gb

        tape._record((a, bias), (out,), backward)
    return out


def scale(a, factor):
    factor = float(factor)
    tape = a.tape
    out = DifferentiableMatrix(a.values * factor, tape)
    if tape is not None:
        tape._record((a,), (out,), lambda g: (g * factor,))
    return out


def relu(a):
    """Entrywise max(x, 0); the subgradient at 0 is taken to be 0."""
    tape = a.tape
    out = DifferentiableMatrix(np.maximum(a.values, 0.0), tape)
    if tape is not None:
        mask = a.values > 0.0
        tape._record((a,), (out,), lambda g: (g * mask,))
    return out


def square(a):
    tape = a.tape
    out = DifferentiableMatrix(a.values * a.values, tape)
    if tape is not None:
        av = a.values
        tape._record((a,), (out,), lambda g: (2.0 * av * g,))
    return out


def reciprocal(a):
    tape = a.tape
    out = DifferentiableMatrix(1.0 / a.values, tape)
    if tape is not None:
        av = a.values
        tape._record((a,), (out,), lambda g: (-g / (av * av),))
    return out


def scale_rows(a, v):
    """Multiply row i of ``a`` by v[i]; ``v`` is a column vector."""
    if v.cols != 1 or v.rows != a.rows:
        raise ContractViolation(f"row scale needs {a.rows}x1, got {v.rows}x{v.cols}")
    tape = _joint_tape(a, v)
    out = DifferentiableMatrix(a.values * v.values, tape)
    if tape is not None:
        av, vv = a.values, v.values
        need_a, need_v = a.tape is not None, v.tape is not None

        def backward(g):
            ga = g * vv if need_a else None
            gv = (g * av).sum(axis=1, keepdims=True) if need_v else None
            return ga, gv

        tape._record((a, v), (out,), backward)
    return out


def scale_cols(a, v):
    """Multiply column j of ``a`` by v[j]; ``v`` is a column vector."""
    if v.cols != 1 or v.rows != a.cols:
        raise ContractViolation(f"col scale needs {a.cols}x1, got {v.rows}x{v.cols}")
    tape = _joint_tape(a, v)
    row = v.values[:, 0][None, :]
    out = DifferentiableMatrix(a.values * row, tape)
    if tape is not None:
        av = a.values
        need_a, need_v = a.tape is not None, v.tape is not None

        def backward(g):
            ga = g * row if need_a else None
            gv = (g * av).sum(axis=0)[:, None] if need_v else None
            return ga, gv

        tape._record((a, v), (out,), backward)
    return out


def sum_squares(a):
    """Sum of squared entries as a 1x1 node."""
    tape = a.tape
    out = DifferentiableMatrix([[float(np.sum(a.values * a.values))]], tape)
    if tape is not None:
        av = a.values
        tape._record((a,), (out,), lambda g: (2.0 * g[0, 0] * av,))
    return out


def gather(a, row_idx, col_idx):
    """Entry lookup out[p, q] = a[row_idx[p, q], col_idx[p, q]].

    The adjoint scatter-adds the upstream gradient back into the source,
    so repeated reads of one entry (as in Hankel stacking) accumulate.
    """
    row_idx = np.asarray(row_idx)
    col_idx = np.asarray(col_idx)
    tape = a.tape
    out = DifferentiableMatrix(a.values[row_idx, col_idx], tape)
    if tape is not None:
        shape = a.shape

        def backward(g):
            ga = np.zeros(shape)
            np.add.at(ga, (row_idx, col_idx), g)
            return (ga,)

        tape._record((a,), (out,), backward)
    return out


def elementwise(op_kind, a, other=None):
    """Dispatch the named entrywise operation.

    ``relu``, ``square`` are unary; ``subtract`` and ``add_bias`` take a
    second matrix; ``scale`` takes a real factor.
    """
    if op_kind == "relu":
        return relu(a)
    if op_kind == "square":
        return square(a)
    if op_kind == "scale":
        return scale(a, other)
    if op_kind == "subtract":
        return subtract(a, other)
    if op_kind == "add_bias":
        return add_bias(a, other)
    raise ContractViolation(f"unknown elementwise op kind: {op_kind!r}")


# ---------------------------------------------------------------------------
# SVD and derived solves
# ---------------------------------------------------------------------------


@dataclass
class SvdFactors:
    """Truncated thin SVD: ``u @ diag(s) @ w.T`` reconstructs the input.

    ``s`` is stored as an (rank x 1) column so it can participate in tape
    arithmetic like any other matrix.
    """

    u: DifferentiableMatrix
    s: DifferentiableMatrix
    w: DifferentiableMatrix
    rank: int


def svd(a, rel_tol=DEFAULT_REL_TOL):
    """Thin SVD with relative truncation of the trailing spectrum.

    Singular values below ``rel_tol * s_max`` are dropped from the returned
    factors.  The adjoint uses the standard SVD differential with the
    spectral-gap factors replaced by the guarded form
    g / (g^2 + eps^2), eps = 1e-12, so (near-)degenerate singular values do
    not blow up the backward pass; the guard is exact in the well-separated
    regime the gradient tests use.
    """
    if a.values.size == 0:
        raise ContractViolation("svd of an empty matrix")
    if not 0.0 <= rel_tol < 1.0:
        raise ContractViolation(f"rel_tol must lie in [0, 1), got {rel_tol}")
    if not np.all(np.isfinite(a.values)):
        raise ContractViolation("svd input contains non-finite entries")
    try:
        u0, s0, vt0 = np.linalg.svd(a.values, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(
            "SVD iteration failed to converge: "
            f"shape={a.rows}x{a.cols}, fro={np.linalg.norm(a.values):.3e}, "
            f"max|a|={np.max(np.abs(a.values)):.3e}"
        ) from exc

    if s0.size and s0[0] > 0.0:
        rank = int(np.count_nonzero(s0 >= rel_tol * s0[0]))
    else:
        rank = 0

    tape = a.tape
    u = DifferentiableMatrix(u0[:, :rank].copy(), tape)
    s = DifferentiableMatrix(s0[:rank].reshape(-1, 1).copy(), tape)
    w = DifferentiableMatrix(vt0[:rank].T.copy(), tape)
    if tape is not None:

        def backward(gu, gs, gw):
            return (_svd_backward(u0, s0, vt0, rank, gu, gs, gw),)

        tape._record((a,), (u, s, w), backward)
    return SvdFactors(u=u, s=s, w=w, rank=rank)


def _svd_backward(u0, s0, vt0, rank, gu, gs, gw):
    """Adjoint of the thin SVD, evaluated on zero-padded cotangents.

    The full thin factors are retained internally so the coupling between
    kept and truncated subspaces stays in the gradient; cotangents for
    truncated columns are identically zero.
    """
    k = s0.size
    du = np.zeros_like(u0)
    dv = np.zeros_like(vt0.T)
    ds = np.zeros(k)
    if gu is not None:
        du[:, :rank] = gu
    if gs is not None:
        ds[:rank] = gs[:, 0]
    if gw is not None:
        dv[:, :rank] = gw

    v0 = vt0.T
    s2 = s0 * s0
    gap = s2[None, :] - s2[:, None]  # gap[i, j] = s_j^2 - s_i^2
    f = gap / (gap * gap + SVD_GUARD_EPS**2)
    np.fill_diagonal(f, 0.0)
    s_inv = np.zeros(k)
    s_inv[:rank] = 1.0 / s0[:rank]

    da = (u0 * ds[None, :]) @ vt0

    gu_proj = u0.T @ du
    ku = f * (gu_proj - gu_proj.T)
    da += u0 @ (ku * s0[None, :]) @ vt0

    gv_proj = v0.T @ dv
    kv = f * (gv_proj - gv_proj.T)
    da += u0 @ (s0[:, None] * kv) @ vt0

    # Orthogonal-complement terms, expanded so the big projector matrices
    # (I - U U^T), (I - V V^T) are never formed.
    dus = du * s_inv[None, :]
    da += (dus - u0 @ (u0.T @ dus)) @ vt0
    dvs = dv * s_inv[None, :]
    da += u0 @ (dvs.T - (dvs.T @ v0) @ vt0)
    return da


def lstsq(a, b, rel_tol=DEFAULT_REL_TOL):
    """Minimum-norm least-squares solution of a x = b via truncated SVD.

    Differentiable through the SVD adjoint.  A zero (or fully truncated)
    coefficient matrix yields the zero solution, which is the minimum-norm
    answer for unreachable right-hand sides.
    """
    if a.rows != b.rows:
        raise ContractViolation(
            f"lstsq row mismatch: a is {a.rows}x{a.cols}, b is {b.rows}x{b.cols}"
        )
    if a.values.size == 0 or b.values.size == 0:
        raise ContractViolation("lstsq with empty input")
    if not np.all(np.isfinite(b.values)):
        raise ContractViolation("lstsq right-hand side contains non-finite entries")
    factors = svd(a, rel_tol)
    ut_b = matmul(transpose(factors.u), b)
    scaled = scale_rows(ut_b, reciprocal(factors.s))
    return matmul(factors.w, scaled)


def matrix_power_apply(k, n, psi):
    """k^n @ psi by n sequential products; n = 0 returns psi unchanged.

    Repeated multiplication is used instead of eigendecomposition: it stays
    real-valued and every factor is differentiable.
    """
    if k.rows != k.cols:
        raise ContractViolation(f"matrix power needs a square matrix, got {k.shape}")
    if n < 0:
        raise ContractViolation(f"power must be non-negative, got {n}")
    if k.cols != psi.rows:
        raise ContractViolation(
            f"power-apply mismatch: {k.rows}x{k.cols} onto {psi.rows}x{psi.cols}"
        )
    out = psi
    for _ in range(int(n)):
        out = matmul(k, out)
    return out


# ---------------------------------------------------------------------------
# loss reduction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AveragingSpec:
    """Time-step range (inclusive, 1-based) and trajectory count of a loss term."""

    j_start: int
    j_end: int
    n_traj: int

    @property
    def count(self):
        return (self.j_end - self.j_start + 1) * self.n_traj


def mean_column_norms(a):
    """Mean of column 2-norms as a 1x1 node; zero columns get subgradient 0."""
    norms = np.sqrt(np.sum(a.values * a.values, axis=0))
    n_cols = max(a.cols, 1)
    out = DifferentiableMatrix([[float(norms.sum() / n_cols)]], a.tape)
    if a.tape is not None:
        av = a.values

        def backward(g):
            factor = np.where(norms > 0.0, g[0, 0] / (n_cols * np.where(norms > 0, norms, 1.0)), 0.0)
            return (av * factor[None, :],)

        a.tape._record((a,), (out,), backward)
    return out


def reduce_loss(parts):
    """Sum of per-part batch/time averaged residual norms.

    Each part is ``(matrix, AveragingSpec)`` where the matrix columns are the
    per-snapshot residual vectors, trajectory-major, covering exactly the
    spec's time range for each of its trajectories.
    """
    total = None
    for mat, avg in parts:
        if avg.j_start > avg.j_end:
            raise ContractViolation(
                f"empty averaging range: j_start={avg.j_start} > j_end={avg.j_end}"
            )
        if mat.cols != avg.count:
            raise ContractViolation(
                f"residual has {mat.cols} columns, averaging spec implies {avg.count}"
            )
        term = mean_column_norms(mat)
        total = term if total is None else add(total, term)
    if total is None:
        raise ContractViolation("reduce_loss needs at least one part")
    return total
