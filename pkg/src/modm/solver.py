"""Alternating reconstruction: assemble per-frequency targets from the
non-uniform second moment, then iterate a linear density update, a relaxed
linear update of the block unknowns, and an orthogonal Procrustes projection.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import special
from .errors import GridMismatchError, IllPosedError, ValidationError
from .kam import kam_from_moments
from .model import BlockOrthogonal, DistributionCoefficients, VolumeCoefficients
from .moments import (
    MomentTables,
    b_parameter_basis,
    block_offsets,
    distribution_from_parameters,
)

_BASIS_CACHE = {}


def _single_thread_blas():
    """The iteration is dominated by many small BLAS calls, where thread-pool
    synchronization costs several times the arithmetic; run it single-threaded."""
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1)
    except ImportError:  # harmless fallback
        import contextlib

        return contextlib.nullcontext()


def _refined_normal_solve(a, b):
    """Least squares via normal equations plus one iterative-refinement pass
    (near-QR accuracy at a fraction of the cost); falls back to column-pivoted
    QR when the normal matrix is numerically singular."""
    from scipy.linalg import LinAlgError, cho_factor, cho_solve, lstsq

    g = a.T @ a
    rhs = a.T @ b
    try:
        c = cho_factor(g, check_finite=False)
    except LinAlgError:
        sol, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
        return sol, rank < a.shape[1]
    x = cho_solve(c, rhs, check_finite=False)
    x += cho_solve(c, a.T @ (b - a @ x), check_finite=False)
    return x, False


def _parameter_basis(bandlimit, max_degree):
    key = (bandlimit, max_degree)
    if key not in _BASIS_CACHE:
        params, const, stacks = b_parameter_basis(bandlimit, max_degree)
        _BASIS_CACHE[key] = (params, const, np.stack(stacks) if stacks else
                             np.zeros((0,) + const.shape, dtype=complex))
    return _BASIS_CACHE[key]


def b_stack_from_values(bandlimit, max_degree, values):
    """Coupling-block stack for a real parameter vector (see b_parameter_basis)."""
    _, const, stacks = _parameter_basis(bandlimit, max_degree)
    return const + np.tensordot(values, stacks, axes=(0, 0))


def _q_blockdiag(bandlimit):
    dim = (bandlimit + 1) ** 2
    out = np.zeros((dim, dim), dtype=complex)
    off = 0
    for ell in range(bandlimit + 1):
        n = 2 * ell + 1
        out[off : off + n, off : off + n] = special.q_matrix(ell)
        off += n
    return out


@dataclass
class MTargets:
    """Per-frequency targets conjugated into the factor frame, plus the
    pseudoinverse diagnostics of the concatenated factor matrix."""

    bandlimit: int
    m: np.ndarray  # (2L+1, (L+1)^2, (L+1)^2) complex
    singular_values: np.ndarray
    cutoff: float

    def block(self, n, ell, ellp):
        off = block_offsets(self.bandlimit)
        return self.m[
            n + self.bandlimit,
            off[ell] : off[ell] + 2 * ell + 1,
            off[ellp] : off[ellp] + 2 * ellp + 1,
        ]

    @property
    def cond(self):
        s = self.singular_values
        return float(s[0] / s[-1]) if s[-1] > 0 else np.inf


def assemble_mtargets(m2_nonuniform, kam, svd_cutoff=1e-10, cond_limit=1e12):
    """Left- and right-multiply each G^n by the truncated pseudoinverse of
    the concatenated factors."""
    amat = kam.concat()
    if amat.shape[0] < amat.shape[1]:
        raise ValidationError(
            f"need at least {amat.shape[1]} radii to invert the factor matrix"
        )
    u, s, vh = np.linalg.svd(amat, full_matrices=False)
    keep = s > svd_cutoff * s[0]
    if s[keep][-1] <= 0 or s[0] / s[keep][-1] > cond_limit:
        raise IllPosedError(
            f"factor matrix condition {s[0] / max(s[-1], 1e-300):.3e} exceeds {cond_limit:.1e}; "
            "inversion is only well-posed for a limited range of bandlimits"
        )
    pinv = (vh.conj().T[:, keep] / s[keep]) @ u.conj().T[keep]
    m = np.einsum("cr,nrs,ds->ncd", pinv, m2_nonuniform.g, pinv.conj())
    return MTargets(kam.bandlimit, m, s, float(svd_cutoff))


def _conjugate_stack(oq, stack):
    """O Q (stack) Q^H O^T applied along the last two axes."""
    return np.matmul(np.matmul(oq, stack), oq.conj().T)


def model_stack(orthogonal, b_stack, bandlimit):
    """The modeled targets O Q B^n Q^H O^T for a block stack B^n."""
    oq = orthogonal.block_diag() @ _q_blockdiag(bandlimit)
    return _conjugate_stack(oq, b_stack)


def objective(mtargets, orthogonal, b_stack):
    """Sum over frequencies of the squared Frobenius mismatch."""
    resid = mtargets.m - model_stack(orthogonal, b_stack, mtargets.bandlimit)
    return float(np.sum(np.abs(resid) ** 2))


def _update_b_values(mtargets, orthogonal, max_degree, positivity_points=None):
    L = mtargets.bandlimit
    params, const, stacks = _parameter_basis(L, max_degree)
    oq = orthogonal.block_diag() @ _q_blockdiag(L)
    cols = _conjugate_stack(oq, stacks).reshape(len(params), -1)
    rhs = (mtargets.m - _conjugate_stack(oq, const)).ravel()
    a = cols.T
    a_real = np.vstack([a.real, a.imag])
    b_real = np.concatenate([rhs.real, rhs.imag])
    solution, degenerate = _refined_normal_solve(a_real, b_real)
    if degenerate:
        warnings.warn("density update is rank-deficient; returning minimum-norm solution")
    if positivity_points is not None:
        solution = _positive_b_solve(a_real, b_real, solution, params, max_degree, positivity_points)
    return solution, degenerate


def update_b(mtargets, orthogonal, max_degree, positivity_points=None):
    """Exact least-squares density update over the constrained coefficient
    set (conjugate symmetry built into the real parametrization, odd degrees
    absent, B_{0,0} = 1).

    positivity_points, if given, is an array of viewing angles (theta, phi)
    at which the density is constrained nonnegative (solved as an
    inequality-constrained quadratic program).
    """
    params, _, _ = _parameter_basis(mtargets.bandlimit, max_degree)
    solution, degenerate = _update_b_values(mtargets, orthogonal, max_degree, positivity_points)
    dist = distribution_from_parameters(params, solution, max_degree)
    dist.meta["degenerate_update"] = bool(degenerate)
    return dist


def _positive_b_solve(a_real, b_real, x0, params, max_degree, points):
    """Density update with nonnegativity enforced at collocation viewing
    directions (linear constraints in the coefficients)."""
    from scipy.optimize import minimize

    theta, phi = np.asarray(points)[:, 0], np.asarray(points)[:, 1]
    rows = []
    base = np.zeros(len(theta))
    for j, (p, u, part) in enumerate(params):
        probe = np.zeros(len(params))
        probe[j] = 1.0
        d = distribution_from_parameters(params, probe, max_degree)
        d.coeffs[0, max_degree] = 0.0  # isolate the parameter's contribution
        from .model import density_grid

        rows.append(density_grid(d, theta, phi))
    uniform = distribution_from_parameters(params, np.zeros(len(params)), max_degree)
    from .model import density_grid

    base = density_grid(uniform, theta, phi)
    cmat = np.column_stack(rows) if rows else np.zeros((len(theta), 0))

    def fun(x):
        r = a_real @ x - b_real
        return float(r @ r)

    def jac(x):
        return 2.0 * a_real.T @ (a_real @ x - b_real)

    cons = [{"type": "ineq", "fun": lambda x: cmat @ x + base, "jac": lambda x: cmat}]
    res = minimize(fun, x0, jac=jac, constraints=cons, method="SLSQP",
                   options={"maxiter": 200, "ftol": 1e-14})
    return res.x


class XUpdateContext:
    """Precomputed pieces of the X-update normal system that depend only on
    the targets, reusable across iterations."""

    def __init__(self, mtargets):
        L = mtargets.bandlimit
        self.bandlimit = L
        self.off = block_offsets(L)
        self.sizes = [2 * ell + 1 for ell in range(L + 1)]
        self.free = [ell for ell in range(2, L + 1)]
        self.col_off = {}
        total = 0
        for ell in self.free:
            self.col_off[ell] = total
            total += self.sizes[ell] ** 2
        self.total = total
        self.blk_m = {}
        for n in range(2 * L + 1):
            for ell in range(L + 1):
                for ellp in range(L + 1):
                    sl = slice(self.off[ell], self.off[ell] + self.sizes[ell])
                    sp = slice(self.off[ellp], self.off[ellp] + self.sizes[ellp])
                    self.blk_m[(n, ell, ellp)] = np.ascontiguousarray(mtargets.m[n, sl, sp])
        # constant part of the normal matrix: the kron(Re(M^H M), I) terms
        self.h_const = np.zeros((total, total))
        for (n, ell, ellp), mt in self.blk_m.items():
            if ellp >= 2 and (ell >= 2 or ellp >= 2):
                sl = slice(self.col_off[ellp], self.col_off[ellp] + self.sizes[ellp] ** 2)
                self.h_const[sl, sl] += np.kron((mt.conj().T @ mt).real, np.eye(self.sizes[ellp]))


def update_x(mtargets, b_stack, context=None, dense_limit=5e8):
    """Exact least-squares solve for the relaxed block variables X_l
    (degree 0 and 1 pinned to the identity, higher degrees real and
    unconstrained).  The coupled-Sylvester normal equations are assembled
    from small block contractions at desk scale; LSQR on an implicit
    operator takes over above dense_limit normal-matrix entries."""
    L = mtargets.bandlimit
    q = _q_blockdiag(L)
    w = _conjugate_stack(q, b_stack)
    if context is None:
        context = XUpdateContext(mtargets)
    sizes = context.sizes
    if not context.free:
        return [np.eye(s) for s in sizes]
    if context.total**2 <= dense_limit:
        x = _update_x_normal(context, w)
    else:
        x = _update_x_lsqr(mtargets, w, L, context.off, sizes, context.free, context.col_off, context.total)
    blocks = [np.eye(sizes[ell]) for ell in range(min(2, L + 1))]
    for ell in context.free:
        blocks.append(
            x[context.col_off[ell] : context.col_off[ell] + sizes[ell] ** 2].reshape(
                sizes[ell], sizes[ell]
            )
        )
    return blocks


def _w_blocks_of(w, L, off, sizes):
    blk_w = {}
    for n in range(2 * L + 1):
        for ell in range(L + 1):
            for ellp in range(L + 1):
                sl = slice(off[ell], off[ell] + sizes[ell])
                sp = slice(off[ellp], off[ellp] + sizes[ellp])
                blk_w[(n, ell, ellp)] = w[n, sl, sp]
    return blk_w


def _x_gradient(blk_m, blk_w, L, sizes, free, col_off, total, x_blocks):
    """-(1/2) gradient of the objective at the given free blocks (pinned
    degrees substituted), flattened over the free unknowns."""
    grad = np.zeros(total)
    resid = {}
    for n in range(2 * L + 1):
        for ell in range(L + 1):
            for ellp in range(L + 1):
                if ell < 2 and ellp < 2:
                    continue
                resid[(n, ell, ellp)] = (
                    blk_m[(n, ell, ellp)] @ x_blocks[ellp] - x_blocks[ell] @ blk_w[(n, ell, ellp)]
                )
    for n in range(2 * L + 1):
        for ell in range(L + 1):
            for ellp in range(L + 1):
                if ell < 2 and ellp < 2:
                    continue
                r = resid[(n, ell, ellp)]
                if ellp >= 2:
                    sl = slice(col_off[ellp], col_off[ellp] + sizes[ellp] ** 2)
                    grad[sl] -= (blk_m[(n, ell, ellp)].conj().T @ r).real.ravel()
                if ell >= 2:
                    sl = slice(col_off[ell], col_off[ell] + sizes[ell] ** 2)
                    grad[sl] += (r @ blk_w[(n, ell, ellp)].conj().T).real.ravel()
    return grad


def _update_x_normal(context, w):
    from scipy.linalg import LinAlgError, cho_factor, cho_solve

    L = context.bandlimit
    off, sizes, free = context.off, context.sizes, context.free
    col_off, total = context.col_off, context.total
    blk_m = context.blk_m
    blk_w = _w_blocks_of(w, L, off, sizes)
    h = context.h_const.copy()
    for n in range(2 * L + 1):
        for ell in range(L + 1):
            for ellp in range(L + 1):
                if ell < 2:
                    continue
                mt = blk_m[(n, ell, ellp)]
                wb = blk_w[(n, ell, ellp)]
                sle = slice(col_off[ell], col_off[ell] + sizes[ell] ** 2)
                h[sle, sle] += np.kron(np.eye(sizes[ell]), (wb @ wb.conj().T).real)
                if ellp >= 2:
                    slp = slice(col_off[ellp], col_off[ellp] + sizes[ellp] ** 2)
                    cross = -np.real(np.kron(mt, wb.conj()))
                    h[sle, slp] += cross
                    h[slp, sle] += cross.T
    zero_blocks = [np.eye(s) if ell < 2 else np.zeros((s, s)) for ell, s in enumerate(sizes)]
    b = _x_gradient(blk_m, blk_w, L, sizes, free, col_off, total, zero_blocks)

    try:
        factor = cho_factor(h, check_finite=False)
    except LinAlgError:
        # the relaxed system can be singular (collapse direction); use the
        # minimum-norm least-squares solution instead
        sol, *_ = np.linalg.lstsq(h, b, rcond=None)
        return sol
    x = cho_solve(factor, b, check_finite=False)
    # one refinement pass against the true residual kills the normal-equation
    # roundoff
    blocks = list(zero_blocks)
    for ell in free:
        blocks[ell] = x[col_off[ell] : col_off[ell] + sizes[ell] ** 2].reshape(
            sizes[ell], sizes[ell]
        )
    g = _x_gradient(blk_m, blk_w, L, sizes, free, col_off, total, blocks)
    x = x + cho_solve(factor, g, check_finite=False)
    return x


def _update_x_lsqr(mtargets, w, L, off, sizes, free, col_off, total):
    from scipy.sparse.linalg import LinearOperator, lsqr

    dim = (L + 1) ** 2

    def unpack(xvec):
        blocks = {ell: np.eye(sizes[ell]) for ell in range(min(2, L + 1))}
        for ell in free:
            blocks[ell] = xvec[col_off[ell] : col_off[ell] + sizes[ell] ** 2].reshape(
                sizes[ell], sizes[ell]
            )
        full = np.zeros((dim, dim))
        for ell, blk in blocks.items():
            full[off[ell] : off[ell] + sizes[ell], off[ell] : off[ell] + sizes[ell]] = blk
        return full

    def resid_complex(full):
        out = np.empty((2 * L + 1, dim, dim), dtype=complex)
        for n in range(2 * L + 1):
            out[n] = mtargets.m[n] @ full - full @ w[n]
        return out

    pin = unpack(np.zeros(total))
    for ell in free:
        pin[off[ell] : off[ell] + sizes[ell], off[ell] : off[ell] + sizes[ell]] = 0.0
    const = np.empty((2 * L + 1, dim, dim), dtype=complex)
    for n in range(2 * L + 1):
        const[n] = mtargets.m[n] @ pin - pin @ w[n]

    def matvec(xvec):
        full = unpack(xvec)
        for ell in range(min(2, L + 1)):  # linear part only: zero the pins
            full[off[ell] : off[ell] + sizes[ell], off[ell] : off[ell] + sizes[ell]] = 0.0
        r = resid_complex(full)
        return np.concatenate([r.real.ravel(), r.imag.ravel()])

    def rmatvec(yvec):
        half = len(yvec) // 2
        y = yvec[:half].reshape(2 * L + 1, dim, dim) + 1j * yvec[half:].reshape(
            2 * L + 1, dim, dim
        )
        grad_full = np.zeros((dim, dim), dtype=complex)
        for n in range(2 * L + 1):
            grad_full += mtargets.m[n].conj().T @ y[n] - y[n] @ w[n].conj().T
        out = np.zeros(total)
        for ell in free:
            blk = grad_full[off[ell] : off[ell] + sizes[ell], off[ell] : off[ell] + sizes[ell]]
            out[col_off[ell] : col_off[ell] + sizes[ell] ** 2] = blk.real.ravel()
        return out

    op = LinearOperator(
        shape=(2 * (2 * L + 1) * dim * dim, total), matvec=matvec, rmatvec=rmatvec
    )
    b = np.concatenate([(-const).real.ravel(), (-const).imag.ravel()])
    sol = lsqr(op, b, atol=1e-14, btol=1e-14, iter_lim=20000)[0]
    return sol


def project_o(x_blocks):
    """Closest block-orthogonal matrices in Frobenius norm (full orthogonal
    group, both determinant signs admissible); degrees 0 and 1 reasserted."""
    blocks = []
    for ell, x in enumerate(x_blocks):
        if ell == 0:
            blocks.append(np.eye(1))
        elif ell == 1:
            blocks.append(np.eye(3))
        else:
            u, _, vt = np.linalg.svd(np.asarray(x, dtype=float))
            # deterministic sign convention on the factor columns
            signs = np.sign(u[np.abs(u).argmax(axis=0), np.arange(u.shape[1])])
            signs[signs == 0] = 1.0
            blocks.append((u * signs) @ (signs[:, None] * vt))
    return BlockOrthogonal(blocks)


@dataclass
class SolverState:
    """Final iterate and convergence record of one reconstruction run."""

    orthogonal: BlockOrthogonal
    distribution: DistributionCoefficients
    iterations: int
    residual: float
    residual_trace: list
    status: str  # converged | max_iter | collapsed | degenerate_uniform
    meta: dict = field(default_factory=dict)


def _single_run(mtargets, max_degree, rng, max_iter, tol, stop_resid, positivity_points,
                context=None):
    L = mtargets.bandlimit
    params, const, _ = _parameter_basis(L, max_degree)
    if context is None:
        context = XUpdateContext(mtargets)

    orth = BlockOrthogonal.random(L, rng, pinned=True)
    values = np.zeros(len(params))
    trace = [objective(mtargets, orth, const)]
    scale = float(np.sum(np.abs(mtargets.m) ** 2))
    floor = stop_resid**2 * max(scale, 1e-300)
    for it in range(1, max_iter + 1):
        values, _ = _update_b_values(mtargets, orth, max_degree, positivity_points)
        b_stack = b_stack_from_values(L, max_degree, values)
        f_after_b = objective(mtargets, orth, b_stack)
        if f_after_b > trace[-1] * (1 + 1e-9) + 1e-30:
            warnings.warn(f"density update increased the objective at iteration {it}")
        x_blocks = update_x(mtargets, b_stack, context)
        if L >= 2 and any(
            np.linalg.norm(x_blocks[ell]) < 1e-8 * np.sqrt(3.0) for ell in range(2, L + 1)
        ):
            dist = distribution_from_parameters(params, values, max_degree)
            return SolverState(orth, dist, it, trace[-1], trace, "collapsed")
        orth = project_o(x_blocks)
        f = objective(mtargets, orth, b_stack)
        trace.append(f)
        rel_change = abs(trace[-2] - f) / max(trace[-2], 1e-300)
        if f <= floor or rel_change < tol:
            values, _ = _update_b_values(mtargets, orth, max_degree, positivity_points)
            dist = distribution_from_parameters(params, values, max_degree)
            residual = objective(mtargets, orth, b_stack_from_values(L, max_degree, values))
            trace.append(residual)
            status = "converged" if residual <= 4.0 * floor else "stagnated"
            return SolverState(orth, dist, it, residual, trace, status)
    dist = distribution_from_parameters(params, values, max_degree)
    status = "converged" if trace[-1] <= 4.0 * floor else "max_iter"
    return SolverState(orth, dist, max_iter, trace[-1], trace, status)


def run_modm(
    m2_uniform,
    m2_nonuniform,
    m1_uniform,
    max_iter=500,
    tol=1e-10,
    restarts=5,
    seed=0,
    svd_cutoff=1e-10,
    gl_order=None,
    stop_resid=1e-10,
    positivity_points=None,
    imag_tol=None,
):
    """Full reconstruction from the three moment tables.

    Returns (volume_estimate, density_estimate, solver_state); the density
    estimate is the low-pass to degree 2L that the moments determine.
    Iteration stops when the relative objective change drops below tol or
    the relative residual reaches stop_resid; further restarts are skipped
    once a run lands within a factor 100 of that floor (restarts exist to
    escape collapses and bad basins, not to polish).  The uniform-moment
    sanity tolerance imag_tol defaults per data kind: statistical noise
    makes an empirical extraction mildly complex, so only gross residues
    flag misuse there.
    """
    if not m2_uniform.grid.same_as(m2_nonuniform.grid):
        raise GridMismatchError("uniform and non-uniform moments use different grids")
    if imag_tol is None:
        imag_tol = 0.05 if m2_uniform.meta.get("kind") == "empirical" else 1e-6
    L = m2_uniform.bandlimit
    if m2_nonuniform.bandlimit != L:
        raise GridMismatchError("moment tables disagree on the bandlimit")
    if isinstance(m1_uniform, MomentTables):
        m1_vec = m1_uniform.m1
    else:
        m1_vec = m1_uniform
    kam = kam_from_moments(m2_uniform, m1_vec, L, gl_order=gl_order, imag_tol=imag_tol)
    mtargets = assemble_mtargets(m2_nonuniform, kam, svd_cutoff=svd_cutoff)
    max_degree = 2 * L

    seeds = np.random.SeedSequence(seed).spawn(max(restarts, 1))
    scale = float(np.sum(np.abs(mtargets.m) ** 2))
    best = None
    runs = []
    context = XUpdateContext(mtargets)
    with _single_thread_blas():
        for s in seeds:
            rng = np.random.default_rng(s)
            state = _single_run(
                mtargets, max_degree, rng, max_iter, tol, stop_resid, positivity_points, context
            )
            runs.append(
                {"status": state.status, "residual": state.residual, "iterations": state.iterations}
            )
            if best is None or state.residual < best.residual:
                best = state
            if best.residual <= (100.0 * stop_resid) ** 2 * max(scale, 1e-300):
                break
    state = best
    if state.distribution.is_uniform(tol=1e-6):
        state.status = "degenerate_uniform"
        warnings.warn(
            "recovered density is indistinguishable from uniform; block unknowns are "
            "not identifiable from these moments"
        )
    state.meta.update(
        {
            "restarts": runs,
            "factor_cond": mtargets.cond,
            "svd_cutoff": svd_cutoff,
            "bandlimit": L,
        }
    )
    blocks = []
    for ell in range(L + 1):
        real_basis = kam.a_tilde[ell] @ state.orthogonal.blocks[ell]
        blocks.append(real_basis @ special.q_matrix(ell))
    vol = VolumeCoefficients(L, m2_uniform.grid, blocks, real_volume=True,
                             meta={"source": "reconstruction", "status": state.status})
    return vol, state.distribution, state
