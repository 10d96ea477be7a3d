"""Alignment-aware error metrics (global rotation/reflection gauge removal,
coefficient-space shell correlation) and numerical identifiability checks of
the coupling-block linear maps.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import special
from .errors import GridMismatchError
from .model import DistributionCoefficients
from .rotations import euler_from_matrix, matrix_from_euler, random_euler

# ---------------------------------------------------------------------------
# alignment


@dataclass
class AlignmentResult:
    """Gauge transform (rotation + optional reflection) mapping an estimate
    onto a reference, with the residuals it achieves."""

    angles: tuple  # ZYZ angles of the aligning rotation
    chirality: int  # 0 or 1
    rel_error: float
    per_degree: list
    meta: dict = field(default_factory=dict)


def transform_volume(vol, angles, chirality):
    """Apply x -> volume(J^chirality R x) to the coefficients."""
    return vol.rotate(angles, chirality=chirality)


def _stack_error(ref, est, angles, chirality):
    num = 0.0
    den = 0.0
    per = []
    for ell in range(ref.bandlimit + 1):
        u = special.wigner_u(ell, *angles)
        if chirality:
            u = special.wigner_u_reflection(ell) @ u
        diff = ref.blocks[ell] - est.blocks[ell] @ u
        num += float(np.sum(np.abs(diff) ** 2))
        den += float(np.sum(np.abs(ref.blocks[ell]) ** 2))
        per.append(float(np.linalg.norm(diff)))
    return math.sqrt(num / max(den, 1e-300)), per


_DEGREE1_MAP = None


def _degree1_intertwiner():
    """9x9 linear map vec(R) -> vec(Q_1 U^1(R) Q_1^H), fixed by the basis
    conventions; computed once from sampled rotations."""
    global _DEGREE1_MAP
    if _DEGREE1_MAP is None:
        rng = np.random.default_rng(12345)
        rows_r, rows_w = [], []
        for ang in random_euler(24, rng):
            r = matrix_from_euler(*ang)
            q1 = special.q_matrix(1)
            w = q1 @ special.wigner_u(1, *ang) @ q1.conj().T
            rows_r.append(r.ravel())
            rows_w.append(w.real.ravel())
        lam, *_ = np.linalg.lstsq(np.array(rows_r), np.array(rows_w), rcond=None)
        _DEGREE1_MAP = lam.T  # vec(W) = map @ vec(R)
    return _DEGREE1_MAP


def _rotation_from_degree1(w):
    """Invert the degree-1 intertwiner and project back onto SO(3)."""
    lam = _degree1_intertwiner()
    r = np.linalg.solve(lam, w.ravel()).reshape(3, 3)
    u, _, vt = np.linalg.svd(r)
    d = np.diag([1.0, 1.0, np.linalg.det(u @ vt)])
    return u @ d @ vt


def align(ref, est, refine=True, max_evals=200):
    """Gauge-align an estimated volume to a reference.

    For each chirality the degree-1 real-basis blocks are Procrustes-fitted
    by a rotation (lifted through the degree-1 conjugation identity), the
    fit is refined by Nelder-Mead on the full-coefficient error, and the
    better chirality wins.  Falls back to a coarse rotation-grid search when
    the degree-1 block is degenerate.
    """
    if ref.bandlimit != est.bandlimit or not ref.grid.same_as(est.grid):
        raise GridMismatchError("alignment requires matching grids and bandlimits")
    total = math.sqrt(sum(float(np.sum(np.abs(b) ** 2)) for b in est.blocks))
    deg1 = float(np.linalg.norm(est.blocks[1])) if est.bandlimit >= 1 else 0.0
    candidates = []
    if deg1 > 1e-10 * max(total, 1e-300):
        for chirality in (0, 1):
            est_rb = est.real_basis_block(1)
            if chirality:
                est_rb = est_rb @ (
                    special.q_matrix(1)
                    @ special.wigner_u_reflection(1)
                    @ special.q_matrix(1).conj().T
                )
            b = np.ascontiguousarray(est_rb.imag)  # degree-1 blocks are purely imaginary
            c = np.ascontiguousarray(ref.real_basis_block(1).imag)
            m = b.T @ c
            u, _, vt = np.linalg.svd(m)
            d = np.diag([1.0, 1.0, np.linalg.det(u @ vt)])
            w = u @ d @ vt
            rot = _rotation_from_degree1(w)
            candidates.append((euler_from_matrix(rot), chirality))
    else:
        for chirality in (0, 1):
            best = None
            for ang in _rotation_grid():
                err, _ = _stack_error(ref, est, ang, chirality)
                if best is None or err < best[0]:
                    best = (err, ang)
            candidates.append((best[1], chirality))

    results = []
    for angles, chirality in candidates:
        angles = np.asarray(angles, dtype=float)
        if refine:
            from scipy.optimize import minimize

            out = minimize(
                lambda a: _stack_error(ref, est, a, chirality)[0],
                angles,
                method="Nelder-Mead",
                options={"maxfev": max_evals, "xatol": 1e-12, "fatol": 1e-16},
            )
            angles = out.x
        err, per = _stack_error(ref, est, angles, chirality)
        results.append(AlignmentResult(tuple(float(a) for a in angles), chirality, err, per))
    best = min(results, key=lambda r: r.rel_error)
    best.meta["rejected_error"] = max(results, key=lambda r: r.rel_error).rel_error
    return best


def _rotation_grid(n_alpha=22, n_beta=11, n_gamma=22):
    grid = []
    for beta in np.arccos(np.linspace(-1, 1, n_beta)):
        for alpha in 2 * np.pi * np.arange(n_alpha) / n_alpha:
            for gamma in 2 * np.pi * np.arange(n_gamma) / n_gamma:
                grid.append((alpha, beta, gamma))
    return grid


def apply_alignment(est, result):
    """The estimate carried into the reference frame."""
    return transform_volume(est, result.angles, result.chirality)


def align_distribution(dist, result):
    """The matching gauge action on an orientation density (the pair
    transforms together; see the symmetry of the moments)."""
    return dist.rotate(result.angles, chirality=result.chirality)


def fsc(ref, est_aligned):
    """Coefficient-space shell correlation over radii: the real part of the
    normalized inner product across all harmonic indices per radius.
    Radii with a vanishing shell norm yield NaN (undefined)."""
    a = ref.concat()
    b = est_aligned.concat()
    num = np.real(np.sum(a * b.conj(), axis=1))
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    out = np.full(len(num), np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


# ---------------------------------------------------------------------------
# identifiability rank checks


@dataclass
class RankReport:
    lemma: str
    bandlimit: int
    shape: tuple
    singular_values: np.ndarray
    rank: int
    expected_rank: int
    threshold: float
    meta: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.rank == self.expected_rank

    @property
    def spectral_gap(self):
        s = self.singular_values
        if self.rank == 0 or self.rank >= len(s):
            return np.inf
        tail = s[self.rank]
        return float(s[self.rank - 1] / tail) if tail > 0 else np.inf

    def to_dict(self):
        return {
            "lemma": self.lemma,
            "bandlimit": self.bandlimit,
            "shape": list(self.shape),
            "singular_values": self.singular_values.tolist(),
            "rank": self.rank,
            "expected_rank": self.expected_rank,
            "threshold": self.threshold,
            "passed": bool(self.passed),
            "spectral_gap": self.spectral_gap,
            "meta": self.meta,
        }


RANK_THRESHOLD = 1e-8


def _numerical_rank(mat, threshold=RANK_THRESHOLD):
    s = np.linalg.svd(mat, compute_uv=False)
    if s[0] == 0:
        return 0, s
    return int(np.sum(s > threshold * s[0])), s


def top_block_linear_map(bandlimit, n_values=None):
    """Explicit matrix of the linear map from the top-degree density
    coefficients B_{2L} to the stacked (L, L) coupling blocks over the
    frequencies n >= 0 of matching parity.

    Columns are indexed by v in [-2L, 2L]; rows stack the block entries for
    each n in n_values (default: all 0 <= n <= L with n = L mod 2)."""
    L = bandlimit
    if n_values is None:
        n_values = [n for n in range(L + 1) if (n - L) % 2 == 0]
    p = 2 * L
    cols = 2 * p + 1
    rows = []
    for n in n_values:
        nl = special.cal_n_const(L, n)
        block = np.zeros(((2 * L + 1) ** 2, cols))
        for m in range(-L, L + 1):
            for mp in range(-L, L + 1):
                v = mp - m
                coef = special.cg_product(L, L, m, -mp, n, -n, p) / (2 * p + 1)
                block[(m + L) * (2 * L + 1) + (mp + L), v + p] = (
                    (-1.0) ** (m + n) * nl * nl * coef
                )
        rows.append(block)
    return np.vstack(rows), n_values


def check_injectivity(bandlimit, n_values=None, threshold=RANK_THRESHOLD):
    """Numerical injectivity of the top-degree coefficient map: the column
    rank must equal the 4L+1 real degrees of freedom."""
    mat, used = top_block_linear_map(bandlimit, n_values)
    rank, s = _numerical_rank(mat, threshold)
    return RankReport(
        lemma="top-degree injectivity",
        bandlimit=bandlimit,
        shape=mat.shape,
        singular_values=s,
        rank=rank,
        expected_rank=4 * bandlimit + 1,
        threshold=threshold,
        meta={"n_values": used},
    )


def mixed_block_concatenation(bandlimit, dist):
    """Horizontal concatenation of the (L, l') coupling blocks for l' < L of
    matching parity, over the frequencies 0 <= n <= L with n = L mod 2."""
    from .moments import assemble_b_blocks

    L = bandlimit
    bb = assemble_b_blocks(dist, L)
    pieces = []
    for n in range(0 if L % 2 == 0 else 1, L + 1, 2):
        for ellp in range(L % 2, L, 2):
            pieces.append(bb.block(n, L, ellp))
    return np.hstack(pieces)


def check_column_rank(bandlimit, seed=0, threshold=RANK_THRESHOLD, dist=None):
    """Numerical row rank (2L+1) of the mixed-degree block concatenation for
    generic lower coefficients."""
    L = bandlimit
    if dist is None:
        from .model import random_distribution

        dist = random_distribution(2 * L - 2, seed=seed, concentration=2.0)
    mat = mixed_block_concatenation(L, dist)
    rank, s = _numerical_rank(mat, threshold)
    return RankReport(
        lemma="mixed-degree full rank",
        bandlimit=L,
        shape=mat.shape,
        singular_values=s,
        rank=rank,
        expected_rank=2 * L + 1,
        threshold=threshold,
        meta={"generator": dist.meta.get("kind", "supplied")},
    )


def sparse_instance_check(bandlimit=6, large=1.0, small=1e-3, threshold=RANK_THRESHOLD):
    """The two-coefficient sparse instance: B_{2L-2, 2} large and
    B_{2L-4, -2L+7} small makes the leading square submatrix of
    [(L, L-2) | (L, L-4)] columnwise diagonally dominant, hence full rank."""
    L = bandlimit
    p1, u1 = 2 * L - 2, 2
    p2, u2 = 2 * L - 4, -2 * L + 7
    entries = {(p1, u1): large, (p2, u2): small}
    dist = DistributionCoefficients.from_entries(2 * L - 2, entries, {"kind": "sparse-instance"})
    from .moments import assemble_b_blocks

    bb = assemble_b_blocks(dist, L)
    n_under = 0 if L % 2 == 0 else 1
    sub = np.hstack([bb.block(n_under, L, L - 2), bb.block(n_under, L, L - 4)])
    lead = sub[:, : 2 * L + 1]
    dominant = True
    for j in range(lead.shape[1]):
        col = np.abs(lead[:, j])
        top = col.max()
        dominant = dominant and top > col.sum() - top
    rank, s = _numerical_rank(lead, threshold)
    return RankReport(
        lemma="sparse-instance dominance",
        bandlimit=L,
        shape=lead.shape,
        singular_values=s,
        rank=rank,
        expected_rank=2 * L + 1,
        threshold=threshold,
        meta={"columnwise_dominant": bool(dominant), "entries": {str(k): v for k, v in entries.items()}},
    )


# ---------------------------------------------------------------------------
# nonvanishing sweeps


def check_nonvanishing(cg_degree_max=6, n_degree_max=12):
    """Sweep the top-coupling products over all admissible index tuples with
    l, l' <= cg_degree_max, and the gated normalizers over the parity-valid
    range l <= n_degree_max; any vanishing value is a kernel bug.

    Returns a dict report with the minimum absolute values observed."""
    min_cg = np.inf
    count_cg = 0
    for ell in range(cg_degree_max + 1):
        for ellp in range(cg_degree_max + 1):
            for m in range(-ell, ell + 1):
                for n in range(-ell, ell + 1):
                    for mp in range(-ellp, ellp + 1):
                        for np_ in range(-ellp, ellp + 1):
                            v = special.cg_product(ell, ellp, m, mp, n, np_, ell + ellp)
                            count_cg += 1
                            min_cg = min(min_cg, abs(v))
    min_n = np.inf
    worst_closed_form = 0.0
    count_n = 0
    for ell in range(n_degree_max + 1):
        for n in range(-ell, ell + 1):
            if (ell - n) % 2:
                continue
            v = special.cal_n_const(ell, n)
            count_n += 1
            min_n = min(min_n, abs(v))
            closed = (
                (-1.0) ** ((ell + n) // 2)
                / 2.0**ell
                * math.sqrt((2 * ell + 1) / (4 * math.pi))
                * math.sqrt(math.factorial(ell + n) * math.factorial(ell - n))
                / (math.factorial((ell + n) // 2) * math.factorial((ell - n) // 2))
            )
            worst_closed_form = max(worst_closed_form, abs(v - closed) / max(abs(closed), 1e-300))
    return {
        "min_abs_cg_product": float(min_cg),
        "cg_tuples": count_cg,
        "min_abs_gated_normalizer": float(min_n),
        "normalizer_pairs": count_n,
        "closed_form_max_rel_err": float(worst_closed_form),
        "passed": bool(min_cg > 1e-12 and min_n > 1e-12 and worst_closed_form < 1e-12),
    }
