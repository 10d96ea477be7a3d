"""Recovery of per-degree coefficient factors from the uniform second moment:
Legendre-transform extraction of the Gram matrices C_l, rank-(2l+1) symmetric
factorization, and the degree-0 sign fix from the first moment.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import special
from .errors import ValidationError


@dataclass
class KamFactors:
    """Per-degree factors of the uniform-moment Gram matrices.

    a_tilde[l] is an (n_radial, 2l+1) factor of c_tilde[l], real for even l
    and purely imaginary for odd l; it matches the true coefficients only up
    to an unknown real orthogonal right factor per degree.
    """

    bandlimit: int
    grid: object
    a_tilde: list
    c_tilde: list
    eigenvalues: list
    meta: dict = field(default_factory=dict)

    def concat(self):
        return np.concatenate(self.a_tilde, axis=1)

    def factorization_defect(self):
        worst = 0.0
        for ell in range(self.bandlimit + 1):
            resid = self.a_tilde[ell] @ self.a_tilde[ell].conj().T - self.c_tilde[ell]
            scale = max(float(np.linalg.norm(self.c_tilde[ell])), 1e-300)
            worst = max(worst, float(np.linalg.norm(resid)) / scale)
        return worst


def extract_cl(m2_uniform, ell, gl_order=None, imag_tol=1e-6):
    """Gram matrix C_l(r_i, r_j) = 2 pi (2l+1) * integral of
    m2(r_i, r_j, psi) P_l(cos psi) sin(psi) d psi over [0, pi],
    by Gauss-Legendre quadrature in cos psi.

    The result is symmetrized; a large imaginary residue means the input
    moment did not come from a uniform orientation distribution.
    """
    if gl_order is None:
        gl_order = 2 * m2_uniform.bandlimit + 2
    nodes, weights = np.polynomial.legendre.leggauss(gl_order)
    psi = np.arccos(nodes)
    vals = m2_uniform.m2_at_psi(psi)  # (Mr, Mr, K)
    pl = special.legendre_p(ell, nodes)
    c = 2.0 * np.pi * (2 * ell + 1) * np.einsum("rsk,k->rs", vals, weights * pl)
    # weak degrees are judged against the overall moment scale, not their own
    scale = max(
        float(np.abs(c).max()),
        4.0 * np.pi * float(np.abs(m2_uniform.g).max()),
        1e-300,
    )
    imag = float(np.abs(c.imag).max())
    if imag > imag_tol * scale:
        raise ValidationError(
            f"C_{ell} has imaginary residue {imag:.3e} (relative {imag / scale:.3e}); "
            "input moment is not consistent with a uniform orientation distribution"
        )
    out = c.real
    return 0.5 * (out + out.T)


def factor_cl(c_tilde, ell, clamp_tol=1e-12):
    """Rank-(2l+1) symmetric factor of a (possibly noisy, indefinite) Gram
    matrix: keep the top 2l+1 eigenpairs, clamp negatives to zero, and
    restore the real/imaginary parity of the degree.

    Returns (a_tilde, eigenvalues); eigenvalues are the full spectrum for
    diagnostics (negative tail indicates the noise floor).
    """
    c = 0.5 * (c_tilde + c_tilde.T)
    evals, evecs = np.linalg.eigh(c)
    order = np.argsort(evals)[::-1]
    evals_sorted = evals[order]
    keep = order[: 2 * ell + 1]
    lam = evals[keep]
    lam_max = max(float(evals_sorted[0]), 0.0)
    lam = np.where(lam > clamp_tol * lam_max, lam, 0.0)
    factor = evecs[:, keep] * np.sqrt(lam)
    if ell % 2 == 1:
        factor = 1j * factor
    return factor.astype(complex), evals_sorted


def fix_a0_sign(a_tilde0, m1_uniform):
    """Resolve the degree-0 sign ambiguity using the uniform first moment.

    Under uniform orientations the first moment is N_0^0 A_0(r), so the
    factor's single column must correlate positively with m1 / N_0^0.
    """
    n00 = special.n_const(0, 0)
    target = np.asarray(m1_uniform) / n00
    col = a_tilde0[:, 0]
    denom = np.linalg.norm(col) * np.linalg.norm(target)
    if denom == 0:
        warnings.warn("degenerate degree-0 factor or first moment; sign left unchanged")
        return a_tilde0
    cosine = float(np.real(np.vdot(col, target))) / denom
    if abs(cosine) < 0.1:
        warnings.warn(
            f"first moment nearly orthogonal to degree-0 factor (cos = {cosine:.3f}); "
            "sign decision is unreliable"
        )
    return -a_tilde0 if cosine < 0 else a_tilde0


def kam_from_moments(m2_uniform, m1_uniform, bandlimit, gl_order=None, clamp_tol=1e-12, imag_tol=1e-6):
    """Full first step: extract, factor and sign-fix all degrees."""
    c_list, a_list, eig_list = [], [], []
    for ell in range(bandlimit + 1):
        c = extract_cl(m2_uniform, ell, gl_order=gl_order, imag_tol=imag_tol)
        a, eigs = factor_cl(c, ell, clamp_tol=clamp_tol)
        c_list.append(c)
        a_list.append(a)
        eig_list.append(eigs)
    if m1_uniform is not None:
        a_list[0] = fix_a0_sign(a_list[0], m1_uniform)
    return KamFactors(
        bandlimit,
        m2_uniform.grid,
        a_list,
        c_list,
        eig_list,
        {
            "gl_order": gl_order or 2 * m2_uniform.bandlimit + 2,
            "clamp_tol": clamp_tol,
            "rank_truncation": "top 2l+1 eigenpairs, negatives clamped to zero",
            "source": m2_uniform.meta,
        },
    )
