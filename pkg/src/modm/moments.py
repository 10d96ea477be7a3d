"""Moment engine: analytic first and second moments, coupling-block assembly,
projection-image simulation, debiased empirical accumulation, and an
independent SO(3)-quadrature oracle for both moments.
"""

from dataclasses import dataclass, field

import numpy as np

from . import special
from .errors import GridMismatchError, InvalidDistributionError, ValidationError
from .model import DistributionCoefficients, density_grid
from .rotations import random_euler


def block_offsets(bandlimit):
    return [ell * ell for ell in range(bandlimit + 1)]


# ---------------------------------------------------------------------------
# coupling blocks


@dataclass
class BBlocks:
    """Coupling matrices of the second moment, one (L+1)^2-square block matrix
    per angular frequency n in [-L, L]; the (l, l') block has shape
    (2l+1) x (2l'+1) and vanishes when l and l' have opposite parity."""

    bandlimit: int
    max_degree: int
    stack: np.ndarray  # (2L+1, (L+1)^2, (L+1)^2)

    def block(self, n, ell, ellp):
        off = block_offsets(self.bandlimit)
        return self.stack[
            n + self.bandlimit,
            off[ell] : off[ell] + 2 * ell + 1,
            off[ellp] : off[ellp] + 2 * ellp + 1,
        ]

    def hermitian_defect(self):
        worst = 0.0
        for n in range(-self.bandlimit, self.bandlimit + 1):
            mat = self.stack[n + self.bandlimit]
            worst = max(worst, float(np.abs(mat - mat.conj().T).max()))
        return worst

    def parity_defect(self):
        worst = 0.0
        for n in range(-self.bandlimit, self.bandlimit + 1):
            for ell in range(self.bandlimit + 1):
                for ellp in range(self.bandlimit + 1):
                    if (ell - ellp) % 2:
                        worst = max(worst, float(np.abs(self.block(n, ell, ellp)).max()))
        return worst


def _b_entry_terms(ell, ellp, m, mp, n, max_degree):
    """Degrees p and weights w such that the (m, m') block entry is
    (-1)^{m+n} N N' sum_p w_p B_{p, m'-m}."""
    lo = max(abs(m - mp), abs(ell - ellp))
    hi = min(ell + ellp, max_degree)
    out = []
    for p in range(lo, hi + 1):
        c = special.cg_product(ell, ellp, m, -mp, n, -n, p)
        if c != 0.0:
            out.append((p, c / (2 * p + 1)))
    return out


def assemble_b_blocks(dist, bandlimit):
    """Coupling blocks for the given orientation density and volume bandlimit."""
    L = bandlimit
    dim = (L + 1) ** 2
    off = block_offsets(L)
    stack = np.zeros((2 * L + 1, dim, dim), dtype=complex)
    for n in range(-L, L + 1):
        for ell in range(abs(n), L + 1):
            nl = special.cal_n_const(ell, n)
            if nl == 0.0:
                continue
            for ellp in range(abs(n), L + 1):
                nlp = special.cal_n_const(ellp, n)
                if nlp == 0.0:
                    continue
                for m in range(-ell, ell + 1):
                    for mp in range(-ellp, ellp + 1):
                        acc = 0.0 + 0.0j
                        for p, w in _b_entry_terms(ell, ellp, m, mp, n, dist.max_degree):
                            b = dist.coeff(p, mp - m)
                            if b != 0.0:
                                acc += w * b
                        if acc != 0.0:
                            stack[n + L, off[ell] + m + ell, off[ellp] + mp + ellp] = (
                                (-1.0) ** (m + n) * nl * nlp * acc
                            )
    return BBlocks(L, dist.max_degree, stack)


def b_parameter_basis(bandlimit, max_degree):
    """Real parametrization of the density coefficients entering the second
    moment: unknowns are B_{p,0} (real) and Re/Im B_{p,u} for u > 0, even
    p in [2, max_degree]; conjugate symmetry is built in and B_{0,0} = 1.

    Returns (params, const_stack, basis_stacks): params is a list of
    (p, u, part) descriptors, const_stack the block stack at the uniform
    density, and basis_stacks[j] the derivative of the stack with respect
    to parameter j.
    """
    L = bandlimit
    dim = (L + 1) ** 2
    off = block_offsets(L)
    components = {}

    def comp(p, u):
        key = (p, u)
        if key not in components:
            components[key] = np.zeros((2 * L + 1, dim, dim), dtype=complex)
        return components[key]

    for n in range(-L, L + 1):
        for ell in range(abs(n), L + 1):
            nl = special.cal_n_const(ell, n)
            if nl == 0.0:
                continue
            for ellp in range(abs(n), L + 1):
                nlp = special.cal_n_const(ellp, n)
                if nlp == 0.0:
                    continue
                sign_base = nl * nlp
                for m in range(-ell, ell + 1):
                    for mp in range(-ellp, ellp + 1):
                        for p, w in _b_entry_terms(ell, ellp, m, mp, n, max_degree):
                            if p % 2:
                                continue
                            comp(p, mp - m)[
                                n + L, off[ell] + m + ell, off[ellp] + mp + ellp
                            ] += ((-1.0) ** (m + n)) * sign_base * w
    zero = np.zeros((2 * L + 1, dim, dim), dtype=complex)
    const = components.get((0, 0), zero).copy()
    params, stacks = [], []
    for p in range(2, max_degree + 1, 2):
        params.append((p, 0, "re"))
        stacks.append(components.get((p, 0), zero).copy())
        for u in range(1, p + 1):
            kp = components.get((p, u), zero)
            km = components.get((p, -u), zero)
            params.append((p, u, "re"))
            stacks.append(kp + (-1.0) ** u * km)
            params.append((p, u, "im"))
            stacks.append(1j * (kp - (-1.0) ** u * km))
    return params, const, stacks


def distribution_from_parameters(params, values, max_degree):
    """Inverse of the parametrization in b_parameter_basis."""
    entries = {(0, 0): 1.0 + 0.0j}
    for (p, u, part), v in zip(params, values):
        if u == 0:
            entries[(p, 0)] = entries.get((p, 0), 0.0) + v
        elif part == "re":
            entries[(p, u)] = entries.get((p, u), 0.0) + v
            entries[(p, -u)] = entries.get((p, -u), 0.0) + (-1.0) ** u * v
        else:
            entries[(p, u)] = entries.get((p, u), 0.0) + 1j * v
            entries[(p, -u)] = entries.get((p, -u), 0.0) - 1j * (-1.0) ** u * v
    return DistributionCoefficients.from_entries(max_degree, entries)


# ---------------------------------------------------------------------------
# moment tables


@dataclass
class MomentTables:
    """First moment over radii and second moment in angular-Fourier form:
    g[n + L] holds G^n(r_i, r_j), nonzero only for |n| <= L."""

    bandlimit: int
    grid: object
    g: np.ndarray = None
    m1: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def m2_at_psi(self, psi):
        """Second moment m2(r_i, r_j, psi) for an array of angle offsets,
        shape (n_radial, n_radial, len(psi))."""
        psi = np.atleast_1d(np.asarray(psi, dtype=float))
        ns = np.arange(-self.bandlimit, self.bandlimit + 1)
        phases = np.exp(1j * np.outer(ns, psi))
        return np.einsum("nrs,nk->rsk", self.g, phases)

    def hermitian_defect(self):
        """Violation of m2(r, phi, r', phi') = conj(m2(r', phi', r, phi)),
        which is Hermitianity of every G^n."""
        worst = 0.0
        for n in range(self.g.shape[0]):
            worst = max(worst, float(np.abs(self.g[n] - self.g[n].conj().T).max()))
        return worst

    def signal_power(self):
        """Mean of m2(r, phi, r, phi) over grid samples (per-sample power)."""
        diag = np.einsum("nrr->r", self.g).real
        return float(diag.mean())

    def copy(self):
        return MomentTables(
            self.bandlimit,
            self.grid,
            None if self.g is None else self.g.copy(),
            None if self.m1 is None else self.m1.copy(),
            dict(self.meta),
        )


def m1_analytic(vol, dist):
    """First moment over radii (angle-independent): only even degrees up to
    min(L, P) contribute."""
    m1 = np.zeros(vol.n_radial, dtype=complex)
    for ell in range(0, min(vol.bandlimit, dist.max_degree) + 1, 2):
        n0 = special.cal_n_const(ell, 0)
        frak = n0 / (2 * ell + 1) * np.array(
            [dist.coeff(ell, m) for m in range(-ell, ell + 1)]
        )
        m1 += vol.blocks[ell] @ np.conj(frak)
    return m1


def m2_analytic(vol, dist):
    """Population second moment for an arbitrary admissible density."""
    bb = assemble_b_blocks(dist, vol.bandlimit)
    amat = vol.concat()
    g = np.einsum("rc,ncd,sd->nrs", amat, bb.stack, amat.conj())
    return MomentTables(
        vol.bandlimit,
        vol.grid,
        g,
        m1_analytic(vol, dist),
        {"kind": "analytic", "distribution": dist.meta.get("kind", "generic")},
    )


def m2_uniform_analytic(vol):
    """Population second moment under the uniform orientation density,
    (1/4 pi) sum_l C_l(r, r') P_l(cos psi) stored in the same Fourier stack."""
    L = vol.bandlimit
    g = np.zeros((2 * L + 1, vol.n_radial, vol.n_radial), dtype=complex)
    for ell in range(L + 1):
        c = vol.blocks[ell] @ vol.blocks[ell].conj().T
        for n in range(-ell, ell + 1):
            nl = special.cal_n_const(ell, n)
            if nl:
                g[n + L] += (nl * nl / (2 * ell + 1)) * c
    m1 = m1_analytic(vol, DistributionCoefficients.uniform())
    return MomentTables(L, vol.grid, g, m1, {"kind": "analytic", "distribution": "uniform"})


# ---------------------------------------------------------------------------
# image simulation


@dataclass
class ImageBatch:
    """Fourier-domain projection images on the polar grid, with the hidden
    per-image rotations retained for debugging only."""

    images: np.ndarray  # (N, n_radial, n_angular) complex
    rotations: np.ndarray  # (N, 3) ZYZ angles
    sigma: float
    grid: object

    def __len__(self):
        return len(self.images)


def slice_modes(vol, eulers):
    """Angular Fourier modes of central slices: c[i, r, n+L] such that the
    slice image is sum_n c_n(r) e^{i n phi}."""
    eulers = np.atleast_2d(np.asarray(eulers, dtype=float))
    L = vol.bandlimit
    c = np.zeros((len(eulers), vol.n_radial, 2 * L + 1), dtype=complex)
    for ell in range(L + 1):
        u = special.wigner_u(ell, eulers[:, 0], eulers[:, 1], eulers[:, 2])
        t = np.einsum("rm,bmn->brn", vol.blocks[ell], u)
        nvals = np.arange(-ell, ell + 1)
        nl = np.array([special.n_const(ell, n) for n in nvals])
        c[:, :, nvals + L] += t * nl
    return c


def slice_images(vol, eulers):
    """Central-slice images on the polar grid for a batch of rotations."""
    c = slice_modes(vol, eulers)
    ns = np.arange(-vol.bandlimit, vol.bandlimit + 1)
    phases = np.exp(1j * np.outer(ns, vol.grid.angles))
    return np.einsum("brn,nf->brf", c, phases)


def _envelope(dist, n_theta=60, n_phi=121):
    theta = np.linspace(0.0, np.pi, n_theta)
    phi = np.linspace(0.0, 2 * np.pi, n_phi, endpoint=False)
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    vals = density_grid(dist, th.ravel(), ph.ravel())
    top = float(vals.max())
    if float(vals.min()) < -1e-9 * max(top, 1.0):
        raise InvalidDistributionError(
            f"truncated density dips to {vals.min():.3e}; not samplable"
        )
    return 1.2 * max(top, 1e-12)


def sample_rotations(dist, n, rng):
    """Rotations drawn from the density by rejection against a grid-searched
    envelope; raises if the density is negative or exceeds the envelope."""
    if dist.is_uniform():
        return random_euler(n, rng)
    envelope = _envelope(dist)
    out = np.empty((n, 3))
    have = 0
    while have < n:
        chunk = max(256, int(1.5 * (n - have)))
        cand = random_euler(chunk, rng)
        rho = density_grid(dist, cand[:, 1], cand[:, 0])
        if rho.max() > envelope:
            raise InvalidDistributionError("density exceeds rejection envelope")
        keep = cand[rng.uniform(0.0, envelope, chunk) <= np.clip(rho, 0.0, None)]
        take = min(len(keep), n - have)
        out[have : have + take] = keep[:take]
        have += take
    return out


def simulate_images(vol, dist, n, sigma, seed, batch_size=4096):
    """Noisy Fourier-domain projection images of the volume under the given
    orientation density; complex white noise of variance sigma^2 per sample."""
    if vol.real_volume is False:
        raise ValidationError("simulation expects a real-volume coefficient set")
    rng = np.random.default_rng(seed)
    rotations = sample_rotations(dist, n, rng)
    images = np.empty((n, vol.n_radial, vol.grid.n_angular), dtype=complex)
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        images[start:stop] = slice_images(vol, rotations[start:stop])
    if sigma > 0:
        scale = sigma / np.sqrt(2.0)
        images += scale * (
            rng.standard_normal(images.shape) + 1j * rng.standard_normal(images.shape)
        )
    return ImageBatch(images, rotations, float(sigma), vol.grid)


# ---------------------------------------------------------------------------
# empirical moments


class MomentAccumulator:
    """Streaming one-pass accumulation of debiased empirical moments.

    Partial accumulators merge associatively and commutatively; a fixed
    reduction tree reproduces results bitwise.
    """

    def __init__(self, grid, bandlimit, sigma2=0.0):
        self.grid = grid
        self.bandlimit = bandlimit
        self.sigma2 = float(sigma2)
        dim = grid.n_radial
        self._g = np.zeros((2 * bandlimit + 1, dim, dim), dtype=complex)
        self._m1 = np.zeros(dim, dtype=complex)
        self.count = 0
        ns = np.arange(-bandlimit, bandlimit + 1)
        self._dft = np.exp(-1j * np.outer(grid.angles, ns)) / grid.n_angular

    def update(self, images):
        images = np.asarray(images)
        modes = np.einsum("brf,fn->brn", images, self._dft)
        self._g += np.einsum("brn,bsn->nrs", modes, modes.conj())
        self._m1 += modes[:, :, self.bandlimit].sum(axis=0)
        self.count += len(images)
        return self

    def merge(self, other):
        if self.bandlimit != other.bandlimit or not self.grid.same_as(other.grid):
            raise GridMismatchError("cannot merge accumulators on different grids")
        out = MomentAccumulator(self.grid, self.bandlimit, self.sigma2)
        out._g = self._g + other._g
        out._m1 = self._m1 + other._m1
        out.count = self.count + other.count
        return out

    def finalize(self):
        if self.count == 0:
            raise ValidationError("no images accumulated")
        g = self._g / self.count
        if self.sigma2 > 0:
            idx = np.arange(self.grid.n_radial)
            g[:, idx, idx] -= self.sigma2 / self.grid.n_angular
        m1 = self._m1 / self.count
        return MomentTables(
            self.bandlimit,
            self.grid,
            g,
            m1,
            {"kind": "empirical", "n_images": self.count, "sigma2": self.sigma2},
        )


def empirical_moments(batch, bandlimit, chunk_size=8192):
    """Debiased empirical moment tables from an image batch."""
    acc = MomentAccumulator(batch.grid, bandlimit, batch.sigma**2)
    for start in range(0, len(batch), chunk_size):
        acc.update(batch.images[start : start + chunk_size])
    return acc.finalize()


def sigma_for_snr(vol, dist, snr):
    """Noise level giving the requested per-sample signal-to-noise ratio."""
    power = m2_analytic(vol, dist).signal_power()
    return float(np.sqrt(power / snr))


# ---------------------------------------------------------------------------
# SO(3) quadrature oracle


def so3_quadrature(n_alpha, n_beta, n_gamma):
    """Product rule for the normalized Haar integral: trapezoid in the two
    circle angles, Gauss-Legendre in cos(beta).  Exact for matrix
    coefficients of combined degree < min(n_alpha, n_gamma) and
    <= 2*n_beta - 1."""
    alphas = 2 * np.pi * np.arange(n_alpha) / n_alpha
    gammas = 2 * np.pi * np.arange(n_gamma) / n_gamma
    nodes, glw = np.polynomial.legendre.leggauss(n_beta)
    betas = np.arccos(nodes)
    weights = glw / (2.0 * n_alpha * n_gamma)
    return alphas, betas, gammas, weights


def oracle_m2(vol, dist, order=None):
    """Second moment by direct numerical integration of the defining SO(3)
    integral, stored in the same Fourier stack as the analytic path.

    The full four-index moment is accumulated on the grid and projected;
    the off-diagonal angular-frequency residue (which must vanish for an
    in-plane-uniform density) is reported in meta["cross_residual"].
    """
    L, P = vol.bandlimit, dist.max_degree
    if order is None:
        order = 2 * L + P + 2
    grid = vol.grid
    alphas, betas, gammas, wbeta = so3_quadrature(order, order, order)
    n_r, n_phi = grid.n_radial, grid.n_angular
    full = np.zeros((n_r, n_phi, n_r, n_phi), dtype=complex)
    for bi, beta in enumerate(betas):
        rho = density_grid(dist, np.full(len(alphas), beta), alphas)
        eulers = np.column_stack(
            [
                np.repeat(alphas, len(gammas)),
                np.full(len(alphas) * len(gammas), beta),
                np.tile(gammas, len(alphas)),
            ]
        )
        imgs = slice_images(vol, eulers)
        w = wbeta[bi] * np.repeat(rho, len(gammas))
        full += np.einsum("b,brf,bsg->rfsg", w, imgs, imgs.conj())
    ns = np.arange(-L, L + 1)
    ph = np.exp(-1j * np.outer(ns, grid.angles)) / n_phi
    cross = np.einsum("nf,rfsg,mg->nrsm", ph, full, ph.conj())
    g = np.einsum("nrsn->nrs", cross)
    off = cross.copy()
    for i in range(2 * L + 1):
        off[i, :, :, i] = 0.0
    cross_residual = float(np.linalg.norm(off) / max(np.linalg.norm(cross), 1e-300))
    return MomentTables(
        L,
        grid,
        g,
        None,
        {"kind": "oracle", "order": order, "cross_residual": cross_residual},
    )


def oracle_m1(vol, dist, order=None):
    """First moment by direct SO(3) quadrature; returns the radial vector and
    the residual angular dependence (which must vanish)."""
    L, P = vol.bandlimit, dist.max_degree
    if order is None:
        order = 2 * L + P + 2
    grid = vol.grid
    alphas, betas, gammas, wbeta = so3_quadrature(order, order, order)
    acc = np.zeros((grid.n_radial, grid.n_angular), dtype=complex)
    for bi, beta in enumerate(betas):
        rho = density_grid(dist, np.full(len(alphas), beta), alphas)
        eulers = np.column_stack(
            [
                np.repeat(alphas, len(gammas)),
                np.full(len(alphas) * len(gammas), beta),
                np.tile(gammas, len(alphas)),
            ]
        )
        imgs = slice_images(vol, eulers)
        w = wbeta[bi] * np.repeat(rho, len(gammas))
        acc += np.einsum("b,brf->rf", w, imgs)
    m1 = acc.mean(axis=1)
    residual = float(np.abs(acc - m1[:, None]).max())
    return m1, residual
