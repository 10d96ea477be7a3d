"""Domain data types: polar grids, volume and orientation-density coefficients,
block-orthogonal unknowns, with constructors, random generators and validators.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import special
from .errors import ValidationError
from .rotations import as_euler, viewing_angles

DEFAULT_R_MAX = 0.5  # Nyquist radius for unit-pixel images; pure convention.


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class PolarGrid:
    """Sampling grid: radii in (0, r_max], equispaced angles on [0, 2pi)."""

    radii: np.ndarray
    angles: np.ndarray
    r_max: float = DEFAULT_R_MAX

    @classmethod
    def build(cls, n_radial, n_angular, r_max=DEFAULT_R_MAX, radial="equispaced"):
        """Equispaced radii on (0, r_max] by default; 'gauss' uses
        Gauss-Legendre nodes mapped to (0, r_max)."""
        if radial == "equispaced":
            radii = r_max * np.arange(1, n_radial + 1) / n_radial
        elif radial == "gauss":
            nodes, _ = np.polynomial.legendre.leggauss(n_radial)
            radii = 0.5 * r_max * (nodes + 1.0)
        else:
            raise ValueError(f"unknown radial rule {radial!r}")
        angles = 2.0 * np.pi * np.arange(n_angular) / n_angular
        return cls(radii=np.asarray(radii, dtype=float), angles=angles, r_max=float(r_max))

    @property
    def n_radial(self):
        return len(self.radii)

    @property
    def n_angular(self):
        return len(self.angles)

    @property
    def angular_weights(self):
        """Trapezoid weights on the periodic angle grid (exact for trig
        polynomials of degree < n_angular)."""
        return np.full(self.n_angular, 2.0 * np.pi / self.n_angular)

    def check(self, bandlimit=None, for_solver=False):
        if np.any(np.diff(self.radii) <= 0) or self.radii[0] <= 0:
            raise ValidationError("radii must be strictly increasing and positive")
        if self.radii[-1] > self.r_max + 1e-12:
            raise ValidationError("radii exceed r_max")
        if bandlimit is not None:
            if self.n_angular < 4 * bandlimit + 2:
                raise ValidationError(
                    f"need at least {4 * bandlimit + 2} angles for bandlimit {bandlimit}"
                )
            if for_solver and self.n_radial < (bandlimit + 1) ** 2:
                raise ValidationError(
                    f"need at least {(bandlimit + 1) ** 2} radii for bandlimit {bandlimit}"
                )

    def same_as(self, other):
        return (
            self.n_radial == other.n_radial
            and self.n_angular == other.n_angular
            and np.allclose(self.radii, other.radii, rtol=0, atol=1e-12)
            and abs(self.r_max - other.r_max) < 1e-12
        )

    def to_dict(self):
        return {
            "radii": self.radii.tolist(),
            "n_angular": self.n_angular,
            "r_max": self.r_max,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            radii=np.asarray(d["radii"], dtype=float),
            angles=2.0 * np.pi * np.arange(d["n_angular"]) / d["n_angular"],
            r_max=float(d["r_max"]),
        )


# ---------------------------------------------------------------------------
# volume coefficients


@dataclass
class VolumeCoefficients:
    """Complex coefficients of a bandlimited Fourier volume on a radial grid.

    blocks[l] has shape (n_radial, 2l+1), column m at index m + l.  For
    real-valued volumes the real-basis blocks (blocks[l] @ Q_l^H) are real
    for even l and purely imaginary for odd l.
    """

    bandlimit: int
    grid: PolarGrid
    blocks: list
    real_volume: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def n_radial(self):
        return self.grid.n_radial

    def block(self, ell):
        return self.blocks[ell]

    def real_basis_block(self, ell):
        return self.blocks[ell] @ special.q_matrix(ell).conj().T

    def concat(self):
        """Horizontal concatenation over degrees, shape (n_radial, (L+1)^2)."""
        return np.concatenate(self.blocks, axis=1)

    @classmethod
    def from_concat(cls, mat, bandlimit, grid, real_volume=True, meta=None):
        blocks, off = [], 0
        for ell in range(bandlimit + 1):
            blocks.append(np.array(mat[:, off : off + 2 * ell + 1]))
            off += 2 * ell + 1
        return cls(bandlimit, grid, blocks, real_volume, meta or {})

    def singular_values(self):
        return np.linalg.svd(self.concat(), compute_uv=False)

    def cond(self):
        s = self.singular_values()
        return float(s[0] / s[-1]) if s[-1] > 0 else np.inf

    def rotate(self, rot, chirality=0):
        """Coefficients of x -> volume(J^chirality R x)."""
        a, b, g = as_euler(rot)
        new = []
        for ell in range(self.bandlimit + 1):
            u = special.wigner_u(ell, a, b, g)
            if chirality:
                u = special.wigner_u_reflection(ell) @ u
            new.append(self.blocks[ell] @ u)
        return VolumeCoefficients(self.bandlimit, self.grid, new, self.real_volume, dict(self.meta))

    def copy(self):
        return VolumeCoefficients(
            self.bandlimit, self.grid, [b.copy() for b in self.blocks], self.real_volume, dict(self.meta)
        )

    def parity_defect(self):
        """Largest violation of the real/imaginary parity of real-basis blocks."""
        worst = 0.0
        scale = max(float(np.linalg.norm(self.concat())), 1e-300)
        for ell in range(self.bandlimit + 1):
            rb = self.real_basis_block(ell)
            bad = np.abs(rb.imag) if ell % 2 == 0 else np.abs(rb.real)
            if bad.size:
                worst = max(worst, float(bad.max()) / scale)
        return worst

    def evaluate(self, points):
        """Evaluate the Fourier volume at Cartesian points, shape (n, 3).

        Radial profiles are cubic-interpolated between grid radii (natural
        extrapolation below the first radius); zero outside r_max.
        """
        from scipy.interpolate import CubicSpline

        pts = np.asarray(points, dtype=float)
        r = np.linalg.norm(pts, axis=1)
        theta = np.arccos(np.clip(np.divide(pts[:, 2], r, where=r > 0, out=np.zeros_like(r)), -1, 1))
        phi = np.arctan2(pts[:, 1], pts[:, 0])
        inside = r <= self.grid.r_max + 1e-15
        out = np.zeros(len(pts), dtype=complex)
        for ell in range(self.bandlimit + 1):
            spl = CubicSpline(self.grid.radii, self.blocks[ell], axis=0)
            prof = spl(np.clip(r, 0.0, self.grid.r_max))
            for m in range(-ell, ell + 1):
                out += prof[:, m + ell] * special.sph_harm(ell, m, theta, phi)
        out[~inside] = 0.0
        return out


def random_volume(bandlimit, grid, seed, real_volume=True, max_tries=10, target_cond=None):
    """Random bandlimited volume with smooth radial profiles.

    Each real-basis radial profile is drawn as a random cubic polynomial
    times a randomly placed Gaussian bump with a random low-frequency
    modulation; the profile matrix is then reconditioned within the span
    of those draws (smooth columns sampled on few radii are numerically
    near-dependent, which would poison every pseudoinverse downstream).
    Parity is enforced by construction and full column rank is certified,
    regenerating on failure at most max_tries times.
    """
    grid.check(bandlimit=bandlimit)
    n_cols = (bandlimit + 1) ** 2
    if grid.n_radial < n_cols:
        raise ValidationError(f"grid has {grid.n_radial} radii; need at least {n_cols}")
    rng = np.random.default_rng(seed)
    r = grid.radii / grid.r_max
    for attempt in range(max_tries):
        cols = []
        for _ in range(n_cols):
            coefs = rng.standard_normal(4)
            center = rng.uniform(0.02, 0.98)
            width = rng.uniform(0.06, 0.28)
            freq = rng.uniform(0.0, np.pi * n_cols / 1.5)
            phase = rng.uniform(0.0, 2 * np.pi)
            prof = sum(coefs[k] * r**k for k in range(4))
            cols.append(prof * np.exp(-(((r - center) / width) ** 2)) * np.cos(freq * r + phase))
        profile = np.column_stack(cols)
        u, s, vt = np.linalg.svd(profile, full_matrices=False)
        if s[-1] <= 1e-12 * s[0]:
            continue
        cond = target_cond or rng.uniform(30.0, 200.0)
        s_flat = s[0] * cond ** (-np.arange(n_cols) / max(n_cols - 1, 1))
        profile = (u * s_flat) @ vt
        blocks, off = [], 0
        for ell in range(bandlimit + 1):
            rb = profile[:, off : off + 2 * ell + 1].astype(complex) / (1.0 + ell)
            off += 2 * ell + 1
            if real_volume and ell % 2 == 1:
                rb = 1j * rb.real
            elif not real_volume:
                rb = rb + 1j * rng.standard_normal(rb.shape) * 0.3
            blocks.append(rb @ special.q_matrix(ell))
        vol = VolumeCoefficients(bandlimit, grid, blocks, real_volume)
        s_final = vol.singular_values()
        if s_final[-1] > 1e-10 * s_final[0]:
            vol.meta.update(seed=seed, attempt=attempt, cond=float(s_final[0] / s_final[-1]))
            return vol
    raise ValidationError("failed to generate a full-column-rank volume")


# ---------------------------------------------------------------------------
# orientation-density coefficients


@dataclass
class DistributionCoefficients:
    """Coefficients B_{p,u} of an in-plane-uniform orientation density.

    Stored densely as coeffs[p, u + max_degree] for 0 <= p <= max_degree.
    Constraints: conj(B_{p,u}) = (-1)^u B_{p,-u}, B_{0,0} = 1, and B_{p,u} = 0
    for all odd p (the projection-image distribution is then invariant to
    in-plane rotation and to in-plane reflection).
    """

    max_degree: int
    coeffs: np.ndarray
    meta: dict = field(default_factory=dict)

    @classmethod
    def uniform(cls, max_degree=0):
        c = np.zeros((max_degree + 1, 2 * max_degree + 1), dtype=complex)
        c[0, max_degree] = 1.0
        return cls(max_degree, c, {"kind": "uniform"})

    @classmethod
    def from_entries(cls, max_degree, entries, meta=None):
        """Build from a {(p, u): value} mapping without constraint checks
        (used for raw instances in rank experiments)."""
        c = np.zeros((max_degree + 1, 2 * max_degree + 1), dtype=complex)
        for (p, u), v in entries.items():
            c[p, u + max_degree] = v
        return cls(max_degree, c, meta or {})

    def coeff(self, p, u):
        if p < 0 or p > self.max_degree or abs(u) > p:
            return 0.0 + 0.0j
        return self.coeffs[p, u + self.max_degree]

    def is_uniform(self, tol=1e-14):
        trimmed = self.coeffs.copy()
        trimmed[0, self.max_degree] = 0.0
        return bool(np.abs(trimmed).max() <= tol) if trimmed.size else True

    def low_pass(self, new_degree):
        new_degree = min(new_degree, self.max_degree)
        c = np.zeros((new_degree + 1, 2 * new_degree + 1), dtype=complex)
        for p in range(new_degree + 1):
            c[p, new_degree - p : new_degree + p + 1] = self.coeffs[
                p, self.max_degree - p : self.max_degree + p + 1
            ]
        return DistributionCoefficients(new_degree, c, dict(self.meta))

    def conj_symmetry_defect(self):
        worst = 0.0
        for p in range(self.max_degree + 1):
            for u in range(0, p + 1):
                lhs = np.conj(self.coeff(p, u))
                rhs = (-1.0) ** u * self.coeff(p, -u)
                worst = max(worst, abs(lhs - rhs))
        return worst

    def rotate(self, rot, chirality=0):
        """Coefficients of R -> rho(J^eps S R J^eps) for S = rot, eps = chirality."""
        a, b, g = as_euler(rot)
        out = np.zeros_like(self.coeffs)
        for p in range(self.max_degree + 1):
            row = self.coeffs[p, self.max_degree - p : self.max_degree + p + 1].copy()
            if np.abs(row).max() == 0.0:
                continue
            if chirality:
                row = row * (-1.0) ** np.arange(-p, p + 1)
            out[p, self.max_degree - p : self.max_degree + p + 1] = row @ special.wigner_u(p, a, b, g)
        return DistributionCoefficients(self.max_degree, out, dict(self.meta))

    def copy(self):
        return DistributionCoefficients(self.max_degree, self.coeffs.copy(), dict(self.meta))


def density_grid(dist, theta, phi):
    """Orientation density as a function of viewing direction (theta, phi).

    Returns the real density values; raises if the imaginary residue of the
    expansion exceeds 1e-8 (a constraint violation), residues below 1e-10
    are silently discarded.
    """
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    vals = np.zeros(np.broadcast(theta, phi).shape, dtype=complex)
    for p in range(dist.max_degree + 1):
        scale = math.sqrt(4.0 * math.pi / (2 * p + 1))
        for u in range(-p, p + 1):
            b = dist.coeff(p, u)
            if b == 0.0:
                continue
            vals = vals + b * scale * special.sph_harm(p, u, theta, phi)
    resid = float(np.abs(vals.imag).max()) if vals.size else 0.0
    scale_ref = max(float(np.abs(vals.real).max()), 1.0)
    if resid > 1e-8 * scale_ref:
        raise ValidationError(f"density has imaginary residue {resid:.2e}")
    return vals.real


def density_at(dist, rot):
    """Density value at one rotation (ZYZ angles or 3x3 matrix)."""
    a, b, _ = as_euler(rot)
    theta, phi = viewing_angles(a, b)
    return float(density_grid(dist, theta, phi))


def _sphere_quadrature(n_theta, n_phi):
    nodes, w = np.polynomial.legendre.leggauss(n_theta)
    theta = np.arccos(nodes)
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    weights = np.repeat(w, n_phi) * (2.0 * np.pi / n_phi)
    return th.ravel(), ph.ravel(), weights


def random_distribution(max_degree, seed, concentration=2.0, n_modes=None):
    """Generic orientation-density coefficients of even degree <= max_degree.

    A random mixture of von Mises-Fisher kernels on the viewing sphere is
    antipodally symmetrized, projected onto the harmonic basis, and
    truncated.  Coefficient magnitude decays with p, so the truncated
    density stays near-nonnegative; the concentration is backed off
    automatically if truncation drives it negative.
    """
    if max_degree % 2 or max_degree < 0:
        raise ValidationError("distribution bandlimit must be even and nonnegative")
    rng = np.random.default_rng(seed)
    if concentration <= 0.0 or max_degree == 0:
        return DistributionCoefficients.uniform(max_degree)
    if n_modes is None:
        n_modes = int(rng.integers(3, 6))
    # Mixtures of axially symmetric kernels with coplanar axes carry an exact
    # mirror symmetry, which breaks genericity (and with it identifiability);
    # redraw until the axes robustly span three dimensions.
    for _ in range(64):
        centers = rng.standard_normal((n_modes, 3))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        if n_modes >= 3 and np.linalg.svd(centers, compute_uv=False)[-1] > 0.3:
            break
    weights = rng.dirichlet(np.ones(n_modes))
    kappa_jitter = rng.uniform(0.7, 1.3, size=n_modes)

    theta, phi, wq = _sphere_quadrature(96, 192)
    xyz = np.column_stack(
        [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)]
    )
    kappa = float(concentration)
    for _ in range(9):
        kappas = kappa * kappa_jitter
        inner = xyz @ centers.T
        g = 0.5 * (np.exp(inner * kappas - kappas) + np.exp(-inner * kappas - kappas)) @ weights
        coeffs = np.zeros((max_degree + 1, 2 * max_degree + 1), dtype=complex)
        for p in range(0, max_degree + 1, 2):
            scale = math.sqrt((2 * p + 1) / (4.0 * math.pi))
            for u in range(-p, p + 1):
                y = special.sph_harm(p, u, theta, phi)
                coeffs[p, u + max_degree] = scale * np.sum(wq * g * np.conj(y))
        b00 = coeffs[0, max_degree].real
        coeffs /= b00
        coeffs[0, max_degree] = 1.0
        dist = DistributionCoefficients(
            max_degree, coeffs, {"kind": "vmf-mixture", "seed": seed, "kappa": kappa}
        )
        vals = density_grid(dist, theta, phi)
        if vals.min() >= -1e-9 * max(vals.max(), 1.0):
            return dist
        kappa *= 0.7
    raise ValidationError("could not produce a near-nonnegative truncated density")


# ---------------------------------------------------------------------------
# block-orthogonal unknowns


@dataclass
class BlockOrthogonal:
    """Real orthogonal blocks O_0, ..., O_L; O_0 = 1 and O_1 = I when pinned."""

    blocks: list

    @property
    def bandlimit(self):
        return len(self.blocks) - 1

    @classmethod
    def identity(cls, bandlimit):
        return cls([np.eye(2 * ell + 1) for ell in range(bandlimit + 1)])

    @classmethod
    def random(cls, bandlimit, rng, pinned=True):
        blocks = []
        for ell in range(bandlimit + 1):
            if pinned and ell == 0:
                blocks.append(np.eye(1))
            elif pinned and ell == 1:
                blocks.append(np.eye(3))
            else:
                q, r = np.linalg.qr(rng.standard_normal((2 * ell + 1, 2 * ell + 1)))
                blocks.append(q * np.sign(np.diag(r)))
        return cls(blocks)

    def block_diag(self):
        dim = sum(2 * ell + 1 for ell in range(self.bandlimit + 1))
        out = np.zeros((dim, dim))
        off = 0
        for b in self.blocks:
            n = b.shape[0]
            out[off : off + n, off : off + n] = b
            off += n
        return out

    def orthogonality_defect(self):
        return max(
            float(np.abs(b @ b.T - np.eye(b.shape[0])).max()) for b in self.blocks
        )

    def copy(self):
        return BlockOrthogonal([b.copy() for b in self.blocks])


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    passed: bool
    worst: float
    checks: list

    def __str__(self):
        lines = [f"validation: {'pass' if self.passed else 'FAIL'} (worst {self.worst:.3e})"]
        for name, value, tol, ok in self.checks:
            lines.append(f"  {'ok ' if ok else 'BAD'} {name}: {value:.3e} (tol {tol:.1e})")
        return "\n".join(lines)


def validate(obj):
    """Run all invariants of a domain object, reporting the worst violation."""
    checks = []
    if isinstance(obj, VolumeCoefficients):
        if obj.real_volume:
            checks.append(("real-basis parity", obj.parity_defect(), 1e-12))
        s = obj.singular_values()
        rank_defect = 0.0 if s[-1] > 1e-10 * s[0] else 1.0
        checks.append(("full column rank of concatenation", rank_defect, 0.5))
    elif isinstance(obj, DistributionCoefficients):
        checks.append(("conjugate symmetry", obj.conj_symmetry_defect(), 1e-12))
        checks.append(("normalization B_{0,0} = 1", abs(obj.coeff(0, 0) - 1.0), 1e-12))
        odd = 0.0
        for p in range(1, obj.max_degree + 1, 2):
            odd = max(odd, float(np.abs(obj.coeffs[p]).max()))
        checks.append(("odd-degree coefficients vanish", odd, 1e-14))
    elif isinstance(obj, BlockOrthogonal):
        checks.append(("block orthogonality", obj.orthogonality_defect(), 1e-10))
    elif isinstance(obj, PolarGrid):
        try:
            obj.check()
            checks.append(("grid monotone", 0.0, 1.0))
        except ValidationError:
            checks.append(("grid monotone", 1.0, 1e-300))
    else:
        raise TypeError(f"no validators for {type(obj).__name__}")
    worst = max((v / t for _, v, t in checks), default=0.0)
    return ValidationReport(
        passed=all(v <= t for _, v, t in checks),
        worst=float(worst),
        checks=[(n, v, t, v <= t) for n, v, t in checks],
    )
