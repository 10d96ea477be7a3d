"""Scalar special-function and SO(3) representation kernels.

Conventions, fixed once here and relied on by every other module:

* Associated Legendre functions P_l^n carry the Condon-Shortley phase,
  i.e. P_l^n(x) = (-1)^n / (2^l l!) (1-x^2)^{n/2} d^{l+n}/dx^{l+n} (x^2-1)^l.
* Complex spherical harmonics
  Y_l^m(theta, phi) = sqrt((2l+1)/(4 pi) (l-m)!/(l+m)!) P_l^m(cos theta) e^{i m phi}.
* Rotations are ZYZ Euler triples, R = Rz(alpha) Ry(beta) Rz(gamma).
* The degree-l representation matrix U^l(R) is pinned by the action
  Y_l^m(R u) = sum_n U^l_{mn}(R) Y_l^n(u), equivalently
  U^l_{mn}(alpha, beta, gamma) = e^{i m alpha} d^l_{mn}(beta) e^{i n gamma}
  with d^l the real Wigner small-d matrix.  Under this convention
  U^l(z(alpha)) = diag(e^{-i l alpha}, ..., e^{i l alpha}) and the column
  identity U^l_{m0}(R) = sqrt(4 pi/(2l+1)) Y_l^m(theta(R), phi(R)) holds,
  with (theta(R), phi(R)) the spherical angles of the third column of R.

All matrices indexed by an order m use ascending storage order
m = -l, ..., l, so entry (m, n) lives at [m + l, n + l].
"""

import math
from functools import lru_cache

import numpy as np

MAX_DEGREE = 64


def _log_factorial(n):
    return math.lgamma(n + 1)


def legendre_p(ell, x):
    """Legendre polynomial P_ell(x) by the three-term recurrence.

    Accepts scalar or array x with |x| <= 1 (tolerance 1e-12).
    """
    if ell < 0:
        raise ValueError("degree must be nonnegative")
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > 1.0 + 1e-12):
        raise ValueError("argument outside [-1, 1]")
    p_prev = np.ones_like(x)
    if ell == 0:
        return p_prev if p_prev.ndim else float(p_prev)
    p = x.copy()
    for k in range(1, ell):
        p, p_prev = ((2 * k + 1) * x * p - k * p_prev) / (k + 1), p
    return p if p.ndim else float(p)


def assoc_legendre_p(ell, n, x):
    """Associated Legendre function P_ell^n(x), Condon-Shortley phase.

    Negative orders follow the reflection identity
    P_ell^{-n} = (-1)^n (ell-n)!/(ell+n)! P_ell^n.  Returns 0 for |n| > ell.
    """
    if ell < 0:
        raise ValueError("degree must be nonnegative")
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > 1.0 + 1e-12):
        raise ValueError("argument outside [-1, 1]")
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    if abs(n) > ell:
        out = np.zeros_like(x)
        return float(out[0]) if scalar else out
    if n < 0:
        scale = math.exp(_log_factorial(ell + n) - _log_factorial(ell - n))
        out = (-1) ** (-n) * scale * assoc_legendre_p(ell, -n, x)
        return float(out[0]) if scalar else np.asarray(out)
    # P_n^n, then raise the degree.
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    pmm = np.ones_like(x)
    for k in range(1, n + 1):
        pmm = pmm * (-(2 * k - 1)) * s
    if ell == n:
        out = pmm
    else:
        pm1 = x * (2 * n + 1) * pmm
        if ell == n + 1:
            out = pm1
        else:
            for k in range(n + 2, ell + 1):
                pm1, pmm = ((2 * k - 1) * x * pm1 - (k + n - 1) * pmm) / (k - n), pm1
            out = pm1
    return float(out[0]) if scalar else out


def n_const(ell, n):
    """Slice normalizer N_ell^n = sqrt((2l+1)/4pi) sqrt((l-n)!/(l+n)!) P_l^n(0).

    Zero exactly when ell + n is odd (parity short-circuit); otherwise
    evaluated in closed form with log-space factorials.
    """
    if abs(n) > ell:
        raise ValueError("|n| must not exceed ell")
    if (ell + n) % 2:
        return 0.0
    sign = -1.0 if ((ell + n) // 2) % 2 else 1.0
    log_mag = (
        0.5 * math.log((2 * ell + 1) / (4.0 * math.pi))
        - ell * math.log(2.0)
        + 0.5 * (_log_factorial(ell + n) + _log_factorial(ell - n))
        - _log_factorial((ell + n) // 2)
        - _log_factorial((ell - n) // 2)
    )
    return sign * math.exp(log_mag)


def cal_n_const(ell, n):
    """N_ell^n gated by the support indicators: 0 unless ell >= |n| and ell = n (mod 2)."""
    if ell < abs(n) or (ell - n) % 2:
        return 0.0
    return n_const(ell, n)


@lru_cache(maxsize=None)
def clebsch_gordan(l1, m1, l2, m2, l3, m3):
    """Clebsch-Gordan coefficient C(l1,m1; l2,m2 | l3,m3).

    Racah's single-sum factorial formula with log-space factorials; stable
    for degrees up to MAX_DEGREE.  Selection-rule violations return 0.
    """
    if m3 != m1 + m2:
        return 0.0
    if l3 < abs(l1 - l2) or l3 > l1 + l2:
        return 0.0
    if abs(m1) > l1 or abs(m2) > l2 or abs(m3) > l3:
        return 0.0
    log_pref = 0.5 * (
        math.log(2 * l3 + 1)
        + _log_factorial(l1 + l2 - l3)
        + _log_factorial(l1 - l2 + l3)
        + _log_factorial(-l1 + l2 + l3)
        - _log_factorial(l1 + l2 + l3 + 1)
        + _log_factorial(l1 - m1)
        + _log_factorial(l1 + m1)
        + _log_factorial(l2 - m2)
        + _log_factorial(l2 + m2)
        + _log_factorial(l3 - m3)
        + _log_factorial(l3 + m3)
    )
    k_lo = max(0, l2 - l3 - m1, l1 + m2 - l3)
    k_hi = min(l1 + l2 - l3, l1 - m1, l2 + m2)
    total = 0.0
    for k in range(k_lo, k_hi + 1):
        log_den = (
            _log_factorial(k)
            + _log_factorial(l1 + l2 - l3 - k)
            + _log_factorial(l1 - m1 - k)
            + _log_factorial(l2 + m2 - k)
            + _log_factorial(l3 - l2 + m1 + k)
            + _log_factorial(l3 - l1 - m2 + k)
        )
        total += (-1.0) ** k * math.exp(log_pref - log_den)
    return total


def cg_product(ell, ellp, m, mp, n, np_, ellpp):
    """Product of the two coupling coefficients attached to degree ellpp:

    C(ell,m; ellp,mp | ellpp, m+mp) * C(ell,n; ellp,np | ellpp, n+np).
    """
    first = clebsch_gordan(ell, m, ellp, mp, ellpp, m + mp)
    if first == 0.0:
        return 0.0
    return first * clebsch_gordan(ell, n, ellp, np_, ellpp, n + np_)


@lru_cache(maxsize=None)
def _wigner_d_terms(ell, m, n):
    """Terms (coef, cos_pow, sin_pow) of the factorial sum for d^ell_{mn}."""
    pref = 0.5 * (
        _log_factorial(ell + m)
        + _log_factorial(ell - m)
        + _log_factorial(ell + n)
        + _log_factorial(ell - n)
    )
    terms = []
    for k in range(max(0, m - n), min(ell + m, ell - n) + 1):
        log_den = (
            _log_factorial(ell + m - k)
            + _log_factorial(k)
            + _log_factorial(ell - n - k)
            + _log_factorial(n - m + k)
        )
        coef = (-1.0) ** k * math.exp(pref - log_den)
        terms.append((coef, 2 * ell + m - n - 2 * k, n - m + 2 * k))
    return tuple(terms)


def wigner_d(ell, beta):
    """Real Wigner small-d matrix d^ell(beta), shape (..., 2ell+1, 2ell+1).

    beta may be a scalar or any array; the matrix dimensions are appended.
    """
    if ell > MAX_DEGREE:
        raise ValueError(f"degree {ell} exceeds supported maximum {MAX_DEGREE}")
    beta = np.asarray(beta, dtype=float)
    ch = np.cos(beta / 2.0)
    sh = np.sin(beta / 2.0)
    # power tables up to 2*ell, indexed [power, ...]
    pows_c = np.ones((2 * ell + 1,) + beta.shape)
    pows_s = np.ones((2 * ell + 1,) + beta.shape)
    for p in range(1, 2 * ell + 1):
        pows_c[p] = pows_c[p - 1] * ch
        pows_s[p] = pows_s[p - 1] * sh
    d = np.zeros(beta.shape + (2 * ell + 1, 2 * ell + 1))
    for m in range(-ell, ell + 1):
        for n in range(-ell, ell + 1):
            acc = np.zeros(beta.shape)
            for coef, pc, ps in _wigner_d_terms(ell, m, n):
                acc += coef * pows_c[pc] * pows_s[ps]
            d[..., m + ell, n + ell] = acc
    return d


def wigner_u(ell, alpha, beta, gamma):
    """Degree-ell representation matrix U^ell for ZYZ angles, shape (..., 2ell+1, 2ell+1).

    U^ell_{mn} = exp(i m alpha) d^ell_{mn}(beta) exp(i n gamma); see module
    docstring for the action convention this realizes.
    """
    alpha, beta, gamma = np.broadcast_arrays(
        np.asarray(alpha, dtype=float),
        np.asarray(beta, dtype=float),
        np.asarray(gamma, dtype=float),
    )
    d = wigner_d(ell, beta)
    ms = np.arange(-ell, ell + 1)
    left = np.exp(1j * np.multiply.outer(alpha, ms))
    right = np.exp(1j * np.multiply.outer(gamma, ms))
    return left[..., :, None] * d * right[..., None, :]


def wigner_u_matrix(ell, rot):
    """U^ell for a 3x3 rotation matrix (converted to ZYZ angles)."""
    from .rotations import euler_from_matrix

    return wigner_u(ell, *euler_from_matrix(rot))


def wigner_u_reflection(ell):
    """Representation of the reflection J = diag(1, 1, -1) on degree ell.

    Diagonal with entries (-1)^{ell+m}; squares to the identity.
    """
    ms = np.arange(-ell, ell + 1)
    return np.diag(((-1.0) ** (ell + ms)).astype(complex))


def q_matrix(ell):
    """Unitary change of basis Q_ell from real to complex harmonic coefficients.

    Nonzero only on the main diagonal and anti-diagonal; a real-basis
    coefficient row vector a maps to the complex one as a @ Q_ell.
    """
    q = np.zeros((2 * ell + 1, 2 * ell + 1), dtype=complex)
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    for m in range(-ell, ell + 1):
        if m < 0:
            q[m + ell, m + ell] = 1j * inv_sqrt2
            q[-m + ell, m + ell] = inv_sqrt2
        elif m == 0:
            q[ell, ell] = 1.0
        else:
            q[m + ell, m + ell] = (-1.0) ** m * inv_sqrt2
            q[-m + ell, m + ell] = -((-1.0) ** m) * 1j * inv_sqrt2
    return q


def sph_harm(ell, m, theta, phi):
    """Complex spherical harmonic Y_ell^m(theta, phi), theta polar, phi azimuth."""
    if abs(m) > ell:
        raise ValueError("|m| must not exceed ell")
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    norm = math.exp(
        0.5
        * (
            math.log((2 * ell + 1) / (4.0 * math.pi))
            + _log_factorial(ell - m)
            - _log_factorial(ell + m)
        )
    )
    vals = norm * assoc_legendre_p(ell, m, np.cos(theta)) * np.exp(1j * m * phi)
    return vals if np.ndim(vals) else complex(vals)
