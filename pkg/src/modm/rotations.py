"""Rotation parametrizations: ZYZ Euler angles, matrices, Haar sampling."""

import numpy as np

J_REFLECTION = np.diag([1.0, 1.0, -1.0])


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def matrix_from_euler(alpha, beta, gamma):
    """3x3 rotation Rz(alpha) @ Ry(beta) @ Rz(gamma)."""
    return rot_z(alpha) @ rot_y(beta) @ rot_z(gamma)


def euler_from_matrix(rot):
    """ZYZ angles (alpha, beta, gamma) of a rotation matrix.

    Degenerate cases beta = 0 or pi put all in-plane rotation into alpha.
    """
    rot = np.asarray(rot)
    r22 = np.clip(rot[2, 2], -1.0, 1.0)
    if r22 < 1.0 - 1e-14:
        if r22 > -1.0 + 1e-14:
            beta = np.arccos(r22)
            alpha = np.arctan2(rot[1, 2], rot[0, 2])
            gamma = np.arctan2(rot[2, 1], -rot[2, 0])
        else:
            beta = np.pi
            alpha = -np.arctan2(rot[1, 0], rot[1, 1])
            gamma = 0.0
    else:
        beta = 0.0
        alpha = np.arctan2(rot[1, 0], rot[1, 1])
        gamma = 0.0
    return float(alpha % (2 * np.pi)), float(beta), float(gamma % (2 * np.pi))


def random_euler(n, rng):
    """n Haar-uniform rotations as ZYZ angle triples, shape (n, 3)."""
    alpha = rng.uniform(0.0, 2 * np.pi, size=n)
    beta = np.arccos(rng.uniform(-1.0, 1.0, size=n))
    gamma = rng.uniform(0.0, 2 * np.pi, size=n)
    return np.column_stack([alpha, beta, gamma])


def viewing_angles(alpha, beta, gamma=None):
    """Spherical angles (theta, phi) of the third column of Rz(a) Ry(b) Rz(g).

    The third column is independent of gamma: theta = beta, phi = alpha.
    """
    del gamma
    return np.asarray(beta, dtype=float), np.asarray(alpha, dtype=float) % (2 * np.pi)


def as_euler(rot):
    """Coerce a rotation given as a 3-vector of angles or a 3x3 matrix to angles."""
    rot = np.asarray(rot, dtype=float)
    if rot.shape == (3,):
        return float(rot[0]), float(rot[1]), float(rot[2])
    if rot.shape == (3, 3):
        return euler_from_matrix(rot)
    raise ValueError("rotation must be a ZYZ angle triple or a 3x3 matrix")
