"""Closed-form SE(3) / SO(3) numerics.

Conventions used throughout the package:

* A pose is a homogeneous ``(..., 4, 4)`` float64 array ``[[R, t], [0, 1]]``.
* A twist is a ``(..., 6)`` array ordered translation first, ``(v, w)``.
* Derivatives with respect to a pose are *left* perturbations in the world
  frame: ``D f / D H`` has component ``j`` equal to
  ``d/dtau f(Expmap(tau e_j) H)`` at ``tau = 0``.

Every function broadcasts over leading batch dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from se3dif import _jit
from se3dif.errors import AngleNearPi

SMALL_ANGLE = 1e-8
PI_MARGIN = 1e-6
# series expansions of the Jacobian coefficients suffer cancellation long
# before SMALL_ANGLE; below this angle their Taylor forms are used instead
SERIES_ANGLE = 1e-2


# --------------------------------------------------------------------------
# basic constructors
# --------------------------------------------------------------------------


def skew(v: np.ndarray) -> np.ndarray:
    """Hat operator for 3-vectors, ``skew(a) @ b == cross(a, b)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`skew` (reads the lower-left entries)."""
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def make_pose(rotation, translation) -> np.ndarray:
    rotation = np.asarray(rotation, dtype=float)
    translation = np.asarray(translation, dtype=float)
    batch = np.broadcast_shapes(rotation.shape[:-2], translation.shape[:-1])
    out = np.zeros(batch + (4, 4))
    out[..., :3, :3] = rotation
    out[..., :3, 3] = translation
    out[..., 3, 3] = 1.0
    return out


def identity(batch: tuple[int, ...] = ()) -> np.ndarray:
    return np.broadcast_to(np.eye(4), tuple(batch) + (4, 4)).copy()


def rotation(pose: np.ndarray) -> np.ndarray:
    return pose[..., :3, :3]


def translation(pose: np.ndarray) -> np.ndarray:
    return pose[..., :3, 3]


def rot_x(angle: float) -> np.ndarray:
    return so3_exp(np.array([angle, 0.0, 0.0]))


def rot_y(angle: float) -> np.ndarray:
    return so3_exp(np.array([0.0, angle, 0.0]))


def rot_z(angle) -> np.ndarray:
    angle = np.asarray(angle, dtype=float)
    c, s = np.cos(angle), np.sin(angle)
    out = np.zeros(angle.shape + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    out[..., 2, 2] = 1.0
    return out


def pose_error(pose: np.ndarray) -> float:
    """Largest violation of the rotation invariants over a batch of poses."""
    r = rotation(np.asarray(pose, dtype=float))
    ortho = np.linalg.norm(np.swapaxes(r, -1, -2) @ r - np.eye(3), axis=(-2, -1))
    det = np.abs(np.linalg.det(r) - 1.0)
    return float(np.max(np.maximum(ortho, det), initial=0.0))


# --------------------------------------------------------------------------
# group operations
# --------------------------------------------------------------------------


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.matmul(a, b)


def inverse(pose: np.ndarray) -> np.ndarray:
    r = rotation(pose)
    rt = np.swapaxes(r, -1, -2)
    t = translation(pose)
    return make_pose(rt, -np.einsum("...ij,...j->...i", rt, t))


def transform_point(pose: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply ``pose`` to points ``x`` of shape ``(..., 3)``: rotate, then translate."""
    return np.einsum("...ij,...j->...i", rotation(pose), x) + translation(pose)


def adjoint(pose: np.ndarray) -> np.ndarray:
    """6x6 adjoint ``[[R, [t]x R], [0, R]]`` for the (v, w) ordering."""
    r = rotation(pose)
    t = translation(pose)
    out = np.zeros(pose.shape[:-2] + (6, 6))
    out[..., :3, :3] = r
    out[..., 3:, 3:] = r
    out[..., :3, 3:] = skew(t) @ r
    return out


def ad(xi: np.ndarray) -> np.ndarray:
    """Lie-algebra adjoint (the matrix of ``[xi, .]``)."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    w_hat = skew(xi[..., 3:])
    out[..., :3, :3] = w_hat
    out[..., 3:, 3:] = w_hat
    out[..., :3, 3:] = skew(xi[..., :3])
    return out


# --------------------------------------------------------------------------
# SO(3)
# --------------------------------------------------------------------------


def _sinc(theta):
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    return np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)


def _one_minus_cos_over_sq(theta):
    # 2 sin^2(theta/2) / theta^2, free of the 1 - cos cancellation
    half = 0.5 * theta
    return 0.5 * _sinc(half) ** 2


def _theta_minus_sin_over_cube(theta):
    small = theta < SERIES_ANGLE
    safe = np.where(small, 1.0, theta)
    t2 = theta**2
    series = 1.0 / 6.0 - t2 / 120.0 + t2**2 / 5040.0
    return np.where(small, series, (safe - np.sin(safe)) / safe**3)


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula; second-order Taylor below ``SMALL_ANGLE``."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    a = _sinc(theta)[..., None, None]
    b = _one_minus_cos_over_sq(theta)[..., None, None]
    w_hat = skew(w)
    return np.eye(3) + a * w_hat + b * (w_hat @ w_hat)


def rotation_angle(r: np.ndarray) -> np.ndarray:
    """Angle of a rotation matrix, valid on the whole ``[0, pi]`` range."""
    s = 0.5 * np.linalg.norm(vee(r - np.swapaxes(r, -1, -2)), axis=-1)
    c = 0.5 * (np.trace(r, axis1=-2, axis2=-1) - 1.0)
    return np.arctan2(s, c)


def _check_angle(theta: np.ndarray) -> None:
    bad = theta > math.pi - PI_MARGIN
    if np.any(bad):
        idx = np.argwhere(np.atleast_1d(bad)).ravel().tolist()
        raise AngleNearPi(
            f"rotation angle within {PI_MARGIN:g} of pi (max {float(np.max(theta)):.9f})",
            indices=idx,
        )


def so3_log(r: np.ndarray) -> np.ndarray:
    """Principal-branch rotation vector; raises :class:`AngleNearPi` near pi."""
    r = np.asarray(r, dtype=float)
    skew_part = vee(r - np.swapaxes(r, -1, -2))
    theta = rotation_angle(r)
    _check_angle(theta)
    # theta / (2 sin theta), with its Taylor form near zero
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    scale = np.where(small, 0.5 * (1.0 + theta**2 / 6.0), safe / (2.0 * np.sin(safe)))
    return scale[..., None] * skew_part


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w, axis=-1)
    b = _one_minus_cos_over_sq(theta)[..., None, None]
    c = _theta_minus_sin_over_cube(theta)[..., None, None]
    w_hat = skew(w)
    return np.eye(3) + b * w_hat + c * (w_hat @ w_hat)


def _inv_jac_coeff(theta):
    # (1 - (theta/2) cot(theta/2)) / theta^2
    small = theta < SERIES_ANGLE
    safe = np.where(small, 1.0, theta)
    half = 0.5 * safe
    exact = (1.0 - half * np.cos(half) / np.sin(half)) / safe**2
    t2 = theta**2
    series = 1.0 / 12.0 + t2 / 720.0 + t2**2 / 30240.0
    return np.where(small, series, exact)


def so3_inv_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w, axis=-1)
    d = _inv_jac_coeff(theta)[..., None, None]
    w_hat = skew(w)
    return np.eye(3) - 0.5 * w_hat + d * (w_hat @ w_hat)


# --------------------------------------------------------------------------
# SE(3) maps
# --------------------------------------------------------------------------


def expmap(xi: np.ndarray) -> np.ndarray:
    """Twist (v, w) to pose: ``R = Exp(w)``, ``t = J_so3(w) v``."""
    xi = np.asarray(xi, dtype=float)
    w = xi[..., 3:]
    r = so3_exp(w)
    t = np.einsum("...ij,...j->...i", so3_left_jacobian(w), xi[..., :3])
    return make_pose(r, t)


def logmap(pose: np.ndarray) -> np.ndarray:
    """Pose to twist on the principal branch; raises :class:`AngleNearPi`."""
    pose = np.asarray(pose, dtype=float)
    w = so3_log(rotation(pose))
    v = np.einsum("...ij,...j->...i", so3_inv_left_jacobian(w), translation(pose))
    return np.concatenate([v, w], axis=-1)


def _q_matrix(xi: np.ndarray) -> np.ndarray:
    """Upper-right block of the SE(3) left Jacobian."""
    rho_hat = skew(xi[..., :3])
    phi_hat = skew(xi[..., 3:])
    theta = np.linalg.norm(xi[..., 3:], axis=-1)
    small = theta < SERIES_ANGLE
    safe = np.where(small, 1.0, theta)
    t2 = theta**2
    c1 = _theta_minus_sin_over_cube(theta)
    c2 = np.where(
        small,
        1.0 / 24.0 - t2 / 720.0 + t2**2 / 40320.0,
        (safe**2 + 2.0 * np.cos(safe) - 2.0) / (2.0 * safe**4),
    )
    c3 = np.where(
        small,
        1.0 / 120.0 - t2 / 2520.0 + t2**2 / 120960.0,
        (2.0 * safe - 3.0 * np.sin(safe) + safe * np.cos(safe)) / (2.0 * safe**5),
    )
    pr = phi_hat @ rho_hat
    rp = rho_hat @ phi_hat
    prp = pr @ phi_hat
    pp = phi_hat @ phi_hat
    return (
        0.5 * rho_hat
        + c1[..., None, None] * (pr + rp + prp)
        + c2[..., None, None] * (pp @ rho_hat + rho_hat @ pp - 3.0 * prp)
        + c3[..., None, None] * (prp @ phi_hat + pp @ rp)
    )


def left_jacobian(xi: np.ndarray) -> np.ndarray:
    """SE(3) left Jacobian: ``Expmap(xi + d) ~ Expmap(J_l d) Expmap(xi)``."""
    xi = np.asarray(xi, dtype=float)
    j = so3_left_jacobian(xi[..., 3:])
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = j
    out[..., 3:, 3:] = j
    out[..., :3, 3:] = _q_matrix(xi)
    return out


def inv_left_jacobian(xi: np.ndarray) -> np.ndarray:
    """Inverse SE(3) left Jacobian, the derivative of Logmap at ``Expmap(xi)``.

    Raises :class:`AngleNearPi` when the rotation part is within 1e-6 of pi.
    Below ``SMALL_ANGLE`` total norm it is ``I - ad(xi) / 2``.
    """
    xi = np.asarray(xi, dtype=float)
    theta = np.linalg.norm(xi[..., 3:], axis=-1)
    _check_angle(theta)
    j_inv = so3_inv_left_jacobian(xi[..., 3:])
    q = _q_matrix(xi)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = j_inv
    out[..., 3:, 3:] = j_inv
    out[..., :3, 3:] = -j_inv @ q @ j_inv
    tiny = np.linalg.norm(xi, axis=-1) < SMALL_ANGLE
    if np.any(tiny):
        out = np.where(tiny[..., None, None], np.eye(6) - 0.5 * ad(xi), out)
    return out


# --------------------------------------------------------------------------
# Gaussians on SE(3)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LieGaussian:
    """Isotropic Gaussian ``q(H) ~ exp(-|Logmap(mean^-1 H)|^2 / (2 sigma^2))``."""

    mean: np.ndarray
    sigma: float | np.ndarray  # scalar, or one value per batched mean

    def __post_init__(self):
        if not np.all(np.asarray(self.sigma) > 0):
            raise ValueError(f"sigma must be positive, got {self.sigma}")


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sample_lie_gaussian(g: LieGaussian, rng=None, size: int | None = None) -> np.ndarray:
    """Draw ``mean @ Expmap(eps)`` with ``eps ~ N(0, sigma^2 I6)``."""
    rng = _as_rng(rng)
    shape = (6,) if size is None else (size, 6)
    eps = np.asarray(g.sigma, dtype=float)[..., None] * rng.standard_normal(shape)
    return compose(g.mean, expmap(eps))


def lie_gaussian_log_density(g: LieGaussian, query: np.ndarray) -> np.ndarray:
    """Unnormalized log density."""
    phi = logmap(compose(inverse(g.mean), query))
    return -0.5 * np.sum(phi**2, axis=-1) / np.asarray(g.sigma, dtype=float) ** 2


def lie_gaussian_score(g: LieGaussian, query: np.ndarray) -> np.ndarray:
    """Left-perturbation gradient of the log density at ``query``.

    Chain rule through ``phi = Logmap(mean^-1 query)``:
    ``-(phi / sigma^2)^T J_l^-1(phi) Adj(mean^-1)``, returned as a 6-vector.
    """
    mean_inv = inverse(g.mean)
    phi = logmap(compose(mean_inv, query))
    row = -phi / np.asarray(g.sigma, dtype=float)[..., None] ** 2
    row = np.einsum("...i,...ij->...j", row, inv_left_jacobian(phi))
    return np.einsum("...i,...ij->...j", row, adjoint(mean_inv))


# --------------------------------------------------------------------------
# distances
# --------------------------------------------------------------------------


def se3_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``|t_a - t_b| + |Logmap(R_a^-1 R_b)|``; raises near a pi relative angle."""
    rel = np.swapaxes(rotation(a), -1, -2) @ rotation(b)
    theta = rotation_angle(rel)
    _check_angle(theta)
    return np.linalg.norm(translation(a) - translation(b), axis=-1) + theta


def _pairwise_numpy(ta, ra, tb, rb):
    dt = np.linalg.norm(ta[:, None, :] - tb[None, :, :], axis=-1)
    # trace(Ra^T Rb) = sum_ij Ra_ij Rb_ij
    tr = np.einsum("aij,bij->ab", ra, rb)
    rel = np.einsum("aji,bjk->abik", ra, rb)
    s = 0.5 * np.sqrt(
        (rel[..., 2, 1] - rel[..., 1, 2]) ** 2
        + (rel[..., 0, 2] - rel[..., 2, 0]) ** 2
        + (rel[..., 1, 0] - rel[..., 0, 1]) ** 2
    )
    theta = np.arctan2(s, 0.5 * (tr - 1.0))
    return dt, theta


@_jit.njit
def _pairwise_numba(ta, ra, tb, rb):
    na = ta.shape[0]
    nb = tb.shape[0]
    dt = np.empty((na, nb))
    theta = np.empty((na, nb))
    rel = np.empty((3, 3))
    for i in range(na):
        for j in range(nb):
            d0 = ta[i, 0] - tb[j, 0]
            d1 = ta[i, 1] - tb[j, 1]
            d2 = ta[i, 2] - tb[j, 2]
            dt[i, j] = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            for r in range(3):
                for c in range(3):
                    acc = 0.0
                    for k in range(3):
                        acc += ra[i, k, r] * rb[j, k, c]
                    rel[r, c] = acc
            s = 0.5 * math.sqrt(
                (rel[2, 1] - rel[1, 2]) ** 2
                + (rel[0, 2] - rel[2, 0]) ** 2
                + (rel[1, 0] - rel[0, 1]) ** 2
            )
            c = 0.5 * (rel[0, 0] + rel[1, 1] + rel[2, 2] - 1.0)
            theta[i, j] = math.atan2(s, c)
    return dt, theta


def pairwise_se3_distance(a: np.ndarray, b: np.ndarray, check: bool = True) -> np.ndarray:
    """Matrix of :func:`se3_distance` between two pose sets ``(n,4,4)``, ``(m,4,4)``."""
    a = np.ascontiguousarray(a, dtype=float)
    b = np.ascontiguousarray(b, dtype=float)
    kernel = _jit.select(_pairwise_numba, _pairwise_numpy)
    dt, theta = kernel(
        np.ascontiguousarray(translation(a)),
        np.ascontiguousarray(rotation(a)),
        np.ascontiguousarray(translation(b)),
        np.ascontiguousarray(rotation(b)),
    )
    if check:
        _check_angle(theta)
    return dt + theta
