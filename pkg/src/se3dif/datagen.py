"""Analytic objects, grasp manifolds and datasets.

Stands in for mesh datasets and a physics simulator: grasp "success" is the
distance of a pose to a closed-form grasp manifold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from se3dif import liegroup as lg

SIDE, TOP = 0, 1
FAMILY_NAMES = {SIDE: "side", TOP: "top"}
DEFAULT_SUCCESS_THRESHOLD = 0.3


@dataclass(frozen=True)
class AnalyticObject:
    """Capped cylinder (axis z, centered at the origin) or axis-aligned box."""

    kind: str
    dims: tuple
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if self.kind not in ("cylinder", "box"):
            raise ValueError(f"unknown object kind {self.kind!r}")
        expected = 2 if self.kind == "cylinder" else 3
        if len(self.dims) != expected or min(self.dims) <= 0:
            raise ValueError(f"{self.kind} needs {expected} positive dimensions")

    @classmethod
    def cylinder(cls, radius: float = 0.04, height: float = 0.12, pose=None):
        return cls("cylinder", (float(radius), float(height)), np.eye(4) if pose is None else np.asarray(pose, float))

    @classmethod
    def box(cls, half_extents, pose=None):
        return cls("box", tuple(float(h) for h in half_extents), np.eye(4) if pose is None else np.asarray(pose, float))

    @property
    def radius(self) -> float:
        return self.dims[0]

    @property
    def height(self) -> float:
        return self.dims[1]

    def half_extents(self) -> np.ndarray:
        if self.kind == "box":
            return np.array(self.dims)
        r, h = self.dims
        return np.array([r, r, 0.5 * h])


def cylinder_sdf(x: np.ndarray, radius: float, height: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    d = np.stack([np.hypot(x[..., 0], x[..., 1]) - radius, np.abs(x[..., 2]) - 0.5 * height], axis=-1)
    inside = np.minimum(np.max(d, axis=-1), 0.0)
    return inside + np.linalg.norm(np.maximum(d, 0.0), axis=-1)


def box_sdf(x: np.ndarray, half_extents) -> np.ndarray:
    q = np.abs(np.asarray(x, dtype=float)) - np.asarray(half_extents, dtype=float)
    return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(np.max(q, axis=-1), 0.0)


def analytic_sdf(obj: AnalyticObject, x) -> np.ndarray:
    """Exact signed distance (negative inside) at points given in the object frame."""
    if obj.kind == "cylinder":
        return cylinder_sdf(x, *obj.dims)
    return box_sdf(x, obj.dims)


# --------------------------------------------------------------------------
# grasp manifold
# --------------------------------------------------------------------------


def _side_rotation(theta):
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    r = np.zeros(theta.shape + (3, 3))
    r[..., :, 0] = np.stack([-s, c, np.zeros_like(c)], axis=-1)
    r[..., 2, 1] = -1.0
    r[..., :, 2] = np.stack([-c, -s, np.zeros_like(c)], axis=-1)
    return r


def _top_rotation(theta):
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    r = np.zeros(theta.shape + (3, 3))
    r[..., :, 0] = np.stack([c, s, np.zeros_like(c)], axis=-1)
    r[..., :, 1] = np.stack([s, -c, np.zeros_like(c)], axis=-1)
    r[..., 2, 2] = -1.0
    return r


@dataclass(frozen=True)
class GraspManifold:
    """Side family (height band, all azimuths, radial approach) and top family
    (rim azimuths, downward approach) on an upright cylinder.

    Poses are expressed in the object frame; the gripper's z axis is the
    approach direction and its origin the palm center.
    """

    obj: AnalyticObject
    standoff: float = 0.02
    families: tuple = (SIDE, TOP)

    def __post_init__(self):
        if self.obj.kind != "cylinder":
            raise ValueError("grasp manifolds are defined for cylinders only")
        if not self.families:
            raise ValueError("manifold needs at least one family")

    @property
    def band(self) -> tuple[float, float]:
        q = 0.25 * self.obj.height
        return -q, q

    def side_pose(self, theta, z) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        z = np.broadcast_to(np.asarray(z, dtype=float), theta.shape)
        rho = self.obj.radius + self.standoff
        t = np.stack([rho * np.cos(theta), rho * np.sin(theta), z], axis=-1)
        return lg.make_pose(_side_rotation(theta), t)

    def top_pose(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        r = self.obj.radius
        zt = 0.5 * self.obj.height + self.standoff
        t = np.stack([r * np.cos(theta), r * np.sin(theta), np.full(theta.shape, zt)], axis=-1)
        return lg.make_pose(_top_rotation(theta), t)

    def sample(self, n: int, rng=None) -> tuple[np.ndarray, np.ndarray]:
        """``n`` poses drawn uniformly over family parameters (families equally likely)."""
        rng = np.random.default_rng(rng)
        fams = np.asarray(self.families)
        labels = fams[rng.integers(0, len(fams), size=n)]
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        z = rng.uniform(*self.band, size=n)
        poses = np.empty((n, 4, 4))
        side = labels == SIDE
        poses[side] = self.side_pose(theta[side], z[side])
        poses[~side] = self.top_pose(theta[~side])
        return poses, labels

    def enumerate(self, n_theta: int, n_z: int) -> tuple[np.ndarray, np.ndarray]:
        """Dense deterministic grid over both families."""
        theta = np.linspace(0.0, 2.0 * np.pi, n_theta, endpoint=False)
        out, labels = [], []
        if SIDE in self.families:
            tt, zz = np.meshgrid(theta, np.linspace(*self.band, n_z), indexing="ij")
            out.append(self.side_pose(tt.ravel(), zz.ravel()))
            labels.append(np.full(tt.size, SIDE))
        if TOP in self.families:
            out.append(self.top_pose(theta))
            labels.append(np.full(n_theta, TOP))
        return np.concatenate(out), np.concatenate(labels)


def _dist_to(poses, targets):
    rel = np.swapaxes(lg.rotation(poses), -1, -2) @ lg.rotation(targets)
    return np.linalg.norm(lg.translation(poses) - lg.translation(targets), axis=-1) + lg.rotation_angle(rel)


def _minimize_azimuth(fun, n, n_grid=360, iters=40):
    """Vectorized grid search plus golden-section refinement over a circle."""
    grid = np.linspace(0.0, 2.0 * np.pi, n_grid, endpoint=False)
    vals = fun(np.broadcast_to(grid, (n, n_grid)))
    best = grid[np.argmin(vals, axis=1)]
    step = 2.0 * np.pi / n_grid
    lo, hi = best - step, best + step
    g = 0.5 * (np.sqrt(5.0) - 1.0)
    for _ in range(iters):
        a = hi - g * (hi - lo)
        b = lo + g * (hi - lo)
        left = fun(a[:, None])[:, 0] < fun(b[:, None])[:, 0]
        hi = np.where(left, b, hi)
        lo = np.where(left, lo, a)
    theta = 0.5 * (lo + hi)
    return np.mod(theta, 2.0 * np.pi)


def project_to_manifold(manifold: GraspManifold, poses, return_family: bool = False):
    """Nearest manifold pose (in the se3-distance sense) for object-frame poses.

    Returns ``(nearest, distance)``, plus the winning family label when
    ``return_family`` is set. A single (4, 4) pose gives unbatched outputs.
    """
    poses = np.asarray(poses, dtype=float)
    single = poses.ndim == 2
    if single:
        poses = poses[None]
    n = poses.shape[0]
    cands, dists, fams = [], [], []
    t = lg.translation(poses)
    if SIDE in manifold.families:
        z = np.clip(t[:, 2], *manifold.band)

        def side_cost(theta):
            tgt = manifold.side_pose(theta, np.broadcast_to(z[:, None], theta.shape))
            return _dist_to(poses[:, None], tgt)

        th = _minimize_azimuth(side_cost, n)
        p = manifold.side_pose(th, z)
        cands.append(p)
        dists.append(_dist_to(poses, p))
        fams.append(SIDE)
    if TOP in manifold.families:

        def top_cost(theta):
            return _dist_to(poses[:, None], manifold.top_pose(theta))

        th = _minimize_azimuth(top_cost, n)
        p = manifold.top_pose(th)
        cands.append(p)
        dists.append(_dist_to(poses, p))
        fams.append(TOP)
    dists = np.stack(dists)
    which = np.argmin(dists, axis=0)
    nearest = np.stack(cands)[which, np.arange(n)]
    dist = dists[which, np.arange(n)]
    family = np.asarray(fams)[which]
    if single:
        nearest, dist, family = nearest[0], dist[0], family[0]
    return (nearest, dist, family) if return_family else (nearest, dist)


def sample_manifold_grasp(manifold: GraspManifold, family: int | None = None, theta=None, z=0.0, rng=None):
    """Closed-form grasp for explicit parameters, or a random one when ``theta`` is None."""
    if theta is None:
        poses, labels = manifold.sample(1, rng)
        return poses[0], int(labels[0])
    family = SIDE if family is None else family
    if family == SIDE:
        return manifold.side_pose(theta, z), SIDE
    return manifold.top_pose(theta), TOP


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


@dataclass
class GraspDataset:
    poses: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.poses)


@dataclass
class SdfDataset:
    points: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


def sample_surface(obj: AnalyticObject, n: int, rng) -> np.ndarray:
    """Area-uniform points on the surface of a cylinder or box."""
    if obj.kind == "cylinder":
        r, h = obj.dims
        lateral = 2 * np.pi * r * h
        cap = np.pi * r * r
        kind = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
        theta = rng.uniform(0, 2 * np.pi, n)
        rad = np.where(kind == 0, r, r * np.sqrt(rng.uniform(0, 1, n)))
        z = np.where(kind == 0, rng.uniform(-h / 2, h / 2, n), np.where(kind == 1, h / 2, -h / 2))
        return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=-1)
    half = obj.half_extents()
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]]).repeat(2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1, 1, (n, 3)) * half
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def generate_datasets(obj: AnalyticObject, manifold: GraspManifold | None, counts=(1000, 1000), seed: int = 0,
                      near_sigma: float = 0.01, bbox_pad: float = 0.05):
    """Grasps uniform over family parameters and SDF samples (half near-surface, half in a box)."""
    n_grasps, n_sdf = counts
    rng = np.random.default_rng(seed)
    if n_grasps and manifold is not None:
        poses, labels = manifold.sample(n_grasps, rng)
    else:
        poses, labels = np.zeros((0, 4, 4)), np.zeros(0, dtype=int)
    n_near = n_sdf // 2
    near = sample_surface(obj, n_near, rng) + near_sigma * rng.standard_normal((n_near, 3))
    half = obj.half_extents() + bbox_pad
    far = rng.uniform(-1, 1, (n_sdf - n_near, 3)) * half
    pts = np.concatenate([near, far]) if n_sdf else np.zeros((0, 3))
    return GraspDataset(poses, labels.astype(int)), SdfDataset(pts, analytic_sdf(obj, pts))


def generate_gaussian_grasps(mean: np.ndarray, sigma: float, n: int, seed: int = 0) -> GraspDataset:
    """Unimodal dataset: ``n`` draws from a Lie Gaussian around ``mean``."""
    g = lg.LieGaussian(np.asarray(mean, dtype=float), sigma)
    poses = lg.sample_lie_gaussian(g, np.random.default_rng(seed), size=n)
    return GraspDataset(poses, np.full(n, -1))


def reference_cylinder() -> tuple[AnalyticObject, GraspManifold]:
    obj = AnalyticObject.cylinder(0.04, 0.12)
    return obj, GraspManifold(obj, standoff=0.02)
