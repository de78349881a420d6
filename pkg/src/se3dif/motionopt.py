"""Trajectory costs and the annealed Langevin trajectory optimizer.

Trajectories are ``(T, dof)`` joint arrays; batched evaluation takes
``(P, T, dof)`` particle stacks. Every cost returns its value and its exact
gradient with respect to the waypoints. Pose-space costs use left
perturbations and are pulled back through :func:`kinematics.fk_jacobian`.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from se3dif import kinematics as kin
from se3dif import liegroup as lg
from se3dif._jit import njit, select
from se3dif.datagen import FAMILY_NAMES, project_to_manifold
from se3dif.energymodel import GraspField, geometric_noise_scales
from se3dif.errors import ConfigError, NonFiniteCost, SchemaError, UnknownTerm

TERM_KINDS = ("grasp", "smooth", "table", "box", "fix_init", "pregrasp", "grasp_place", "des_grasp")

# weight presets for the three manipulation tasks
PRESETS = {
    "pick_occlusion": {"grasp": 0.5, "smooth": 10.0, "table": 20.0, "box": 20.0, "fix_init": 10.0, "pregrasp": 5.0},
    "pick_reorient": {"grasp": 2.0, "smooth": 10.0, "table": 20.0, "fix_init": 1.0, "pregrasp": 1.0, "grasp_place": 10.0},
    "pick_place_shelf": {
        "grasp": 1.0, "smooth": 10.0, "table": 10.0, "fix_init": 10.0, "pregrasp": 10.0, "grasp_place": 1.0, "box": 10.0,
    },
}
DES_GRASP_TRANSLATION_SCALE = 10.0


@dataclass(frozen=True)
class SceneBox:
    pose: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pose", np.asarray(self.pose, dtype=float))
        object.__setattr__(self, "half_extents", np.asarray(self.half_extents, dtype=float))
        if np.any(self.half_extents <= 0):
            raise ValueError("box half-extents must be positive")


@dataclass(frozen=True)
class CostTerm:
    kind: str
    weight: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise UnknownTerm(f"unknown cost term {self.kind!r}")
        if not self.weight > 0:
            raise ValueError(f"weight of {self.kind!r} must be positive")


@dataclass
class Objective:
    chain: kin.KinematicChain
    terms: list
    grasp_field: GraspField | None = None
    table_z: float = 0.0
    boxes: list = field(default_factory=list)
    q_init: np.ndarray | None = None

    def __post_init__(self):
        for t in self.terms:
            if not isinstance(t, CostTerm) or t.kind not in TERM_KINDS:
                raise UnknownTerm(f"unknown cost term {getattr(t, 'kind', t)!r}")
        if any(t.kind == "grasp" for t in self.terms) and self.grasp_field is None:
            raise ConfigError("a grasp term needs an energy model attached")
        if any(t.kind == "fix_init" for t in self.terms) and self.q_init is None:
            raise ConfigError("fix_init needs q_init")

    def term(self, kind):
        return next((t for t in self.terms if t.kind == kind), None)

    def with_terms(self, terms) -> "Objective":
        return replace(self, terms=list(terms))

    def scaled(self, factor: float) -> "Objective":
        return self.with_terms([replace(t, weight=t.weight * factor) for t in self.terms])


def preset_terms(name: str, overrides: dict | None = None, params: dict | None = None) -> list:
    """Cost terms of a named weight preset, with optional weight overrides and per-term parameters."""
    if name not in PRESETS:
        raise ConfigError(f"unknown weight preset {name!r}")
    weights = dict(PRESETS[name])
    for kind, w in (overrides or {}).items():
        if kind not in TERM_KINDS:
            raise UnknownTerm(f"unknown cost term {kind!r}")
        weights[kind] = w
    params = params or {}
    return [CostTerm(kind, float(w), dict(params.get(kind, {}))) for kind, w in weights.items()]


# --------------------------------------------------------------------------
# shared geometry
# --------------------------------------------------------------------------


class KinCache:
    """Forward kinematics of every waypoint of every particle, computed once."""

    def __init__(self, chain: kin.KinematicChain, traj: np.ndarray, need_spheres: bool = True):
        self.chain = chain
        self.links = kin.link_poses(chain, traj)
        self.ee = self.links[..., -1, :, :] @ chain.tool
        self.twists = kin.joint_twists(chain, self.links)
        self.jac = np.swapaxes(self.twists, -1, -2)
        if need_spheres and chain.n_spheres:
            self.centers, self.radii = kin.sphere_positions(chain, traj, self.links)
        else:
            self.centers = np.zeros(traj.shape[:-1] + (0, 3))
            self.radii = np.zeros(0)

    def spheres_to_joints(self, grad_centers):
        if grad_centers.shape[-2] == 0:
            return np.zeros(self.links.shape[:-3] + (self.chain.dof,))
        return kin.sphere_gradient_to_joints(self.chain, self.links, self.centers, grad_centers, self.twists)


def _rotation_axis(rel, theta):
    """Unit axis of rotation matrices, robust up to and including angle pi."""
    axis = lg.vee(rel - np.swapaxes(rel, -1, -2))
    norm = np.linalg.norm(axis, axis=-1, keepdims=True)
    out = np.divide(axis, norm, out=np.zeros_like(axis), where=norm > 1e-12)
    near_pi = theta > np.pi - 1e-4
    if np.any(near_pi):
        sym = 0.5 * (rel[near_pi] + np.eye(3))
        col = np.argmax(np.einsum("...ii->...i", sym), axis=-1)
        ax = sym[np.arange(len(col)), :, col]
        ax /= np.linalg.norm(ax, axis=-1, keepdims=True)
        # keep the sign consistent with the antisymmetric part when it is resolvable
        sgn = np.sign(np.sum(ax * axis[near_pi], axis=-1))
        ax *= np.where(sgn == 0, 1.0, sgn)[..., None]
        out[near_pi] = ax
    return out


def pose_distance(a, b, trans_scale: float = 1.0, want_grad: bool = True):
    """``s |t_a - t_b| + angle(R_a^T R_b)`` and its left-perturbation gradients w.r.t. ``a`` and ``b``."""
    ta, tb = a[..., :3, 3], b[..., :3, 3]
    dt = ta - tb
    n = np.linalg.norm(dt, axis=-1)
    rel = np.swapaxes(a[..., :3, :3], -1, -2) @ b[..., :3, :3]
    theta = lg.rotation_angle(rel)
    d = trans_scale * n + theta
    if not want_grad:
        return d
    u = np.divide(dt, n[..., None], out=np.zeros_like(dt), where=n[..., None] > 0)
    axis = _rotation_axis(rel, theta)
    axis = np.where(theta[..., None] > 0, axis, 0.0)
    omega = np.einsum("...ij,...j->...i", a[..., :3, :3], axis)
    ga = np.concatenate([trans_scale * u, trans_scale * np.cross(ta, u) - omega], axis=-1)
    gb = np.concatenate([-trans_scale * u, -trans_scale * np.cross(tb, u) + omega], axis=-1)
    return d, ga, gb


def _pull_back(jac, g):
    """Joint gradient ``g^T J`` for pose gradients ``(..., 6)`` and Jacobians ``(..., 6, dof)``."""
    return np.einsum("...i,...ij->...j", g, jac)


def _index(T, idx):
    return idx % T


# --------------------------------------------------------------------------
# box SDF kernel
# --------------------------------------------------------------------------


@njit
def _box_sdf_numba(points, rot, trans, half):
    m = points.shape[0]
    sdf = np.empty(m)
    grad = np.zeros((m, 3))
    for i in range(m):
        p = np.zeros(3)
        for a in range(3):
            acc = 0.0
            for b in range(3):
                acc += rot[b, a] * (points[i, b] - trans[b])
            p[a] = acc
        q = np.abs(p) - half
        qmax = max(q[0], max(q[1], q[2]))
        gl = np.zeros(3)
        if qmax > 0.0:
            s2 = 0.0
            for a in range(3):
                if q[a] > 0.0:
                    s2 += q[a] * q[a]
            nrm = np.sqrt(s2)
            sdf[i] = nrm
            for a in range(3):
                if q[a] > 0.0:
                    gl[a] = (1.0 if p[a] >= 0.0 else -1.0) * q[a] / nrm
        else:
            sdf[i] = qmax
            ax = 0
            if q[1] > q[ax]:
                ax = 1
            if q[2] > q[ax]:
                ax = 2
            gl[ax] = 1.0 if p[ax] >= 0.0 else -1.0
        for a in range(3):
            acc = 0.0
            for b in range(3):
                acc += rot[a, b] * gl[b]
            grad[i, a] = acc
    return sdf, grad


def _box_sdf_numpy(points, rot, trans, half):
    p = (points - trans) @ rot
    q = np.abs(p) - half
    sign = np.where(p >= 0.0, 1.0, -1.0)
    pos = np.maximum(q, 0.0)
    outside_norm = np.linalg.norm(pos, axis=1)
    qmax = q.max(axis=1)
    outside = qmax > 0.0
    sdf = np.where(outside, outside_norm, qmax)
    gl = np.zeros_like(p)
    safe = np.where(outside_norm > 0, outside_norm, 1.0)
    gl[outside] = (sign * pos / safe[:, None])[outside]
    ax = np.argmax(q, axis=1)
    inside = np.flatnonzero(~outside)
    gl[inside, ax[inside]] = sign[inside, ax[inside]]
    return sdf, gl @ rot.T


_box_sdf = select(_box_sdf_numba, _box_sdf_numpy)


def box_sdf(points, box: SceneBox, want_grad: bool = False):
    """Exact signed distance to an oriented box (and its gradient) at world points ``(..., 3)``."""
    pts = np.asarray(points, dtype=float)
    flat = np.ascontiguousarray(pts.reshape(-1, 3))
    sdf, grad = _box_sdf(flat, np.ascontiguousarray(box.pose[:3, :3]), np.ascontiguousarray(box.pose[:3, 3]),
                         np.ascontiguousarray(box.half_extents))
    sdf = sdf.reshape(pts.shape[:-1])
    if want_grad:
        return sdf, grad.reshape(pts.shape)
    return sdf


# --------------------------------------------------------------------------
# cost terms (values summed over the particle's waypoints; batched over particles)
# --------------------------------------------------------------------------


def cost_smooth(traj):
    traj = np.asarray(traj, dtype=float)
    diff = np.diff(traj, axis=-2)
    cost = np.sum(diff**2, axis=(-2, -1))
    grad = np.zeros_like(traj)
    grad[..., 1:, :] += 2.0 * diff
    grad[..., :-1, :] -= 2.0 * diff
    return cost, grad


def cost_fix_init(traj, q_init):
    traj = np.asarray(traj, dtype=float)
    diff = traj[..., 0, :] - np.asarray(q_init, dtype=float)
    n = np.linalg.norm(diff, axis=-1)
    grad = np.zeros_like(traj)
    grad[..., 0, :] = np.divide(diff, n[..., None], out=np.zeros_like(diff), where=n[..., None] > 0)
    return n, grad


def cost_table(traj, objective: Objective, cache: KinCache | None = None):
    traj = np.asarray(traj, dtype=float)
    cache = cache or KinCache(objective.chain, traj)
    pen = objective.table_z + cache.radii - cache.centers[..., 2]
    active = pen > 0.0
    cost = np.sum(np.where(active, pen, 0.0), axis=(-2, -1))
    g = np.zeros_like(cache.centers)
    g[..., 2] = -active.astype(float)
    return cost, cache.spheres_to_joints(g)


def cost_box(traj, boxes, objective: Objective, cache: KinCache | None = None):
    traj = np.asarray(traj, dtype=float)
    cache = cache or KinCache(objective.chain, traj)
    cost = np.zeros(traj.shape[:-2])
    g = np.zeros_like(cache.centers)
    for box in boxes:
        sdf, grad = box_sdf(cache.centers, box, want_grad=True)
        pen = cache.radii - sdf
        active = pen > 0.0
        cost = cost + np.sum(np.where(active, pen, 0.0), axis=(-2, -1))
        g -= grad * active[..., None]
    return cost, cache.spheres_to_joints(g)


def cost_pregrasp(traj, objective: Objective, n: int = 4, offset: float = 0.08, cache: KinCache | None = None):
    """Distance of the last ``n`` waypoints before the final one to poses backed off along the final approach axis."""
    traj = np.asarray(traj, dtype=float)
    T = traj.shape[-2]
    n = min(int(n), T - 1)
    cost = np.zeros(traj.shape[:-2])
    grad = np.zeros_like(traj)
    if n <= 0:
        return cost, grad
    cache = cache or KinCache(objective.chain, traj, need_spheres=False)
    final = cache.ee[..., T - 1, :, :]
    for s in range(1, n + 1):
        t = T - 1 - s
        back = lg.make_pose(np.eye(3), np.array([0.0, 0.0, -offset * s / n]))
        d, ga, gb = pose_distance(cache.ee[..., t, :, :], final @ back)
        cost = cost + d
        grad[..., t, :] += _pull_back(cache.jac[..., t, :, :], ga)
        grad[..., T - 1, :] += _pull_back(cache.jac[..., T - 1, :, :], gb)
    return cost, grad


def cost_grasp_place_similarity(traj, objective: Objective, grasp_index: int, object_grasp_pose, object_place_pose,
                                place_index: int = -1, cache: KinCache | None = None):
    """Distance between the end-effector poses in the object frame at grasp time and at place time."""
    traj = np.asarray(traj, dtype=float)
    T = traj.shape[-2]
    gi, pi = _index(T, grasp_index), _index(T, place_index)
    cache = cache or KinCache(objective.chain, traj, need_spheres=False)
    inv_g = lg.inverse(np.asarray(object_grasp_pose, dtype=float))
    inv_p = lg.inverse(np.asarray(object_place_pose, dtype=float))
    d, ga, gb = pose_distance(inv_g @ cache.ee[..., gi, :, :], inv_p @ cache.ee[..., pi, :, :])
    # H^o = O^-1 Exp(tau) H = Exp(Ad(O^-1) tau) O^-1 H
    ga = ga @ lg.adjoint(inv_g)
    gb = gb @ lg.adjoint(inv_p)
    grad = np.zeros_like(traj)
    grad[..., gi, :] += _pull_back(cache.jac[..., gi, :, :], ga)
    grad[..., pi, :] += _pull_back(cache.jac[..., pi, :, :], gb)
    return d, grad


def cost_grasp_energy(traj, objective: Objective, k: int = 1, waypoint: int = -1, cache: KinCache | None = None):
    traj = np.asarray(traj, dtype=float)
    T = traj.shape[-2]
    t = _index(T, waypoint)
    cache = cache or KinCache(objective.chain, traj, need_spheres=False)
    poses = cache.ee[..., t, :, :]
    batch = poses.shape[:-2]
    energy, pose_grad = objective.grasp_field.energy_grad(poses.reshape(-1, 4, 4), k)
    grad = np.zeros_like(traj)
    grad[..., t, :] = _pull_back(cache.jac[..., t, :, :], pose_grad.reshape(batch + (6,)))
    return energy.reshape(batch), grad


def cost_des_grasp_dist(traj, objective: Objective, target, waypoint: int = -1, cache: KinCache | None = None):
    """``10 |t - t_target| + angle(R^T R_target)`` at the grasp waypoint."""
    traj = np.asarray(traj, dtype=float)
    T = traj.shape[-2]
    t = _index(T, waypoint)
    cache = cache or KinCache(objective.chain, traj, need_spheres=False)
    target = np.broadcast_to(np.asarray(target, dtype=float), cache.ee[..., t, :, :].shape)
    d, ga, _ = pose_distance(cache.ee[..., t, :, :], target, DES_GRASP_TRANSLATION_SCALE)
    grad = np.zeros_like(traj)
    grad[..., t, :] = _pull_back(cache.jac[..., t, :, :], ga)
    return d, grad


def _term_value(term: CostTerm, objective: Objective, traj, k, cache):
    p = term.params
    kind = term.kind
    if kind == "smooth":
        return cost_smooth(traj)
    if kind == "fix_init":
        return cost_fix_init(traj, objective.q_init)
    if kind == "table":
        return cost_table(traj, objective, cache)
    if kind == "box":
        return cost_box(traj, objective.boxes, objective, cache)
    if kind == "pregrasp":
        return cost_pregrasp(traj, objective, p.get("n", 4), p.get("offset", 0.08), cache)
    if kind == "grasp_place":
        T = traj.shape[-2]
        return cost_grasp_place_similarity(traj, objective, p.get("grasp_index", T // 2), p["object_grasp_pose"],
                                           p["object_place_pose"], p.get("place_index", -1), cache)
    if kind == "grasp":
        return cost_grasp_energy(traj, objective, k, p.get("waypoint", -1), cache)
    if kind == "des_grasp":
        return cost_des_grasp_dist(traj, objective, p["target"], p.get("waypoint", -1), cache)
    raise UnknownTerm(f"unknown cost term {kind!r}")


def objective_eval(objective: Objective, traj, k: int = 1, breakdown: bool = False):
    """Weighted sum ``J = sum_j w_j c_j`` and its gradient; works on one or many trajectories."""
    traj = np.asarray(traj, dtype=float)
    need_spheres = any(t.kind in ("table", "box") for t in objective.terms)
    cache = KinCache(objective.chain, traj, need_spheres)
    total = np.zeros(traj.shape[:-2])
    grad = np.zeros_like(traj)
    parts = {}
    for term in objective.terms:
        c, g = _term_value(term, objective, traj, k, cache)
        total = total + term.weight * c
        grad += term.weight * g
        parts[term.kind] = c
    if total.ndim == 0:
        total = float(total)
        parts = {name: float(v) for name, v in parts.items()}
    if breakdown:
        return total, grad, parts
    return total, grad


def collision_cost(objective: Objective, traj) -> np.ndarray:
    """Unweighted table plus box penetration of each trajectory."""
    traj = np.asarray(traj, dtype=float)
    cache = KinCache(objective.chain, traj)
    return cost_table(traj, objective, cache)[0] + cost_box(traj, objective.boxes, objective, cache)[0]


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class OptimizerConfig:
    n_particles: int = 50
    waypoints: int = 32
    step_rate: float = 0.2
    inner_steps: int = 40
    polish_steps: int = 300
    polish_init_step: float = 1e-3
    noise: bool = True
    init_scale: float = 0.2
    noise_scales: np.ndarray | None = None  # defaults to the grasp model's, else a 10-level schedule
    seed: int = 0
    threads: int = 1
    pin_grasp_level: bool = False  # evaluate the grasp term at k=1 throughout
    metric: str = "euclidean"  # or "smooth": precondition drift and noise by the inverse smoothness Hessian
    n_grasps: int = 1  # decoupled mode only
    des_grasp_weight: float = 20.0  # decoupled mode only

    def __post_init__(self):
        if self.n_particles < 1:
            raise ConfigError("n_particles must be >= 1")
        if self.waypoints < 2:
            raise ConfigError("trajectories need at least two waypoints")
        if self.step_rate < 0 or self.inner_steps < 0 or self.polish_steps < 0:
            raise ConfigError("step counts and rates must be nonnegative")
        if self.threads < 1 or self.n_grasps < 1:
            raise ConfigError("threads and n_grasps must be >= 1")
        if self.metric not in ("euclidean", "smooth"):
            raise ConfigError(f"unknown metric {self.metric!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown optimizer options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizeResult:
    best: np.ndarray
    best_index: int
    trajectories: np.ndarray
    final_costs: np.ndarray
    history: np.ndarray  # (P, steps) objective per particle before each update
    breakdown: dict

    @property
    def best_cost(self) -> float:
        return float(self.final_costs[self.best_index])


def smoothness_covariance(T: int, scale: float) -> np.ndarray:
    """Covariance of a second-difference smoothness prior with the first waypoint pinned at zero.

    Returned for the free waypoints ``1..T-1``, rescaled so the largest
    marginal standard deviation equals ``scale``.
    """
    n = T - 1
    if n <= 0:
        return np.zeros((0, 0))
    # second differences over the full trajectory, with q_0 fixed
    d2 = np.zeros((max(T - 2, 0) + 1, T))
    d2[0, 0], d2[0, 1] = -1.0, 1.0  # first difference anchors the start
    for i in range(T - 2):
        d2[i + 1, i : i + 3] = [1.0, -2.0, 1.0]
    prec = d2[:, 1:].T @ d2[:, 1:] + 1e-6 * np.eye(n)
    cov = np.linalg.inv(prec)
    return cov * (scale**2 / np.max(np.diag(cov)))


def smoothness_metric(T: int) -> np.ndarray:
    """Inverse of the first-difference Hessian with the first waypoint anchored, ``(T, T)``.

    Premultiplying a waypoint gradient by it gives the covariant step of
    the smoothness cost: a unit push on one waypoint becomes a smooth
    deformation of the whole trajectory, and the smoothness quadratic
    becomes perfectly conditioned.
    """
    d1 = np.diff(np.eye(T), axis=0)
    a = d1.T @ d1
    a[0, 0] += 1.0
    return np.linalg.inv(a)


def initial_trajectories(objective: Objective, cfg: OptimizerConfig, rngs) -> np.ndarray:
    """Straight joint-space lines from ``q_init`` to random goals plus smooth correlated noise."""
    chain = objective.chain
    q0 = np.zeros(chain.dof) if objective.q_init is None else np.asarray(objective.q_init, dtype=float)
    T = cfg.waypoints
    s = np.linspace(0.0, 1.0, T)
    chol = np.linalg.cholesky(smoothness_covariance(T, cfg.init_scale) + 1e-12 * np.eye(T - 1))
    out = np.empty((len(rngs), T, chain.dof))
    for i, r in enumerate(rngs):
        goal = chain.random_configuration(r)
        line = q0 + s[:, None] * (goal - q0)
        pert = np.zeros((T, chain.dof))
        pert[1:] = chol @ r.standard_normal((T - 1, chain.dof))
        out[i] = chain.clip(line + pert)
    return out


def _noise_scales(objective: Objective, cfg: OptimizerConfig):
    if cfg.noise_scales is not None:
        return np.asarray(cfg.noise_scales, dtype=float)
    if objective.grasp_field is not None:
        return objective.grasp_field.noise_scales
    return geometric_noise_scales()


def _checked_eval(objective, trajs, k):
    cost, grad = objective_eval(objective, trajs, k)
    bad = ~np.isfinite(cost) | ~np.all(np.isfinite(grad), axis=(-2, -1))
    if np.any(bad):
        raise NonFiniteCost(int(np.flatnonzero(bad)[0]))
    return cost, grad


def polish(objective: Objective, trajs, steps: int, init_step: float = 1e-3, history=None):
    """Monotone descent on ``J(tau, 1)``: RMS-preconditioned projected steps with a per-particle step size.

    The grasp term makes the final waypoint far stiffer than the rest of the
    trajectory, so each coordinate's step is normalized by a running RMS of
    its gradient. A trial is kept only if it lowers the particle's cost (the
    step then grows by 1.5x), otherwise the step is halved.
    """
    chain = objective.chain
    trajs = np.array(trajs, dtype=float)
    eta = np.full(len(trajs), init_step)
    cost, grad = _checked_eval(objective, trajs, 1)
    rms = grad**2
    for _ in range(steps):
        if history is not None:
            history.append(cost)
        rms = 0.9 * rms + 0.1 * grad**2
        direction = grad / (np.sqrt(rms) + 1e-12)
        trial = chain.clip(trajs - eta[:, None, None] * direction)
        c_new, g_new = _checked_eval(objective, trial, 1)
        ok = c_new < cost
        trajs[ok], cost[ok], grad[ok] = trial[ok], c_new[ok], g_new[ok]
        eta = np.where(ok, 1.5 * eta, 0.5 * eta)
    return trajs


def _run_particles(objective: Objective, cfg: OptimizerConfig, trajs, rngs, scales):
    chain = objective.chain
    levels = len(scales)
    history = []
    metric = chol = None
    if cfg.metric == "smooth":
        metric = smoothness_metric(trajs.shape[1])
        chol = np.linalg.cholesky(metric)
    for k in range(levels, 0, -1):
        alpha = cfg.step_rate * scales[k - 1] / scales[-1]
        noisy = cfg.noise and alpha > 0
        for _ in range(cfg.inner_steps):
            cost, grad = _checked_eval(objective, trajs, 1 if cfg.pin_grasp_level else k)
            history.append(cost)
            if metric is not None:
                grad = metric @ grad
            upd = -0.5 * alpha**2 * grad
            if noisy:
                xi = np.stack([r.standard_normal(trajs.shape[1:]) for r in rngs])
                upd = upd + alpha * (xi if chol is None else chol @ xi)
            trajs = chain.clip(trajs + upd)
    if cfg.polish_steps:
        trajs = polish(objective, trajs, cfg.polish_steps, cfg.polish_init_step, history)
    hist = np.stack(history, axis=1) if history else np.zeros((len(trajs), 0))
    return trajs, hist


def _blocks(n, size=32):
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def optimize(objective: Objective, config: OptimizerConfig | None = None, init=None) -> OptimizeResult:
    """Anneal particles with ``tau <- tau - (a_k^2 / 2) grad J(tau, k) + a_k xi`` and keep the cheapest.

    ``a_k = step_rate * sigma_k / sigma_L``. A monotone descent polish at
    level 1 follows (see :func:`polish`). The winner is the lowest ``J(tau, 1)`` (lowest index on ties).
    """
    cfg = config or OptimizerConfig()
    scales = _noise_scales(objective, cfg)
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(cfg.n_particles)]
    trajs = initial_trajectories(objective, cfg, rngs) if init is None else np.array(init, dtype=float)
    if trajs.shape[0] != cfg.n_particles:
        raise ConfigError("initial trajectory count does not match n_particles")
    blocks = _blocks(cfg.n_particles)

    def work(sl):
        obj = _slice_objective(objective, sl)
        return _run_particles(obj, cfg, trajs[sl], rngs[sl], scales)

    if cfg.threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(work, blocks))
    else:
        results = [work(sl) for sl in blocks]
    final = np.concatenate([r[0] for r in results])
    history = np.concatenate([r[1] for r in results])
    costs, _, parts = objective_eval(objective, final, 1, breakdown=True)
    best = int(np.argmin(costs))
    return OptimizeResult(final[best], best, final, costs, history, {k: v for k, v in parts.items()})


def _slice_objective(objective: Objective, sl: slice) -> Objective:
    """Restrict per-particle term parameters (decoupled targets) to a block of particles."""
    terms = []
    changed = False
    for t in objective.terms:
        target = t.params.get("target")
        if t.kind == "des_grasp" and target is not None and np.ndim(target) == 3:
            terms.append(replace(t, params={**t.params, "target": np.asarray(target)[sl]}))
            changed = True
        else:
            terms.append(t)
    return objective.with_terms(terms) if changed else objective


@dataclass
class DecoupledResult(OptimizeResult):
    grasps: np.ndarray = None
    grasp_energies: np.ndarray = None
    targets: np.ndarray = None


def decoupled_optimize(objective: Objective, config: OptimizerConfig | None = None, sampler_config=None,
                       grasps=None) -> DecoupledResult:
    """Two-stage baseline: sample grasps from the energy alone, then plan to reach them.

    Stage 2 swaps the grasp energy term for the distance to the sampled grasp
    (particles are assigned to grasps round-robin). ``grasps`` skips stage 1.
    """
    from se3dif import sampler as smp

    cfg = config or OptimizerConfig()
    grasp_term = objective.term("grasp")
    if grasps is None:
        if objective.grasp_field is None:
            raise ConfigError("decoupled mode needs an energy model for stage 1")
        scfg = sampler_config or smp.SamplerConfig(
            n_particles=cfg.n_grasps, init_mean=objective.grasp_field.object_pose, seed=cfg.seed
        )
        trace = smp.sample(objective.grasp_field, scfg)
        grasps, energies = trace.poses[: cfg.n_grasps], trace.energies[: cfg.n_grasps]
    else:
        grasps = np.asarray(grasps, dtype=float).reshape(-1, 4, 4)
        energies = None
    targets = grasps[np.arange(cfg.n_particles) % len(grasps)]
    waypoint = grasp_term.params.get("waypoint", -1) if grasp_term is not None else -1
    terms = [t for t in objective.terms if t.kind != "grasp"]
    terms.append(CostTerm("des_grasp", cfg.des_grasp_weight, {"target": targets, "waypoint": waypoint}))
    stage2 = replace(objective.with_terms(terms), grasp_field=None)
    res = optimize(stage2, cfg)
    return DecoupledResult(res.best, res.best_index, res.trajectories, res.final_costs, res.history, res.breakdown,
                           grasps=grasps, grasp_energies=energies, targets=targets)


def grasp_outcome(objective: Objective, traj, object_pose, manifold, threshold: float = 0.3,
                  waypoint: int = -1) -> dict:
    """Success proxy of a pick trajectory.

    Success means zero table and box penetration along the whole trajectory
    and a grasp waypoint within ``threshold`` (se3 distance) of the manifold.
    """
    traj = np.asarray(traj, dtype=float)
    ee, _ = kin.fk(objective.chain, traj[_index(len(traj), waypoint)])
    _, dist, fam = project_to_manifold(manifold, lg.inverse(np.asarray(object_pose, dtype=float)) @ ee,
                                       return_family=True)
    collision = float(collision_cost(objective, traj))
    return {
        "success": bool(collision == 0.0 and dist <= threshold),
        "manifold_distance": float(dist),
        "family": FAMILY_NAMES[int(fam)],
        "collision": collision,
    }


# --------------------------------------------------------------------------
# scene files
# --------------------------------------------------------------------------

SCENE_SCHEMA = "se3dif.scene/1"
_SCENE_KEYS = {"schema", "name", "table_z", "boxes", "object_pose", "chain", "preset", "weights", "q_init", "params"}


@dataclass
class Scene:
    name: str
    chain: kin.KinematicChain
    object_pose: np.ndarray
    table_z: float = 0.0
    boxes: list = field(default_factory=list)
    preset: str = "pick_occlusion"
    weights: dict = field(default_factory=dict)
    q_init: np.ndarray | None = None
    params: dict = field(default_factory=dict)
    chain_ref: str = ""

    def objective(self, grasp_field: GraspField | None = None) -> Objective:
        return Objective(self.chain, preset_terms(self.preset, self.weights, self.params), grasp_field=grasp_field,
                         table_z=self.table_z, boxes=list(self.boxes), q_init=self.q_init)

    def to_dict(self) -> dict:
        return {
            "schema": SCENE_SCHEMA,
            "name": self.name,
            "chain": self.chain_ref or self.chain.name,
            "table_z": self.table_z,
            "object_pose": _pose_to_dict(self.object_pose),
            "boxes": [{"pose": _pose_to_dict(b.pose), "half_extents": b.half_extents.tolist()} for b in self.boxes],
            "preset": self.preset,
            "weights": dict(self.weights),
            "q_init": None if self.q_init is None else np.asarray(self.q_init).tolist(),
            "params": self.params,
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "Scene":
        if d.get("schema") != SCENE_SCHEMA:
            raise SchemaError(f"unsupported scene schema {d.get('schema')!r}")
        unknown = set(d) - _SCENE_KEYS
        if unknown:
            raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
        ref = d.get("chain", "arm6")
        chain = kin.load_chain(_resolve(ref, base_dir))
        if d.get("preset", "pick_occlusion") not in PRESETS:
            raise ConfigError(f"unknown weight preset {d.get('preset')!r}")
        for kind in d.get("weights", {}):
            if kind not in TERM_KINDS:
                raise UnknownTerm(f"unknown cost term {kind!r}")
        q_init = d.get("q_init")
        return cls(
            name=d.get("name", "scene"),
            chain=chain,
            object_pose=_pose_from_dict(d.get("object_pose", {})),
            table_z=float(d.get("table_z", 0.0)),
            boxes=[SceneBox(_pose_from_dict(b["pose"]), b["half_extents"]) for b in d.get("boxes", [])],
            preset=d.get("preset", "pick_occlusion"),
            weights={k: float(v) for k, v in d.get("weights", {}).items()},
            q_init=None if q_init is None else np.asarray(q_init, dtype=float),
            params=d.get("params", {}),
            chain_ref=ref,
        )


def _pose_to_dict(pose) -> dict:
    return {"translation": np.asarray(pose)[:3, 3].tolist(), "axis_angle": lg.so3_log(np.asarray(pose)[:3, :3]).tolist()}


def _pose_from_dict(d) -> np.ndarray:
    return lg.make_pose(lg.so3_exp(np.asarray(d.get("axis_angle", [0, 0, 0]), dtype=float)),
                        np.asarray(d.get("translation", [0, 0, 0]), dtype=float))


def _resolve(ref, base_dir):
    if base_dir is not None and str(ref).endswith(".json"):
        p = Path(base_dir) / ref
        if p.exists():
            return p
    return ref


def load_scene(source) -> Scene:
    """Scene from a dict, a JSON path, or the name of a shipped reference scene."""
    if isinstance(source, dict):
        return Scene.from_dict(source)
    path = Path(source)
    if path.suffix == ".json" and path.exists():
        return Scene.from_dict(json.loads(path.read_text()), path.parent)
    ref = resources.files("se3dif") / "data" / f"{source}.json"
    if not ref.is_file():
        raise FileNotFoundError(f"no scene file or reference scene named {source!r}")
    return Scene.from_dict(json.loads(ref.read_text()))
