"""Serial revolute chains: forward kinematics, Jacobians and collision spheres."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from se3dif import liegroup as lg
from se3dif.errors import SchemaError

CHAIN_SCHEMA = "se3dif.chain/1"


@dataclass(frozen=True)
class KinematicChain:
    """Joint ``j`` sits at ``offsets[j]`` in the frame of link ``j`` and rotates about ``axes[j]``.

    Links are numbered from 0 (the base) to ``dof``; joint ``j`` (0-based)
    drives link ``j + 1``. The end effector is ``tool`` in the last link.
    """

    name: str
    offsets: np.ndarray  # (dof, 4, 4)
    axes: np.ndarray  # (dof, 3)
    lower: np.ndarray
    upper: np.ndarray
    tool: np.ndarray
    sphere_links: np.ndarray  # (S,) link indices
    sphere_centers: np.ndarray  # (S, 3) in link frames
    sphere_radii: np.ndarray  # (S,)
    base: np.ndarray = None

    def __post_init__(self):
        if self.base is None:
            object.__setattr__(self, "base", np.eye(4))
        if len(self.axes) and np.any(np.abs(np.linalg.norm(self.axes, axis=1) - 1.0) > 1e-12):
            raise ValueError("joint axes must be unit vectors")
        if np.any(self.lower >= self.upper):
            raise ValueError("joint limits need lower < upper")
        if np.any(self.sphere_radii <= 0):
            raise ValueError("sphere radii must be positive")
        if np.any((self.sphere_links < 0) | (self.sphere_links > self.dof)):
            raise ValueError("sphere link index out of range")

    @property
    def dof(self) -> int:
        return len(self.axes)

    @property
    def n_spheres(self) -> int:
        return len(self.sphere_radii)

    def clip(self, q):
        return np.clip(q, self.lower, self.upper)

    def random_configuration(self, rng, size=None):
        shape = (self.dof,) if size is None else (size, self.dof)
        return rng.uniform(self.lower, self.upper, size=shape)

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        joints = []
        for j in range(self.dof):
            joints.append({
                "translation": self.offsets[j, :3, 3].tolist(),
                "axis_angle": lg.so3_log(self.offsets[j, :3, :3]).tolist(),
                "axis": self.axes[j].tolist(),
                "limits": [float(self.lower[j]), float(self.upper[j])],
            })
        return {
            "schema": CHAIN_SCHEMA,
            "name": self.name,
            "base": _pose_dict(self.base),
            "joints": joints,
            "tool": _pose_dict(self.tool),
            "spheres": [
                {"link": int(l), "center": c.tolist(), "radius": float(r)}
                for l, c, r in zip(self.sphere_links, self.sphere_centers, self.sphere_radii)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KinematicChain":
        if d.get("schema") != CHAIN_SCHEMA:
            raise SchemaError(f"unsupported chain schema {d.get('schema')!r}")
        joints = d["joints"]
        offsets = np.array([_pose_from(j) for j in joints]).reshape(-1, 4, 4)
        axes = np.array([j["axis"] for j in joints], dtype=float).reshape(-1, 3)
        axes = axes / np.linalg.norm(axes, axis=1, keepdims=True) if len(axes) else axes
        limits = np.array([j["limits"] for j in joints], dtype=float).reshape(-1, 2)
        spheres = d.get("spheres", [])
        return cls(
            name=d.get("name", "chain"),
            offsets=offsets,
            axes=axes,
            lower=limits[:, 0],
            upper=limits[:, 1],
            tool=_pose_from(d["tool"]) if "tool" in d else np.eye(4),
            sphere_links=np.array([s["link"] for s in spheres], dtype=int),
            sphere_centers=np.array([s["center"] for s in spheres], dtype=float).reshape(-1, 3),
            sphere_radii=np.array([s["radius"] for s in spheres], dtype=float),
            base=_pose_from(d["base"]) if "base" in d else np.eye(4),
        )


def _pose_dict(pose) -> dict:
    return {"translation": pose[:3, 3].tolist(), "axis_angle": lg.so3_log(pose[:3, :3]).tolist()}


def _pose_from(d) -> np.ndarray:
    return lg.make_pose(lg.so3_exp(np.asarray(d.get("axis_angle", [0, 0, 0]), dtype=float)),
                        np.asarray(d.get("translation", [0, 0, 0]), dtype=float))


def load_chain(source) -> KinematicChain:
    """Load a chain from a JSON path, or by name from the shipped reference robots."""
    if isinstance(source, dict):
        return KinematicChain.from_dict(source)
    path = Path(source)
    if path.suffix != ".json" or not path.exists():
        ref = resources.files("se3dif") / "data" / f"{source}.json"
        if not ref.is_file():
            raise FileNotFoundError(f"no chain file or reference robot named {source!r}")
        return KinematicChain.from_dict(json.loads(ref.read_text()))
    return KinematicChain.from_dict(json.loads(path.read_text()))


def save_chain(chain: KinematicChain, path) -> None:
    Path(path).write_text(json.dumps(chain.to_dict(), indent=2) + "\n")


# --------------------------------------------------------------------------
# kinematics (all functions accept q of shape (..., dof))
# --------------------------------------------------------------------------


def _joint_rotations(chain, q):
    # Rodrigues about each fixed axis, batched over leading dims of q
    return lg.so3_exp(q[..., :, None] * chain.axes)


def link_poses(chain: KinematicChain, q) -> np.ndarray:
    """Link frames ``(..., dof + 1, 4, 4)``; index 0 is the base."""
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != chain.dof:
        raise ValueError(f"configuration has {q.shape[-1]} joints, chain has {chain.dof}")
    batch = q.shape[:-1]
    out = np.empty(batch + (chain.dof + 1, 4, 4))
    cur = np.broadcast_to(chain.base, batch + (4, 4))
    out[..., 0, :, :] = cur
    if chain.dof:
        rot = np.zeros(batch + (chain.dof, 4, 4))
        rot[..., :3, :3] = _joint_rotations(chain, q)
        rot[..., 3, 3] = 1.0
        for j in range(chain.dof):
            cur = cur @ chain.offsets[j] @ rot[..., j, :, :]
            out[..., j + 1, :, :] = cur
    return out


def fk(chain: KinematicChain, q):
    """End-effector pose and all link poses."""
    links = link_poses(chain, q)
    return links[..., -1, :, :] @ chain.tool, links


def joint_twists(chain: KinematicChain, links) -> np.ndarray:
    """Spatial unit twists ``(..., dof, 6)`` of each joint, ordered (v, w)."""
    # joint j's frame after its offset; the rotation about the axis does not move the axis
    frames = links[..., 1:, :, :]
    axis_w = (frames[..., :3, :3] @ chain.axes[:, :, None])[..., 0]
    point = frames[..., :3, 3]
    return np.concatenate([np.cross(point, axis_w), axis_w], axis=-1)


def fk_jacobian(chain: KinematicChain, q) -> np.ndarray:
    """``(..., 6, dof)``: column j is the left-perturbation twist of the end effector per unit ``q_j``.

    With this convention ``d/dq g(fk(q)) = Dg/DH @ fk_jacobian(q)`` for any
    scalar ``g`` whose pose gradient uses left perturbations.
    """
    links = link_poses(chain, q)
    return np.swapaxes(joint_twists(chain, links), -1, -2)


def geometric_jacobian(chain: KinematicChain, q) -> np.ndarray:
    """Classical geometric Jacobian: end-effector point velocity stacked over angular velocity."""
    ee, links = fk(chain, q)
    tw = joint_twists(chain, links)
    lin = tw[..., :3] + np.cross(tw[..., 3:], ee[..., None, :3, 3])
    return np.swapaxes(np.concatenate([lin, tw[..., 3:]], axis=-1), -1, -2)


def sphere_positions(chain: KinematicChain, q, links=None):
    """World sphere centers ``(..., S, 3)`` and radii ``(S,)``."""
    if links is None:
        links = link_poses(chain, q)
    frames = links[..., chain.sphere_links, :, :]
    centers = (frames[..., :3, :3] @ chain.sphere_centers[:, :, None])[..., 0] + frames[..., :3, 3]
    return centers, chain.sphere_radii.copy()


def sphere_jacobians(chain: KinematicChain, q, links=None, centers=None) -> np.ndarray:
    """``(..., S, 3, dof)`` derivative of every sphere center w.r.t. the joints."""
    if links is None:
        links = link_poses(chain, q)
    if centers is None:
        centers, _ = sphere_positions(chain, q, links)
    tw = joint_twists(chain, links)  # (..., dof, 6)
    vel = tw[..., None, :, :3] + np.cross(tw[..., None, :, 3:], centers[..., :, None, :])  # (..., S, dof, 3)
    # joint j moves link l only when j < l
    mask = np.arange(chain.dof)[None, :] < chain.sphere_links[:, None]
    vel = vel * mask[..., None]
    return np.swapaxes(vel, -1, -2)


def inverse_kinematics(chain: KinematicChain, target, q0, iters: int = 200, damping: float = 1e-6, tol: float = 1e-12):
    """Damped Newton solve of ``fk(q) = target`` from ``q0`` within the joint limits.

    Returns ``(q, err)`` with ``err`` the translation error plus rotation angle.
    """
    q = np.asarray(q0, dtype=float).copy()
    target = np.asarray(target, dtype=float)
    err = np.inf
    for _ in range(iters):
        ee, _ = fk(chain, q)
        # orientation error from the antisymmetric part stays defined at any angle
        rel = target[:3, :3] @ ee[:3, :3].T
        w = 0.5 * lg.vee(rel - rel.T)
        if np.linalg.norm(w) < 1e-6 and np.trace(rel) < 0:
            w = np.array([0.5, 0.0, 0.0])  # escape the saddle at a half turn
        dt = target[:3, 3] - ee[:3, 3]
        # a left twist (v, w) moves the tool origin by v + w x t
        e = np.concatenate([dt - np.cross(w, ee[:3, 3]), w])
        err = float(np.linalg.norm(dt) + lg.rotation_angle(rel))
        if err < tol:
            break
        jac = fk_jacobian(chain, q)
        q = chain.clip(q + jac.T @ np.linalg.solve(jac @ jac.T + damping * np.eye(6), e))
    return q, err


def sphere_gradient_to_joints(chain: KinematicChain, links, centers, grad_centers, twists=None) -> np.ndarray:
    """Pull per-sphere center gradients ``(..., S, 3)`` back to joint gradients ``(..., dof)``.

    Equals ``einsum('...sa,...saj->...j', grad_centers, sphere_jacobians(...))``
    without forming the Jacobians: each joint sees the force and moment
    summed over the spheres it moves, dotted with its twist.
    """
    mask = (np.arange(chain.dof)[None, :] < chain.sphere_links[:, None]).astype(float)  # (S, dof)
    wrench = np.concatenate([grad_centers, np.cross(centers, grad_centers)], axis=-1)  # (..., S, 6)
    summed = np.swapaxes(wrench, -1, -2) @ mask  # (..., 6, dof)
    tw = joint_twists(chain, links) if twists is None else twists
    return np.sum(np.swapaxes(tw, -1, -2) * summed, axis=-2)
