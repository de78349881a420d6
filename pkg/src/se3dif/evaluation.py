"""Sample-quality metrics and SDF-based object pose inference."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from se3dif import liegroup as lg
from se3dif._jit import njit, select
from se3dif.datagen import DEFAULT_SUCCESS_THRESHOLD, FAMILY_NAMES, GraspManifold, project_to_manifold

# --------------------------------------------------------------------------
# linear sum assignment (shortest augmenting path with dual potentials)
# --------------------------------------------------------------------------


@njit
def _hungarian_numba(cost):
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assign = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        assign[p[j] - 1] = j - 1
    return assign, u[1:], v[1:]


def _hungarian_numpy(cost):
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    padded = np.zeros((n + 1, n + 1))
    padded[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = padded[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            masked = np.where(free, minv, np.inf)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assign = np.empty(n, dtype=np.int64)
    assign[p[1:] - 1] = np.arange(n)
    return assign, u[1:], v[1:]


_hungarian = select(_hungarian_numba, _hungarian_numpy)


def _lexicographic_refine(cost, assign, u, v):
    """Among optimal matchings (the equality graph of the duals), pick the lexicographically smallest."""
    n = len(assign)
    tol = 1e-12 * (1.0 + np.max(np.abs(cost))) * n
    tight = (cost - u[:, None] - v[None, :]) <= tol
    col_of = assign.copy()
    row_of = np.empty(n, dtype=np.int64)
    row_of[col_of] = np.arange(n)
    fixed = np.zeros(n, dtype=bool)
    for i in range(n):
        for j in np.flatnonzero(tight[i]):
            if j >= col_of[i]:
                break
            path = _alternating_path(tight, row_of, col_of, fixed, i, j)
            if path is not None:
                target = col_of[i]
                col_of[i] = j
                row_of[j] = i
                for r, c in path:
                    col_of[r] = c
                    row_of[c] = r
                assert col_of[path[-1][0]] == target
                break
        fixed[i] = True
    return col_of


def _alternating_path(tight, row_of, col_of, fixed, i, j):
    """Rows re-matched, as ``(row, new col)`` pairs, to free column ``col_of[i]`` for row ``row_of[j]``."""
    start = row_of[j]
    goal = col_of[i]
    if fixed[start]:
        return None
    parent = {start: None}
    queue = deque([start])
    while queue:
        r = queue.popleft()
        for c in np.flatnonzero(tight[r]):
            if c == col_of[r]:
                continue
            if c == goal:
                path = [(r, c)]
                while parent[r] is not None:
                    prev_r, via_c = parent[r]
                    path.append((prev_r, via_c))
                    r = prev_r
                return path[::-1]
            r2 = row_of[c]
            if r2 == i or fixed[r2] or r2 in parent:
                continue
            parent[r2] = (r, c)
            queue.append(r2)
    return None


def solve_assignment(cost) -> tuple[np.ndarray, float]:
    """Minimum-cost perfect matching of a square matrix.

    Returns ``(perm, total)`` with row ``i`` assigned to column ``perm[i]``.
    Among optimal matchings the lexicographically smallest ``perm`` wins.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError("assignment cost must be a square matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("assignment cost must be finite")
    n = cost.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    assign, u, v = _hungarian(np.ascontiguousarray(cost))
    perm = _lexicographic_refine(cost, assign, u, v)
    return perm, float(cost[np.arange(n), perm].sum())


# --------------------------------------------------------------------------
# sample metrics
# --------------------------------------------------------------------------


def emd(samples, reference) -> float:
    """Mean matched se3 distance between two equally sized pose sets."""
    samples = np.asarray(samples, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if samples.shape != reference.shape:
        raise ValueError("emd needs equally sized pose sets")
    if len(samples) == 0:
        return 0.0
    dist = lg.pairwise_se3_distance(samples, reference, check=False)
    _, total = solve_assignment(dist)
    return total / len(samples)


def _to_object_frame(samples, object_pose):
    samples = np.asarray(samples, dtype=float)
    if object_pose is None:
        return samples
    return lg.compose(lg.inverse(np.asarray(object_pose, dtype=float)), samples)


def success_rate(samples, manifold: GraspManifold, threshold: float = DEFAULT_SUCCESS_THRESHOLD, object_pose=None):
    """Fraction of poses within ``threshold`` of the grasp manifold."""
    samples = _to_object_frame(samples, object_pose).reshape(-1, 4, 4)
    if len(samples) == 0:
        return 0.0
    _, dist = project_to_manifold(manifold, samples)
    return float(np.mean(dist <= threshold))


@dataclass
class EvalReport:
    success_rate: float
    emd: float | None
    distances: np.ndarray
    mode_coverage: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "success_rate": self.success_rate,
            "emd": self.emd,
            "mode_coverage": dict(self.mode_coverage),
            "distances": self.distances.tolist(),
        }

    def metrics_line(self) -> str:
        cov = "\t".join(f"{k}={v!r}" for k, v in sorted(self.mode_coverage.items()))
        return f"success={self.success_rate!r}\temd={self.emd!r}\t{cov}".rstrip("\t")


def evaluate(samples, manifold: GraspManifold, reference=None, threshold: float = DEFAULT_SUCCESS_THRESHOLD,
             object_pose=None) -> EvalReport:
    """Success rate, per-family coverage (share of all samples) and optional EMD."""
    local = _to_object_frame(samples, object_pose).reshape(-1, 4, 4)
    _, dist, fam = project_to_manifold(manifold, local, return_family=True)
    ok = dist <= threshold
    coverage = {FAMILY_NAMES[f]: float(np.mean(ok & (fam == f))) for f in manifold.families}
    score = None
    if reference is not None:
        score = emd(local, _to_object_frame(reference, object_pose))
    return EvalReport(float(np.mean(ok)), score, dist, coverage)


# --------------------------------------------------------------------------
# object pose from a point cloud
# --------------------------------------------------------------------------


def _cloud_objective(model, cloud, pose, code_index, k, want_grad):
    local = lg.transform_point(lg.inverse(pose), cloud)
    if not want_grad:
        return float(np.mean(model.sdf(local, code_index, k) ** 2))
    sdf, g_local = model.sdf(local, code_index, k, want_grad=True)
    # world-frame gradient of each point's squared sdf; moving the object by
    # Exp(tau) moves the cloud by Exp(-tau) relative to it
    g_world = 2.0 * sdf[:, None] * (g_local @ lg.rotation(pose).T)
    lin = -g_world.mean(axis=0)
    ang = -np.cross(cloud, g_world).mean(axis=0)
    return float(np.mean(sdf**2)), np.concatenate([lin, ang])


def infer_object_pose(model, pointcloud, code_index: int = 0, init=None, iters: int = 100, k: int = 1,
                      step: float = 0.05, return_history: bool = False):
    """Object pose minimizing the mean squared predicted SDF of the observed cloud.

    Riemannian gradient descent with left updates ``Exp(-a g) H`` and a
    backtracking line search, so the objective never increases.
    """
    cloud = np.atleast_2d(np.asarray(pointcloud, dtype=float))
    pose = lg.identity() if init is None else np.asarray(init, dtype=float).copy()
    lg.logmap(pose)  # validate: raises AngleNearPi for ill-conditioned initial rotations
    f, g = _cloud_objective(model, cloud, pose, code_index, k, True)
    history = [f]
    for _ in range(iters):
        gn = np.linalg.norm(g)
        if gn < 1e-12:
            break
        a = step / gn
        for _ in range(30):
            cand = lg.compose(lg.expmap(-a * g), pose)
            fc = _cloud_objective(model, cloud, cand, code_index, k, False)
            if fc <= f - 1e-4 * a * gn**2:
                break
            a *= 0.5
        else:
            break
        pose = cand
        f, g = _cloud_objective(model, cloud, pose, code_index, k, True)
        history.append(f)
    if return_history:
        return pose, np.asarray(history)
    return pose


def sdf_residual(model, pointcloud, pose, code_index: int = 0, k: int = 1) -> float:
    """Mean absolute predicted SDF of the cloud seen from ``pose``."""
    local = lg.transform_point(lg.inverse(np.asarray(pose, dtype=float)), np.atleast_2d(pointcloud))
    return float(np.mean(np.abs(model.sdf(local, code_index, k))))
