"""Finite-difference checks of every analytic gradient in the package.

Each check returns a :class:`Check` with the measured relative error
``|analytic - numeric| / max(|numeric|, floor)`` and its tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from se3dif import kinematics as kin
from se3dif import liegroup as lg
from se3dif import motionopt as mo
from se3dif.energymodel import EnergyModel, GraspField
from se3dif.training import dsm_loss, perturb, sdf_loss


@dataclass
class Check:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)

    def row(self) -> list:
        return [self.name, self.error, self.tol, "pass" if self.passed else "FAIL"]


def rel_error(analytic, numeric, floor: float = 1e-8) -> float:
    analytic, numeric = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), floor))


def central_diff(fun, x, h):
    """Numeric gradient of scalar ``fun`` at array ``x``."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        a, b = x.copy(), x.copy()
        a[i] += h
        b[i] -= h
        out[i] = (fun(a) - fun(b)) / (2 * h)
    return out


def left_diff(fun, pose, h=1e-5):
    """Numeric left-perturbation gradient of a scalar function of a pose."""
    out = np.zeros(6)
    for j in range(6):
        e = np.zeros(6)
        e[j] = h
        out[j] = (fun(lg.expmap(e) @ pose) - fun(lg.expmap(-e) @ pose)) / (2 * h)
    return out


# --------------------------------------------------------------------------
# Lie group
# --------------------------------------------------------------------------


def check_inv_left_jacobian(seed=0, n=20, h=1e-6) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        phi = rng.standard_normal(6)
        phi[3:] *= 0.5 / np.linalg.norm(phi[3:])
        base = lg.expmap(phi)
        num = np.zeros((6, 6))
        for j in range(6):
            e = np.zeros(6)
            e[j] = h
            num[:, j] = (lg.logmap(lg.expmap(e) @ base) - lg.logmap(lg.expmap(-e) @ base)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(lg.inv_left_jacobian(phi) - num))))
    return Check("liegroup.inv_left_jacobian", worst, 1e-5)


def check_gaussian_score(seed=0, n=100, h=1e-5) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        mean = lg.expmap(rng.standard_normal(6))
        sigma = rng.uniform(0.2, 1.0)
        query = mean @ lg.expmap(0.5 * sigma * rng.standard_normal(6))
        g = lg.LieGaussian(mean, sigma)
        worst = max(worst, rel_error(lg.lie_gaussian_score(g, query),
                                     left_diff(lambda H: float(lg.lie_gaussian_log_density(g, H)), query, h)))
    return Check("liegroup.gaussian_score", worst, 1e-4)


# --------------------------------------------------------------------------
# energy model and losses
# --------------------------------------------------------------------------


def _probe(model: EnergyModel, seed):
    rng = np.random.default_rng(seed)
    grasp = lg.expmap(np.concatenate([0.05 * rng.standard_normal(3), 0.5 * rng.standard_normal(3)]))
    obj = lg.expmap(np.concatenate([0.02 * rng.standard_normal(3), 0.3 * rng.standard_normal(3)]))
    return rng, grasp, obj


def check_energy_pose_grad(model: EnergyModel, seed=0, n=5) -> Check:
    worst = 0.0
    for i in range(n):
        rng, grasp, obj = _probe(model, seed + i)
        k = int(rng.integers(1, model.n_levels + 1))
        _, grad = model.energy_and_pose_grad(grasp[None], obj, 0, k)
        num = left_diff(lambda H: float(model.forward(H[None], obj, 0, k).energy[0]), grasp)
        worst = max(worst, rel_error(grad[0], num))
    return Check("energymodel.pose_grad", worst, 1e-3)


def _param_fd(model, loss, grads, rng, n=20, h=1e-6):
    names = list(model.params)
    sizes = np.array([model.params[k].size for k in names], dtype=float)
    analytic, numeric = [], []
    for _ in range(n):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        idx = int(rng.integers(model.params[name].size))
        flat = model.params[name].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        up = loss()
        flat[idx] = orig - h
        down = loss()
        flat[idx] = orig
        analytic.append(grads[name].reshape(-1)[idx])
        numeric.append((up - down) / (2 * h))
    return rel_error(analytic, numeric)


def check_energy_param_grads(model: EnergyModel, seed=0) -> Check:
    model = model.copy()
    rng, grasp, obj = _probe(model, seed)
    grasps = grasp @ lg.expmap(0.1 * rng.standard_normal((3, 6)))
    k = 2
    grads = model.backward(grasps, obj, 0, k).param_grads
    err = _param_fd(model, lambda: float(model.forward(grasps, obj, 0, k).energy.sum()), grads, rng)
    return Check("energymodel.param_grads", err, 1e-4)


def check_sdf_grad(model: EnergyModel, seed=0) -> Check:
    x = np.random.default_rng(seed).uniform(-0.1, 0.1, (5, 3))
    _, g = model.sdf(x, 0, 1, want_grad=True)
    worst = 0.0
    for i in range(len(x)):
        num = central_diff(lambda p: float(model.sdf(p[None], 0, 1)[0]), x[i], 1e-6)
        worst = max(worst, rel_error(g[i], num))
    return Check("energymodel.sdf_grad", worst, 1e-3)


def check_dsm_loss_grads(model: EnergyModel, seed=0) -> Check:
    model = model.copy()
    rng, grasp, _ = _probe(model, seed)
    grasps = grasp @ lg.expmap(0.05 * rng.standard_normal((4, 6)))
    k = np.array([1, 3, 5, 8])
    noisy, target = perturb(grasps, model.sigma(k), rng)
    ident = lg.identity()
    _, grads = dsm_loss(model, grasps, ident, 0, k, None, noisy=noisy, target=target)
    err = _param_fd(model, lambda: dsm_loss(model, grasps, ident, 0, k, None, noisy=noisy, target=target)[0],
                    grads, rng)
    return Check("training.dsm_loss_grads", err, 1e-4)


def check_sdf_loss_grads(model: EnergyModel, seed=0) -> Check:
    model = model.copy()
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.1, 0.1, (8, 3))
    y = rng.uniform(-0.05, 0.05, 8)
    _, grads = sdf_loss(model, x, y)
    return Check("training.sdf_loss_grads", _param_fd(model, lambda: sdf_loss(model, x, y)[0], grads, rng), 1e-4)


# --------------------------------------------------------------------------
# kinematics
# --------------------------------------------------------------------------


def check_fk_jacobian(chain: kin.KinematicChain, seed=0, n=100, h=1e-6) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        q = chain.random_configuration(rng)
        ee, _ = kin.fk(chain, q)
        inv = lg.inverse(ee)
        num = np.zeros((6, chain.dof))
        for j in range(chain.dof):
            dq = np.zeros(chain.dof)
            dq[j] = h
            num[:, j] = (lg.logmap(kin.fk(chain, q + dq)[0] @ inv) - lg.logmap(kin.fk(chain, q - dq)[0] @ inv)) / (2 * h)
        worst = max(worst, rel_error(kin.fk_jacobian(chain, q), num))
    return Check("kinematics.fk_jacobian", worst, 1e-5)


def check_energy_through_chain(model: EnergyModel, chain: kin.KinematicChain, seed=0) -> Check:
    rng = np.random.default_rng(seed)
    q = chain.random_configuration(rng)
    obj = kin.fk(chain, q)[0] @ lg.make_pose(np.eye(3), np.array([0.0, 0.0, 0.06]))

    def energy(qq):
        return float(model.forward(kin.fk(chain, qq)[0][None], obj, 0, 2).energy[0])

    _, pose_grad = model.energy_and_pose_grad(kin.fk(chain, q)[0][None], obj, 0, 2)
    analytic = pose_grad[0] @ kin.fk_jacobian(chain, q)
    return Check("kinematics.energy_chain_rule", rel_error(analytic, central_diff(energy, q, 1e-6)), 1e-3)


# --------------------------------------------------------------------------
# trajectory costs
# --------------------------------------------------------------------------

COST_TOLERANCES = {
    "smooth": 1e-6,
    "table": 1e-4,
    "box": 1e-4,
    "fix_init": 1e-6,
    "pregrasp": 1e-3,
    "grasp_place": 1e-3,
    "grasp": 1e-3,
    "des_grasp": 1e-3,
}


def _cost_scene(model: EnergyModel, chain: kin.KinematicChain, seed):
    rng = np.random.default_rng(seed)
    obj = lg.make_pose(np.eye(3), np.array([0.45, 0.0, 0.06]))
    box = mo.SceneBox(lg.make_pose(lg.rot_z(0.3), np.array([0.35, 0.05, 0.3])), np.array([0.1, 0.15, 0.1]))
    objective = mo.Objective(chain, [mo.CostTerm("smooth")], grasp_field=GraspField(model, obj), table_z=0.2,
                             boxes=[box], q_init=np.zeros(chain.dof))
    traj = 0.8 * chain.clip(rng.uniform(-1.0, 1.0, (8, chain.dof)))
    params = {
        "grasp_place": {
            "grasp_index": 3,
            "object_grasp_pose": lg.make_pose(lg.rot_z(0.2), np.array([0.3, 0.1, 0.1])),
            "object_place_pose": lg.make_pose(lg.rot_x(0.5), np.array([0.2, -0.2, 0.3])),
        },
        "des_grasp": {"target": lg.make_pose(lg.rot_y(1.0), np.array([0.5, 0.1, 0.2]))},
    }
    return objective, traj, params


def check_costs(model: EnergyModel, chain: kin.KinematicChain, seed=0, h=1e-6) -> list[Check]:
    objective, traj, params = _cost_scene(model, chain, seed)
    checks = []
    for kind, tol in COST_TOLERANCES.items():
        obj = objective.with_terms([mo.CostTerm(kind, 1.0, params.get(kind, {}))])
        _, grad = mo.objective_eval(obj, traj, 3)
        num = central_diff(lambda t: mo.objective_eval(obj, t, 3)[0], traj, h)
        checks.append(Check(f"motionopt.{kind}", rel_error(grad, num), tol))
    full = objective.with_terms([mo.CostTerm(kind, 1.0 + i, params.get(kind, {}))
                                 for i, kind in enumerate(COST_TOLERANCES)])
    _, grad = mo.objective_eval(full, traj, 3)
    num = central_diff(lambda t: mo.objective_eval(full, t, 3)[0], traj, h)
    checks.append(Check("motionopt.objective", rel_error(grad, num), 1e-4))
    return checks


def run_all(model: EnergyModel | None = None, chain: kin.KinematicChain | None = None, seed: int = 0) -> list[Check]:
    model = model or EnergyModel.create(seed=seed)
    chain = chain or kin.load_chain("arm6")
    checks = [
        check_inv_left_jacobian(seed),
        check_gaussian_score(seed),
        check_energy_pose_grad(model, seed),
        check_energy_param_grads(model, seed),
        check_sdf_grad(model, seed),
        check_dsm_loss_grads(model, seed),
        check_sdf_loss_grads(model, seed),
        check_fk_jacobian(chain, seed),
        check_energy_through_chain(model, chain, seed),
    ]
    return checks + check_costs(model, chain, seed)
