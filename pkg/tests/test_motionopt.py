import numpy as np
import pytest

from se3dif import datagen as dg
from se3dif import kinematics as kin
from se3dif import liegroup as lg
from se3dif import motionopt as mo
from se3dif.energymodel import EnergyModel, GraspField
from se3dif.errors import ConfigError, NonFiniteCost, SchemaError, UnknownTerm

from oracles import central_diff, hat6, pose, rel_error, rot_z, series_expm

Q_HOME = np.array([0.0, 0.373, -1.875, 0.0, 2.0, 0.0])


@pytest.fixture(scope="module")
def arm():
    return kin.load_chain("arm6")


@pytest.fixture(scope="module")
def fresh_field():
    return GraspField(EnergyModel.create(seed=0), pose(t=[0.45, 0.0, 0.06]))


def one_sphere_chain(center=(0.0, 0.0, 0.0), radius=0.05):
    d = kin.load_chain("planar3").to_dict()
    d["spheres"] = [{"link": 0, "center": list(center), "radius": radius}]
    return kin.KinematicChain.from_dict(d)


def planar_tool_along_x():
    d = kin.load_chain("planar3").to_dict()
    d["tool"]["axis_angle"] = [0.0, np.pi / 2, 0.0]
    return kin.KinematicChain.from_dict(d)


def planar_ik(x, y, heading):
    """Elbow-down analytic solution of the 0.3/0.3/0.1 planar arm."""
    wx, wy = x - 0.1 * np.cos(heading), y - 0.1 * np.sin(heading)
    c2 = (wx**2 + wy**2 - 0.18) / 0.18
    q2 = np.arccos(np.clip(c2, -1, 1))
    q1 = np.arctan2(wy, wx) - np.arctan2(0.3 * np.sin(q2), 0.3 + 0.3 * np.cos(q2))
    return np.array([q1, q2, heading - q1 - q2])


def random_traj(chain, rng, T=6, scale=0.3):
    base = chain.random_configuration(rng) * 0.6
    return base + scale * np.cumsum(rng.standard_normal((T, chain.dof)), axis=0) / np.sqrt(T)


def fd_traj(fun, traj, h=1e-6):
    return central_diff(lambda x: float(fun(x)), traj, h)


# -- geometry helpers ----------------------------------------------------------


def test_box_sdf_values():
    box = mo.SceneBox(pose(rot_z(0.3), [0.1, 0.2, 0.3]), [0.1, 0.2, 0.05])
    local = np.array([[0, 0, 0], [0.1, 0, 0], [0.2, 0, 0], [0.2, 0.3, 0.0], [0.05, 0.0, 0.0]])
    world = lg.transform_point(box.pose, local)
    np.testing.assert_allclose(mo.box_sdf(world, box), [-0.05, 0.0, 0.1, np.hypot(0.1, 0.1), -0.05], atol=1e-15)


def test_box_sdf_kernels_agree():
    rng = np.random.default_rng(0)
    box = mo.SceneBox(lg.expmap(rng.standard_normal(6) * 0.3), [0.05, 0.1, 0.2])
    pts = rng.uniform(-0.4, 0.4, (500, 3))
    args = (pts, box.pose[:3, :3].copy(), box.pose[:3, 3].copy(), box.half_extents)
    a, ga = mo._box_sdf_numpy(*args)
    b, gb = mo._box_sdf_numba(*args)
    np.testing.assert_allclose(a, b, atol=1e-15)
    np.testing.assert_allclose(ga, gb, atol=1e-15)


def test_box_sdf_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    box = mo.SceneBox(lg.expmap(rng.standard_normal(6) * 0.3), [0.05, 0.1, 0.2])
    for p in rng.uniform(-0.4, 0.4, (20, 3)):
        _, g = mo.box_sdf(p[None], box, want_grad=True)
        assert rel_error(g[0], central_diff(lambda x: float(mo.box_sdf(x[None], box)[0]), p)) < 1e-6


def test_scene_box_validation():
    with pytest.raises(ValueError):
        mo.SceneBox(np.eye(4), [0.1, 0.0, 0.1])


def test_pose_distance_gradients():
    rng = np.random.default_rng(2)
    for _ in range(5):
        a, b = lg.expmap(rng.standard_normal(6)), lg.expmap(rng.standard_normal(6))
        d, ga, gb = mo.pose_distance(a, b, 10.0)
        assert d == pytest.approx(10 * np.linalg.norm(a[:3, 3] - b[:3, 3]) + lg.rotation_angle(a[:3, :3].T @ b[:3, :3]))
        for which, g in ((0, ga), (1, gb)):
            num = np.zeros(6)
            for j in range(6):
                e = np.zeros(6)
                e[j] = 1e-6
                up, down = [a, b], [a, b]
                up[which] = series_expm(hat6(e)) @ up[which]
                down[which] = series_expm(hat6(-e)) @ down[which]
                num[j] = (mo.pose_distance(*up, 10.0, False) - mo.pose_distance(*down, 10.0, False)) / 2e-6
            assert rel_error(g, num) < 1e-6


# -- individual costs ----------------------------------------------------------


def test_smooth_examples():
    c, g = mo.cost_smooth(np.ones((5, 3)) * 0.4)
    assert c == 0.0 and np.all(g == 0)
    c, g = mo.cost_smooth(np.array([[0.0, 0, 0], [1.0, 0, 0]]))
    assert c == 1.0
    np.testing.assert_array_equal(g, [[-2, 0, 0], [2, 0, 0]])


def test_smooth_gradient():
    traj = np.random.default_rng(3).standard_normal((7, 4))
    assert rel_error(mo.cost_smooth(traj)[1], fd_traj(lambda x: mo.cost_smooth(x)[0], traj)) < 1e-6


def test_fix_init_examples():
    q = np.array([0.1, 0.2, 0.3])
    traj = np.tile(q, (4, 1))
    c, g = mo.cost_fix_init(traj, q)
    assert c == 0.0 and np.all(g == 0)
    traj[0, 1] += 0.3
    c, g = mo.cost_fix_init(traj, q)
    assert c == pytest.approx(0.3)
    traj[0] += np.array([0.05, -0.02, 0.07])
    assert rel_error(mo.cost_fix_init(traj, q)[1], fd_traj(lambda x: mo.cost_fix_init(x, q)[0], traj)) < 1e-6


def test_table_examples():
    chain = one_sphere_chain()
    obj = mo.Objective(chain, [], table_z=0.0)
    c, _ = mo.cost_table(np.zeros((1, 3)), obj)
    assert c == pytest.approx(0.05)
    c, _ = mo.cost_table(np.zeros((4, 3)), obj)
    assert c == pytest.approx(4 * 0.05)
    high = mo.Objective(chain, [], table_z=-0.2)
    assert mo.cost_table(np.zeros((4, 3)), high)[0] == 0.0


def test_box_examples():
    chain = one_sphere_chain()
    at_face = mo.Objective(chain, [], boxes=[mo.SceneBox(pose(t=[0.1, 0, 0]), [0.1, 0.1, 0.1])])
    assert mo.cost_box(np.zeros((1, 3)), at_face.boxes, at_face)[0] == pytest.approx(0.05)
    far = mo.Objective(chain, [], boxes=[mo.SceneBox(pose(t=[1.0, 0, 0]), [0.1, 0.1, 0.1])])
    assert mo.cost_box(np.zeros((3, 3)), far.boxes, far)[0] == 0.0


def test_collision_gradients(arm):
    rng = np.random.default_rng(4)
    boxes = [mo.SceneBox(pose(rot_z(0.2), [0.1, 0.0, 0.45]), [0.25, 0.25, 0.2])]
    obj = mo.Objective(arm, [], table_z=0.35, boxes=boxes)
    traj = random_traj(arm, rng)
    table_c, table_g = mo.cost_table(traj, obj)
    box_c, box_g = mo.cost_box(traj, boxes, obj)
    assert table_c > 0 and box_c > 0
    assert rel_error(table_g, fd_traj(lambda x: mo.cost_table(x, obj)[0], traj)) < 1e-4
    assert rel_error(box_g, fd_traj(lambda x: mo.cost_box(x, boxes, obj)[0], traj)) < 1e-4


def test_pregrasp_zero_on_approach_ray():
    chain = planar_tool_along_x()
    obj = mo.Objective(chain, [])
    T, n, offset = 8, 4, 0.08
    traj = np.zeros((T, 3))
    for t in range(T):
        back = offset * max(T - 1 - t, 0) / n if t >= T - 1 - n else 0.25
        traj[t] = planar_ik(0.55 - back, 0.1, 0.0)
    ee, _ = kin.fk(chain, traj[-1])
    np.testing.assert_allclose(ee[:3, 2], [1, 0, 0], atol=1e-15)
    c, _ = mo.cost_pregrasp(traj, obj, n, offset)
    assert c < 1e-9


def test_pregrasp_empty_horizon(arm):
    traj = random_traj(arm, np.random.default_rng(5))
    c, g = mo.cost_pregrasp(traj, mo.Objective(arm, []), n=0)
    assert c == 0.0 and np.all(g == 0)


def test_pregrasp_gradient(arm):
    obj = mo.Objective(arm, [])
    traj = random_traj(arm, np.random.default_rng(6))
    _, g = mo.cost_pregrasp(traj, obj, 3, 0.08)
    assert rel_error(g, fd_traj(lambda x: mo.cost_pregrasp(x, obj, 3, 0.08)[0], traj)) < 1e-3


def test_grasp_place_examples(arm):
    obj = mo.Objective(arm, [])
    q = np.array([0.1, 0.4, -1.2, 0.3, 0.8, -0.2])
    traj = np.tile(q, (6, 1))
    c, _ = mo.cost_grasp_place_similarity(traj, obj, 3, np.eye(4), np.eye(4))
    assert c == pytest.approx(0.0, abs=1e-7)
    ee, _ = kin.fk(arm, q)
    place = ee @ pose(rot_z(-0.4)) @ np.linalg.inv(ee)
    c, _ = mo.cost_grasp_place_similarity(traj, obj, 3, np.eye(4), place)
    assert c == pytest.approx(0.4, abs=1e-12)


def test_grasp_place_gradient(arm):
    obj = mo.Objective(arm, [])
    rng = np.random.default_rng(7)
    traj = random_traj(arm, rng)
    og, op = lg.expmap(0.3 * rng.standard_normal(6)), lg.expmap(0.3 * rng.standard_normal(6))
    _, g = mo.cost_grasp_place_similarity(traj, obj, 3, og, op)
    num = fd_traj(lambda x: mo.cost_grasp_place_similarity(x, obj, 3, og, op)[0], traj)
    assert rel_error(g, num) < 1e-3


def test_des_grasp_examples(arm):
    obj = mo.Objective(arm, [])
    traj = random_traj(arm, np.random.default_rng(8))
    ee, _ = kin.fk(arm, traj[-1])
    c, _ = mo.cost_des_grasp_dist(traj, obj, ee)
    assert c == pytest.approx(0.0, abs=1e-7)
    c, _ = mo.cost_des_grasp_dist(traj, obj, pose(ee[:3, :3], ee[:3, 3] + [0.0, 0.1, 0.0]))
    assert c == pytest.approx(1.0, abs=1e-12)


def test_des_grasp_gradient(arm):
    obj = mo.Objective(arm, [])
    rng = np.random.default_rng(9)
    traj = random_traj(arm, rng)
    target = lg.expmap(0.5 * rng.standard_normal(6))
    _, g = mo.cost_des_grasp_dist(traj, obj, target)
    assert rel_error(g, fd_traj(lambda x: mo.cost_des_grasp_dist(x, obj, target)[0], traj)) < 1e-4


def test_grasp_energy_constant_model(arm):
    m = EnergyModel.create(seed=1)
    for name in m.params:
        if name.startswith("decoder.") and name.endswith("weight"):
            m.params[name][:] = 0.0
    obj = mo.Objective(arm, [mo.CostTerm("grasp", 1.0)], grasp_field=GraspField(m))
    _, g = mo.cost_grasp_energy(random_traj(arm, np.random.default_rng(10)), obj, 3)
    assert np.all(g == 0)


def test_grasp_energy_gradient(arm, fresh_field):
    obj = mo.Objective(arm, [mo.CostTerm("grasp", 1.0)], grasp_field=fresh_field)
    traj = random_traj(arm, np.random.default_rng(11))
    for wp in (-1, 2):
        _, g = mo.cost_grasp_energy(traj, obj, 4, wp)
        num = fd_traj(lambda x: mo.cost_grasp_energy(x, obj, 4, wp)[0], traj)
        assert rel_error(g, num) < 1e-3
        assert np.count_nonzero(np.abs(g).sum(axis=1)) == 1


# -- weighted objective ---------------------------------------------------------


def reference_objective(field):
    scene = mo.load_scene("pick_occlusion")
    return scene.objective(field)


def test_preset_weights(fresh_field):
    obj = reference_objective(fresh_field)
    assert {t.kind: t.weight for t in obj.terms} == {
        "grasp": 0.5, "smooth": 10.0, "table": 20.0, "box": 20.0, "fix_init": 10.0, "pregrasp": 5.0,
    }
    with pytest.raises(ConfigError):
        mo.preset_terms("nope")
    with pytest.raises(UnknownTerm):
        mo.preset_terms("pick_occlusion", {"friction": 1.0})


def test_objective_validation(arm, fresh_field):
    with pytest.raises(UnknownTerm):
        mo.CostTerm("friction")
    with pytest.raises(ValueError):
        mo.CostTerm("smooth", 0.0)
    with pytest.raises(ConfigError):
        mo.Objective(arm, [mo.CostTerm("grasp")])
    with pytest.raises(ConfigError):
        mo.Objective(arm, [mo.CostTerm("fix_init")])


def test_single_term_linearity():
    chain = kin.load_chain("planar3")
    traj = np.random.default_rng(12).standard_normal((5, 3))
    c, g = mo.objective_eval(mo.Objective(chain, [mo.CostTerm("smooth", 2.0)]), traj)
    c0, g0 = mo.cost_smooth(traj)
    assert c == 2 * c0
    np.testing.assert_array_equal(g, 2 * g0)


def test_scaled_weights_scale_exactly(fresh_field):
    obj = reference_objective(fresh_field)
    traj = random_traj(obj.chain, np.random.default_rng(13), T=8)
    c, g = mo.objective_eval(obj, traj, 2)
    c4, g4 = mo.objective_eval(obj.scaled(4.0), traj, 2)
    assert c4 == pytest.approx(4 * c, rel=1e-15)
    np.testing.assert_allclose(g4, 4 * g, rtol=1e-15, atol=0)


def test_total_gradient_is_sum_and_matches_fd(fresh_field):
    obj = reference_objective(fresh_field)
    obj.boxes[0] = mo.SceneBox(pose(t=[0.3, 0.0, 0.4]), [0.1, 0.1, 0.15])
    rng = np.random.default_rng(14)
    traj = random_traj(obj.chain, rng, T=6)
    c, g, parts = mo.objective_eval(obj, traj, 3, breakdown=True)
    assert c == pytest.approx(sum(t.weight * parts[t.kind] for t in obj.terms))
    assert rel_error(g, fd_traj(lambda x: mo.objective_eval(obj, x, 3)[0], traj)) < 1e-3


def test_batched_eval_matches_single(fresh_field):
    obj = reference_objective(fresh_field)
    rng = np.random.default_rng(15)
    trajs = np.stack([random_traj(obj.chain, rng, T=6) for _ in range(3)])
    c, g = mo.objective_eval(obj, trajs, 2)
    for i in range(3):
        ci, gi = mo.objective_eval(obj, trajs[i], 2)
        assert c[i] == pytest.approx(ci, rel=1e-12)
        np.testing.assert_allclose(g[i], gi, rtol=1e-10, atol=1e-12)


# -- optimizer -----------------------------------------------------------------


def test_config_validation():
    for bad in ({"n_particles": 0}, {"waypoints": 1}, {"step_rate": -0.1}, {"threads": 0}, {"metric": "l1"}):
        with pytest.raises(ConfigError):
            mo.OptimizerConfig(**bad)
    with pytest.raises(ConfigError):
        mo.OptimizerConfig.from_dict({"particles": 4})


def test_smoothness_covariance():
    cov = mo.smoothness_covariance(32, 0.2)
    assert cov.shape == (31, 31)
    assert np.sqrt(np.max(np.diag(cov))) == pytest.approx(0.2)
    assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_smoothness_metric_conditions_smooth_cost():
    T = 16
    k = mo.smoothness_metric(T)
    d1 = np.diff(np.eye(T), axis=0)
    prod = k @ (d1.T @ d1)
    # the smoothness Hessian becomes the projection removing the first-waypoint rigid shift
    np.testing.assert_allclose(prod, np.eye(T) - np.outer(np.ones(T), np.eye(T)[0]), atol=1e-10)


def test_initial_trajectories_start_at_q_init(arm):
    obj = mo.Objective(arm, [mo.CostTerm("smooth")], q_init=Q_HOME)
    cfg = mo.OptimizerConfig(n_particles=6)
    trajs = mo.initial_trajectories(obj, cfg, [np.random.default_rng(i) for i in range(6)])
    assert trajs.shape == (6, 32, 6)
    np.testing.assert_array_equal(trajs[:, 0], np.tile(Q_HOME, (6, 1)))
    assert np.all(trajs >= arm.lower) and np.all(trajs <= arm.upper)


def test_smooth_and_fix_converge(arm):
    obj = mo.Objective(arm, [mo.CostTerm("smooth"), mo.CostTerm("fix_init")], q_init=Q_HOME)
    cfg = mo.OptimizerConfig(n_particles=8, noise=False, inner_steps=20, polish_steps=0, step_rate=0.7,
                             metric="smooth")
    res = mo.optimize(obj, cfg)
    assert res.history.shape == (8, 200)
    assert np.max(mo.cost_smooth(res.trajectories)[0]) < 1e-4
    np.testing.assert_allclose(res.trajectories, np.broadcast_to(Q_HOME, res.trajectories.shape), atol=1e-3)


def test_serial_and_threaded_identical(arm, fresh_field):
    obj = reference_objective(fresh_field)
    base = dict(waypoints=8, inner_steps=3, polish_steps=5, seed=3)
    a = mo.optimize(obj, mo.OptimizerConfig(n_particles=40, **base))
    b = mo.optimize(obj, mo.OptimizerConfig(n_particles=40, threads=2, **base))
    c = mo.optimize(obj, mo.OptimizerConfig(n_particles=5, **base))
    assert a.trajectories.tobytes() == b.trajectories.tobytes()
    assert a.final_costs.tobytes() == b.final_costs.tobytes()
    # a smaller run follows the same particles; batch size only changes rounding
    np.testing.assert_allclose(a.trajectories[:5], c.trajectories, rtol=0, atol=1e-9)


def test_best_is_lowest_cost(fresh_field):
    obj = reference_objective(fresh_field)
    res = mo.optimize(obj, mo.OptimizerConfig(n_particles=6, waypoints=8, inner_steps=2, polish_steps=2))
    assert res.best_index == int(np.argmin(res.final_costs))
    np.testing.assert_array_equal(res.best, res.trajectories[res.best_index])
    assert res.best_cost == res.final_costs.min()
    assert set(res.breakdown) == {t.kind for t in obj.terms}


def test_initial_count_checked(fresh_field):
    obj = reference_objective(fresh_field)
    with pytest.raises(ConfigError):
        mo.optimize(obj, mo.OptimizerConfig(n_particles=3), init=np.zeros((2, 32, 6)))


def test_nonfinite_cost_reports_particle(arm):
    obj = mo.Objective(arm, [mo.CostTerm("smooth"), mo.CostTerm("fix_init")], q_init=np.full(6, np.nan))
    with pytest.raises(NonFiniteCost) as err:
        mo.optimize(obj, mo.OptimizerConfig(n_particles=3, waypoints=4, inner_steps=1))
    assert err.value.particle == 0


def within_level_steps(history, levels, inner):
    h = history[:, : levels * inner].reshape(len(history), levels, inner)
    return np.diff(h, axis=2)


def test_noise_off_monotone_fresh_model(fresh_field):
    obj = reference_objective(fresh_field)
    cfg = mo.OptimizerConfig(n_particles=8, noise=False, step_rate=0.01, polish_steps=20, seed=1)
    res = mo.optimize(obj, cfg)
    assert np.mean(within_level_steps(res.history, 10, 40) <= 0) >= 0.95
    assert np.all(np.diff(res.history[:, 400:], axis=1) <= 0)


def test_argmin_invariant_to_weight_scale_noise_off(fresh_field):
    obj = reference_objective(fresh_field)
    cfg = mo.OptimizerConfig(n_particles=12, noise=False, step_rate=0.01, polish_steps=0, seed=2)
    picks = {mo.optimize(obj.scaled(s), cfg).best_index for s in (0.5, 1.0, 3.0)}
    assert len(picks) == 1


def test_decoupled_stage_two_deterministic(fresh_field):
    obj = reference_objective(fresh_field)
    grasp = lg.compose(fresh_field.object_pose, dg.reference_cylinder()[1].side_pose(np.pi, 0.0))
    cfg = mo.OptimizerConfig(n_particles=4, waypoints=8, inner_steps=3, polish_steps=5)
    a = mo.decoupled_optimize(obj, cfg, grasps=grasp)
    b = mo.decoupled_optimize(obj, cfg, grasps=grasp)
    assert a.trajectories.tobytes() == b.trajectories.tobytes()
    assert "des_grasp" in a.breakdown and "grasp" not in a.breakdown
    np.testing.assert_array_equal(a.targets, np.broadcast_to(grasp, (4, 4, 4)))


def test_decoupled_unreachable_grasp_leaves_residual(fresh_field):
    obj = reference_objective(fresh_field)
    far = pose(t=[2.0, 0.0, 0.1])
    res = mo.decoupled_optimize(obj, mo.OptimizerConfig(n_particles=4, polish_steps=50, seed=0), grasps=far)
    assert res.breakdown["des_grasp"][res.best_index] > 1.0


def test_decoupled_needs_model(arm):
    obj = mo.Objective(arm, [mo.CostTerm("smooth")])
    with pytest.raises(ConfigError):
        mo.decoupled_optimize(obj, mo.OptimizerConfig(n_particles=2))


def test_grasp_outcome(arm):
    scene = mo.load_scene("pick_occlusion")
    obj = scene.objective(GraspField(EnergyModel.create(seed=0), scene.object_pose))
    _, man = dg.reference_cylinder()
    out = mo.grasp_outcome(obj, np.tile(scene.q_init, (4, 1)), scene.object_pose, man)
    assert out["collision"] == 0.0
    assert out["manifold_distance"] > 0.3 and not out["success"]


# -- scenes --------------------------------------------------------------------


@pytest.mark.parametrize("name", ["pick_occlusion", "pick_adversarial"])
def test_reference_scenes(name, tmp_path):
    scene = mo.load_scene(name)
    assert scene.chain.name == "arm6" and scene.preset == "pick_occlusion"
    np.testing.assert_allclose(scene.object_pose[:3, 3], [0.45, 0.0, 0.06])
    # the home configuration is collision free in both scenes
    obj = scene.objective(GraspField(EnergyModel.create(seed=0), scene.object_pose))
    assert mo.collision_cost(obj, np.tile(scene.q_init, (2, 1))) == 0.0
    path = tmp_path / "scene.json"
    path.write_text(__import__("json").dumps(scene.to_dict()))
    back = mo.load_scene(path)
    assert back.to_dict() == scene.to_dict()


def test_scene_errors():
    d = mo.load_scene("pick_occlusion").to_dict()
    with pytest.raises(SchemaError):
        mo.load_scene({**d, "schema": "x/1"})
    with pytest.raises(ConfigError):
        mo.load_scene({**d, "extra": 1})
    with pytest.raises(UnknownTerm):
        mo.load_scene({**d, "weights": {"friction": 1.0}})
    with pytest.raises(FileNotFoundError):
        mo.load_scene("no_such_scene")


# -- trained model on the reference scene --------------------------------------


@pytest.mark.slow
def test_optimized_energy_below_initial(two_mode_model):
    scene = mo.load_scene("pick_occlusion")
    obj = scene.objective(GraspField(two_mode_model, scene.object_pose))
    cfg = mo.OptimizerConfig(n_particles=8, seed=0)
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(cfg.n_particles)]
    init = mo.initial_trajectories(obj, cfg, rngs)
    res = mo.optimize(obj, cfg)
    e0 = mo.cost_grasp_energy(init[res.best_index], obj, 1)[0]
    e1 = mo.cost_grasp_energy(res.best, obj, 1)[0]
    assert e1 < e0


@pytest.mark.slow
def test_noise_off_monotone_trained(two_mode_model):
    for name in ("pick_occlusion", "pick_adversarial"):
        scene = mo.load_scene(name)
        obj = scene.objective(GraspField(two_mode_model, scene.object_pose))
        res = mo.optimize(obj, mo.OptimizerConfig(n_particles=8, noise=False, step_rate=0.01, polish_steps=0, seed=1))
        assert np.mean(within_level_steps(res.history, 10, 40) <= 0) >= 0.95


@pytest.mark.slow
def test_decoupled_reachable_grasp_succeeds(two_mode_model):
    # a side grasp facing the robot through the open side of the reference scene
    scene = mo.load_scene("pick_occlusion")
    obj = scene.objective(GraspField(two_mode_model, scene.object_pose))
    _, man = dg.reference_cylinder()
    grasp = lg.compose(scene.object_pose, man.side_pose(np.pi, 0.0))
    wins = 0
    for seed in range(3):
        res = mo.decoupled_optimize(obj, mo.OptimizerConfig(n_particles=16, seed=seed), grasps=grasp)
        wins += mo.grasp_outcome(obj, res.best, scene.object_pose, man)["success"]
    assert wins >= 2
