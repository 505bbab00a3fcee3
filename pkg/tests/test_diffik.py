"""Phase planning and damped least-squares tracking."""

import math

import numpy as np
import pytest

from demoforge.diffik import (
    PHASES, PhasePlan, SolverConfig, arm_dofs, plan_phases, solve_bimanual, solve_step, solve_trajectory,
)
from demoforge.errors import Diverged, TrackingFailure, WindowOutOfRange
from demoforge.geom import Pose, geodesic_angle, quat_from_axis_angle, quat_yaw
from demoforge.grasp import make_candidate
from demoforge.retarget import PartTrajectory
from demoforge.samples import ARM7_HOME

DT = 1.0 / 15.0
M = np.diag([1.0, -1.0, 1.0])


def mirror(p: Pose) -> Pose:
    """Reflection through the xz-plane, conjugated so the frame stays right-handed."""
    T = np.eye(4)
    T[:3, :3] = M @ p.rotation @ M
    T[:3, 3] = M @ p.position
    return Pose.from_matrix(T)


def smooth_path(model, rng, n, dofs):
    """Joint path of summed sinusoids inside the limits and below the velocity bounds."""
    q0 = model.home()
    q0[dofs] = np.array(ARM7_HOME)
    t = np.arange(n) * DT
    path = np.tile(q0, (n, 1))
    for k in dofs:
        amp = rng.uniform(0.05, 0.35)
        w = rng.uniform(0.3, 1.2)
        phase = rng.uniform(0, 2 * math.pi)
        path[:, k] = q0[k] + amp * (np.sin(w * t + phase) - math.sin(phase))
    return np.clip(path, model.lower + 1e-3, model.upper - 1e-3)


def fk_plan(model, path, frame, phase="pregrasp"):
    targets = [model.link_pose(q, frame) for q in path]
    n = len(path)
    return PhasePlan(np.arange(n) * DT, targets, np.ones(n), [phase] * n, targets)


def line_traj(n=40, dx=0.2):
    t = np.arange(n) * DT
    pos = np.stack([0.5 + np.linspace(0, dx, n), np.zeros(n), np.full(n, 0.1)], axis=1)
    return PartTrajectory("obj", t, pos, [[1, 0, 0, 0]] * n)


GRASP = make_candidate([0, -0.02, 0], [0, -1, 0], [0, 0.02, 0], [0, 1, 0], 0.5, approach_hint=(0, 0, -1))


# -- plan_phases ---------------------------------------------------------------------


def test_plan_labels_and_gripper():
    tr = line_traj()
    plan = plan_phases(tr, GRASP, (tr.times[5], tr.times[30]), dt=DT)
    assert set(plan.phases) <= set(PHASES)
    order = [PHASES.index(p) for p in plan.phases]
    assert order == sorted(order)
    first_t = plan.phases.index("transport")
    assert plan.gripper[first_t - 1] == 0.0
    assert all(plan.gripper[i] == 0.0 for i in plan.transport_indices())
    rel = [i for i, p in enumerate(plan.phases) if p == "release"]
    assert plan.gripper[rel[-1]] == 1.0
    assert np.allclose(np.diff(plan.times), DT)


def test_zero_standoff_pregrasp_equals_grasp():
    tr = line_traj()
    plan = plan_phases(tr, GRASP, (tr.times[5], tr.times[30]), standoff=0.0, dt=DT)
    g = tr.pose(5) @ GRASP.grasp_pose
    for tgt, ph in zip(plan.ee_targets, plan.phases):
        if ph == "pregrasp":
            assert np.allclose(tgt.position, g.position, atol=1e-15)
            assert geodesic_angle(tgt.orientation, g.orientation) < 1e-12


def test_static_object_gives_constant_transport_targets():
    obj = Pose([0.4, 0.1, 0.05], quat_yaw(0.3))
    tr = PartTrajectory.from_poses("obj", np.arange(10) * DT, [obj] * 10)
    tcp = Pose([0, 0, 0.01], [1, 0, 0, 0])
    plan = plan_phases(tr, GRASP, (tr.times[0], tr.times[-1]), dt=DT, tcp_from_grasp=tcp)
    want = obj @ GRASP.grasp_pose @ tcp
    for i in plan.transport_indices():
        assert np.allclose(plan.ee_targets[i].to_array(), want.to_array(), atol=1e-15)


def test_object_translation_moves_target_equally():
    tr = PartTrajectory.from_poses("obj", [0.0, DT], [Pose([0.4, 0, 0], quat_yaw(0.7)),
                                                      Pose([0.5, 0, 0], quat_yaw(0.7))])
    plan = plan_phases(tr, GRASP, (0.0, DT), dt=DT)
    a, b = (plan.ee_targets[i] for i in plan.transport_indices())
    assert np.allclose(b.position - a.position, [0.1, 0, 0], atol=1e-15)


def test_retreat_lifts_along_approach():
    tr = line_traj()
    plan = plan_phases(tr, GRASP, (tr.times[5], tr.times[30]), retreat=0.07, dt=DT)
    release = plan.ee_targets[[i for i, p in enumerate(plan.phases) if p == "release"][-1]]
    last = plan.ee_targets[-1]
    assert np.allclose(last.position - release.position, -0.07 * release.rotation[:, 2], atol=1e-12)


def test_window_out_of_range():
    tr = line_traj()
    with pytest.raises(WindowOutOfRange):
        plan_phases(tr, GRASP, (-1.0, tr.times[5]))
    with pytest.raises(WindowOutOfRange):
        plan_phases(tr, GRASP, (tr.times[5], tr.times[-1] + 1.0))


# -- solve_step ----------------------------------------------------------------------------


def test_exact_target_returns_q_prev(arm7):
    q = arm7.home()
    q[arm7.chain_dofs("tcp")] = ARM7_HOME
    sol = solve_step(arm7, "tcp", q, arm7.link_pose(q, "tcp"))
    assert sol.success and sol.iterations == 0
    assert np.array_equal(sol.q, q)


def test_planar_two_link_analytic(planar2):
    target = Pose([1.0, 1.0, 0.0], quat_from_axis_angle([0, 0, 1], 0.0))
    # position-only problem: orientation of the tip is free, so pass the analytic one
    cfg = SolverConfig(w_smooth=0.0, max_iters=500, pos_tol=1e-7, rot_tol=1e-7)
    for seed_q in ([0.3, -0.5], [1.2, -1.0]):
        sol = solve_step(planar2, "tip", np.array(seed_q), target, cfg, clamp_velocity=False)
        tip = planar2.link_pose(sol.q, "tip").position
        assert np.linalg.norm(tip - target.position) < 1e-6
        assert np.allclose(sol.q, [math.pi / 2, -math.pi / 2], atol=1e-5)


def test_unreachable_target_is_best_effort(arm7):
    q = arm7.home()
    q[arm7.chain_dofs("tcp")] = ARM7_HOME
    sol = solve_step(arm7, "tcp", q, Pose([10.0, 0, 0], [1, 0, 0, 0]), clamp_velocity=False,
                     raise_on_divergence=False)
    assert not sol.success
    assert sol.pos_err > 8.0
    assert np.all(sol.q >= arm7.lower) and np.all(sol.q <= arm7.upper)


def test_velocity_clamp(arm7):
    q = arm7.home()
    q[arm7.chain_dofs("tcp")] = ARM7_HOME
    cfg = SolverConfig()
    sol = solve_step(arm7, "tcp", q, Pose([0.3, 0.4, 0.2], [0, 1, 0, 0]), cfg, raise_on_divergence=False)
    assert np.all(np.abs(sol.q - q) <= arm7.velocity * cfg.dt + 1e-12)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(damping=0.0)
    with pytest.raises(ValueError):
        SolverConfig(dt=-1.0)
    with pytest.raises(ValueError):
        SolverConfig(pos_tol=0.0)


# -- solve_trajectory --------------------------------------------------------------------------


def test_fk_self_consistency(arm7):
    rng = np.random.default_rng(4)
    dofs = arm_dofs(arm7, ["tcp"], exclude=["finger_joint1"])["tcp"]
    for _ in range(5):
        path = smooth_path(arm7, rng, 45, dofs)
        traj = solve_trajectory(arm7, "tcp", path[0], fk_plan(arm7, path, "tcp"), dofs=dofs)
        for q, tgt in zip(traj.q, fk_plan(arm7, path, "tcp").ee_targets):
            got = arm7.link_pose(q, "tcp")
            assert np.linalg.norm(got.position - tgt.position) < 1e-3
            assert geodesic_angle(got.orientation, tgt.orientation) < math.radians(0.5)
        assert np.all(traj.q >= arm7.lower) and np.all(traj.q <= arm7.upper)
        assert np.all(np.abs(np.diff(traj.q, axis=0)) <= arm7.velocity * DT + 1e-12)


def test_solver_is_deterministic(arm7):
    rng = np.random.default_rng(5)
    dofs = arm_dofs(arm7, ["tcp"], exclude=["finger_joint1"])["tcp"]
    path = smooth_path(arm7, rng, 30, dofs)
    a = solve_trajectory(arm7, "tcp", path[0], fk_plan(arm7, path, "tcp"), dofs=dofs)
    b = solve_trajectory(arm7, "tcp", path[0], fk_plan(arm7, path, "tcp"), dofs=dofs)
    assert a.q.tobytes() == b.q.tobytes()


def test_empty_plan(arm7):
    out = solve_trajectory(arm7, "tcp", arm7.home(), PhasePlan.empty())
    assert len(out) == 0 and out.success


def test_teleport_reports_offending_step(arm7):
    rng = np.random.default_rng(6)
    dofs = arm_dofs(arm7, ["tcp"], exclude=["finger_joint1"])["tcp"]
    path = smooth_path(arm7, rng, 20, dofs)
    plan = fk_plan(arm7, path, "tcp", phase="transport")
    plan.ee_targets[12] = Pose(plan.ee_targets[12].position + [0.0, 0.0, -0.4], plan.ee_targets[12].orientation)
    with pytest.raises(TrackingFailure) as info:
        solve_trajectory(arm7, "tcp", path[0], plan, dofs=dofs)
    assert info.value.step == 12
    soft = solve_trajectory(arm7, "tcp", path[0], plan, dofs=dofs, strict=False)
    assert 12 in soft.failed_steps and not soft.success
    assert np.all(np.abs(np.diff(soft.q, axis=0)) <= arm7.velocity * DT + 1e-12)


def test_transport_rigid_attachment(arm7):
    tr = PartTrajectory("obj", np.arange(30) * DT,
                        np.stack([np.full(30, 0.45), np.linspace(-0.05, 0.05, 30), np.full(30, 0.15)], axis=1),
                        [[1, 0, 0, 0]] * 30)
    grasp = make_candidate([0, -0.02, 0], [0, -1, 0], [0, 0.02, 0], [0, 1, 0], 0.5)
    q0 = arm7.home()
    dofs = arm_dofs(arm7, ["tcp"], exclude=["finger_joint1"])["tcp"]
    q0[dofs] = ARM7_HOME
    plan = plan_phases(tr, grasp, (tr.times[0], tr.times[-1]), dt=DT, start_ee=arm7.link_pose(q0, "tcp"))
    cfg = SolverConfig()
    traj = solve_trajectory(arm7, "tcp", q0, plan, cfg, dofs=dofs)
    ee_to_obj = grasp.grasp_pose.inverse()
    for i in plan.transport_indices():
        obj = arm7.link_pose(traj.q[i], "tcp") @ ee_to_obj
        assert np.linalg.norm(obj.position - plan.object_poses[i].position) <= cfg.pos_tol
        assert geodesic_angle(obj.orientation, plan.object_poses[i].orientation) <= cfg.rot_tol
    report = traj.residual_report()
    assert len(report) == len(plan) and set(report[0]) == {"step", "phase", "pos_err_m", "rot_err_rad"}


def test_smoothing_does_not_increase_motion(arm7):
    rng = np.random.default_rng(8)
    dofs = arm_dofs(arm7, ["tcp"], exclude=["finger_joint1"])["tcp"]
    for _ in range(3):
        path = smooth_path(arm7, rng, 40, dofs)
        plan = fk_plan(arm7, path, "tcp")
        # start away from the recorded path so the redundant joints have room to wander
        q0 = path[0].copy()
        q0[dofs[2]] += 0.3
        costs = []
        for w in (1e-3, 0.0):
            traj = solve_trajectory(arm7, "tcp", q0, plan, SolverConfig(w_smooth=w), dofs=dofs)
            costs.append(float(np.sum(np.diff(traj.q, axis=0) ** 2)))
        assert costs[0] <= costs[1]


# -- bimanual ------------------------------------------------------------------------------------


def bimanual_q0(model):
    q = model.home()
    for side in ("left_", "right_"):
        for k, v in enumerate(ARM7_HOME, start=1):
            q[model.joint_index(f"{side}joint{k}")] = v
    return q


def test_mirrored_targets_give_mirrored_solutions(bimanual):
    q0 = bimanual_q0(bimanual)
    rng = np.random.default_rng(9)
    dofs = arm_dofs(bimanual, ["left_tcp", "right_tcp"], exclude=["left_finger_joint1", "right_finger_joint1"])
    right = smooth_path(bimanual, rng, 30, dofs["right_tcp"])
    plan_r = fk_plan(bimanual, right, "right_tcp")
    targets_l = [mirror(p) for p in plan_r.ee_targets]
    plan_l = PhasePlan(plan_r.times, targets_l, plan_r.gripper, plan_r.phases, targets_l)
    # the mirrored fixture keeps joint values equal, so q0 is already symmetric
    assert np.allclose(bimanual.link_pose(q0, "left_tcp").to_array(),
                       mirror(bimanual.link_pose(q0, "right_tcp")).to_array(), atol=1e-12)
    q, per_arm = solve_bimanual(bimanual, {"right_tcp": plan_r, "left_tcp": plan_l}, q0, dofs=dofs)
    assert np.allclose(q[:, dofs["left_tcp"]], q[:, dofs["right_tcp"]], atol=1e-6)


def test_failure_is_tagged_with_arm(bimanual):
    q0 = bimanual_q0(bimanual)
    good = fk_plan(bimanual, np.tile(q0, (5, 1)), "right_tcp", phase="transport")
    far = [Pose([5.0, 0, 0], [1, 0, 0, 0])] * 5
    bad = PhasePlan(good.times, far, np.ones(5), ["transport"] * 5, far)
    with pytest.raises((TrackingFailure, Diverged)) as info:
        solve_bimanual(bimanual, {"right_tcp": good, "left_tcp": bad}, q0)
    assert info.value.arm == "left_tcp"
    assert "left_tcp" in str(info.value)


def test_idle_arm_holds_q0(bimanual):
    q0 = bimanual_q0(bimanual)
    rng = np.random.default_rng(10)
    dofs = arm_dofs(bimanual, ["left_tcp", "right_tcp"], exclude=["left_finger_joint1", "right_finger_joint1"])
    plan = fk_plan(bimanual, smooth_path(bimanual, rng, 20, dofs["right_tcp"]), "right_tcp")
    q, per_arm = solve_bimanual(bimanual, {"right_tcp": plan, "left_tcp": PhasePlan.empty()}, q0, dofs=dofs)
    assert per_arm["left_tcp"] is None
    assert np.array_equal(q[:, dofs["left_tcp"]], np.tile(q0[dofs["left_tcp"]], (len(plan), 1)))
