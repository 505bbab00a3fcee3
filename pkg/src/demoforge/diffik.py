"""Phase planning and damped least-squares inverse kinematics.

The object is assumed to move rigidly with the gripper between grasp and
release, so during transport the end-effector target is fully determined by
the object pose. Before and after transport the targets come from a simple
approach/retreat plan. Each timestep is one damped Gauss-Newton solve,
warm-started from the previous step, penalized towards the previous
configuration, hard-clamped to position limits and to ``velocity * dt``.
"""

from __future__ import annotations

import math
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

from .errors import Diverged, TrackingFailure, WindowOutOfRange
from .geom import Pose, matrix_to_quat, pose_interp, quat_conj, quat_mul, quat_to_rotvec

PHASES = ("pregrasp", "grasp_close", "transport", "release", "retreat")

IKSolution = namedtuple("IKSolution", "q, success, pos_err, rot_err, iterations")

_DIVERGENCE_RUN = 5
# an update smaller than this (max abs joint change) means the iteration has settled
_STALL_STEP = 1e-10


@dataclass(frozen=True)
class SolverConfig:
    damping: float = 1e-2
    w_smooth: float = 1e-3
    pos_tol: float = 1e-3          # m
    rot_tol: float = 8.7e-3        # rad (0.5 deg)
    max_iters: int = 64
    dt: float = 1.0 / 15.0         # s
    limit_margin: float = 0.05     # rad or m
    w_limit: float = 1.0

    def __post_init__(self):
        if self.damping <= 0 or self.dt <= 0:
            raise ValueError("damping and dt must be positive")
        if self.pos_tol <= 0 or self.rot_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.w_smooth < 0 or self.w_limit < 0 or self.limit_margin < 0:
            raise ValueError("weights and margins must be non-negative")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")


def pose_error(T, target: Pose):
    """Position and rotation error vectors of a 4x4 transform against ``target``.

    The rotation part is the axis-angle vector of ``q_target ⊗ q_current⁻¹``.
    """
    e_p = target.position - T[:3, 3]
    q_cur = matrix_to_quat(T[:3, :3])
    e_r = quat_to_rotvec(quat_mul(target.orientation, quat_conj(q_cur)))
    return e_p, e_r


def solve_step(model, arm, q_prev, target: Pose, cfg: SolverConfig | None = None, *,
               dofs=None, clamp_velocity=True, raise_on_divergence=True, tool: Pose | None = None) -> IKSolution:
    """Move the ``arm`` frame to ``target`` (root frame) starting from ``q_prev``.

    With ``tool`` the tracked frame is ``arm ∘ tool``, a frame rigidly fixed
    to the arm link (for example a held object).

    Minimizes ``|e_pos|^2 + |e_rot|^2 + w_smooth |q - q_prev|^2`` plus a
    quadratic penalty inside ``limit_margin`` of each position limit. Only the
    joints in ``dofs`` (default: every actuated joint on the arm's chain) are
    changed. Returns the first iterate within tolerance, otherwise the
    lowest-cost iterate with ``success=False``. Iteration also stops early
    once an update no longer moves any joint by more than 1e-10, which is
    where the smoothness or limit terms hold the solution off the target.

    Raises
    ------
    Diverged
        If the cost rose on five consecutive iterations.
    """
    cfg = cfg or SolverConfig()
    q_prev = np.asarray(q_prev, dtype=float)
    if dofs is None:
        dofs = model.chain_dofs(arm)
    dofs = np.asarray(dofs, dtype=int)
    q = q_prev.copy()
    qa_prev = q_prev[dofs]
    lo = model.lower[dofs]
    hi = model.upper[dofs]
    box_lo, box_hi = lo, hi
    if clamp_velocity:
        step = model.velocity[dofs] * cfg.dt
        box_lo = np.maximum(lo, qa_prev - step)
        box_hi = np.minimum(hi, qa_prev + step)
    soft_lo = lo + cfg.limit_margin
    soft_hi = hi - cfg.limit_margin
    eye = np.eye(len(dofs))
    tool_M = None if tool is None else tool.as_matrix()

    best = None
    prev_cost = math.inf
    rises = 0
    for it in range(cfg.max_iters + 1):
        T, J = model.frame_jacobian(q, arm)
        if tool_M is not None:
            # velocity of a point offset by r: v + w x r
            r = T[:3, :3] @ tool_M[:3, 3]
            T = T @ tool_M
            J = J.copy()
            J[:3] -= np.cross(r, J[3:].T).T
        e_p, e_r = pose_error(T, target)
        pe = float(np.linalg.norm(e_p))
        re = float(np.linalg.norm(e_r))
        if pe <= cfg.pos_tol and re <= cfg.rot_tol:
            return IKSolution(q, True, pe, re, it)

        qa = q[dofs]
        below = np.minimum(qa - soft_lo, 0.0)
        above = np.maximum(qa - soft_hi, 0.0)
        viol = below + above
        cost = pe * pe + re * re + cfg.w_smooth * float((qa - qa_prev) @ (qa - qa_prev)) \
            + cfg.w_limit * float(viol @ viol)
        if best is None or cost < best[0]:
            best = (cost, q.copy(), pe, re, it)
        if cost > prev_cost:
            rises += 1
            if rises >= _DIVERGENCE_RUN and raise_on_divergence:
                raise Diverged(f"cost increased on {rises} consecutive iterations")
        else:
            rises = 0
        prev_cost = cost
        if it == cfg.max_iters:
            break

        Ja = J[:, dofs]
        e = np.concatenate([e_p, e_r])
        active = (viol != 0.0).astype(float)
        H = Ja.T @ Ja + (cfg.damping + cfg.w_smooth) * eye + cfg.w_limit * np.diag(active)
        g = Ja.T @ e - cfg.w_smooth * (qa - qa_prev) - cfg.w_limit * viol
        qa_new = np.clip(qa + np.linalg.solve(H, g), box_lo, box_hi)
        fixed = (qa_new == box_lo) | (qa_new == box_hi)
        if fixed.any() and not fixed.all():
            # re-solve the free joints with the clamped ones held at their bound;
            # a plain clipped Gauss-Newton step is not always a descent direction
            free = ~fixed
            d_fix = qa_new[fixed] - qa[fixed]
            d_free = np.linalg.solve(H[np.ix_(free, free)], g[free] - H[np.ix_(free, fixed)] @ d_fix)
            qa_new[free] = np.clip(qa[free] + d_free, box_lo[free], box_hi[free])
        if np.max(np.abs(qa_new - qa)) < _STALL_STEP:
            break
        q[dofs] = qa_new

    _, q_best, pe, re, it = best
    return IKSolution(q_best, False, pe, re, it)


# -- phase planning ------------------------------------------------------------


@dataclass(eq=False)
class PhasePlan:
    """Per-arm end-effector targets on a uniform clock.

    ``object_poses`` is the pose of the grasped part at each step and
    ``grasp_pose``/``tcp_from_grasp`` tie the two together during transport.
    """

    times: np.ndarray
    ee_targets: list
    gripper: np.ndarray
    phases: list
    object_poses: list
    grasp_pose: Pose = field(default_factory=Pose.identity)
    tcp_from_grasp: Pose = field(default_factory=Pose.identity)

    def __len__(self):
        return len(self.times)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0), [], np.zeros(0), [], [])

    def in_frame(self, base: Pose):
        """Copy with targets expressed relative to ``base`` (world -> robot root)."""
        inv = base.inverse()
        return PhasePlan(self.times, [inv @ t for t in self.ee_targets], self.gripper, self.phases,
                         self.object_poses, self.grasp_pose, self.tcp_from_grasp)

    def transport_indices(self):
        return [i for i, p in enumerate(self.phases) if p == "transport"]


def _steps(duration, dt, minimum=1):
    return max(minimum, int(round(duration / dt)))


def plan_phases(object_traj, grasp, window, standoff=0.10, approach_duration=1.0, retreat=0.10, *,
                dt=1.0 / 15.0, close_duration=0.2, retreat_duration=0.5, start_ee: Pose | None = None,
                reach_duration=1.0, tcp_from_grasp: Pose | None = None) -> PhasePlan:
    """Build pregrasp / close / transport / release / retreat targets for one arm.

    ``object_traj`` should already be sampled at ``dt``; its waypoints inside
    ``window`` become the transport steps. When ``start_ee`` is given the plan
    opens with a ``reach_duration`` move from it to the standoff pose.
    """
    tcp = tcp_from_grasp or Pose.identity()
    grasp_pose = grasp.grasp_pose if hasattr(grasp, "grasp_pose") else grasp
    t_grasp, t_release = float(window[0]), float(window[1])
    times = object_traj.times
    eps = 1e-9 * max(1.0, abs(times[-1]))
    if t_grasp < times[0] - eps or t_release > times[-1] + eps or t_grasp >= t_release:
        raise WindowOutOfRange(
            f"window ({t_grasp}, {t_release}) not inside trajectory range ({times[0]}, {times[-1]})")
    idx = np.flatnonzero((times >= t_grasp - eps) & (times <= t_release + eps))
    if len(idx) == 0:
        raise WindowOutOfRange("no trajectory samples inside the grasp window")

    obj_first = object_traj.pose(idx[0])
    obj_last = object_traj.pose(idx[-1])
    grasp_world = obj_first @ grasp_pose @ tcp
    approach = grasp_world.rotation[:, 2]
    standoff_pose = Pose(grasp_world.position - standoff * approach, grasp_world.orientation)

    targets, grip, phases, objs = [], [], [], []

    def add(target, g, phase, obj):
        targets.append(target)
        grip.append(g)
        phases.append(phase)
        objs.append(obj)

    if start_ee is not None and reach_duration > 0:
        n = _steps(reach_duration, dt)
        for k in range(n):
            add(pose_interp(start_ee, standoff_pose, (k + 1) / n), 1.0, "pregrasp", obj_first)
    n = _steps(approach_duration, dt)
    for k in range(n):
        s = 1.0 if n == 1 else k / (n - 1)
        add(pose_interp(standoff_pose, grasp_world, s), 1.0, "pregrasp", obj_first)
    n_close = _steps(close_duration, dt)
    for k in range(n_close):
        add(grasp_world, 1.0 - (k + 1) / n_close, "grasp_close", obj_first)
    for i in idx:
        obj = object_traj.pose(i)
        add(obj @ grasp_pose @ tcp, 0.0, "transport", obj)
    release_pose = targets[-1]
    for k in range(n_close):
        add(release_pose, (k + 1) / n_close, "release", obj_last)
    n = _steps(retreat_duration, dt)
    back = release_pose.rotation[:, 2]
    for k in range(n):
        lift = retreat * (k + 1) / n
        add(Pose(release_pose.position - lift * back, release_pose.orientation), 1.0, "retreat", obj_last)

    plan_times = np.arange(len(targets)) * dt
    return PhasePlan(plan_times, targets, np.array(grip), phases, objs, grasp_pose, tcp)


# -- trajectory solving --------------------------------------------------------


@dataclass(eq=False)
class IKTrajectory:
    times: np.ndarray
    q: np.ndarray            # (N, n_dof) full actuated configuration
    pos_err: np.ndarray
    rot_err: np.ndarray
    phases: list
    failed_steps: list = field(default_factory=list)

    def __len__(self):
        return len(self.times)

    @property
    def success(self):
        return not self.failed_steps

    def residual_report(self):
        return [{"step": i, "phase": ph, "pos_err_m": float(pe), "rot_err_rad": float(re)}
                for i, (ph, pe, re) in enumerate(zip(self.phases, self.pos_err, self.rot_err))]


def _check_grid(times, dt):
    if len(times) > 1 and not np.allclose(np.diff(times), dt, rtol=0.0, atol=1e-9):
        raise ValueError("plan timestamps must be uniformly spaced at cfg.dt")


def solve_trajectory(model, arm, q0, plan: PhasePlan, cfg: SolverConfig | None = None, *,
                     dofs=None, strict=True) -> IKTrajectory:
    """Track every target of ``plan`` (root frame) sequentially from ``q0``.

    On transport steps the solver tracks the held object itself, i.e. the
    frame ``ee ∘ (grasp_pose ∘ tcp_from_grasp)⁻¹``, whose target is the object
    pose. Residuals there are object-pose residuals, which is exactly what the
    rigid-attachment check measures. Transport steps whose residual exceeds
    ``(pos_tol, rot_tol)`` are failures; with ``strict`` the first one raises
    :class:`TrackingFailure`, otherwise they are listed in ``failed_steps``.
    """
    cfg = cfg or SolverConfig()
    q_cur = np.asarray(q0, dtype=float).copy()
    n = len(plan)
    out_q = np.empty((n, len(q_cur)))
    pos_err = np.empty(n)
    rot_err = np.empty(n)
    failed = []
    if n == 0:
        return IKTrajectory(np.zeros(0), out_q, pos_err, rot_err, [], [])
    _check_grid(plan.times, cfg.dt)
    if dofs is None:
        dofs = model.chain_dofs(arm)
    held = (plan.grasp_pose @ plan.tcp_from_grasp).inverse()
    for i, (target, phase) in enumerate(zip(plan.ee_targets, plan.phases)):
        if phase == "transport":
            sol = solve_step(model, arm, q_cur, target @ held, cfg, dofs=dofs, tool=held)
        else:
            sol = solve_step(model, arm, q_cur, target, cfg, dofs=dofs)
        q_cur = sol.q
        out_q[i] = q_cur
        pos_err[i] = sol.pos_err
        rot_err[i] = sol.rot_err
        if phase == "transport" and not sol.success:
            if strict:
                raise TrackingFailure(
                    f"transport step {i}: pos_err={sol.pos_err:.3g} m rot_err={sol.rot_err:.3g} rad",
                    step=i, arm=arm)
            failed.append(i)
    return IKTrajectory(np.asarray(plan.times, dtype=float), out_q, pos_err, rot_err,
                        list(plan.phases), failed)


def arm_dofs(model, arms, exclude=()):
    """IK joint indices per arm: the arm's chain minus excluded and shared joints."""
    excluded = {model.joint_index(n) if isinstance(n, str) else int(n) for n in exclude}
    chains = {arm: [int(i) for i in model.chain_dofs(arm)] for arm in arms}
    counts = {}
    for idx in chains.values():
        for i in idx:
            counts[i] = counts.get(i, 0) + 1
    return {arm: np.array([i for i in idx if i not in excluded and counts[i] == 1], dtype=int)
            for arm, idx in chains.items()}


def solve_bimanual(model, plans, q0, cfg: SolverConfig | None = None, *, dofs=None):
    """Solve each arm's plan on its own joints from a shared ``q0``.

    ``plans`` maps arm frame -> :class:`PhasePlan` (or ``None`` for an idle
    arm, which holds its ``q0`` values). Returns ``(q, per_arm)`` where ``q``
    is the combined ``(N, n_dof)`` trajectory. Failures raise
    :class:`TrackingFailure` tagged with the arm.
    """
    cfg = cfg or SolverConfig()
    q0 = np.asarray(q0, dtype=float)
    arms = list(plans)
    dofs = dofs or arm_dofs(model, arms)
    lengths = {len(p) for p in plans.values() if p is not None and len(p)}
    if len(lengths) > 1:
        raise ValueError("bimanual plans must share one timestamp grid")
    n = lengths.pop() if lengths else 0
    grid = next((p.times for p in plans.values() if p is not None and len(p)), np.zeros(0))
    for p in plans.values():
        if p is not None and len(p) and not np.allclose(p.times, grid, rtol=0.0, atol=1e-9):
            raise ValueError("bimanual plans must share one timestamp grid")
    q = np.tile(q0, (n, 1))
    per_arm = {}
    for arm in arms:
        plan = plans[arm]
        if plan is None or len(plan) == 0:
            per_arm[arm] = None
            continue
        try:
            traj = solve_trajectory(model, arm, q0, plan, cfg, dofs=dofs[arm])
        except (TrackingFailure, Diverged) as exc:
            exc.arm = arm
            exc.args = (f"[{arm}] {exc.args[0] if exc.args else ''}",)
            raise
        q[:, dofs[arm]] = traj.q[:, dofs[arm]]
        per_arm[arm] = traj
    return q, per_arm
