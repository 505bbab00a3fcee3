"""End-to-end demo generation and batch orchestration.

``generate_demo`` runs one demo: scene draw, object-track retargeting, grasp
selection, phase planning and IK. Any library error becomes a failure record
carrying the error's ``reason`` tag. ``generate_batch`` fans demo indices out
to a process pool and writes the dataset directory.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import DemoRecord, export_render_manifest, manifest_dumps, pose_list
from .diffik import arm_dofs, plan_phases, solve_bimanual
from .errors import DemoForgeError, Diverged, NoFeasibleGrasp, TrackingFailure
from .geom import Pose
from .grasp import associate_grasped_part, build_surface, detect_grasp_window, sample_antipodal, select_grasp
from .io import atomic_write_text, load_points
from .randomize import derive_seed, draw_scene, make_rng
from .retarget import PartTrajectory, PlacementParams, resample_dt, retarget_trajectory, rigid_replay

logger = logging.getLogger(__name__)

# stream ids for per-demo generators split off the scene seed
_GRASP_STREAM = 0x6772617370
# grasp centers closer than this to the table would put the fingers into it
_TABLE_CLEARANCE = 0.005


# -- per-process cache of everything that does not depend on the demo index ------


@dataclass(eq=False)
class _Context:
    demos: dict            # part id -> demo track on the solver clock
    window: tuple          # (t_grasp, t_release) shared by all arms
    surfaces: dict         # part id -> ContactSurface
    arm_part: dict         # arm -> grasped part id
    hand_point: dict       # arm -> demonstrated contact point in the part frame, or None
    dofs: dict             # arm -> IK joint indices
    grippers: dict         # arm -> (joint index, lower, upper) or None
    ref_x: dict            # arm -> world closing axis of the EE at q0


_CACHE = {}


def _context(spec) -> _Context:
    key = spec.cache_key
    ctx = _CACHE.get(key)
    if ctx is not None:
        return ctx
    dt = spec.solver.dt
    demos = {pid: resample_dt(tr, dt) for pid, tr in spec.trajectories.items()}

    arm_part, hand_point = {}, {}
    for arm in spec.arms:
        hand = spec.hand_tracks.get(arm.ee_frame)
        if arm.part:
            pid = arm.part
        elif hand is not None:
            pid, _ = associate_grasped_part(hand, spec.trajectories)
        else:
            pid = next(iter(spec.trajectories))
        arm_part[arm.ee_frame] = pid
        hand_point[arm.ee_frame] = None
        if hand is not None:
            win = detect_grasp_window(demos[pid], spec.phases.v_eps, spec.phases.pad)
            t_g = float(np.clip(win[0], hand.times[0], hand.times[-1]))
            obj = spec.trajectories[pid].pose_at(t_g)
            hand_point[arm.ee_frame] = obj.inverse().apply(hand.contact_point(t_g))
        logger.info("arm %s grasps part %r", arm.ee_frame, pid)

    wins = [detect_grasp_window(demos[pid], spec.phases.v_eps, spec.phases.pad) for pid in set(arm_part.values())]
    window = (min(w[0] for w in wins), max(w[1] for w in wins))

    surfaces = {}
    for pid in sorted(set(arm_part.values())):
        pts = load_points(spec.asset(pid).points)
        g = spec.grasp
        surfaces[pid] = build_surface(pts, g.normal_k, g.voxel, g.smoothing_iters)

    model = spec.model
    gripper_names = [a.gripper_joint for a in spec.arms if a.gripper_joint]
    dofs = arm_dofs(model, [a.ee_frame for a in spec.arms], exclude=gripper_names)
    grippers, ref_x = {}, {}
    for arm in spec.arms:
        if arm.gripper_joint:
            j = model.joint_index(arm.gripper_joint)
            grippers[arm.ee_frame] = (j, model.lower[j], model.upper[j])
        else:
            grippers[arm.ee_frame] = None
        ee = spec.base_pose @ model.link_pose(spec.q0, arm.ee_frame, check_limits=False)
        ref_x[arm.ee_frame] = ee.rotation[:, 0]

    ctx = _Context(demos, window, surfaces, arm_part, hand_point, dofs, grippers, ref_x)
    _CACHE.clear()
    _CACHE[key] = ctx
    return ctx


def _slice(traj: PartTrajectory, window):
    eps = 1e-9 * max(1.0, abs(traj.times[-1]))
    idx = np.flatnonzero((traj.times >= window[0] - eps) & (traj.times <= window[1] + eps))
    return PartTrajectory(traj.part_id, traj.times[idx], traj.positions[idx], traj.orientations[idx], traj.frame)


def _articulate(traj, art, offset):
    if art.type == "prismatic":
        g = Pose.from_translation(offset * art.axis)
    else:
        from .geom import quat_from_axis_angle
        rot = Pose([0.0, 0.0, 0.0], quat_from_axis_angle(art.axis, offset))
        g = Pose.from_translation(art.origin) @ rot @ Pose.from_translation(-art.origin)
    return traj.transformed(g)


def _part_tracks(spec, ctx, scene, parts):
    """Object tracks over the grasp window for every grasped part."""
    tracks = {}
    for pid in parts:
        demo = _slice(ctx.demos[pid], ctx.window)
        if not spec.interpolate:
            tracks[pid] = demo
        elif spec.goal == "articulated":
            tracks[pid] = _articulate(demo, spec.articulation, scene.articulation_offset)
        elif spec.goal == "object_to_goal":
            tracks[pid] = retarget_trajectory(demo, scene.object_inits[pid], ctx.demos[pid].end)
        else:
            tracks[pid] = rigid_replay(demo, scene.object_inits[pid])
    return tracks


def _rank_candidates(spec, ctx, arm, cands, obj_at_grasp: Pose):
    """Filter by approach tilt and table clearance, orient, then prefer the hand."""
    preferred = spec.grasp.approach_dir
    max_tilt = math.radians(spec.grasp.max_approach_tilt_deg)
    tcp = spec.gripper.tcp_from_grasp
    table = spec.randomization.workspace.table_height
    kept = []
    for c in cands:
        world = obj_at_grasp @ c.grasp_pose @ tcp
        if float(world.rotation[:, 0] @ ctx.ref_x[arm]) < 0.0:
            c = c.flipped()
            world = obj_at_grasp @ c.grasp_pose @ tcp
        tilt = math.acos(float(np.clip(world.rotation[:, 2] @ preferred, -1.0, 1.0)))
        if tilt > max_tilt or world.position[2] < table + _TABLE_CLEARANCE:
            continue
        kept.append(c)
    hp = ctx.hand_point.get(arm)
    if hp is not None and kept:
        d = np.array([np.linalg.norm(0.5 * (c.c1 + c.c2) - hp) for c in kept])
        n_keep = max(1, math.ceil(spec.grasp.hand_keep_fraction * len(kept)))
        order = np.argsort(d, kind="stable")[:n_keep]
        kept = [kept[i] for i in sorted(order)]
    kept.sort(key=lambda c: -c.quality)
    return kept


def _plan(spec, ctx, arm, track, cand, q0):
    ph = spec.phases
    start_ee = spec.base_pose @ spec.model.link_pose(q0, arm, check_limits=False)
    return plan_phases(track, cand, (track.times[0], track.times[-1]), ph.standoff, ph.approach_duration,
                       ph.retreat, dt=spec.solver.dt, close_duration=ph.close_duration,
                       retreat_duration=ph.retreat_duration, start_ee=start_ee,
                       reach_duration=ph.reach_duration, tcp_from_grasp=spec.gripper.tcp_from_grasp)


def _failure(spec, idx, seed, scene, exc):
    meta = {"task": spec.name, "demo_index": int(idx), "seed": int(seed), "success": False,
            "failure_reason": getattr(exc, "reason", type(exc).__name__), "failure_detail": str(exc),
            "goal": spec.goal, "interpolate": bool(spec.interpolate)}
    return DemoRecord(meta, [], scene.to_dict() if scene is not None else None, {})


def generate_demo(spec, demo_index) -> DemoRecord:
    """Synthesize one demonstration; errors become ``success=False`` records."""
    seed = derive_seed(spec.seed, demo_index)
    scene = None
    try:
        ctx = _context(spec)
        model = spec.model
        arms = [a.ee_frame for a in spec.arms]
        parts = sorted(set(ctx.arm_part.values()))

        # 1. scene randomization
        placements = {}
        if spec.goal in ("single_object", "object_to_goal", "bimanual"):
            for pid in parts:
                placements[pid] = PlacementParams(rest_offset=spec.asset(pid).rest_z,
                                                  base_orientation=ctx.demos[pid].start.orientation)
        rcfg = spec.randomization if spec.goal == "object_to_goal" else replace(spec.randomization, d_min=0.0)
        goal_pose = ctx.demos[parts[0]].end
        art = spec.articulation
        all_arm = np.concatenate([ctx.dofs[a] for a in arms])
        scene = draw_scene(rcfg, spec.cameras, goal_pose, spec.occupied, demo_index, parts=placements,
                           q0_nominal=spec.q0[all_arm], q_lower=model.lower[all_arm], q_upper=model.upper[all_arm],
                           articulation_range=art.offset_range if art is not None else None)
        q0 = spec.q0.copy()
        q0[all_arm] = scene.q0
        for arm in arms:
            gi = ctx.grippers[arm]
            if gi is not None:
                q0[gi[0]] = gi[2]
        scene.q0 = q0

        # 2. object tracks
        tracks = _part_tracks(spec, ctx, scene, parts)
        if not spec.interpolate or spec.goal == "articulated":
            scene.object_inits = {pid: tracks[pid].start for pid in parts}

        # 3. grasps, plans and IK with retries
        grng = make_rng(derive_seed(seed, _GRASP_STREAM))
        cands = {}
        for arm in arms:
            pid = ctx.arm_part[arm]
            obj0 = tracks[pid].start
            hint = obj0.rotation.T @ spec.grasp.approach_dir
            g = spec.grasp
            raw = sample_antipodal(ctx.surfaces[pid], spec.gripper, g.mu, g.n_samples, grng, approach_hint=hint)
            cands[arm] = _rank_candidates(spec, ctx, arm, raw, obj0)
            if not cands[arm]:
                raise NoFeasibleGrasp(f"arm {arm}: no candidate passes the approach filters")
        base = spec.base_pose
        cfg = spec.solver
        chosen = {}
        retries = {arm: 0 for arm in arms}
        while True:
            for arm in arms:
                if arm not in chosen:
                    pid = ctx.arm_part[arm]
                    chosen[arm] = select_grasp(cands[arm], tracks[pid], model, arm, q0, cfg,
                                               spec.gripper.tcp_from_grasp, base, dofs=ctx.dofs[arm])
            plans = {arm: _plan(spec, ctx, arm, tracks[ctx.arm_part[arm]], chosen[arm], q0) for arm in arms}
            try:
                q, per_arm = solve_bimanual(model, {a: p.in_frame(base) for a, p in plans.items()}, q0, cfg,
                                            dofs=ctx.dofs)
                break
            except (TrackingFailure, Diverged) as exc:
                arm = exc.arm
                retries[arm] += 1
                if retries[arm] > spec.grasp.max_retries:
                    raise
                logger.debug("demo %d arm %s: %s; trying next grasp", demo_index, arm, exc)
                dropped = chosen.pop(arm)
                cands[arm] = [c for c in cands[arm] if c is not dropped]
                if not cands[arm]:
                    raise

        # 4. assemble
        ref_plan = plans[arms[0]]
        for arm in arms:
            gi = ctx.grippers[arm]
            if gi is not None:
                q[:, gi[0]] = gi[1] + plans[arm].gripper * (gi[2] - gi[1])
        cams = {name: pose_list(p) for name, p in sorted(scene.camera_poses.items())}
        static = {a.part_id: pose_list(a.pose if a.pose is not None else ctx.demos[a.part_id].start)
                  for a in spec.assets if a.part_id not in parts}
        frames = []
        for i in range(len(ref_plan)):
            arms_out = {}
            for arm in arms:
                ee = base @ Pose.from_matrix(model.link_matrix(q[i], arm))
                arms_out[arm] = {"q": q[i, ctx.dofs[arm]].tolist(), "gripper": float(plans[arm].gripper[i]),
                                 "ee": pose_list(ee)}
            objects = dict(static)
            for arm in arms:
                objects[ctx.arm_part[arm]] = pose_list(plans[arm].object_poses[i])
            frames.append({"t": float(ref_plan.times[i]), "phase": ref_plan.phases[i], "q": q[i].tolist(),
                           "arms": arms_out, "objects": dict(sorted(objects.items())), "cameras": cams})
        meta = {
            "task": spec.name, "demo_index": int(demo_index), "seed": int(seed), "success": True,
            "failure_reason": None, "goal": spec.goal, "interpolate": bool(spec.interpolate),
            "dt": spec.solver.dt, "joint_names": list(model.actuated), "base_pose": pose_list(base),
            "arms": {arm: {"part": ctx.arm_part[arm], "joints": [model.actuated[j] for j in ctx.dofs[arm]],
                           "grasp": chosen[arm].to_dict(), "grasp_pose": pose_list(chosen[arm].grasp_pose),
                           "tcp_from_grasp": pose_list(spec.gripper.tcp_from_grasp)} for arm in arms},
        }
        residuals = {arm: {"pos_err": per_arm[arm].pos_err.tolist(), "rot_err": per_arm[arm].rot_err.tolist()}
                     for arm in arms}
        return DemoRecord(meta, frames, scene.to_dict(), residuals)
    except DemoForgeError as exc:
        logger.debug("demo %d failed: %s", demo_index, exc)
        return _failure(spec, demo_index, seed, scene, exc)


# -- batches ---------------------------------------------------------------------


@dataclass
class BatchStats:
    attempted: int = 0
    succeeded: int = 0
    failures: dict = field(default_factory=dict)
    wall_time: float = 0.0
    workers: int = 1

    @property
    def demos_per_min(self):
        return 60.0 * self.succeeded / self.wall_time if self.wall_time > 0 else 0.0

    @property
    def success_rate(self):
        return self.succeeded / self.attempted if self.attempted else 1.0

    def to_dict(self):
        return {"attempted": self.attempted, "succeeded": self.succeeded, "failures": dict(self.failures),
                "wall_time_s": self.wall_time, "demos_per_min": self.demos_per_min, "workers": self.workers}


_WORKER_SPEC = None


def _init_worker(spec):
    global _WORKER_SPEC
    _WORKER_SPEC = spec
    logging.getLogger("demoforge").setLevel(logging.WARNING)


def _run_one(spec, idx):
    rec = generate_demo(spec, idx)
    render = manifest_dumps(export_render_manifest(rec, spec)) if rec.success else None
    return idx, rec.success, rec.meta.get("failure_reason"), rec.to_jsonl(), render


def _worker_task(idx):
    return _run_one(_WORKER_SPEC, idx)


def generate_batch(spec, out_dir, workers=1, only_success=False) -> BatchStats:
    """Generate ``spec.n_demos`` successful demos into ``out_dir``.

    Indices are attempted in ascending waves; the dataset keeps the shortest
    index prefix containing ``n_demos`` successes, so its content depends only
    on the spec and seed. Attempts stop at ``ceil(n_demos * max_attempt_factor)``.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # records from an earlier run would otherwise mix into this dataset
    for old in list(out.glob("demo_*.jsonl")) + list(out.glob("demo_*.render.json")):
        old.unlink()
    n = spec.n_demos
    cap = math.ceil(n * spec.max_attempt_factor)
    t0 = time.perf_counter()
    results = {}
    pool = ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(spec,)) if workers > 1 else None
    try:
        next_idx = 0
        while True:
            ok = [i for i in sorted(results) if results[i][1]]
            if len(ok) >= n or next_idx >= cap:
                break
            todo = range(next_idx, min(cap, next_idx + max(n - len(ok), workers)))
            next_idx = todo.stop
            if pool is None:
                for i in todo:
                    results[i] = _run_one(spec, i)
            else:
                chunk = max(1, len(todo) // (4 * workers))
                for r in pool.map(_worker_task, todo, chunksize=chunk):
                    results[r[0]] = r
    finally:
        if pool is not None:
            pool.shutdown()

    kept, count = [], 0
    for i in sorted(results):
        if count >= n:
            break
        kept.append(results[i])
        count += results[i][1]

    stats = BatchStats(workers=workers)
    demos = []
    for idx, success, reason, jsonl, render in kept:
        stats.attempted += 1
        if success:
            stats.succeeded += 1
        else:
            stats.failures[reason] = stats.failures.get(reason, 0) + 1
        demos.append({"index": idx, "success": success, "failure_reason": reason})
        if success or not only_success:
            atomic_write_text(out / f"demo_{idx:06d}.jsonl", jsonl)
        if render is not None:
            atomic_write_text(out / f"demo_{idx:06d}.render.json", render)
    stats.wall_time = time.perf_counter() - t0
    stats.failures = dict(sorted(stats.failures.items()))
    manifest = {"task": spec.name, "spec": spec.resolved, "n_demos": n,
                "stats": {"attempted": stats.attempted, "succeeded": stats.succeeded, "failures": stats.failures},
                "demos": demos}
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")
    atomic_write_text(out / "stats.json", json.dumps(stats.to_dict(), indent=1) + "\n")
    logger.info("batch %s: %d/%d succeeded in %.1f s (%.1f demos/min, %d workers)", spec.name,
                stats.succeeded, stats.attempted, stats.wall_time, stats.demos_per_min, workers)
    return stats


def load_dataset(out_dir):
    """Success and failure records of a dataset directory, in index order."""
    out = Path(out_dir)
    return [DemoRecord.load(p) for p in sorted(out.glob("demo_*.jsonl"))]


def default_workers():
    return max(1, os.cpu_count() or 1)
