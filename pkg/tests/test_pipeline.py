"""Task configs, demo generation, datasets, actions, render manifests, CLI and file IO."""

import json
import re
import shutil
from pathlib import Path

import numpy as np
import pytest

from demoforge.cli import main
from demoforge.config import DEFAULTS, load_task_config, parse_task_config
from demoforge.dataset import (
    DemoRecord, audit_record, check_manifest, emit_actions, export_render_manifest, integrate_actions,
    load_render_manifest, manifest_dumps, roundtrip_error,
)
from demoforge.errors import FormatUnavailable, InvariantViolation, MissingAsset, ParseError
from demoforge.geom import Pose, geodesic_angle, quat_yaw, random_quat
from demoforge.io import (
    load_hand_tracks, load_points, load_trajectory, read_ply, save_hand_track, save_trajectory, write_ply,
)
from demoforge.pipeline import generate_batch, generate_demo, load_dataset
from demoforge.retarget import PartTrajectory
from demoforge.grasp import HandTrack


def copy_task(task_dirs, kind, tmp_path):
    root = tmp_path / kind
    shutil.copytree(task_dirs[kind].parent, root)
    return root / "task.toml"


def edit(path, old, new):
    text = path.read_text()
    assert old in text, old
    path.write_text(text.replace(old, new))


@pytest.fixture(scope="module")
def tiger_spec(task_dirs):
    return load_task_config(task_dirs["tiger"])


@pytest.fixture(scope="module")
def tiger_record(tiger_spec):
    rec = generate_demo(tiger_spec, 0)
    assert rec.success, rec.meta
    return rec


# -- config ---------------------------------------------------------------------------


def test_minimal_config_gets_defaults(task_dirs):
    spec = load_task_config(task_dirs["tiger"])
    assert spec.goal == "single_object"
    assert spec.solver.damping == DEFAULTS["solver"]["damping"]
    assert spec.solver.dt == pytest.approx(1 / 15)
    assert spec.grasp.mu == DEFAULTS["grasp"]["mu"]
    assert spec.randomization.cam_trans_max == 0.02
    assert spec.resolved["solver"]["max_iters"] == 64
    assert spec.resolved["phases"] == DEFAULTS["phases"]


def test_truly_minimal_config(task_dirs, tmp_path):
    root = task_dirs["tiger"].parent
    text = (f'[robot]\nurdf = "{root / "robot/arm7.urdf"}"\n\n[[arms]]\nee_frame = "tcp"\n\n'
            f'[[assets]]\npart_id = "tiger"\npoints = "{root / "assets/tiger.ply"}"\n'
            f'trajectory = "{root / "demo/tiger.json"}"\n')
    spec = parse_task_config(text, tmp_path)
    assert spec.n_demos == 100 and spec.seed == 0 and spec.interpolate
    assert np.array_equal(spec.q0, spec.model.home())


def test_missing_urdf_names_the_path(task_dirs, tmp_path):
    path = copy_task(task_dirs, "tiger", tmp_path)
    edit(path, 'urdf = "robot/arm7.urdf"', 'urdf = "robot/nope.urdf"')
    with pytest.raises(MissingAsset, match="nope.urdf"):
        load_task_config(path)


def test_bimanual_with_one_hand_track(task_dirs, tmp_path):
    path = copy_task(task_dirs, "package", tmp_path)
    text = path.read_text()
    # drop the second arm's hand track
    i = text.rindex('hand_track = "demo/hands.json"\n')
    path.write_text(text[:i] + text[i + len('hand_track = "demo/hands.json"\n'):])
    with pytest.raises(InvariantViolation):
        load_task_config(path)


def test_parse_errors_name_the_field(task_dirs, tmp_path):
    path = copy_task(task_dirs, "tiger", tmp_path)
    edit(path, "n_demos = 10", "n_demos = 10\nbogus = 1")
    with pytest.raises(ParseError, match="bogus"):
        load_task_config(path)
    edit(path, "bogus = 1\n", "")
    path.write_text(path.read_text() + '\n[solver]\ndamping = "big"\n')
    with pytest.raises(ParseError, match="damping"):
        load_task_config(path)
    path.write_text("name = \n")
    with pytest.raises(ParseError, match="line 1"):
        load_task_config(path)


def test_overrides_reach_the_resolved_dump(tiger_spec):
    s = tiger_spec.with_overrides(n_demos=3, seed=9)
    assert s.n_demos == 3 and s.randomization.master_seed == 9 and s.resolved["seed"] == 9
    assert tiger_spec.seed == 7


# -- generate_demo ----------------------------------------------------------------------


def test_generate_demo_is_deterministic(tiger_spec, tiger_record):
    again = generate_demo(tiger_spec, 0)
    assert again.to_jsonl() == tiger_record.to_jsonl()


def test_record_structure(tiger_spec, tiger_record):
    rec = tiger_record
    t = rec.times()
    assert np.allclose(np.diff(t), tiger_spec.solver.dt)
    assert rec.full_q().shape == (len(t), tiger_spec.model.n_dof)
    assert set(f["phase"] for f in rec.frames) == {"pregrasp", "grasp_close", "transport", "release", "retreat"}
    model = tiger_spec.model
    q = rec.full_q()
    assert np.all(q >= model.lower) and np.all(q <= model.upper)
    assert np.all(np.abs(np.diff(q, axis=0)) <= model.velocity * tiger_spec.solver.dt + 1e-12)


def test_tiger_rigid_attachment(tiger_spec, tiger_record):
    s = tiger_spec.solver
    assert audit_record(tiger_record, tiger_spec.model, tiger_spec.base_pose, s.pos_tol, s.rot_tol) == []


def test_audit_detects_tampering(tiger_spec, tiger_record):
    rec = DemoRecord.from_jsonl(tiger_record.to_jsonl())
    i = next(k for k, f in enumerate(rec.frames) if f["phase"] == "transport")
    rec.frames[i]["objects"]["tiger"][0] += 0.01
    bad = audit_record(rec, tiger_spec.model, tiger_spec.base_pose, 1e-3, 8.7e-3)
    assert [b["frame"] for b in bad] == [i]


def test_unreachable_workspace_fails_cleanly(task_dirs, tmp_path):
    path = copy_task(task_dirs, "tiger", tmp_path)
    edit(path, "aabb_min = [0.35, -0.2, 0.0]\naabb_max = [0.6, 0.2, 0.3]",
         "aabb_min = [10.0, -0.2, 0.0]\naabb_max = [10.3, 0.2, 0.3]")
    rec = generate_demo(load_task_config(path), 0)
    assert not rec.success
    assert rec.meta["failure_reason"] == "NoFeasibleGrasp"
    with pytest.raises(FormatUnavailable):
        emit_actions(rec)
    with pytest.raises(FormatUnavailable):
        export_render_manifest(rec, load_task_config(path))


@pytest.mark.parametrize("kind", ["mug", "package", "drawer"])
def test_other_fixtures_generate(task_dirs, kind):
    spec = load_task_config(task_dirs[kind])
    recs = [generate_demo(spec, i) for i in range(3)]
    ok = [r for r in recs if r.success]
    assert ok, [r.meta.get("failure_detail") for r in recs]
    for r in ok:
        assert audit_record(r, spec.model, spec.base_pose, spec.solver.pos_tol, spec.solver.rot_tol) == []
        assert roundtrip_error(r, "delta_ee_6d") < 1e-6
        assert roundtrip_error(r, "delta_joint") < 1e-6


def test_no_interp_keeps_demo_start(task_dirs):
    spec = load_task_config(task_dirs["mug"]).with_overrides(interpolate=False)
    demo_start = spec.trajectories["mug"].start
    for i in range(3):
        rec = generate_demo(spec, i)
        assert rec.success
        for got in (Pose.from_array(rec.frames[0]["objects"]["mug"]), Pose.from_array(rec.scene["object_inits"]["mug"])):
            assert np.linalg.norm(got.position - demo_start.position) <= 1e-9
            assert geodesic_angle(got.orientation, demo_start.orientation) <= 1e-9


# -- batches --------------------------------------------------------------------------------


def test_empty_batch(tiger_spec, tmp_path):
    stats = generate_batch(tiger_spec.with_overrides(n_demos=0), tmp_path / "empty")
    assert stats.attempted == 0 and stats.succeeded == 0
    assert load_dataset(tmp_path / "empty") == []
    saved = json.loads((tmp_path / "empty" / "stats.json").read_text())
    assert saved["attempted"] == 0


def test_batch_layout_and_determinism(tiger_spec, tmp_path):
    spec = tiger_spec.with_overrides(n_demos=4)
    a, b = tmp_path / "a", tmp_path / "b"
    sa = generate_batch(spec, a, workers=1)
    sb = generate_batch(spec, b, workers=2)
    assert sa.succeeded == sb.succeeded == 4
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    assert "manifest.json" in names and "stats.json" in names
    assert any(re.fullmatch(r"demo_\d{6}\.jsonl", n) for n in names)
    assert any(re.fullmatch(r"demo_\d{6}\.render\.json", n) for n in names)
    for n in names:
        if n != "stats.json":
            assert (a / n).read_bytes() == (b / n).read_bytes(), n
    # rerunning into a used directory replaces its records
    generate_batch(spec.with_overrides(n_demos=1), a)
    assert len([r for r in load_dataset(a) if r.success]) == 1


def test_dataset_roundtrip_is_lossless(tiger_record):
    text = tiger_record.to_jsonl()
    back = DemoRecord.from_jsonl(text)
    assert back.to_jsonl() == text
    assert back.meta == tiger_record.meta and back.frames == tiger_record.frames
    assert back.scene == tiger_record.scene and back.residuals == tiger_record.residuals


# -- actions -------------------------------------------------------------------------------------


def toy_record(ee_positions, gripper=None, quats=None):
    n = len(ee_positions)
    gripper = [1.0] * n if gripper is None else gripper
    quats = [[1.0, 0, 0, 0]] * n if quats is None else quats
    frames = [{"t": i / 15, "phase": "transport", "q": [0.1 * i, 0.0],
               "arms": {"tcp": {"q": [0.1 * i, 0.0], "gripper": gripper[i],
                                "ee": list(map(float, ee_positions[i])) + list(map(float, quats[i]))}},
               "objects": {}, "cameras": {}} for i in range(n)]
    return DemoRecord({"task": "toy", "demo_index": 0, "success": True, "arms": {"tcp": {}}}, frames, {}, {})


def test_static_actions_are_zero():
    rec = toy_record([[0.3, 0.1, 0.2]] * 5, gripper=[0.4] * 5)
    a = emit_actions(rec, "delta_ee_6d")
    assert a.shape == (4, 10)
    assert np.allclose(a[:, :3], 0) and np.allclose(a[:, 3:9], [1, 0, 0, 0, 1, 0])
    assert np.all(a[:, 9] == 0.4)


def test_two_frame_x_step():
    rec = toy_record([[0.0, 0.0, 0.0], [0.01, 0.0, 0.0]])
    a = emit_actions(rec, "delta_ee_6d")[0]
    assert np.allclose(a[:3], [0.01, 0, 0], atol=1e-15)
    assert np.array_equal(a[3:9], [1, 0, 0, 0, 1, 0])
    j = emit_actions(rec, "delta_joint")[0]
    assert np.allclose(j, [0.1, 0.0, 1.0])


def test_unknown_format(tiger_record):
    with pytest.raises(FormatUnavailable):
        emit_actions(tiger_record, "absolute_pixels")


def test_action_roundtrip_random_toy(rng):
    pos = np.cumsum(rng.normal(0, 0.01, (50, 3)), axis=0)
    quats = random_quat(rng, 50)
    rec = toy_record(pos, gripper=list(rng.random(50)), quats=quats)
    for fmt in ("delta_ee_6d", "delta_joint"):
        assert roundtrip_error(rec, fmt) < 1e-6
    rebuilt = integrate_actions(rec, emit_actions(rec))
    assert np.linalg.norm(rebuilt["tcp"]["ee"][-1].position - pos[-1]) < 1e-6
    assert geodesic_angle(rebuilt["tcp"]["ee"][-1].orientation, quats[-1]) < 1e-6


def test_action_roundtrip_generated(tiger_record):
    assert roundtrip_error(tiger_record, "delta_ee_6d") < 1e-6
    assert roundtrip_error(tiger_record, "delta_joint") < 1e-6


# -- render manifest ----------------------------------------------------------------------------


def test_single_frame_manifest(tiger_spec, tiger_record):
    rec = DemoRecord(tiger_record.meta, tiger_record.frames[:1], tiger_record.scene, {})
    m = export_render_manifest(rec, tiger_spec)
    assert len(m["frames"]) == 1
    f = m["frames"][0]
    assert set(f["links"]) == set(tiger_spec.model.links)
    assert set(f["parts"]) == set(m["assets"]) == {"tiger"}
    assert m["bodies"] == "kinematic"
    assert set(m["cameras"]) == set(f["cameras"])


def test_manifest_fixpoint(tiger_spec, tiger_record, tmp_path):
    text = manifest_dumps(export_render_manifest(tiger_record, tiger_spec))
    p = tmp_path / "m.render.json"
    p.write_text(text)
    assert manifest_dumps(load_render_manifest(p)) == text


def test_manifest_ee_matches_record(tiger_spec, tiger_record):
    m = export_render_manifest(tiger_record, tiger_spec)
    for f, frame in zip(m["frames"], tiger_record.frames):
        a = Pose.from_array(f["links"]["tcp"])
        b = Pose.from_array(frame["arms"]["tcp"]["ee"])
        assert np.linalg.norm(a.position - b.position) < 1e-9
        assert geodesic_angle(a.orientation, b.orientation) < 1e-9


def test_manifest_rejects_unknown_parts(tiger_spec, tiger_record):
    m = export_render_manifest(tiger_record, tiger_spec)
    m["frames"][0]["parts"]["ghost"] = [0, 0, 0, 1, 0, 0, 0]
    with pytest.raises(ValueError):
        check_manifest(m)


# -- CLI -------------------------------------------------------------------------------------


def test_cli_validate(task_dirs, capsys):
    assert main(["validate", str(task_dirs["tiger"])]) == 0
    assert "pick_tiger" in capsys.readouterr().out
    assert main(["validate", "--print-defaults"]) == 0
    assert "[solver]" in capsys.readouterr().out
    assert main(["validate", str(task_dirs["tiger"]), "--resolved"]) == 0
    assert json.loads(capsys.readouterr().out)["name"] == "pick_tiger"


def test_cli_invalid_task(task_dirs, tmp_path, capsys):
    path = copy_task(task_dirs, "tiger", tmp_path)
    edit(path, 'urdf = "robot/arm7.urdf"', 'urdf = "robot/missing.urdf"')
    assert main(["validate", str(path)]) == 2
    assert "MissingAsset" in capsys.readouterr().err
    assert main(["generate", str(path), "--out", str(tmp_path / "o")]) == 2
    assert main(["generate", str(task_dirs["tiger"]), "--out", str(tmp_path / "o"), "--workers", "0"]) == 2


def test_cli_generate_and_floor(task_dirs, tmp_path, capsys):
    out = tmp_path / "ds"
    assert main(["generate", str(task_dirs["tiger"]), "--out", str(out), "--n", "2", "--seed", "3"]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["succeeded"] == 2
    assert json.loads((out / "manifest.json").read_text())["spec"]["seed"] == 3

    path = copy_task(task_dirs, "tiger", tmp_path)
    edit(path, "aabb_min = [0.35, -0.2, 0.0]\naabb_max = [0.6, 0.2, 0.3]",
         "aabb_min = [10.0, -0.2, 0.0]\naabb_max = [10.3, 0.2, 0.3]")
    edit(path, "seed = 7", "seed = 7\nmin_success_rate = 0.5\nmax_attempt_factor = 1.0")
    assert main(["generate", str(path), "--out", str(tmp_path / "bad"), "--n", "2", "--only-success"]) == 3
    assert load_dataset(tmp_path / "bad") == []


def test_cli_grasps_and_example(task_dirs, tmp_path, capsys):
    assert main(["grasps", str(task_dirs["tiger"]), "--top", "3"]) == 0
    out = capsys.readouterr().out
    assert "antipodal candidates" in out and "quality=" in out
    assert main(["example", "mug", str(tmp_path / "mug"), "--n", "3"]) == 0
    assert load_task_config(tmp_path / "mug" / "task.toml").n_demos == 3


# -- file IO ------------------------------------------------------------------------------------


@pytest.mark.parametrize("binary", [False, True])
def test_ply_roundtrip(tmp_path, rng, binary):
    pts, nrm = rng.standard_normal((2, 40, 3))
    path = tmp_path / "p.ply"
    write_ply(path, pts, nrm, binary=binary)
    got, got_n = read_ply(path)
    assert np.array_equal(got, pts) and np.array_equal(got_n, nrm)
    assert np.array_equal(load_points(path), pts)


def test_ply_float32_with_extra_properties(tmp_path):
    header = ("ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
              "property float z\nproperty uchar red\nelement face 0\nproperty list uchar int vertex_indices\n"
              "end_header\n")
    rows = np.zeros(3, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1")])
    rows["x"] = [1, 2, 3]
    (tmp_path / "c.ply").write_bytes(header.encode() + rows.tobytes())
    pts, normals = read_ply(tmp_path / "c.ply")
    assert np.array_equal(pts[:, 0], [1, 2, 3]) and normals is None


def test_obj_vertices(tmp_path):
    (tmp_path / "m.obj").write_text("# mesh\nv 0 0 0\nv 1 0 0\nvn 0 0 1\nv 0 1 0\nf 1 2 3\n")
    assert load_points(tmp_path / "m.obj").shape == (3, 3)
    with pytest.raises(ValueError):
        load_points(tmp_path / "m.stl")


def test_trajectory_and_hand_files(tmp_path, rng):
    tr = PartTrajectory("mug", np.arange(6) * 0.1, rng.standard_normal((6, 3)), random_quat(rng, 6))
    save_trajectory(tmp_path / "t.json", tr)
    raw = json.loads((tmp_path / "t.json").read_text())
    assert raw["part_id"] == "mug" and raw["frame"] == "table" and len(raw["waypoints"][0]["pose"]) == 7
    back = load_trajectory(tmp_path / "t.json")
    assert np.array_equal(back.positions, tr.positions) and np.array_equal(back.times, tr.times)
    hands = [HandTrack("left", [0.0, 0.1], [[0, 0, 0], [1, 1, 1]], [[0, 0, 1], [1, 1, 2]]),
             HandTrack("right", [0.0, 0.2], [[2, 0, 0], [1, 3, 1]], [[0, 4, 1], [1, 5, 2]])]
    save_hand_track(tmp_path / "h.json", hands)
    loaded = load_hand_tracks(tmp_path / "h.json")
    assert set(loaded) == {"left", "right"}
    assert np.array_equal(loaded["right"].thumb_tip, hands[1].thumb_tip)
