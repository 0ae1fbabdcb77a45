import json

import numpy as np
import pytest

from tetsim import io, scenes
from tetsim.geom import delaunay_tetrahedralize
from tetsim.posefit import Camera
from tetsim.skinning import Pose
from tetsim.transfer import GaussianCloud, embed
from tetsim.xpbd import SimState


def test_points_round_trip_exact(tmp_path):
    pts = np.random.default_rng(0).normal(size=(25, 3))
    for json_form in (False, True):
        p = tmp_path / f"pts{json_form}.txt"
        io.write_points(p, pts, labels=["body"] * 25, json_form=json_form)
        back, labels = io.read_points(p)
        assert np.array_equal(back, pts)
        assert list(labels) == ["body"] * 25


def test_points_header_and_rows(tmp_path):
    p = tmp_path / "pts.txt"
    io.write_points(p, [[1.0, 2.0, 3.0]])
    lines = p.read_text().splitlines()
    header = json.loads(lines[0])
    assert header["fields"] == ["x", "y", "z"] and header["count"] == 1 and header["units"] == "m"
    assert lines[1] == "1.0 2.0 3.0"


def test_points_comments_and_blank_lines(tmp_path):
    p = tmp_path / "pts.txt"
    p.write_text('{"fields": ["x", "y", "z"]}\n# a comment\n\n0 0 1\n1 0 0\n')
    pos, labels = io.read_points(p)
    assert pos.shape == (2, 3) and labels is None


@pytest.mark.parametrize(
    "body,line",
    [
        ('{"fields": ["x", "y", "z"]}\n0 0 1\n1 0\n', 3),
        ('{"fields": ["x", "y", "z"]}\n0 0 1\n\n1 2 3 4\n', 4),
    ],
)
def test_malformed_row_reports_line(tmp_path, body, line):
    p = tmp_path / "bad.txt"
    p.write_text(body)
    with pytest.raises(io.FormatError, match=f"line {line}"):
        io.read_points(p)


def test_malformed_header_and_values(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("not json\n0 0 0\n")
    with pytest.raises(io.FormatError, match="line 1"):
        io.read_points(p)
    p.write_text('{"fields": ["x", "y", "z"], "count": 3}\n0 0 0\n')
    with pytest.raises(io.FormatError, match="count"):
        io.read_points(p)
    p.write_text('{"fields": ["x", "y"]}\n0 0\n')
    with pytest.raises(io.FormatError, match="missing field"):
        io.read_points(p)
    p.write_text('{"fields": ["x", "y", "z"]}\n0 nan 0\n')
    with pytest.raises(io.FormatError):
        io.read_points(p)
    p.write_text("")
    with pytest.raises(io.FormatError):
        io.read_points(p)


def test_json_error_line_number(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n "a": 1,\n "b": \n}\n')
    with pytest.raises(io.FormatError, match="line 4"):
        io.load_json(p)


def test_gaussians_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    q = rng.normal(size=(6, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    cloud = GaussianCloud(rng.random((6, 3)), q, rng.random((6, 3)) + 0.01, ["body", "cloth"] * 3)
    p = tmp_path / "g.txt"
    io.write_gaussians(p, cloud)
    back = io.read_gaussians(p)
    assert np.array_equal(back.positions, cloud.positions)
    assert np.array_equal(back.rotations, cloud.rotations)
    assert np.array_equal(back.scales, cloud.scales)
    assert list(back.labels) == list(cloud.labels)


def test_tetmesh_round_trip(tmp_path):
    pts = np.random.default_rng(2).random((30, 3))
    mesh = delaunay_tetrahedralize(pts)
    p = tmp_path / "mesh.json"
    io.write_tetmesh(p, mesh, sample_indices=np.arange(30))
    back, samples = io.read_tetmesh(p)
    assert np.array_equal(back.tets, mesh.tets) and np.array_equal(back.edges, mesh.edges)
    assert np.array_equal(samples, np.arange(30))


@pytest.mark.parametrize("dtype,json_form", [("<f4", False), ("<f8", False), ("<f8", True)])
def test_trajectory_round_trip(tmp_path, dtype, json_form):
    pos = np.random.default_rng(3).normal(size=(4, 7, 3))
    p = tmp_path / "traj.bin"
    io.write_trajectory(p, pos, 1 / 30, dtype=dtype, json_form=json_form, metadata={"seed": 1})
    back, dt, header = io.read_trajectory(p)
    assert dt == pytest.approx(1 / 30)
    assert header["metadata"] == {"seed": 1}
    expected = pos.astype(np.float32).astype(float) if dtype == "<f4" else pos
    assert np.array_equal(back, expected)


def test_trajectory_empty_and_truncated(tmp_path):
    p = tmp_path / "traj.bin"
    io.write_trajectory(p, np.empty((0, 5, 3)), 0.1)
    back, _, header = io.read_trajectory(p)
    assert back.shape == (0, 5, 3) and header["n_frames"] == 0
    io.write_trajectory(p, np.zeros((2, 5, 3)), 0.1)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(io.FormatError, match="payload"):
        io.read_trajectory(p)


def test_state_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    st = SimState(rng.random((5, 3)), rng.random((5, 3)), np.array([0.0, 1, 2, 3, 4]))
    p = tmp_path / "state.json"
    io.write_state(p, st, frame=7)
    back, frame = io.read_state(p)
    assert frame == 7
    assert np.array_equal(back.positions, st.positions)
    assert np.array_equal(back.velocities, st.velocities)
    assert np.array_equal(back.inverse_masses, st.inverse_masses)


def test_rig_and_poses_round_trip(tmp_path):
    rig = scenes.tube_rig()
    p = tmp_path / "rig.json"
    io.write_rig(p, rig)
    back = io.read_rig(p)
    assert np.array_equal(back.skin_weights, rig.skin_weights)
    assert np.array_equal(back.rest_vertices, rig.rest_vertices)
    assert np.array_equal(back.shape_basis, rig.shape_basis)
    assert np.array_equal(back.marker_vertices, rig.marker_vertices)
    pose = Pose(np.random.default_rng(5).normal(0, 0.2, (rig.n_joints, 3)), [0.1, 0.2, 0.3])
    assert np.array_equal(back.posed_vertices(pose), rig.posed_vertices(pose))
    pp = tmp_path / "poses.json"
    io.write_poses(pp, [pose, pose], shape=[0.1, -0.2])
    poses, shape = io.read_poses(pp)
    assert len(poses) == 2 and np.array_equal(poses[1].rotations, pose.rotations)
    assert np.array_equal(shape, [0.1, -0.2])


def test_cameras_and_masks_round_trip(tmp_path):
    cams = scenes.ring_cameras(n=2, size=32)
    p = tmp_path / "cams.json"
    io.write_cameras(p, cams)
    back = io.read_cameras(p)
    assert all(isinstance(c, Camera) for c in back)
    assert np.array_equal(back[1].rotation, cams[1].rotation)
    mask = np.zeros((10, 12), np.uint8)
    mask[2:5, 3:9] = 1
    mp = tmp_path / "m.pgm"
    io.write_mask(mp, mask)
    assert np.array_equal(io.read_mask(mp), mask)


def test_embedding_round_trip(tmp_path):
    dense = np.random.default_rng(6).random((60, 3))
    sample = np.arange(0, 60, 3)
    emb = embed(dense, sample, delaunay_tetrahedralize(dense[sample]))
    p = tmp_path / "emb.json"
    io.write_embedding(p, emb)
    back = io.read_embedding(p)
    for name in ("point_indices", "kind", "tet", "bary", "face", "offset", "normal_sign"):
        assert np.array_equal(getattr(back, name), getattr(emb, name)), name


def test_keypoints_reader(tmp_path):
    p = tmp_path / "kp.json"
    p.write_text(json.dumps({"frames": [None, {"targets": [[0, 0, 0], [1, 1, 1]], "valid": [True, False]}]}))
    kps = io.read_keypoints(p)
    assert kps[0] is None and kps[1].valid.tolist() == [True, False]


def test_loss_csv_values(tmp_path):
    p = tmp_path / "loss.csv"
    io.write_loss_csv(p, [[0, 0.5, float("inf"), "x"]], ["epoch", "loss", "psnr", "tag"])
    assert p.read_text() == "epoch,loss,psnr,tag\n0,0.5,inf,x\n"
