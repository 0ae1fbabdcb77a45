"""Acceptance criteria, one test each, at their stated tolerances.

Every test prints a PASS/FAIL line (run with ``-s`` to see them inline) and
the lines are repeated in pytest's terminal summary.
"""
import math
import time

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter
from scipy.spatial.transform import Rotation

from tetsim import scenes
from tetsim.geom import (
    build_knn,
    delaunay_tetrahedralize,
    filter_tets,
    sample_subset,
    signed_volumes,
)
from tetsim.metrics import hf_psnr, hf_ssim, psnr, ssim
from tetsim.posefit import KeypointSet, LossWeights, bind_points, fit_initial, fit_sequence, render_mask
from tetsim.skinning import Pose, lbs
from tetsim.sysid import OptimizerConfig, PhysParams, ReferenceTrajectory, loss_gradient, optimize
from tetsim.transfer import DeformationTransfer, apply_embedding, embed, quat_multiply
from tetsim.xpbd import (
    AirMeshConstraint,
    Constraints,
    DistanceConstraint,
    Partition,
    SimConfig,
    SimState,
    project_airmesh,
    project_distance,
    step,
)

from conftest import ACCEPTANCE_KEY


@pytest.fixture
def report(request):
    def _report(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        print(line)
        getattr(request.config, ACCEPTANCE_KEY).append((name, bool(ok), detail))
        assert ok, line

    return _report


def test_xpbd_closed_form(report):
    x0 = np.array([[0.0, 0, 0], [2.0, 0, 0]])
    w = np.ones(2)
    cfg = SimConfig(substeps=1, solver_iterations=1, gravity=(0, 0, 0))
    seps = {}
    for label, alpha_tilde in (("rigid", 0.0), ("compliant", 2.0)):
        alpha = alpha_tilde * cfg.dt**2
        # Route 1: a single projection.
        da, db, _ = project_distance(x0, DistanceConstraint((0, 1), 1.0, alpha), w, 0.0, cfg.dt)
        single = np.linalg.norm((x0[1] + db) - (x0[0] + da))
        # Route 2: one full solver step.
        out = step(SimState.at_rest(x0, w), Constraints([[0, 1]], [1.0], alpha), Partition.from_rigid([], 2),
                   np.empty((0, 3)), cfg)
        full = np.linalg.norm(out.positions[1] - out.positions[0])
        seps[label] = (single, full)
    ok = (all(abs(v - 1.0) <= 1e-9 for v in seps["rigid"])
          and all(abs(v - 1.5) <= 1e-9 for v in seps["compliant"]))
    report("xpbd closed form", ok,
           f"alpha=0 -> {seps['rigid'][0]:.12f}/{seps['rigid'][1]:.12f}, "
           f"alpha~=2 -> {seps['compliant'][0]:.12f}/{seps['compliant'][1]:.12f}")


def _hanging_equilibrium(substeps, iterations, frames):
    sc = scenes.hanging_grid(nx=10, ny=10, compliance=1e-3,
                             config=SimConfig(substeps=substeps, solver_iterations=iterations))
    drv = [sc.rest_positions[sc.partition.rigid_indices]] * frames
    x = scenes.run(sc, drv)[-1]
    e = sc.constraints.edges
    lengths = np.linalg.norm(x[e[:, 0]] - x[e[:, 1]], axis=1)
    stretch = float(np.mean(lengths / sc.constraints.rest_lengths - 1.0))
    sag = float(np.max(sc.rest_positions[:, 1] - x[:, 1]))
    return stretch, sag


def test_stiffness_iteration_decoupling(report):
    t0 = time.perf_counter()
    s20, _ = _hanging_equilibrium(10, 20, 120)
    s40, _ = _hanging_equilibrium(10, 40, 120)
    rel = abs(s40 - s20) / abs(s20)
    dt = time.perf_counter() - t0
    report("stiffness-iteration decoupling", rel < 0.05 and dt < 10,
           f"mean stretch {s20:.6e} (20 it) vs {s40:.6e} (40 it), change {rel:.2e} < 5%, {dt:.1f}s")


def test_substep_ablation(report):
    t0 = time.perf_counter()
    sag = {n: _hanging_equilibrium(n, 20, 300)[1] for n in (1, 10, 100)}
    dt = time.perf_counter() - t0
    near, far = abs(sag[10] - sag[100]), abs(sag[1] - sag[100])
    report("substep ablation", near < far and dt < 30,
           f"sag 1/10/100 substeps = {sag[1]:.6f}/{sag[10]:.6f}/{sag[100]:.6f} m; "
           f"|10-100|={near:.2e} < |1-100|={far:.2e}, {dt:.1f}s")


def test_airmesh(report):
    tet = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    rest = 1.0 / 6.0
    c = AirMeshConstraint((0, 1, 2, 3), rest)
    inverted = tet.copy()
    inverted[3, 2] = -0.5
    d = project_airmesh(inverted, c, np.ones(4), threshold=0.1)
    vol = signed_volumes(inverted + d, [[0, 1, 2, 3]])[0]
    restored = vol >= 0.1 * rest - 1e-9
    noop = True
    for z in (1.0, 0.5, 0.15, 2.0):
        upright = tet.copy()
        upright[3, 2] = z
        noop &= bool(np.all(project_airmesh(upright, c, np.ones(4), threshold=0.1) == 0.0))
    report("airmesh", restored and noop,
           f"inverted volume -> {vol:.6e} >= {0.1 * rest:.6e}; upright tets untouched bit-exactly: {noop}")


def test_parameter_recovery(report):
    t0 = time.perf_counter()
    sc = scenes.two_material_cloth(mass=1.0)
    n_frames = 60
    drv = scenes.scene_swing(sc, n_frames - 1, amplitude=0.15, period=1.0)
    pos = scenes.run(sc, drv)
    assert pos.shape == (60, 200, 3)
    ref = ReferenceTrajectory(pos, sc.config.frame_dt, sc.partition, velocity_scheme="bdf2")
    truth = np.array([1e-6, 1e-2])
    init = PhysParams(np.log(sc.masses), np.log(truth * [10.0, 0.1]), None, sc.edge_material)
    res = optimize(ref, sc.constraints, init, sc.config, OptimizerConfig(epochs=30, batch_size=8, seed=0))
    got = np.exp(res.params.log_compliance)
    rel = np.abs(got - truth) / truth
    ratio = res.best_loss / res.initial_loss
    dt = time.perf_counter() - t0
    report("parameter recovery", np.all(rel < 0.2) and ratio < 0.01 and dt < 300,
           f"compliances {got[0]:.4e}/{got[1]:.4e} vs {truth[0]:.0e}/{truth[1]:.0e} "
           f"(rel err {rel[0]:.3f}/{rel[1]:.3f} < 0.2), loss ratio {ratio:.2e} < 1e-2, {dt:.1f}s")


def _circumspheres(pts, tets):
    p = pts[tets]
    A = 2.0 * (p[:, 1:] - p[:, :1])
    b = np.sum(p[:, 1:] ** 2, axis=2) - np.sum(p[:, :1] ** 2, axis=2)
    c = np.linalg.solve(A, b[..., None])[..., 0]
    return c, np.linalg.norm(c - p[:, 0], axis=1)


def _filter_oracle(mesh, pts, k):
    D = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    np.fill_diagonal(D, np.inf)
    n = len(pts)
    kept = []
    for t in mesh.tets:
        ref = t.min()
        nb = set(np.lexsort((np.arange(n), D[ref]))[: min(k, n - 1)].tolist())
        if all(v in nb for v in t if v != ref):
            kept.append(t)
    return np.array(kept, dtype=np.int64).reshape(-1, 4)


def test_tetrahedralization(report):
    rng = np.random.default_rng(2024)
    worst, mismatches, total_tets = np.inf, 0, 0
    for _ in range(20):
        n = int(rng.integers(20, 501))
        pts = rng.random((n, 3))
        mesh = delaunay_tetrahedralize(pts)
        total_tets += mesh.n_tets
        assert np.all(signed_volumes(pts, mesh.tets) > 0)
        c, r = _circumspheres(pts, mesh.tets)
        for lo in range(0, len(c), 512):
            d = np.linalg.norm(pts[None] - c[lo:lo + 512, None], axis=2) - r[lo:lo + 512, None]
            worst = min(worst, float(d.min()))
        k = int(rng.integers(4, 31))
        kept = filter_tets(mesh, build_knn(pts, k))
        mismatches += int(not np.array_equal(kept.tets, _filter_oracle(mesh, pts, k)))
    report("tetrahedralization", worst >= -1e-9 and mismatches == 0,
           f"20 clouds, {total_tets} tets; min(dist - radius) = {worst:.2e} >= -1e-9; filter mismatches {mismatches}")


def test_embedding_exactness(report):
    rng = np.random.default_rng(7)
    dense = rng.random((600, 3))
    sample = sample_subset(dense, 150, seed=1)
    mesh = delaunay_tetrahedralize(dense[sample])
    emb = embed(dense, sample, mesh)
    inner = emb.interior
    affine_err = 0.0
    for _ in range(5):
        A, b = rng.normal(size=(3, 3)), rng.normal(size=3)
        out = apply_embedding(emb, dense[sample] @ A.T + b, mesh)
        affine_err = max(affine_err, float(np.abs(out[inner] - dense[emb.point_indices[inner]] @ A.T - b).max()))

    q0 = np.roll(Rotation.random(len(dense), random_state=3).as_quat(), 1, axis=1)
    tr = DeformationTransfer().fit(dense, sampled_indices=sample, mesh=mesh, rotations=q0)
    pos_err = quat_err = 0.0
    for seed in range(5):
        R = Rotation.random(random_state=seed)
        t = rng.normal(size=3)
        moved = tr.transform(dense[sample] @ R.as_matrix().T + t)
        pos_err = max(pos_err, float(np.abs(moved - (dense @ R.as_matrix().T + t)).max()))
        q = tr.transform_rotations(moved)
        qR = np.roll(R.as_quat(), 1)
        want = quat_multiply(np.broadcast_to(qR, q0.shape), q0)
        diff = np.minimum(np.linalg.norm(q - want, axis=1), np.linalg.norm(q + want, axis=1))
        quat_err = max(quat_err, float(diff.max()))
    report("embedding exactness", affine_err <= 1e-9 and pos_err <= 1e-9 and quat_err <= 1e-6,
           f"affine {affine_err:.1e} ({int(inner.sum())} interior), rigid positions {pos_err:.1e}, "
           f"quaternions {quat_err:.1e}")


def test_pose_fitting(report):
    rig = scenes.tube_rig()
    T = 8
    poses = []
    for t in range(T):
        rot = np.zeros((rig.n_joints, 3))
        rot[2] = [0.0, 0.0, 0.06 * t]  # single-joint ramp
        poses.append(Pose(rot, [0.02, -0.01, 0.03]))
    pts0 = rig.posed_vertices(poses[0])[::3] + 0.004
    bound = bind_points(rig, poses[0], pts0)
    tracked = np.stack([lbs(rig, p, bound.canonical, bound.weights) for p in poses])
    kps = [KeypointSet(rig.posed_vertices(p)[rig.marker_vertices]) for p in poses]
    seq = fit_sequence(rig, poses[0], tracked, bound=bound, keypoints=kps)
    ramp_err = max(float(np.abs(g.rotations - w.rotations).max()) for g, w in zip(seq.poses, poses))

    shape = np.array([0.1, -0.05])
    verts = rig.posed_vertices(poses[3], shape)
    cams = scenes.ring_cameras(n=3, size=64, focal=50.0)
    masks = [render_mask(c, verts) for c in cams]
    init = fit_initial(rig, poses[3], verts[::3], cams, masks, LossWeights(pose_reg=0.0, shape_reg=0.0), shape)
    fp_err = max(float(np.abs(init.pose.rotations - poses[3].rotations).max()),
                 float(np.abs(init.pose.translation - poses[3].translation).max()),
                 float(np.abs(init.shape - shape).max()))
    report("pose fitting", ramp_err < 0.02 and fp_err < 1e-9 and not seq.flagged,
           f"ramp max joint error {ramp_err:.2e} rad < 0.02 over {T} frames; "
           f"fit_initial moved {fp_err:.1e} from ground truth")


def test_metrics(report):
    rng = np.random.default_rng(11)
    self_ok = True
    for k in range(10):
        shape = (40, 40, 3) if k % 2 else (40, 40)
        x = rng.random(shape)
        self_ok &= abs(hf_ssim(x, x) - 1.0) < 1e-12 and hf_psnr(x, x) == math.inf
    p = psnr(np.zeros((32, 32)), np.full((32, 32), 0.1))
    base = 0.5 * rng.random((32, 32))
    offset_inf = hf_psnr(base, base + 0.3) == math.inf
    y, x_ = np.indices((128, 128))
    board = (((x_ // 16) + (y // 16)) % 2).astype(float)
    pred = gaussian_filter(board, 3.0)
    h, s = hf_ssim(board, pred), ssim(board, pred)
    report("metrics", self_ok and abs(p - 20.0) <= 0.01 and offset_inf and h < s,
           f"self-similarity on 10 images {self_ok}; psnr(0.1 offset) = {p:.4f} dB; "
           f"hf_psnr(constant offset) = inf {offset_inf}; checkerboard hf_ssim {h:.4f} < ssim {s:.4f}")


# Tets whose four vertices are all pinned cannot be un-inverted; the solver warns and skips them.
@pytest.mark.filterwarnings("ignore::tetsim.errors.UnresolvableInversionWarning")
def test_gradient_check(report):
    rng = np.random.default_rng(5)
    pts = rng.random((40, 3)) * 0.4
    mesh = delaunay_tetrahedralize(pts)
    comp = np.exp(rng.uniform(np.log(1e-5), np.log(1e-2), mesh.n_edges))
    cons = Constraints.from_mesh(pts, mesh, compliance=comp)
    part = Partition.from_rigid(np.sort(np.argsort(pts[:, 1])[-5:]), len(pts))
    cfg = SimConfig(substeps=4, solver_iterations=8)
    frames = np.stack([pts + 0.02 * k * rng.normal(size=pts.shape) for k in range(3)])
    ref = ReferenceTrajectory(frames, cfg.frame_dt, part, velocity_scheme="bdf2")
    params = PhysParams(np.log(rng.uniform(0.5, 2.0, len(pts))), np.log(comp))
    worst = 0.0
    for t in (0, 1):
        _, gf = loss_gradient(ref, cons, params, cfg, t, mode="forward")
        _, gd = loss_gradient(ref, cons, params, cfg, t, mode="fd", fd_step=1e-6)
        worst = max(worst, float(np.linalg.norm(gf - gd) / np.linalg.norm(gd)))
    report("gradient check", worst < 1e-3,
           f"{len(pts)} points, {len(gf)} parameters (masses + compliances), "
           f"relative error {worst:.2e} < 1e-3")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-s", "-q"]))
