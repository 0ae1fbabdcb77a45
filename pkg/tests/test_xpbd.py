import warnings

import numpy as np
import pytest

from tetsim import _kernels, scenes, xpbd
from tetsim.errors import (
    InvalidInputError,
    SingularGradientError,
    SolverDivergenceError,
    UnresolvableInversionWarning,
)
from tetsim.geom import signed_volumes
from tetsim.xpbd import (
    AirMeshConstraint,
    Constraints,
    DistanceConstraint,
    Partition,
    SimConfig,
    SimState,
    predict_positions,
    project_airmesh,
    project_distance,
    simulate,
    step,
)

TET = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)


def pair(sep=2.0):
    return np.array([[0.0, 0, 0], [sep, 0, 0]])


def test_distance_rigid_closed_form():
    c = DistanceConstraint((0, 1), 1.0, 0.0)
    da, db, lam = project_distance(pair(), c, np.ones(2), 0.0, 0.1)
    x = pair() + np.stack([da, db])
    assert np.linalg.norm(x[1] - x[0]) == pytest.approx(1.0, abs=1e-9)
    assert np.allclose(da, [0.5, 0, 0]) and np.allclose(db, [-0.5, 0, 0])
    assert lam == pytest.approx(-0.5)


def test_distance_compliant_closed_form():
    dt = 0.1
    c = DistanceConstraint((0, 1), 1.0, 2.0 * dt**2)  # alpha_tilde = 2
    da, db, lam = project_distance(pair(), c, np.ones(2), 0.0, dt)
    x = pair() + np.stack([da, db])
    assert np.linalg.norm(x[1] - x[0]) == pytest.approx(1.5, abs=1e-9)
    assert lam == pytest.approx(-0.25)


def test_distance_pinned_endpoint_moves_other_fully():
    c = DistanceConstraint((0, 1), 1.0)
    da, db, _ = project_distance(pair(), c, np.array([0.0, 1.0]), 0.0, 0.1)
    assert np.all(da == 0) and np.allclose(db, [-1, 0, 0])


def test_distance_coincident_raises():
    with pytest.raises(SingularGradientError):
        project_distance(np.zeros((2, 3)), DistanceConstraint((0, 1), 1.0), np.ones(2), 0.0, 0.1)


def test_constraint_validation():
    with pytest.raises(InvalidInputError):
        DistanceConstraint((1, 1), 1.0)
    with pytest.raises(InvalidInputError):
        DistanceConstraint((0, 1), 0.0)
    with pytest.raises(InvalidInputError):
        DistanceConstraint((0, 1), 1.0, -1.0)
    with pytest.raises(InvalidInputError):
        AirMeshConstraint((0, 1, 2, 2), 1.0)
    with pytest.raises(InvalidInputError):
        Constraints([[0, 1]], [1.0, 2.0], 0.0)
    with pytest.raises(InvalidInputError):
        Constraints(tets=[[0, 1, 2, 3]], rest_volumes=[-1.0])


def test_airmesh_restores_inverted_tet():
    x = TET.copy()
    x[3, 2] = -0.5  # inverted
    rest = 1 / 6
    c = AirMeshConstraint((0, 1, 2, 3), rest)
    delta = project_airmesh(x, c, np.ones(4), threshold=0.1)
    v = signed_volumes(x + delta, [[0, 1, 2, 3]])[0]
    assert v >= 0.1 * rest - 1e-9


def test_airmesh_noop_when_not_inverted_is_bit_exact():
    x = TET.copy()
    c = AirMeshConstraint((0, 1, 2, 3), 1 / 6)
    delta = project_airmesh(x, c, np.ones(4))
    assert np.all(delta == 0.0)
    x[3, 2] = 0.15  # squashed to 15% of rest, above the 10% threshold
    assert np.all(project_airmesh(x, c, np.ones(4)) == 0.0)


def test_airmesh_fully_pinned_warns():
    x = TET.copy()
    x[3, 2] = -0.5
    with pytest.warns(UnresolvableInversionWarning):
        d = project_airmesh(x, AirMeshConstraint((0, 1, 2, 3), 1 / 6), np.zeros(4))
    assert np.all(d == 0)


def test_airmesh_respects_pinned_vertices():
    x = TET.copy()
    x[3, 2] = -0.5
    w = np.array([0.0, 0.0, 0.0, 1.0])
    d = project_airmesh(x, AirMeshConstraint((0, 1, 2, 3), 1 / 6), w)
    assert np.all(d[:3] == 0)
    assert signed_volumes(x + d, [[0, 1, 2, 3]])[0] >= 0.1 / 6 - 1e-9


def test_predictor_matches_symplectic_euler():
    st_ = SimState(np.zeros((2, 3)), np.array([[1.0, 0, 0], [0, 0, 0]]), np.array([1.0, 0.0]))
    x = predict_positions(st_, 0.1, (0, -10, 0))
    assert np.allclose(x[0], [0.1, -0.1, 0])
    assert np.all(x[1] == 0)


def _python_gauss_seidel(x, w, cons, dt, iterations, threshold):
    """Reference sweep built from the single-constraint operations."""
    lam = np.zeros(cons.n_distance)
    for _ in range(iterations):
        for c in range(cons.n_distance):
            dc = DistanceConstraint(tuple(cons.edges[c]), cons.rest_lengths[c], cons.compliance[c])
            da, db, lam[c] = project_distance(x, dc, w, lam[c], dt)
            x[cons.edges[c, 0]] += da
            x[cons.edges[c, 1]] += db
        for t in range(cons.n_airmesh):
            am = AirMeshConstraint(tuple(cons.tets[t]), cons.rest_volumes[t])
            x[cons.tets[t]] += project_airmesh(x, am, w, threshold)
    return x


def test_kernel_sweep_matches_reference_route():
    rng = np.random.default_rng(0)
    rest = rng.random((12, 3))
    from tetsim.geom import delaunay_tetrahedralize

    mesh = delaunay_tetrahedralize(rest)
    cons = Constraints.from_mesh(rest, mesh, compliance=rng.random(mesh.n_edges) * 1e-3)
    x = rest + 0.2 * rng.standard_normal(rest.shape)
    w = rng.random(12) + 0.5
    w[0] = 0.0
    dt = 1 / 300
    ref = _python_gauss_seidel(x.copy(), w, cons, dt, 5, 0.1)
    got = x.copy()
    lam = np.zeros(cons.n_distance)
    _kernels.gauss_seidel(got, w, cons.edges, cons.rest_lengths, cons.compliance / dt**2, lam, cons.tets,
                          0.1 * cons.rest_volumes, 5, xpbd.COINCIDENT_EPS, 50, 1e-13)
    assert np.allclose(got, ref, atol=1e-12)


def test_step_static_equilibrium_without_gravity():
    sc = scenes.hanging_grid(nx=4, ny=4, config=SimConfig(gravity=(0, 0, 0)))
    st0 = sc.initial_state()
    out = step(st0, sc.constraints, sc.partition, sc.rest_positions[sc.partition.rigid_indices], sc.config)
    assert np.allclose(out.positions, st0.positions, atol=1e-15)
    assert np.allclose(out.velocities, 0, atol=1e-12)


def test_step_rigid_points_hit_targets_exactly():
    sc = scenes.hanging_grid(nx=4, ny=4)
    tgt = sc.rest_positions[sc.partition.rigid_indices] + np.array([0.1, 0.05, -0.02]) / 3.0
    out = step(sc.initial_state(), sc.constraints, sc.partition, tgt, sc.config)
    assert np.array_equal(out.positions[sc.partition.rigid_indices], tgt)


def test_step_free_fall_matches_loop_oracle():
    cfg = SimConfig(substeps=7)
    st0 = SimState(np.zeros((1, 3)), np.array([[0.5, 1.0, 0.0]]), np.ones(1))
    out = step(st0, Constraints(), Partition.from_rigid([], 1), np.empty((0, 3)), cfg)
    x, v, g, h = np.zeros(3), np.array([0.5, 1.0, 0.0]), np.array(cfg.gravity), cfg.dt
    for _ in range(cfg.substeps):
        v = v + h * g
        x = x + h * v
    assert np.allclose(out.positions[0], x, atol=1e-14)
    assert np.allclose(out.velocities[0], v, atol=1e-12)


def test_step_validates_inputs():
    sc = scenes.hanging_grid(nx=3, ny=3)
    with pytest.raises(InvalidInputError):
        step(sc.initial_state(), sc.constraints, sc.partition, np.zeros((2, 3)), sc.config)
    with pytest.raises(InvalidInputError):
        step(sc.initial_state(), sc.constraints, Partition.from_rigid([0], 4), np.zeros((1, 3)), sc.config)
    with pytest.raises(InvalidInputError):
        SimConfig(mode="newton")
    with pytest.raises(InvalidInputError):
        Partition([0, 1], [1, 2])


def test_step_reports_divergence(monkeypatch):
    sc = scenes.hanging_grid(nx=3, ny=3)

    def poisoned(x, *args):
        x[:] = np.nan
        return 0, 0

    monkeypatch.setattr(_kernels, "gauss_seidel", poisoned)
    tgt = sc.rest_positions[sc.partition.rigid_indices]
    with pytest.raises(SolverDivergenceError) as exc:
        simulate(sc.initial_state(), sc.constraints, sc.partition, [tgt, tgt], sc.config)
    assert exc.value.frame == 0 and exc.value.substep == 0


def test_diagnostics_count_skipped_coincident():
    pos = np.array([[0.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0]])
    cons = Constraints([[0, 1], [1, 2]], [0.5, 1.0], 0.0)
    diag = {}
    step(SimState.at_rest(pos, np.ones(3)), cons, Partition.from_rigid([], 3), np.empty((0, 3)),
         SimConfig(gravity=(0, 0, 0), substeps=1, solver_iterations=1), diagnostics=diag)
    assert diag["skipped_coincident"] >= 1


def test_jacobi_mode_stays_bounded():
    sc = scenes.hanging_grid(nx=5, ny=5, compliance=1e-3, config=SimConfig(mode="jacobi"))
    drv = [sc.rest_positions[sc.partition.rigid_indices]] * 30
    states = simulate(sc.initial_state(), sc.constraints, sc.partition, drv, sc.config)
    stretch = np.linalg.norm(np.diff(states[-1].positions[sc.constraints.edges], axis=1)[:, 0], axis=1)
    assert np.all(np.isfinite(stretch)) and np.max(stretch / sc.constraints.rest_lengths) < 2.0


def test_stiffer_compliance_sags_less():
    sags = []
    for alpha in (1e-2, 1e-4):
        sc = scenes.hanging_grid(nx=5, ny=5, compliance=alpha)
        drv = [sc.rest_positions[sc.partition.rigid_indices]] * 40
        states = simulate(sc.initial_state(), sc.constraints, sc.partition, drv, sc.config)
        sags.append(-states[-1].positions[:, 1].min())
    assert sags[0] > sags[1]


def test_substeps_and_threshold_do_not_mutate_input_state():
    sc = scenes.hanging_grid(nx=3, ny=3)
    st0 = sc.initial_state()
    before = st0.positions.copy()
    step(st0, sc.constraints, sc.partition, sc.rest_positions[:3], sc.config)
    assert np.array_equal(st0.positions, before)


def test_simstate_validation():
    with pytest.raises(InvalidInputError):
        SimState(np.zeros((2, 3)), None, np.array([1.0, -1.0]))
    with pytest.raises(ValueError):
        SimState(np.full((2, 3), np.inf), None, np.ones(2))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert SimState.at_rest(np.zeros((2, 3)), np.ones(2)).velocities.shape == (2, 3)
