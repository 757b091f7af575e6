import numpy as np
import pytest

from app.core.exceptions import ControllerError, DimensionMismatchError
from app.models.numerics import AffineModel, HorizonSolution, QpStatus, StateLayout
from app.models.schemas import (
    ControllerKind,
    ExperimentConfig,
    ReferenceControllerConfig,
    SmoothingControllerConfig,
)
from app.services import qp_solver
from app.services.cftoc import (
    ReferenceController,
    SmoothingController,
    SmoothingStructure,
    build_controller,
    build_reference_cftoc,
    build_smoothing_cftoc,
    decode_horizon,
    extract_first_input,
    smoothing_structure,
)
from app.services.linearization import linearize
from app.services.spine_model import SpinePlant
from app.services.trajgen import generate_bend


def _scalar_model() -> AffineModel:
    return AffineModel(
        A=np.eye(1), B=np.eye(1), c=np.zeros(1), xi_op=np.zeros(1), u_op=np.zeros(1), dt=1.0
    )


def _scalar_structure(q: float, s: float = 0.0) -> SmoothingStructure:
    return SmoothingStructure(
        pose_blocks=((0,),),
        pose_bounds=(100.0,),
        z_indices=(0,),
        q_diag=np.array([q]),
        s_diag=np.array([s]),
        margin=0.1,
    )


def _wide_smoothing(**overrides) -> SmoothingControllerConfig:
    values = dict(horizon=1, u_min=-10.0, u_max=10.0, w1=100.0, w2=100.0, w3=100.0, w8=0.1)
    values.update(overrides)
    return SmoothingControllerConfig(**values)


def _solve(problem) -> HorizonSolution:
    return decode_horizon(problem, qp_solver.solve(problem))


def test_scalar_toy_matches_hand_minimizer():
    # min 2 (u - 1)^2 + 0.1 |u - 0| over one step of x+ = x + u
    problem = build_smoothing_cftoc(
        _scalar_model(), np.zeros(1), np.zeros(1), np.array([[0.0], [1.0]]), _wide_smoothing(), _scalar_structure(2.0)
    )
    horizon = _solve(problem)
    assert horizon.status == QpStatus.OPTIMAL
    assert horizon.inputs[0, 0] == pytest.approx(0.975, abs=1e-6)
    assert horizon.objective == pytest.approx(0.09875, abs=1e-6)
    np.testing.assert_allclose(horizon.states[:, 0], [0.0, 0.975], atol=1e-6)
    assert horizon.slacks[0] == pytest.approx(0.975, abs=1e-6)


def test_stage_weights_are_raised_to_the_stage_index():
    problem = build_smoothing_cftoc(
        _scalar_model(),
        np.zeros(1),
        np.zeros(1),
        np.zeros((4, 1)),
        _wide_smoothing(horizon=3),
        _scalar_structure(2.0),
    )
    H = problem.H.toarray()
    np.testing.assert_allclose(np.diag(H)[:4], 2.0 * np.array([1.0, 2.0, 4.0, 8.0]))


def test_zero_weights_stay_zero_at_stage_zero():
    problem = build_smoothing_cftoc(
        _scalar_model(), np.zeros(1), np.zeros(1), np.zeros((2, 1)), _wide_smoothing(), _scalar_structure(0.0)
    )
    assert problem.H.toarray()[0, 0] == 0.0


def test_epigraph_term_equals_max_abs_input_change():
    rng = np.random.default_rng(4)
    cfg = _wide_smoothing(horizon=3, w8=0.7)
    structure = _scalar_structure(2.0, s=1.5)
    model = AffineModel(A=np.array([[0.9]]), B=np.array([[0.5]]), c=np.array([0.01]), xi_op=np.zeros(1), u_op=np.zeros(1), dt=1.0)
    xi_t, u_prev = np.array([0.2]), np.array([0.1])
    refs = rng.normal(size=(4, 1))
    problem = build_smoothing_cftoc(model, xi_t, u_prev, refs, cfg, structure)

    inputs = rng.uniform(-1.0, 1.0, size=4)
    states = [xi_t[0]]
    for k in range(3):
        states.append(0.9 * states[-1] + 0.5 * inputs[k] + 0.01)
    states = np.array(states)
    deltas = np.abs(np.diff(np.concatenate([u_prev, inputs])))
    z = np.concatenate([states, inputs, deltas])

    direct = sum(2.0**k * (states[k] - refs[k, 0]) ** 2 for k in range(4))
    direct += sum(1.5**k * (states[k] - states[k - 1]) ** 2 for k in range(1, 4))
    direct += 0.7 * deltas.sum()
    assert problem.objective(z) == pytest.approx(direct, abs=1e-9)
    assert np.all(problem.A_ineq @ z <= problem.b_ineq + 1e-12)
    np.testing.assert_allclose(problem.A_eq @ z, problem.b_eq, atol=1e-12)


def test_reference_equilibrium_has_zero_cost(planar_config, planar_home, planar_ik):
    model = linearize(planar_config, planar_home, planar_ik)
    cfg = ReferenceControllerConfig()
    problem = build_reference_cftoc(
        model, planar_home, np.tile(planar_home, (5, 1)), np.tile(planar_ik, (4, 1)), cfg
    )
    horizon = _solve(problem)
    assert horizon.status == QpStatus.OPTIMAL
    assert horizon.objective == pytest.approx(0.0, abs=1e-8)
    np.testing.assert_allclose(horizon.inputs, np.tile(planar_ik, (4, 1)), atol=1e-6)
    np.testing.assert_allclose(extract_first_input(horizon), planar_ik, atol=1e-6)


def test_smoothing_equilibrium_keeps_inputs(spatial_config, spatial_home, spatial_ik):
    model = linearize(spatial_config, spatial_home, spatial_ik)
    cfg = SmoothingControllerConfig()
    problem = build_smoothing_cftoc(model, spatial_home, spatial_ik, np.tile(spatial_home, (11, 1)), cfg)
    horizon = _solve(problem)
    assert horizon.status == QpStatus.OPTIMAL
    assert horizon.objective == pytest.approx(0.0, abs=1e-4)
    np.testing.assert_allclose(horizon.inputs, np.tile(spatial_ik, (11, 1)), atol=1e-5)


def test_smoothing_solution_respects_every_constraint(spatial_config, spatial_home, spatial_ik):
    cfg = SmoothingControllerConfig()
    trajectory = generate_bend(spatial_config, 0.3, 0.05, collision_margin=cfg.w7)
    model = linearize(spatial_config, spatial_home, spatial_ik)
    problem = build_smoothing_cftoc(model, spatial_home, spatial_ik, trajectory.state_window(10, 11), cfg)
    solution = qp_solver.solve(problem)
    assert solution.optimal
    horizon = decode_horizon(problem, solution)

    U, X = horizon.inputs, horizon.states
    assert np.all(U >= cfg.u_min - 1e-7) and np.all(U <= cfg.u_max + 1e-7)
    assert np.max(np.abs(U[0] - spatial_ik)) <= cfg.w1 + 1e-7
    assert np.max(np.abs(U[1:-1] - U[0])) <= cfg.w2 + 1e-7
    assert np.max(np.abs(U[-1] - U[0])) <= cfg.w3 + 1e-7
    layout = SpinePlant(spatial_config).layout
    for body, bound in enumerate((cfg.w4, cfg.w5, cfg.w6)):
        pose = layout.pose_slice(body)
        assert np.max(np.abs(np.diff(X[:, pose], axis=0))) <= bound + 1e-7
    for k in range(1, 11):
        assert X[k, 2] + cfg.w7 <= X[k, 14] + 1e-7
        assert X[k, 14] + cfg.w7 <= X[k, 26] + 1e-7
    for k in range(10):
        np.testing.assert_allclose(X[k + 1], model.predict(X[k], U[k]), atol=1e-7)


def test_predicted_first_state_is_the_affine_step(toy_plant, toy_reference_config):
    model = linearize(toy_plant, np.array([1.0, 0.0]), np.zeros(1))
    problem = build_reference_cftoc(model, np.array([1.0, 0.0]), np.zeros((5, 2)), np.zeros((4, 1)), toy_reference_config)
    horizon = _solve(problem)
    np.testing.assert_allclose(horizon.states[1], model.predict(horizon.states[0], horizon.inputs[0]), atol=1e-8)
    np.testing.assert_allclose(horizon.states[0], [1.0, 0.0], atol=1e-9)


def test_objective_is_non_decreasing_in_horizon_without_terminal_cost(toy_plant):
    model = linearize(toy_plant, np.array([1.0, 0.0]), np.zeros(1))
    previous = -np.inf
    for N in range(1, 7):
        cfg = ReferenceControllerConfig(horizon=N, u_min=-1.0, u_max=1.0, z_index=None, p_diag=[0.0, 0.0])
        problem = build_reference_cftoc(model, np.array([1.0, 0.0]), np.zeros((N + 1, 2)), np.zeros((N, 1)), cfg)
        objective = _solve(problem).objective
        assert objective >= previous - 1e-7
        previous = objective


def test_initial_collision_violation_is_flagged_and_infeasible(planar_config, planar_home, planar_ik):
    low = planar_home.copy()
    low[1] = 0.05
    model = linearize(planar_config, planar_home, planar_ik)
    problem = build_reference_cftoc(model, low, np.tile(planar_home, (5, 1)), np.tile(planar_ik, (4, 1)), ReferenceControllerConfig())
    assert problem.metadata["initial_state_violates_collision"]
    assert qp_solver.solve(problem).status == QpStatus.INFEASIBLE


def test_short_reference_window_rejected(toy_plant, toy_reference_config):
    model = linearize(toy_plant, np.zeros(2), np.zeros(1))
    with pytest.raises(DimensionMismatchError):
        build_reference_cftoc(model, np.zeros(2), np.zeros((4, 2)), np.zeros((4, 1)), toy_reference_config)


def test_smoothing_needs_stacked_spatial_state():
    model = AffineModel(A=np.eye(6), B=np.zeros((6, 4)), c=np.zeros(6), xi_op=np.zeros(6), u_op=np.zeros(4), dt=0.001)
    with pytest.raises(DimensionMismatchError):
        build_smoothing_cftoc(model, np.zeros(6), np.zeros(4), np.zeros((11, 6)), SmoothingControllerConfig())


def test_first_input_of_identical_horizon():
    horizon = HorizonSolution(
        inputs=np.tile([0.1, 0.2], (3, 1)), states=np.zeros((4, 2)), objective=0.0,
        status=QpStatus.OPTIMAL, iterations=5, u_min=0.0, u_max=0.3,
    )
    np.testing.assert_array_equal(extract_first_input(horizon), [0.1, 0.2])


def test_clamp_is_a_no_op_within_tolerance():
    horizon = HorizonSolution(
        inputs=np.array([[0.3 + 1e-10, -1e-10]]), states=np.zeros((2, 2)), objective=0.0,
        status=QpStatus.OPTIMAL, iterations=5, u_min=0.0, u_max=0.3,
    )
    np.testing.assert_allclose(extract_first_input(horizon), [0.3, 0.0], atol=1e-9)


def test_non_optimal_horizon_has_no_input():
    horizon = HorizonSolution(
        inputs=np.zeros((1, 2)), states=np.zeros((2, 2)), objective=np.nan,
        status=QpStatus.INFEASIBLE, iterations=3, u_min=0.0, u_max=0.3,
    )
    with pytest.raises(ControllerError):
        extract_first_input(horizon)


def test_structure_follows_state_layout():
    cfg = SmoothingControllerConfig()
    structure = smoothing_structure(StateLayout(num_bodies=3, position_dim=3, angle_dim=3), cfg)
    assert structure.z_indices == (2, 14, 26)
    assert structure.pose_blocks[1] == tuple(range(12, 18))
    assert structure.q_diag[:12].tolist() == [4.0] * 3 + [3.0] * 3 + [0.0] * 6
    assert structure.s_diag[:12].tolist() == [2.0] * 6 + [0.0] * 6


def test_build_controller_matches_plant(planar_config, spatial_config):
    experiment = ExperimentConfig()
    planar = SpinePlant(planar_config)
    spatial = SpinePlant(spatial_config)
    assert isinstance(build_controller(ControllerKind.REFERENCE, experiment, planar), ReferenceController)
    assert isinstance(build_controller(ControllerKind.SMOOTHING, experiment, spatial), SmoothingController)
    with pytest.raises(ControllerError):
        build_controller(ControllerKind.SMOOTHING, experiment, planar)
    with pytest.raises(ControllerError):
        build_controller(ControllerKind.REFERENCE, experiment, spatial)
