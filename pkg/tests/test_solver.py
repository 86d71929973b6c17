import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import zoom_grid_minimum
from toys import scalar_model, toy_problems
from uise.errors import NumericError
from uise.model import Box, SystemModel
from uise.shooting import BASELINE, TWO_STAGE, CostSpec, Window, build_shooting_objective
from uise.solver import (
    CONVERGED,
    LINE_SEARCH_FAILURE,
    MAX_ITERATIONS,
    NlpProblem,
    SolverOptions,
    fd_gradient,
    fd_jacobian,
    solve_box_nlp,
)
from uise.detectability import ExpIossCertificate, LyapunovCertificate

STATUSES = {CONVERGED, MAX_ITERATIONS, LINE_SEARCH_FAILURE}


def test_clamped_quadratic():
    p = NlpProblem(1, lambda x: float((x[0] - 3) ** 2), Box([0], [1]))
    sol = solve_box_nlp(p, [0.2])
    assert sol.argmin[0] == pytest.approx(1.0) and sol.status == CONVERGED
    assert sol.projected_gradient_norm < 1e-8


def test_rosenbrock():
    f = lambda z: float((1 - z[0]) ** 2 + 100 * (z[1] - z[0] ** 2) ** 2)
    p = NlpProblem(2, f, Box([-2, -2], [2, 2]))
    sol = solve_box_nlp(p, [-1.2, 1.0], SolverOptions(max_iter=2000, tol=1e-10))
    assert np.allclose(sol.argmin, [1, 1], atol=1e-6)


def test_rosenbrock_least_squares_route():
    res = lambda z: np.stack([1 - np.asarray(z)[..., 0], 10 * (np.asarray(z)[..., 1] - np.asarray(z)[..., 0] ** 2)], -1)
    p = NlpProblem(2, lambda z: float(res(z) @ res(z)), Box([-2, -2], [2, 2]), residuals=res)
    sol = solve_box_nlp(p, [-1.2, 1.0], SolverOptions(tol=1e-10))
    assert np.allclose(sol.argmin, [1, 1], atol=1e-6)
    assert sol.cost == pytest.approx(p.objective(sol.argmin), abs=1e-15)


def test_initial_point_projected_and_nonfinite_rejected():
    p = NlpProblem(1, lambda x: float(x[0] ** 2), Box([1], [2]))
    sol = solve_box_nlp(p, [-5.0])
    assert sol.argmin[0] == pytest.approx(1.0)
    bad = NlpProblem(1, lambda x: float("nan"), Box([0], [1]))
    with pytest.raises(ValueError):
        solve_box_nlp(bad, [0.5])


def test_free_coordinates():
    p = NlpProblem(2, lambda x: float((x[0] - 10) ** 2 + (x[1] + 1) ** 2), Box([-np.inf, 0], [np.inf, 1]))
    sol = solve_box_nlp(p, [0.0, 0.5])
    assert np.allclose(sol.argmin, [10, 0], atol=1e-6)


def test_iteration_cap_status():
    f = lambda z: float((1 - z[0]) ** 2 + 100 * (z[1] - z[0] ** 2) ** 2)
    sol = solve_box_nlp(NlpProblem(2, f, Box([-2, -2], [2, 2])), [-1.2, 1.0], SolverOptions(max_iter=3))
    assert sol.status in STATUSES and sol.status != CONVERGED


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 5), st.floats(-2, 2), st.floats(-2, 2))
def test_monotone_improvement(a, b, c, x0, y0):
    f = lambda z: float(c * (z[0] - a) ** 2 + (z[1] - b) ** 2 + 0.3 * np.sin(3 * z[0]) * z[1])
    p = NlpProblem(2, f, Box([-1, -1], [1, 1]))
    for opts in (SolverOptions(), SolverOptions(max_iter=2)):
        sol = solve_box_nlp(p, [x0, y0], opts)
        start = p.box.project(np.array([x0, y0]))
        assert sol.cost <= f(start) + 1e-12
        assert np.all(p.box.contains(sol.argmin))
        assert sol.cost == pytest.approx(f(sol.argmin), abs=1e-14)
        assert sol.status in STATUSES


def test_trace_written(tmp_path):
    path = tmp_path / "trace.csv"
    p = NlpProblem(1, lambda x: float((x[0] - 0.3) ** 2), Box([0], [1]))
    solve_box_nlp(p, [0.9], SolverOptions(trace_path=str(path)))
    rows = list(csv.reader(open(path)))
    assert len(rows) >= 2


# --- finite differences ---------------------------------------------------------

def test_fd_gradient_examples():
    assert np.allclose(fd_gradient(lambda x: float(x @ x), np.array([1.0, 2.0]), 1e-6), [2, 4], atol=1e-6)
    assert np.allclose(fd_gradient(lambda x: 3.0, np.array([1.0, 2.0])), 0)
    with pytest.raises(NumericError) as exc:
        fd_gradient(lambda x: float("inf") if x[1] > 2 else 0.0, np.array([0.0, 2.0]))
    assert exc.value.index == 1


@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_fd_gradient_against_analytic(vals):
    x = np.array(vals)
    f = lambda z: float(np.sum(np.sin(z)) + z[0] * z[1] ** 2 + np.exp(0.3 * z[2]))
    g = np.array([np.cos(x[0]) + x[1] ** 2, np.cos(x[1]) + 2 * x[0] * x[1], np.cos(x[2]) + 0.3 * np.exp(0.3 * x[2])])
    assert np.allclose(fd_gradient(f, x, 1e-6), g, rtol=1e-5, atol=1e-5)


def test_fd_jacobian_batched():
    fn = lambda Z: np.stack([Z[:, 0] * Z[:, 1], np.sin(Z[:, 1])], axis=1)
    x = np.array([0.5, -1.0])
    J = fd_jacobian(fn, x)
    assert np.allclose(J, [[x[1], x[0]], [0, np.cos(x[1])]], atol=1e-8)


def test_residual_gradient_matches_fd_gradient(crop):
    """``2 J^T r`` from the shooting Jacobian equals the FD gradient of the cost."""
    win, tr = _crop_window(crop)
    prob = build_shooting_objective(crop, win, CostSpec.full_order(LyapunovCertificate(np.eye(3), 0.48, 1, 1, 1e4, 1e4)))
    x = prob.assemble(tr.states[0] * 1.001, np.full((4, 2), 1e-6), np.full(4, 0.98))
    g_ls = 2 * prob.nlp.jacobian(x).T @ prob.nlp.residuals(x)
    g_fd = fd_gradient(prob.nlp.objective, x, 1e-7)
    assert np.allclose(g_ls, g_fd, rtol=1e-4, atol=1e-6 * np.abs(g_fd).max())


def _crop_window(crop, N=3):
    from uise.crop import crop_unknown_input
    from uise.model import simulate
    tr = simulate(crop, [0.0013, 0.09, 0.09], np.full((N, 1), 25.0), crop_unknown_input(), np.zeros((N + 1, 2)))
    return Window(tr.outputs, tr.controls, np.zeros((N + 1, 2)), tr.states[0]), tr


# --- transcription ---------------------------------------------------------------

def _crop_window_only(crop, N=3):
    return _crop_window(crop, N)[0]


def test_transcription_fidelity_noiseless_truth(crop, crop_reduced):
    win, tr = _crop_window(crop, 5)
    lc = LyapunovCertificate(np.eye(3), 0.48, 1, 1, 1e6, 1e6)
    prior = tr.states[0] + np.array([1e-4, 0, 0])
    win = Window(win.outputs, win.controls, win.v_prior, prior)
    prob = build_shooting_objective(crop, win, CostSpec.full_order(lc, w_box=crop.domain_w))
    dec = prob.assemble(tr.states[0], np.zeros((6, 2)), tr.unknown_inputs)
    expected = 4 * lc.a2 * 0.48**5 * 1e-8
    assert prob.nlp.objective(dec) == pytest.approx(expected, rel=1e-9, abs=1e-12)
    # two-stage: reduced truth, fit terms vanish as well
    ec = ExpIossCertificate(0.48, 2.0, 1e6, 1e6, 1e6)
    t = crop_reduced.transform
    z_prior = t.T_sharp(tr.states[0]) + np.array([1e-4, 0])
    win2 = Window(tr.outputs[:5], tr.controls, np.zeros((5, 2)), z_prior)
    prob2 = build_shooting_objective(crop, win2, CostSpec.two_stage(ec), reduced=crop_reduced)
    dec2 = prob2.assemble(t.T_sharp(tr.states[0]), np.zeros((5, 2)))
    assert prob2.nlp.objective(dec2) == pytest.approx(2 * 2.0 * 0.48**5 * 1e-8, rel=1e-9, abs=1e-12)
    assert np.allclose(prob2.states(dec2), t.T_sharp(tr.states), atol=1e-15)


def test_horizon_zero_window():
    m = scalar_model()
    lc = LyapunovCertificate([[1.0]], 0.5, 1, 1, 1, 1)
    win = Window([[0.4]], np.zeros((0, 1)), [[0.0]], [0.3])
    prob = build_shooting_objective(m, win, CostSpec.fie(lc))
    assert prob.nlp.dim == 3 and set(prob.slices) == {"initial", "v", "w"}


def test_scalar_horizon_two_cost_by_hand():
    """Objective at arbitrary decisions equals the hand-written window cost."""
    m = scalar_model()
    lc = LyapunovCertificate([[1.0]], 0.5, 1, 1, 0.7, 1.3)
    y = np.array([[0.4], [0.35], [0.1]])
    win = Window(y, np.zeros((2, 1)), np.zeros((3, 1)), [0.3])
    prob = build_shooting_objective(m, win, CostSpec.full_order(lc))
    x0, v, w = 0.25, np.array([0.01, -0.02, 0.03]), np.array([0.1, -0.2, 0.05])
    xs = [x0, 0.5 * x0 + w[0], 0.5 * (0.5 * x0 + w[0]) + w[1]]
    mu = 0.5
    cost = mu**2 * 4 * 1.0 * (x0 - 0.3) ** 2
    for i in range(3):
        j = 2 - i
        cost += mu ** (j - 1) * (8 * 0.7 * v[i] ** 2 + 2 * 1.3 * (y[i, 0] - xs[i] - v[i]) ** 2)
    dec = prob.assemble([x0], v, w)
    assert prob.nlp.objective(dec) == pytest.approx(cost, rel=1e-12)


def test_two_stage_dimension(crop, crop_reduced):
    N = 30
    win = Window(np.zeros((N, 2)) + [0.001, 0.18], np.full((N, 1), 25.0), np.zeros((N, 2)), [0.09, 0.1]);
    prob = build_shooting_objective(crop, win, CostSpec.two_stage(ExpIossCertificate(0.48, 2, 1, 1, 1)),
                                    reduced=crop_reduced)
    assert prob.nlp.dim == 2 + N * 2 == 62 and "w" not in prob.slices
    full = build_shooting_objective(crop, Window(np.zeros((N + 1, 2)), np.full((N, 1), 25.0), np.zeros((N + 1, 2)),
                                                 [0.001, 0.09, 0.09]),
                                    CostSpec.full_order(LyapunovCertificate(np.eye(3), 0.48, 1, 1, 1, 1)))
    assert full.nlp.dim == 3 + (N + 1) * 3 > prob.nlp.dim


def test_window_length_errors(crop):
    lc = LyapunovCertificate(np.eye(3), 0.48, 1, 1, 1, 1)
    with pytest.raises(ValueError):
        build_shooting_objective(crop, Window(np.zeros((3, 2)), np.full((3, 1), 25.0), np.zeros((3, 2)),
                                              [0.001, 0.09, 0.09]), CostSpec.full_order(lc))
    with pytest.raises(ValueError):
        build_shooting_objective(crop, Window(np.zeros((2, 2)), np.full((2, 1), 25.0), np.zeros((2, 2)), [0.09, 0.1]),
                                 CostSpec.two_stage(ExpIossCertificate(0.48, 2, 1, 1, 1)))


def test_jacobian_matches_finite_differences(crop, crop_reduced):
    win, tr = _crop_window(crop, 4)
    for cost, reduced, w in (
        (CostSpec.full_order(LyapunovCertificate(np.eye(3), 0.48, 1, 1, 1e4, 1e4), w_box=crop.domain_w), None, True),
        (CostSpec.baseline(0.48, 1, 1e4, 1e4, 1e4, w_box=crop.domain_w), None, True),
    ):
        w_in = win if cost.kind != BASELINE else Window(win.outputs[:4], win.controls, win.v_prior[:4], win.prior)
        prob = build_shooting_objective(crop, w_in, cost, reduced)
        n_w = prob.slices["w"].stop - prob.slices["w"].start
        dec = prob.assemble(tr.states[0] * 1.01, np.full((w_in.outputs.shape[0], 2), 1e-6), np.full(n_w, 0.98))
        J = prob.nlp.jacobian(dec)
        Jfd = fd_jacobian(prob.nlp.residuals, dec, 1e-6, prob.nlp.scaling)
        assert np.allclose(J, Jfd, rtol=1e-4, atol=1e-6 * np.abs(Jfd).max())
    t = crop_reduced.transform
    win2 = Window(tr.outputs[:4], tr.controls, np.zeros((4, 2)), t.T_sharp(tr.states[0]))
    prob = build_shooting_objective(crop, win2, CostSpec.two_stage(ExpIossCertificate(0.48, 2, 1e4, 1e4, 1e4)),
                                    reduced=crop_reduced)
    dec = prob.assemble(t.T_sharp(tr.states[0]) * 1.01, np.full((4, 2), 1e-6))
    J = prob.nlp.jacobian(dec)
    Jfd = fd_jacobian(prob.nlp.residuals, dec, 1e-6, prob.nlp.scaling)
    assert np.allclose(J, Jfd, rtol=1e-4, atol=1e-6 * np.abs(Jfd).max())


@pytest.mark.parametrize("toy", toy_problems(), ids=lambda t: t.name)
def test_toys_match_grid_search(toy):
    sol = solve_box_nlp(toy.nlp, toy.x_init, SolverOptions(tol=1e-10, max_iter=2000))
    arg, best = zoom_grid_minimum(toy.batch_cost, toy.nlp.box.lower, toy.nlp.box.upper)
    assert abs(sol.cost - best) <= 2e-4
    assert np.max(np.abs(sol.argmin - arg)[toy.identifiable]) <= 2e-4
