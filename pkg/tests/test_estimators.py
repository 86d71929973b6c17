import numpy as np
import pytest
from scipy.optimize import lsq_linear
from hypothesis import given, settings
from hypothesis import strategies as st

from linear_cfg import linear_config
from uise.estimators import (
    EstimatorConfig,
    _window,
    fie_step,
    make_estimator,
    mhe_full_step,
    run_estimator,
    standard_mhe_step,
    two_stage_step,
)
from uise.experiment import ExperimentConfig, build_setup, estimator_config, simulate_truth
from uise.model import simulate
from uise.shooting import CostSpec, build_shooting_objective
from uise.detectability import LyapunovCertificate
from uise.solver import SolverOptions


def _linear(noise="noiseless", steps=25, **extra):
    cfg = linear_config(**extra)
    exp = ExperimentConfig.from_config(cfg, noise=noise, steps=steps)
    setup = build_setup(cfg, steps)
    return cfg, setup, simulate_truth(exp, setup)


def _est(cfg, setup, name, x0=None):
    x0 = setup.x0 if x0 is None else x0
    return make_estimator(setup.model, estimator_config(cfg, name, setup, x0), setup.reduced)


# --- validation -------------------------------------------------------------------

def test_config_validation():
    cert = LyapunovCertificate(np.eye(3), 0.5, 1, 1, 1, 1)
    with pytest.raises(ValueError):
        EstimatorConfig("nope", 3, np.zeros(3), CostSpec.full_order(cert))
    with pytest.raises(ValueError):
        EstimatorConfig("two_stage", 3, np.zeros(3), CostSpec.full_order(cert))
    with pytest.raises(ValueError):
        EstimatorConfig("full_order", 0, np.zeros(3), CostSpec.full_order(cert))


def test_prior_outside_domain_and_scheme_mismatch():
    cfg, setup, tr = _linear()
    with pytest.raises(ValueError):
        _est(cfg, setup, "full_order", x0=np.array([5.0, 0, 0]))
    st_ = _est(cfg, setup, "full_order")
    with pytest.raises(ValueError):
        two_stage_step(st_, tr.outputs[0])
    st_ = _est(cfg, setup, "baseline")
    standard_mhe_step(st_, tr.outputs[0])
    with pytest.raises(ValueError):
        standard_mhe_step(st_, tr.outputs[1])  # u_prev missing after k = 0


# --- k = 0 --------------------------------------------------------------------------

def test_first_step_values():
    cfg, setup, tr = _linear()
    prior = cfg.get_vector("prior.x0")
    base = standard_mhe_step(_est(cfg, setup, "baseline", prior), tr.outputs[0])
    assert np.array_equal(base.x_hat, prior) and base.k == 0
    two = two_stage_step(_est(cfg, setup, "two_stage", prior), tr.outputs[0])
    t = setup.transform
    expected = t.inverse(t.psi(tr.outputs[0], t.T_sharp(prior), np.zeros(2)), t.T_sharp(prior))
    assert np.allclose(two.x_hat, expected, atol=1e-12)
    # the output component along the unknown-input direction comes from y_0
    assert two.x_hat[1] == pytest.approx(tr.outputs[0][1], abs=1e-12)
    full = mhe_full_step(_est(cfg, setup, "full_order", prior), tr.outputs[0])
    # oracle: the k = 0 window is a bounded linear least-squares problem in (x_0, v_0)
    c = _est(cfg, setup, "full_order", prior).config.cost
    pw, nw, ow, _ = c.stage_weights(0)
    C = cfg.get_matrix("linear.C")
    A = np.block([[np.sqrt(pw) * np.eye(3), np.zeros((3, 2))],
                  [np.zeros((2, 3)), np.sqrt(nw[0]) * np.eye(2)],
                  [-np.sqrt(ow[0]) * C, -np.sqrt(ow[0]) * np.eye(2)]])
    b = np.concatenate([np.sqrt(pw) * prior, np.zeros(2), -np.sqrt(ow[0]) * tr.outputs[0]])
    vb = setup.model.domain_v
    ref = lsq_linear(A, b, bounds=(np.r_[setup.model.domain_x.lower, vb.lower], np.r_[setup.model.domain_x.upper, vb.upper]),
                     tol=1e-14)
    assert full.k == 0 and np.allclose(full.x_hat, ref.x[:3], atol=1e-8)
    assert full.cost == pytest.approx(2 * ref.cost, rel=1e-6)


# --- exactness and optimality ---------------------------------------------------------

@pytest.mark.parametrize("name", ["full_order", "two_stage", "fie"])
def test_exact_prior_noiseless_reproduces_truth(name):
    """Zero cost at the truth: with an exact prior the estimates equal the states."""
    cfg, setup, tr = _linear()
    est = run_estimator(_est(cfg, setup, name, setup.x0), tr.outputs, tr.controls)
    xh = np.array([e.x_hat for e in est])
    assert np.max(np.abs(xh - tr.states)) < 1e-6
    assert max(e.cost for e in est) < 1e-10


def test_baseline_is_biased_on_drifting_input():
    cfg, setup, tr = _linear()
    est = run_estimator(_est(cfg, setup, "baseline", setup.x0), tr.outputs, tr.controls)
    xh = np.array([e.x_hat for e in est])
    assert np.max(np.abs(xh - tr.states)[-5:]) > 1e-3


@pytest.mark.parametrize("name", ["full_order", "two_stage"])
def test_estimates_converge_from_wrong_prior(name):
    cfg, setup, tr = _linear(steps=40)
    est = run_estimator(_est(cfg, setup, name, cfg.get_vector("prior.x0")), tr.outputs, tr.controls)
    err = np.linalg.norm(np.array([e.x_hat for e in est]) - tr.states, axis=1)
    assert err[-1] < 1e-5 < err[0]


@pytest.mark.parametrize("name", ["full_order", "baseline"])
def test_window_cost_below_truth_cost(name):
    """Optimality certificate: the optimised cost never exceeds the cost of the
    true trajectory in the same window."""
    cfg, setup, tr = _linear(noise="noisy")
    st_ = _est(cfg, setup, name, cfg.get_vector("prior.x0"))
    for k in range(12):
        e = mhe_full_step(st_, tr.outputs[k], tr.controls[k - 1] if k else None) if name == "full_order" else \
            standard_mhe_step(st_, tr.outputs[k], tr.controls[k - 1] if k else None)
        if k == 0:
            continue
        t0 = st_.window_start
        fit_end = k if name == "full_order" else k - 1
        prob = build_shooting_objective(setup.model, _window(st_, t0, fit_end), st_.config.cost)
        n_w = (prob.slices["w"].stop - prob.slices["w"].start)
        truth = prob.assemble(tr.states[t0], tr.noises[t0:fit_end + 1], tr.unknown_inputs[t0:t0 + n_w])
        assert e.cost <= prob.nlp.objective(truth) * (1 + 1e-9) + 1e-14


# --- causality -------------------------------------------------------------------------

@settings(max_examples=5)
@given(st.integers(3, 12), st.floats(-0.5, 0.5))
def test_causality(cut, delta):
    """Changing measurements after time ``cut`` leaves earlier estimates untouched."""
    cfg, setup, tr = _linear(steps=14)
    y2 = tr.outputs.copy()
    y2[cut + 1:] += delta
    for name in ("full_order", "two_stage", "baseline"):
        a = run_estimator(_est(cfg, setup, name, cfg.get_vector("prior.x0")), tr.outputs, tr.controls)
        b = run_estimator(_est(cfg, setup, name, cfg.get_vector("prior.x0")), y2, tr.controls)
        for k in range(cut + 1):
            assert np.array_equal(a[k].x_hat, b[k].x_hat)
        # the baseline ignores y_k at time k as well
        if name == "baseline":
            assert np.array_equal(a[cut + 1].x_hat, b[cut + 1].x_hat)


def test_priors_are_bounded_by_horizon():
    cfg, setup, tr = _linear(steps=20)
    st_ = _est(cfg, setup, "full_order")
    run_estimator(st_, tr.outputs, tr.controls)
    assert len(st_.priors) <= st_.config.horizon + 3
    fie = _est(cfg, setup, "fie")
    run_estimator(fie, tr.outputs[:8], tr.controls[:7])
    assert fie.window_start == 0 and len(fie.outputs) == 8


def test_crop_two_stage_window_dimension(crop, crop_reduced):
    from uise.experiment import default_config
    cfg = default_config()
    setup = build_setup(cfg, 32)
    tr = simulate(setup.model, setup.x0, setup.controls, setup.unknown_input, np.zeros((33, 2)))
    st_ = _est(cfg, setup, "two_stage")
    st_.config.solver = SolverOptions(max_iter=2)
    run_estimator(st_, tr.outputs, tr.controls)
    assert st_.previous["v"].__len__() == 30
    assert len(st_.previous["states"]) == 31
