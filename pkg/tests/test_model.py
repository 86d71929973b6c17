import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uise.crop import (
    DEFAULT_STATE_BOX,
    CropParams,
    crop_model,
    crop_step,
    crop_unknown_input,
    photosynthesis,
    unknown_input_truth,
)
from uise.errors import NumericError
from uise.model import Box, SystemModel, simulate, sample_uniform_noise


def scalar_model(a=0.5):
    return SystemModel(1, 1, 1, 1, 1, lambda x, u, w: a * np.asarray(x) + np.asarray(w),
                       lambda x, v: np.asarray(x) + np.asarray(v), Box([-10], [10]), Box([-1], [1]),
                       Box([-1], [1]), Box([-11], [11]))


# --- independent scalar evaluation of the crop equations, term by term -----

def phi_oracle(u, xc, p):
    phi_u = -p.c_co2_1 * u * u + p.c_co2_2 * u - p.c_co2_3
    num = 100.0 * p.c_rad_phot * (xc - p.c_gamma) * phi_u
    den = 100.0 * p.c_rad_phot + (xc - p.c_gamma) * phi_u
    return num / den


def step_oracle(x, u, w, p):
    xc, d1, d2 = (float(v) for v in x)
    f = math.exp(-p.xi1 * d1) - 1.0
    g1 = d1 * 2.0 ** (0.1 * u - 2.5)
    g2 = d2 * 2.0 ** (0.1 * u - 2.5)
    ph = phi_oracle(u, xc, p)
    xc_n = xc + p.dt * p.a_c1 * (f - w) * ph + p.dt * p.a_c2 * (g1 + g2)
    d1_n = d1 - p.dt * (p.a_d1 * f * ph + p.a_d2 * g1)
    d2_n = d2 + p.dt * (p.a_d3 * ph * w - p.a_d4 * g2)
    return np.array([xc_n, d1_n, d2_n])


def test_box_basics():
    b = Box([0, -1], [1, 1])
    assert np.all(b.contains([[0.5, 0.0], [1.0, 1.0]]))
    assert not b.contains([1.5, 0.0])
    assert np.allclose(b.project([2.0, -3.0]), [1.0, -1.0])
    assert np.allclose(b.violation([2.0, 0.0]), [1.0, 0.0])
    with pytest.raises(ValueError):
        Box([1], [0])


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=2), st.lists(st.floats(-5, 5), min_size=2, max_size=2))
def test_box_projection_nonexpansive(a, b):
    box = Box([-1, 0], [1, 2])
    pa, pb = box.project(np.array(a)), box.project(np.array(b))
    assert np.linalg.norm(pa - pb) <= np.linalg.norm(np.subtract(a, b)) + 1e-12
    assert np.allclose(box.project(pa), pa)


def test_simulate_scalar_linear():
    tr = simulate(scalar_model(), [1.0], np.zeros((2, 1)), np.zeros((3, 1)), np.zeros((3, 1)))
    assert np.allclose(tr.states[:, 0], [1, 0.5, 0.25])
    assert np.allclose(tr.outputs[:, 0], [1, 0.5, 0.25])
    assert tr.controls.shape == (2, 1) and tr.noises.shape == (3, 1)


def test_simulate_zero_length():
    tr = simulate(scalar_model(), [1.0], np.zeros((0, 1)), np.zeros((1, 1)), [[0.2]])
    assert tr.states.shape == (1, 1) and np.allclose(tr.outputs, [[1.2]])


def test_simulate_dimension_errors():
    m = scalar_model()
    with pytest.raises(ValueError):
        simulate(m, [1.0, 2.0], np.zeros((2, 1)), np.zeros((3, 1)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        simulate(m, [1.0], np.zeros((2, 1)), np.zeros((2, 1)), np.zeros((3, 1)))


def test_simulate_nonfinite_reports_step():
    m = SystemModel(1, 1, 1, 1, 1, lambda x, u, w: np.asarray(x) * 1e308, lambda x, v: np.asarray(x) + v,
                    Box([-10], [10]), Box([-1], [1]), Box([-1], [1]), Box([-11], [11]))
    with pytest.raises(NumericError) as exc:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            simulate(m, [2.0], np.zeros((3, 1)), np.zeros((4, 1)), np.zeros((4, 1)), check_domains=False)
    assert exc.value.index is not None


def test_simulate_flags_out_of_domain():
    m = scalar_model(a=3.0)
    with pytest.warns(RuntimeWarning):
        tr = simulate(m, [5.0], np.zeros((2, 1)), np.zeros((3, 1)), np.zeros((3, 1)))
    assert tr.out_of_domain == [1, 2]


def test_replay_determinism(crop):
    v = sample_uniform_noise(crop.domain_v, 51, 3)
    a = simulate(crop, [0.0013, 0.09, 0.09], np.full((50, 1), 25.0), crop_unknown_input(), v)
    b = simulate(crop, [0.0013, 0.09, 0.09], np.full((50, 1), 25.0), crop_unknown_input(), v)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.outputs, b.outputs)


def test_crop_one_step_matches_hand_evaluation(crop):
    p = CropParams()
    x0 = np.array([0.0013, 0.09, 0.09])
    w0 = 1 - math.exp(-45 * 0.09)
    tr = simulate(crop, x0, [[25.0]], crop_unknown_input(), np.zeros((2, 2)))
    assert np.allclose(tr.states[1], step_oracle(x0, 25.0, w0, p), rtol=1e-13, atol=1e-17)
    assert np.allclose(tr.outputs[1], [tr.states[1, 0], tr.states[1, 1] + tr.states[1, 2]])


def test_crop_step_reference_point():
    p = CropParams()
    x = np.array([0.0013, 0.09, 0.09])
    assert np.allclose(crop_step(x, 25.0, 0.983, p), step_oracle(x, 25.0, 0.983, p), rtol=1e-13, atol=1e-17)


@given(st.floats(0, 0.0027), st.floats(0.08, 0.1), st.floats(0.08, 0.1), st.floats(0, 40), st.floats(0.965, 1.0))
def test_crop_step_matches_oracle(xc, d1, d2, u, w):
    p = CropParams()
    got = crop_step(np.array([xc, d1, d2]), u, w, p)
    assert np.allclose(got, step_oracle([xc, d1, d2], u, w, p), rtol=1e-12, atol=1e-18)


def test_crop_step_special_cases():
    p = CropParams()
    # x_d1 = 0 kills the a_d1 term: only the g_1 decay remains (zero here too)
    out = crop_step(np.array([0.001, 0.0, 0.09]), 25.0, 0.99, p)
    assert out[1] == 0.0
    # at 25 degC the temperature multiplier is exactly one
    x = np.array([0.001, 0.09, 0.085])
    out = crop_step(x, 25.0, 0.99, p)
    ph = phi_oracle(25.0, x[0], p)
    f = math.expm1(-p.xi1 * x[1])
    assert out[1] == pytest.approx(x[1] - p.dt * (p.a_d1 * f * ph + p.a_d2 * x[1]), rel=1e-14)


def test_crop_step_batches():
    p = CropParams()
    rng = np.random.default_rng(0)
    x = DEFAULT_STATE_BOX.lower + rng.random((7, 3)) * DEFAULT_STATE_BOX.width
    w = 0.965 + 0.035 * rng.random(7)
    batch = crop_step(x, 25.0, w, p)
    assert np.allclose(batch, [crop_step(xi, 25.0, wi, p) for xi, wi in zip(x, w)], rtol=0, atol=0)


def test_photosynthesis_cases():
    p = CropParams()
    assert photosynthesis(25.0, p.c_gamma, p) == 0.0
    # a temperature root of the CO2 response zeroes the rate
    roots = np.roots([-p.c_co2_1, p.c_co2_2, -p.c_co2_3])
    assert abs(photosynthesis(float(roots.real.min()), 0.001, p)) < 1e-18
    assert photosynthesis(25.0, 0.0013, p) == pytest.approx(phi_oracle(25.0, 0.0013, p), rel=1e-12)


def test_photosynthesis_vanishing_denominator():
    p = CropParams()
    phi_u = -p.c_co2_1 * 625 + p.c_co2_2 * 25 - p.c_co2_3
    xc = p.c_gamma - 100 * p.c_rad_phot / phi_u
    with pytest.raises(NumericError):
        photosynthesis(25.0, xc, p.with_updates())  # same params, explicit copy


def test_unknown_input_truth():
    assert unknown_input_truth(0.0) == 0.0
    assert unknown_input_truth(10.0) == pytest.approx(1.0, abs=1e-12)
    w = unknown_input_truth(0.08)
    assert w == pytest.approx(1 - math.exp(-3.6), rel=1e-15)
    assert 0.965 <= w <= 1.0


def test_uniform_noise():
    assert np.all(sample_uniform_noise(Box([0.0], [0.0]), 5, 1) == 0)
    b = Box.symmetric([3e-6])
    assert np.array_equal(sample_uniform_noise(b, 20, 4), sample_uniform_noise(b, 20, 4))
    v = sample_uniform_noise(b, 10_000, 2024)
    assert np.all(b.contains(v))
    se = 3e-6 / math.sqrt(3) / math.sqrt(v.size)
    assert abs(v.mean()) < 3 * se
    with pytest.raises(ValueError):
        sample_uniform_noise(b, -1, 0)


def test_crop_domain_propagation(crop):
    """Long run stays inside a 5 % inflation of the state box."""
    rng = np.random.default_rng(5)
    K = 2000
    w = 0.965 + 0.035 * rng.random((K + 1, 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tr = simulate(crop, [0.0013, 0.09, 0.09], np.full((K, 1), 25.0), w, np.zeros((K + 1, 2)))
    assert np.all(DEFAULT_STATE_BOX.inflate(0.05).contains(tr.states))


def test_x_d1_update_ignores_w():
    p = CropParams()
    rng = np.random.default_rng(9)
    x = DEFAULT_STATE_BOX.lower + rng.random((100, 3)) * DEFAULT_STATE_BOX.width
    w = 0.965 + 0.035 * rng.random(100)
    h = 1e-6
    d = (crop_step(x, 25.0, w + h, p)[:, 1] - crop_step(x, 25.0, w - h, p)[:, 1]) / (2 * h)
    assert np.max(np.abs(d)) == 0.0


def test_crop_model_domains(crop):
    assert crop.n_x == 3 and crop.n_y == 2 and crop.w_bounded
    assert np.allclose(crop.domain_v.upper, 3e-6)
    # outputs of the state box stay in the output box
    assert np.all(crop.domain_y.contains(crop.h(DEFAULT_STATE_BOX.upper, crop.domain_v.upper)))
