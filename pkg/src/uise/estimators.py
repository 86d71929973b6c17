"""Optimization-based state estimators.

Four schemes share one driver:

* ``fie``        full information estimation over the whole history;
* ``full_order`` moving-horizon unknown-input estimator on the full model,
  using the current measurement;
* ``two_stage``  moving-horizon estimation on the unknown-input-free reduced
  model followed by algebraic recovery of the full state;
* ``baseline``   a standard discounted one-step-ahead MHE that treats the
  unknown input as a penalised disturbance.

An :class:`EstimatorState` is fed one measurement at a time through
:func:`estimator_step` (or the scheme-specific ``*_step`` functions).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .model import Box, SystemModel
from .shooting import BASELINE, FIE, FULL_ORDER, TWO_STAGE, CostSpec, Window, build_shooting_objective
from .solver import CONVERGED, Solution, SolverOptions, solve_box_nlp
from .transform import ReducedModel, project_estimate, recover_full_state

SCHEMES = (FIE, FULL_ORDER, TWO_STAGE, BASELINE)


@dataclass
class EstimatorConfig:
    """Settings of one estimator instance.

    ``v_prior`` is a constant noise guess (one row) or a callable ``k -> v_bar_k``.
    ``w_init`` seeds the unknown-input guesses of a fresh window tail (defaults
    to the centre of ``cost.w_box`` or zero).
    """

    scheme: str
    horizon: int
    x0_prior: np.ndarray
    cost: CostSpec
    v_prior: Union[np.ndarray, Callable, None] = None
    solver: SolverOptions = field(default_factory=SolverOptions)
    project: bool = True
    w_init: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme != FIE and self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        self.x0_prior = np.asarray(self.x0_prior, dtype=float).reshape(-1)
        expected = {FIE: FIE, FULL_ORDER: FULL_ORDER, TWO_STAGE: TWO_STAGE, BASELINE: BASELINE}[self.scheme]
        if self.cost.kind != expected:
            raise ValueError(f"scheme {self.scheme!r} needs a {expected!r} cost, got {self.cost.kind!r}")
        if not self.name:
            self.name = self.scheme


@dataclass
class Estimate:
    k: int
    x_hat: np.ndarray
    cost: float
    status: str
    wall_time: float
    iterations: int = 0
    auxiliary: dict = field(default_factory=dict)


@dataclass
class EstimatorState:
    """Rolling data of one estimator.

    ``outputs``/``controls``/``v_priors`` hold the full history (``controls[j]``
    is ``u_j``).  ``priors[t]`` is the stored estimate used as the prior anchor
    when ``t`` becomes the first time of a window: the full state for the
    full-order, FIE and baseline schemes, ``z_sharp`` for the two-stage scheme.
    ``previous`` keeps the last window solution (per absolute time) for warm
    starts.
    """

    model: SystemModel
    config: EstimatorConfig
    reduced: Optional[ReducedModel] = None
    k: int = -1
    outputs: list = field(default_factory=list)
    controls: list = field(default_factory=list)
    v_priors: list = field(default_factory=list)
    priors: dict = field(default_factory=dict)
    previous: dict = field(default_factory=dict)

    def __post_init__(self):
        cfg, model = self.config, self.model
        if cfg.x0_prior.size != model.n_x:
            raise ValueError(f"x0_prior has {cfg.x0_prior.size} entries, expected {model.n_x}")
        if not model.domain_x.contains(cfg.x0_prior, atol=1e-12):
            raise ValueError("x0_prior lies outside domain_x")
        if cfg.scheme == TWO_STAGE:
            if self.reduced is None:
                raise ValueError("the two-stage scheme needs a reduced model")
            self.priors[0] = self.reduced.transform.T_sharp(cfg.x0_prior)
        else:
            self.priors[0] = cfg.x0_prior.copy()

    @property
    def window_start(self) -> int:
        if self.config.scheme == FIE:
            return 0
        return max(0, self.k - self.config.horizon)

    def v_bar(self, k: int) -> np.ndarray:
        vp = self.config.v_prior
        if vp is None:
            v = np.zeros(self.model.n_v)
        elif callable(vp):
            v = np.asarray(vp(k), dtype=float).reshape(self.model.n_v)
        else:
            v = np.asarray(vp, dtype=float).reshape(self.model.n_v)
        return v


def make_estimator(model: SystemModel, config: EstimatorConfig, reduced: Optional[ReducedModel] = None) -> EstimatorState:
    return EstimatorState(model, config, reduced)


def _push(st: EstimatorState, y_k, u_prev) -> None:
    st.k += 1
    y_k = np.asarray(y_k, dtype=float).reshape(st.model.n_y)
    if st.k > 0:
        if u_prev is None:
            raise ValueError("u_prev is required after the first step")
        st.controls.append(np.asarray(u_prev, dtype=float).reshape(st.model.n_u))
    v = st.v_bar(st.k)
    if not st.model.domain_v.contains(v, atol=1e-15):
        raise ValueError(f"noise prior at k={st.k} lies outside domain_v")
    st.outputs.append(y_k)
    st.v_priors.append(v)
    # the windows never look further back than the horizon
    if st.config.scheme != FIE:
        drop = st.k - st.config.horizon - 1
        if drop in st.priors and drop > 0:
            del st.priors[drop]


def _w_default(st: EstimatorState) -> np.ndarray:
    cfg = st.config
    if cfg.w_init is not None:
        return np.asarray(cfg.w_init, dtype=float).reshape(st.model.n_w)
    box = cfg.cost.w_box
    if box is not None:
        return box.center
    return np.zeros(st.model.n_w)


def _window(st: EstimatorState, t0: int, fit_end: int) -> Window:
    """Window over times ``t0..k`` with fits at ``t0..fit_end``."""
    ys = np.array(st.outputs[t0:fit_end + 1])
    vs = np.array(st.v_priors[t0:fit_end + 1])
    us = np.array(st.controls[t0:st.k]).reshape(st.k - t0, st.model.n_u)
    return Window(ys, us, vs, st.priors[t0])


def _initial_guess(st: EstimatorState, prob, t0: int, n_fit: int, initial_fallback) -> np.ndarray:
    prev = st.previous
    n_trans = st.k - t0
    initial = prev.get("states", {}).get(t0, initial_fallback)
    v = np.array([prev.get("v", {}).get(t0 + i, st.v_priors[t0 + i]) for i in range(n_fit)])
    if "w" not in prob.slices:
        return prob.assemble(initial, v)
    n_w = prob.slices["w"].stop - prob.slices["w"].start
    steps = n_w // st.model.n_w
    w_prev = prev.get("w", {})
    last = w_prev[max(w_prev)] if w_prev else _w_default(st)
    w = np.array([w_prev.get(t0 + i, last) for i in range(steps)])
    return prob.assemble(initial, v, w)


def _remember(st: EstimatorState, prob, sol: Solution, t0: int) -> dict:
    parts = prob.unpack(sol.argmin)
    states = prob.states(sol.argmin)
    n_v = st.model.n_v
    v = parts["v"].reshape(-1, n_v)
    memo = {"states": {t0 + i: states[i] for i in range(states.shape[0])},
            "v": {t0 + i: v[i] for i in range(v.shape[0])}}
    aux = {"v_hat": v, "window_states": states}
    if "w" in parts:
        w = parts["w"].reshape(-1, st.model.n_w)
        memo["w"] = {t0 + i: w[i] for i in range(w.shape[0])}
        aux["w_hat"] = w
    st.previous = memo
    return aux


def _solve_window(st: EstimatorState, t0: int, fit_end: int, reduced=None, fallback=None):
    win = _window(st, t0, fit_end)
    prob = build_shooting_objective(st.model, win, st.config.cost, reduced=reduced)
    n_fit = win.outputs.shape[0]
    x_init = _initial_guess(st, prob, t0, n_fit, st.priors[t0] if fallback is None else fallback)
    sol = solve_box_nlp(prob.nlp, x_init, st.config.solver)
    aux = _remember(st, prob, sol, t0)
    return prob, sol, aux


def _full_step(st: EstimatorState, y_k, u_prev, scheme: str) -> Estimate:
    if st.config.scheme != scheme:
        raise ValueError(f"estimator is configured for {st.config.scheme!r}, not {scheme!r}")
    start = time.perf_counter()
    _push(st, y_k, u_prev)
    k = st.k
    t0 = st.window_start
    prob, sol, aux = _solve_window(st, t0, k)
    x_hat = aux["window_states"][-1].copy()
    if k > 0:
        st.priors[k] = x_hat.copy()
    wall = time.perf_counter() - start
    return Estimate(k, x_hat, sol.cost, sol.status, wall, sol.iterations, aux)


def fie_step(st: EstimatorState, y_k, u_prev=None) -> Estimate:
    """Full information estimate of ``x_k`` from all measurements up to ``k``."""
    return _full_step(st, y_k, u_prev, FIE)


def mhe_full_step(st: EstimatorState, y_k, u_prev=None) -> Estimate:
    """Full-order moving-horizon estimate of ``x_k`` (window includes ``y_k``)."""
    return _full_step(st, y_k, u_prev, FULL_ORDER)


def two_stage_step(st: EstimatorState, y_k, u_prev=None) -> Estimate:
    """Reduced-order window estimate of ``z_sharp_k`` followed by recovery of
    the full state from ``y_k`` and the noise prior."""
    if st.config.scheme != TWO_STAGE:
        raise ValueError(f"estimator is configured for {st.config.scheme!r}, not {TWO_STAGE!r}")
    start = time.perf_counter()
    _push(st, y_k, u_prev)
    k = st.k
    t = st.reduced.transform
    if k == 0:
        z_hat = st.priors[0].copy()
        cost, status, iters, aux = 0.0, CONVERGED, 0, {}
    else:
        t0 = st.window_start
        prob, sol, aux = _solve_window(st, t0, k - 1, reduced=st.reduced)
        z_hat = aux["window_states"][-1].copy()
        st.priors[k] = z_hat.copy()
        cost, status, iters = sol.cost, sol.status, sol.iterations
    v_bar = st.v_priors[k]
    x_rec = recover_full_state(t, st.outputs[k], z_hat, v_bar)
    x_hat = project_estimate(t, t.T(x_rec)) if st.config.project else x_rec
    aux["z_sharp"] = z_hat
    aux["x_unprojected"] = x_rec
    wall = time.perf_counter() - start
    return Estimate(k, x_hat, cost, status, wall, iters, aux)


def standard_mhe_step(st: EstimatorState, y_k, u_prev=None) -> Estimate:
    """Baseline one-step-ahead MHE: fit ``y_{k-N}..y_{k-1}``, propagate to ``k``.

    ``y_k`` is stored for the next window but does not enter this estimate.
    """
    if st.config.scheme != BASELINE:
        raise ValueError(f"estimator is configured for {st.config.scheme!r}, not {BASELINE!r}")
    start = time.perf_counter()
    _push(st, y_k, u_prev)
    k = st.k
    if k == 0:
        x_hat = st.priors[0].copy()
        est = Estimate(0, x_hat, 0.0, CONVERGED, time.perf_counter() - start)
        return est
    t0 = st.window_start
    prob, sol, aux = _solve_window(st, t0, k - 1)
    x_hat = aux["window_states"][-1].copy()
    st.priors[k] = x_hat.copy()
    wall = time.perf_counter() - start
    return Estimate(k, x_hat, sol.cost, sol.status, wall, sol.iterations, aux)


_STEPS = {FIE: fie_step, FULL_ORDER: mhe_full_step, TWO_STAGE: two_stage_step, BASELINE: standard_mhe_step}


def estimator_step(st: EstimatorState, y_k, u_prev=None) -> Estimate:
    return _STEPS[st.config.scheme](st, y_k, u_prev)


def run_estimator(st: EstimatorState, outputs, controls) -> list[Estimate]:
    """Feed a whole measurement record (``outputs`` K+1 rows, ``controls`` K rows)."""
    outputs = np.asarray(outputs, dtype=float)
    controls = np.asarray(controls, dtype=float).reshape(-1, st.model.n_u)
    result = []
    for k in range(outputs.shape[0]):
        result.append(estimator_step(st, outputs[k], controls[k - 1] if k > 0 else None))
    return result
