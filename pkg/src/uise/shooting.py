"""Single-shooting transcription of estimation windows.

The window dynamics are eliminated by forward simulation, so the only
constraints left are boxes on the decision variables.  State and output
domain constraints along the window become quadratic penalties.

Window layout (``N`` = number of transitions in the window, ``t0 = k - N``):

* ``full_order`` / ``fie``: decision ``(x_t0, v_t0..v_k, w_t0..w_k)``; the fit
  uses ``y_t0..y_k``.  The last unknown input never enters the dynamics but is
  kept so every window time carries a full tuple.
* ``two_stage``: decision ``(z_t0, v_t0..v_{k-1})`` for the reduced model,
  driven by ``gamma_j = y_j`` for ``j < k``.
* ``baseline``: decision ``(x_t0, w_t0..w_{k-1}, v_t0..v_{k-1})``; the fit uses
  ``y_t0..y_{k-1}`` and the estimate is propagated to time ``k``.

Residual Jacobians are assembled by the chain rule from finite-difference
partials of the one-step maps, which are evaluated for all window times in a
single batched call.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import Box, SystemModel
from .solver import NlpProblem

FULL_ORDER = "full_order"
FIE = "fie"
TWO_STAGE = "two_stage"
BASELINE = "baseline"
KINDS = (FULL_ORDER, FIE, TWO_STAGE, BASELINE)

# relative step of the one-step partial derivatives
PARTIAL_STEP = 1e-6


@dataclass(frozen=True)
class CostSpec:
    """Coefficients of one of the four window costs (all terms squared norms).

    ``prior``, ``noise`` and ``output`` multiply ``||.||^2`` of the prior
    mismatch, the noise deviation from its prior and the output residual;
    ``unknown_input`` is the baseline's penalty on ``w``.  The decay factors
    follow the scheme given by ``kind``.  Domain penalties get the weight
    ``penalty_factor`` times the largest stage weight of the window.
    """

    kind: str
    mu: float
    prior: float
    noise: float
    output: float
    unknown_input: float = 0.0
    penalty_factor: float = 1e6
    w_box: Optional[Box] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if not 0.0 < self.mu < 1.0:
            raise ValueError("mu must lie in (0, 1)")
        if min(self.prior, self.noise, self.output, self.unknown_input) < 0 or self.penalty_factor < 0:
            raise ValueError("cost coefficients must be nonnegative")

    @classmethod
    def full_order(cls, cert, w_box: Optional[Box] = None, penalty_factor: float = 1e6, kind: str = FULL_ORDER):
        """Scaled-square certificate terms: ``alpha2(2r) = 4 a2 r^2`` on the
        prior, ``2 sigma_v(2r) = 8 s_v r^2`` on noises, ``2 sigma_y(r) = 2 s_y r^2``
        on outputs."""
        return cls(kind, cert.mu, 4.0 * cert.a2, 8.0 * cert.s_v, 2.0 * cert.s_y, 0.0, penalty_factor, w_box)

    @classmethod
    def fie(cls, cert, w_box: Optional[Box] = None, penalty_factor: float = 1e6):
        return cls.full_order(cert, w_box, penalty_factor, kind=FIE)

    @classmethod
    def two_stage(cls, cert, penalty_factor: float = 1e6):
        return cls(TWO_STAGE, cert.mu, 2.0 * cert.c_x, 2.0 * cert.c_v, cert.c_y, 0.0, penalty_factor)

    @classmethod
    def baseline(cls, mu, p1, q_w, q_v, q_y, w_box: Optional[Box] = None, penalty_factor: float = 1e6):
        return cls(BASELINE, mu, p1, q_v, q_y, q_w, penalty_factor, w_box)

    def stage_weights(self, N: int):
        """Prior weight and per-window-index stage weights (oldest first)."""
        prior = self.prior * self.mu**N
        if self.kind in (FULL_ORDER, FIE):
            j = N - np.arange(N + 1)
            decay = self.mu ** (j - 1.0)
        else:
            j = N - np.arange(N)
            decay = self.mu ** j.astype(float)
        return prior, self.noise * decay, self.output * decay, self.unknown_input * decay


@dataclass
class Window:
    """Measurements, controls, noise priors and the prior anchor of one window."""

    outputs: np.ndarray
    controls: np.ndarray
    v_prior: np.ndarray
    prior: np.ndarray

    def __post_init__(self):
        self.outputs = np.atleast_2d(np.asarray(self.outputs, dtype=float))
        self.controls = np.asarray(self.controls, dtype=float)
        if self.controls.ndim == 1:
            self.controls = self.controls.reshape(-1, 1) if self.controls.size else self.controls.reshape(0, 1)
        self.v_prior = np.atleast_2d(np.asarray(self.v_prior, dtype=float))
        self.prior = np.asarray(self.prior, dtype=float).reshape(-1)

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]


def _width(box: Box) -> np.ndarray:
    w = box.width
    return np.where(np.isfinite(w) & (w > 0), w, 1.0)


class _Shooter:
    """Residuals and Jacobian of a generic shooting window.

    States ``s_0..s_N`` follow ``s_{i+1} = F(s_i, i, p_i)`` from the decision
    block ``s_0``; fits at ``i < n_fit`` compare ``H(s_i, i, q_i)`` with the
    measurement.  ``F``, ``H`` and ``lift`` accept either an integer step
    index with batched arguments or ``slice(None)`` with a step axis in
    position -2.
    """

    def __init__(self, dim, n_s, N, n_fit, init_idx, p_idx, q_idx, v_idx, F, H, y_meas, anchor, v_bar,
                 prior_w, noise_w, out_w, s_scale, p_scale, q_scale, state_box=None, state_pen_steps=(),
                 y_box=None, lift=None, x_box=None, w_pen=None, pen=0.0):
        self.dim, self.n_s, self.N, self.n_fit = dim, n_s, N, n_fit
        self.init_idx, self.p_idx, self.q_idx, self.v_idx = init_idx, p_idx, q_idx, v_idx
        self.F, self.H, self.lift = F, H, lift
        self.y_meas, self.anchor, self.v_bar = y_meas, anchor, v_bar
        self.sp, self.sn, self.so = np.sqrt(prior_w), np.sqrt(noise_w), np.sqrt(out_w)
        self.s_scale, self.p_scale, self.q_scale = s_scale, p_scale, q_scale
        self.state_box, self.state_pen_steps = state_box, np.asarray(state_pen_steps, dtype=int)
        self.y_box, self.x_box = y_box, x_box
        self.w_pen = w_pen  # (indices (N, n_w), sqrt weights (N,)) for the baseline
        self.spen = np.sqrt(pen)
        self._recent = []

    # -- evaluation ---------------------------------------------------------

    def rollout(self, dec):
        dec = np.atleast_2d(dec)
        # single points are re-rolled often (residuals, Jacobian, final states)
        key = dec.tobytes() if dec.shape[0] == 1 else None
        if key is not None:
            for k, S in self._recent:
                if k == key:
                    return S
        s = [dec[:, self.init_idx]]
        for i in range(self.N):
            s.append(self.F(s[-1], i, dec[:, self.p_idx[i]]))
        S = np.stack(s, axis=1)
        if key is not None:
            S.flags.writeable = False
            # two entries: the solver's last trial point may be a rejected one
            self._recent = [(key, S)] + self._recent[:1]
        return S

    def residuals(self, dec):
        dec = np.asarray(dec, dtype=float)
        single = dec.ndim == 1
        dec = np.atleast_2d(dec)
        B = dec.shape[0]
        S = self.rollout(dec)
        Sf = S[:, : self.n_fit]
        Q = dec[:, self.q_idx]
        Y = self.H(Sf, slice(None), Q)
        V = dec[:, self.v_idx]
        parts = [self.sp * (dec[:, self.init_idx] - self.anchor),
                 (self.sn[None, :, None] * (V - self.v_bar)).reshape(B, -1),
                 (self.so[None, :, None] * (self.y_meas - Y)).reshape(B, -1)]
        if self.w_pen is not None:
            idx, sw = self.w_pen
            parts.append((sw[None, :, None] * dec[:, idx]).reshape(B, -1))
        if self.spen > 0:
            if self.state_pen_steps.size:
                Sp = S[:, self.state_pen_steps]
                parts.append((self.spen * self.state_box.violation(Sp) / _width(self.state_box)).reshape(B, -1))
            if self.lift is not None:
                X = self.lift(Sf, slice(None), Q)
                parts.append((self.spen * self.x_box.violation(X) / _width(self.x_box)).reshape(B, -1))
            parts.append((self.spen * self.y_box.violation(Y) / _width(self.y_box)).reshape(B, -1))
        r = np.concatenate(parts, axis=1)
        return r[0] if single else r

    # -- derivatives ----------------------------------------------------------

    @staticmethod
    def _partials(fn, S, P, hs, hp):
        """Central-difference partials of ``fn(S_i, i, P_i)`` for all steps at once.

        ``S``: (T, n_s), ``P``: (T, n_p).  Returns value (T, n_out) and
        Jacobians (T, n_out, n_s), (T, n_out, n_p).
        """
        T, n_s = S.shape
        n_p = P.shape[1]
        m = n_s + n_p
        Sb = np.broadcast_to(S, (2 * m + 1, T, n_s)).copy()
        Pb = np.broadcast_to(P, (2 * m + 1, T, n_p)).copy()
        for a in range(n_s):
            Sb[1 + a, :, a] += hs[:, a]
            Sb[1 + m + a, :, a] -= hs[:, a]
        for b in range(n_p):
            Pb[1 + n_s + b, :, b] += hp[:, b]
            Pb[1 + m + n_s + b, :, b] -= hp[:, b]
        vals = fn(Sb, slice(None), Pb)
        base = vals[0]
        steps = np.concatenate([hs, hp], axis=1)  # (T, m)
        D = (vals[1:m + 1] - vals[m + 1:]) / (2.0 * steps.T[:, :, None])  # (m, T, n_out)
        D = np.transpose(D, (1, 2, 0))
        return base, D[:, :, :n_s], D[:, :, n_s:]

    def _steps(self, values, scale):
        return PARTIAL_STEP * np.maximum(np.abs(values), scale)

    def jacobian(self, dec):
        dec = np.asarray(dec, dtype=float)
        N, n_s, dim, n_fit = self.N, self.n_s, self.dim, self.n_fit
        S = self.rollout(dec)[0]
        # sensitivities of every window state w.r.t. the decision vector
        sens = np.zeros((N + 1, n_s, dim))
        sens[0][:, self.init_idx] = np.eye(n_s)
        if N:
            P = dec[self.p_idx]
            _, A, G = self._partials(self.F, S[:N], P, self._steps(S[:N], self.s_scale), self._steps(P, self.p_scale))
            for i in range(N):
                sens[i + 1] = A[i] @ sens[i]
                sens[i + 1][:, self.p_idx[i]] += G[i]
        Sf = S[:n_fit]
        Q = dec[self.q_idx]
        hs, hq = self._steps(Sf, self.s_scale), self._steps(Q, self.q_scale)
        Y, Hs, Hq = self._partials(self.H, Sf, Q, hs, hq)
        dY = np.einsum("tos,tsd->tod", Hs, sens[:n_fit])
        for i in range(n_fit):
            dY[i][:, self.q_idx[i]] += Hq[i]
        blocks = []
        Jp = np.zeros((n_s, dim))
        Jp[:, self.init_idx] = self.sp * np.eye(n_s)
        blocks.append(Jp)
        n_v = self.v_idx.shape[1]
        Jn = np.zeros((n_fit * n_v, dim))
        rows = np.arange(n_fit * n_v)
        Jn[rows, self.v_idx.reshape(-1)] = np.repeat(self.sn, n_v)
        blocks.append(Jn)
        blocks.append((-self.so[:, None, None] * dY).reshape(-1, dim))
        if self.w_pen is not None:
            idx, sw = self.w_pen
            Jw = np.zeros((idx.size, dim))
            Jw[np.arange(idx.size), idx.reshape(-1)] = np.repeat(sw, idx.shape[1])
            blocks.append(Jw)
        if self.spen > 0:
            if self.state_pen_steps.size:
                Sp = S[self.state_pen_steps]
                act = (self.state_box.violation(Sp) != 0) * (self.spen / _width(self.state_box))
                blocks.append((act[:, :, None] * sens[self.state_pen_steps]).reshape(-1, dim))
            if self.lift is not None:
                X, Ls, Lq = self._partials(self.lift, Sf, Q, hs, hq)
                dX = np.einsum("tos,tsd->tod", Ls, sens[:n_fit])
                for i in range(n_fit):
                    dX[i][:, self.q_idx[i]] += Lq[i]
                act = (self.x_box.violation(X) != 0) * (self.spen / _width(self.x_box))
                blocks.append((act[:, :, None] * dX).reshape(-1, dim))
            act = (self.y_box.violation(Y) != 0) * (self.spen / _width(self.y_box))
            blocks.append((act[:, :, None] * dY).reshape(-1, dim))
        return np.concatenate(blocks, axis=0)


@dataclass
class ShootingProblem:
    """Transcribed window: the NLP plus helpers to map decisions to trajectories."""

    nlp: NlpProblem
    kind: str
    horizon: int
    slices: dict
    core: _Shooter = field(repr=False)

    def unpack(self, dec):
        dec = np.asarray(dec, dtype=float)
        return {k: dec[..., s] for k, s in self.slices.items()}

    def states(self, dec) -> np.ndarray:
        """Window states (``horizon + 1`` rows) generated by a decision vector."""
        return self.core.rollout(np.asarray(dec, dtype=float))[0]

    def assemble(self, initial, v, w=None) -> np.ndarray:
        parts = {"initial": np.ravel(initial), "v": np.ravel(v)}
        if "w" in self.slices:
            parts["w"] = np.ravel(w)
        dec = np.empty(self.nlp.dim)
        for k, s in self.slices.items():
            dec[s] = parts[k]
        return dec


def _check_lengths(kind, win: Window, n_y, n_v, n_u, n_prior):
    N = win.horizon
    n_fit = N + 1 if kind in (FULL_ORDER, FIE) else N
    if kind in (TWO_STAGE, BASELINE) and N < 1:
        raise ValueError(f"{kind} windows need at least one transition")
    if win.outputs.shape != (n_fit, n_y):
        raise ValueError(f"window outputs have shape {win.outputs.shape}, expected {(n_fit, n_y)}")
    if win.v_prior.shape != (n_fit, n_v):
        raise ValueError(f"window noise priors have shape {win.v_prior.shape}, expected {(n_fit, n_v)}")
    if win.controls.shape != (N, n_u):
        raise ValueError(f"window controls have shape {win.controls.shape}, expected {(N, n_u)}")
    if win.prior.size != n_prior:
        raise ValueError(f"window prior has {win.prior.size} entries, expected {n_prior}")
    return N, n_fit


def _layout(sizes):
    slices, start = {}, 0
    for name, size in sizes:
        slices[name] = slice(start, start + size)
        start += size
    return slices, start


def _blocks(sl: slice, rows: int, width: int) -> np.ndarray:
    return np.arange(sl.start, sl.stop).reshape(rows, width)


def build_shooting_objective(model, win: Window, cost: CostSpec, reduced=None) -> "ShootingProblem":
    """Transcribe one estimation window into a box-constrained NLP.

    ``model`` is the full :class:`SystemModel`; for the two-stage cost pass the
    :class:`~uise.transform.ReducedModel` as ``reduced``.  The returned NLP
    exposes batched residuals and their Jacobian, so its cost is the squared
    residual norm.
    """
    if cost.kind == TWO_STAGE:
        if reduced is None:
            raise ValueError("two-stage windows need a reduced model")
        return _build_two_stage(reduced, win, cost)
    return _build_full(model, win, cost)


def _build_full(model: SystemModel, win: Window, cost: CostSpec) -> ShootingProblem:
    kind = cost.kind
    N, n_fit = _check_lengths(kind, win, model.n_y, model.n_v, model.n_u, model.n_x)
    n_w_steps = N + 1 if kind in (FULL_ORDER, FIE) else N
    if kind == BASELINE:
        slices, dim = _layout([("initial", model.n_x), ("w", n_w_steps * model.n_w), ("v", n_fit * model.n_v)])
    else:
        slices, dim = _layout([("initial", model.n_x), ("v", n_fit * model.n_v), ("w", n_w_steps * model.n_w)])
    w_box = cost.w_box if cost.w_box is not None else Box.unbounded(model.n_w)
    init_idx = np.arange(slices["initial"].start, slices["initial"].stop)
    v_idx = _blocks(slices["v"], n_fit, model.n_v)
    w_idx = _blocks(slices["w"], n_w_steps, model.n_w)
    x_scale = _width(model.domain_x)
    v_scale = np.where(model.domain_v.width > 0, 0.5 * model.domain_v.width, 1.0)
    w_scale = _width(w_box)

    lo = np.empty(dim)
    hi = np.empty(dim)
    scale = np.empty(dim)
    lo[init_idx], hi[init_idx], scale[init_idx] = model.domain_x.lower, model.domain_x.upper, x_scale
    lo[v_idx], hi[v_idx], scale[v_idx] = model.domain_v.lower, model.domain_v.upper, v_scale
    lo[w_idx], hi[w_idx], scale[w_idx] = w_box.lower, w_box.upper, w_scale

    prior_w, noise_w, out_w, ww = cost.stage_weights(N)
    pen = cost.penalty_factor * max(prior_w, np.max(noise_w), np.max(out_w), np.max(ww, initial=0.0))
    U = win.controls

    def F(x, i, w):
        return model.f(x, U[i], w)

    def H(x, i, v):
        return model.h(x, v)

    core = _Shooter(dim, model.n_x, N, n_fit, init_idx, w_idx[:N], v_idx, v_idx, F, H, win.outputs, win.prior,
                    win.v_prior, prior_w, noise_w, out_w, x_scale, w_scale, v_scale,
                    state_box=model.domain_x, state_pen_steps=np.arange(1, N + 1), y_box=model.domain_y,
                    w_pen=(w_idx, np.sqrt(ww)) if kind == BASELINE else None, pen=pen)

    def objective(dec):
        r = core.residuals(dec)
        return float(r @ r)

    nlp = NlpProblem(dim, objective, Box(lo, hi), scale, residuals=core.residuals, jacobian=core.jacobian)
    return ShootingProblem(nlp, kind, N, slices, core)


def _build_two_stage(reduced, win: Window, cost: CostSpec) -> ShootingProblem:
    model = reduced.source_model
    t = reduced.transform
    N, n_fit = _check_lengths(TWO_STAGE, win, model.n_y, model.n_v, model.n_u, reduced.n_sharp)
    slices, dim = _layout([("initial", reduced.n_sharp), ("v", N * model.n_v)])
    zbox = reduced.domain_sharp
    init_idx = np.arange(reduced.n_sharp)
    v_idx = _blocks(slices["v"], N, model.n_v)
    z_scale = _width(zbox)
    v_scale = np.where(model.domain_v.width > 0, 0.5 * model.domain_v.width, 1.0)
    lo = np.concatenate([zbox.lower, np.tile(model.domain_v.lower, N)])
    hi = np.concatenate([zbox.upper, np.tile(model.domain_v.upper, N)])
    scale = np.concatenate([z_scale, np.tile(v_scale, N)])
    prior_w, noise_w, out_w, _ = cost.stage_weights(N)
    pen = cost.penalty_factor * max(prior_w, np.max(noise_w), np.max(out_w))
    gamma = win.outputs
    U = win.controls

    def F(z, i, v):
        return reduced.f_sharp_hat(z, gamma[i], U[i], v)

    def H(z, i, v):
        return reduced.h_T_hat(z, gamma[i], v)

    def lift(z, i, v):
        return t.inverse(t.psi(gamma[i], z, v), z)

    core = _Shooter(dim, reduced.n_sharp, N, n_fit, init_idx, v_idx, v_idx, v_idx, F, H, gamma, win.prior,
                    win.v_prior, prior_w, noise_w, out_w, z_scale, v_scale, v_scale,
                    state_box=zbox, state_pen_steps=[N], y_box=model.domain_y, lift=lift, x_box=model.domain_x,
                    pen=pen)

    def objective(dec):
        r = core.residuals(dec)
        return float(r @ r)

    nlp = NlpProblem(dim, objective, Box(lo, hi), scale, residuals=core.residuals, jacobian=core.jacobian)
    return ShootingProblem(nlp, TWO_STAGE, N, slices, core)
