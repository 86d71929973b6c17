"""Box-constrained minimisation with finite-difference derivatives.

Two routes share one contract (:func:`solve_box_nlp`):

* scalar objectives go through a projected limited-memory BFGS method with a
  backtracking line search along the projection arc;
* problems that also expose residuals (cost = sum of squares) go to scipy's
  bounded dogleg least-squares solver, which copes far better with the badly
  scaled estimation windows.

Every route works in scaled coordinates ``x / scaling`` and never returns a
point worse than the (projected) initial guess.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import least_squares

from .errors import NumericError
from .model import Box

CONVERGED = "converged"
MAX_ITERATIONS = "max-iterations"
LINE_SEARCH_FAILURE = "line-search-failure"


@dataclass
class NlpProblem:
    """``min objective(x)`` subject to ``x`` in ``box``.

    ``residuals`` is optional: a map accepting ``(dim,)`` or ``(batch, dim)``
    arrays whose squared norm equals ``objective``; ``jacobian`` optionally
    returns its Jacobian (otherwise it is differenced in one batch).  Infinite
    box bounds mark free coordinates.
    """

    dim: int
    objective: Callable[[np.ndarray], float]
    box: Box
    scaling: Optional[np.ndarray] = None
    gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None
    residuals: Optional[Callable[[np.ndarray], np.ndarray]] = None
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.box.dim != self.dim:
            raise ValueError(f"box has dimension {self.box.dim}, problem has {self.dim}")
        if self.scaling is None:
            self.scaling = np.ones(self.dim)
        self.scaling = np.asarray(self.scaling, dtype=float).reshape(self.dim)
        if np.any(self.scaling <= 0) or not np.all(np.isfinite(self.scaling)):
            raise ValueError("scaling factors must be positive and finite")


@dataclass
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 500
    memory: int = 10
    fd_step: float = 1e-6
    armijo: float = 1e-4
    max_backtracks: int = 40
    step_tol: float = 1e-10  # relative step / decrease tolerance of the least-squares route
    ls_method: str = "dogbox"  # primary scipy least-squares method; the other one is the fallback
    fallback_evals: int = 50  # budget of the restart with the other method after a stall
    method: str = "auto"  # auto | lbfgs | least-squares
    trace_path: Optional[str] = None


@dataclass
class Solution:
    argmin: np.ndarray
    cost: float
    projected_gradient_norm: float
    iterations: int
    status: str
    evaluations: int = 0

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def fd_gradient(fn: Callable, x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient with step ``h * max(1, |x_i|)`` per component."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        fp = fn(xp)
        fm = fn(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value while differencing component {i}", index=i)
        g[i] = (fp - fm) / (2.0 * step)
    return g


def fd_jacobian(fn: Callable, x, h: float = 1e-6, scale=None) -> np.ndarray:
    """Central-difference Jacobian of a batched vector map.

    All ``2 * dim`` perturbed points are passed to ``fn`` in a single batch.
    The step for component ``i`` is ``h * max(1, |x_i / s_i|) * s_i``.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    s = np.ones(n) if scale is None else np.asarray(scale, dtype=float)
    steps = h * np.maximum(1.0, np.abs(x / s)) * s
    pert = np.concatenate([x + np.diag(steps), x - np.diag(steps)])
    vals = np.asarray(fn(pert), dtype=float)
    if not np.all(np.isfinite(vals)):
        bad = int(np.argwhere(~np.all(np.isfinite(vals), axis=1))[0, 0]) % n
        raise NumericError(f"non-finite residual while differencing component {bad}", index=bad)
    return ((vals[:n] - vals[n:]) / (2.0 * steps[:, None])).T


def projected_gradient_norm(x, g, box: Box, scaling) -> float:
    """``|| P(x - g) - x ||`` in scaled coordinates."""
    xs = x / scaling
    gs = g * scaling
    lo = box.lower / scaling
    hi = box.upper / scaling
    return float(np.linalg.norm(np.clip(xs - gs, lo, hi) - xs))


def solve_box_nlp(p: NlpProblem, x_init, opts: SolverOptions | None = None) -> Solution:
    opts = SolverOptions() if opts is None else opts
    x0 = p.box.project(np.asarray(x_init, dtype=float).reshape(p.dim))
    r0 = None
    if p.residuals is not None:
        r0 = np.asarray(p.residuals(x0), dtype=float)
        f0 = float(r0 @ r0)
    else:
        f0 = float(p.objective(x0))
    if not np.isfinite(f0):
        raise ValueError(f"objective is not finite at the projected initial point ({f0})")
    method = opts.method
    if method == "auto":
        method = "least-squares" if p.residuals is not None else "lbfgs"
    if method == "least-squares":
        if p.residuals is None:
            raise ValueError("least-squares route needs a residual map")
        sol = _solve_least_squares(p, x0, r0, opts)
    elif method == "lbfgs":
        sol = _solve_lbfgs(p, x0, f0, opts)
    else:
        raise ValueError(f"unknown solver method {opts.method!r}")
    if not sol.cost <= f0 + 1e-12:
        g0 = _gradient(p, x0, opts)
        sol = Solution(x0, f0, projected_gradient_norm(x0, g0, p.box, p.scaling), sol.iterations, sol.status, sol.evaluations)
    return sol


def _gradient(p: NlpProblem, x, opts: SolverOptions) -> np.ndarray:
    if p.gradient is not None:
        return np.asarray(p.gradient(x), dtype=float)
    if p.residuals is not None:
        r = np.asarray(p.residuals(x), dtype=float)
        return 2.0 * _residual_jacobian(p, x, opts).T @ r
    s = p.scaling
    return fd_gradient(lambda xi: p.objective(xi * s), x / s, opts.fd_step) / s


def _residual_jacobian(p: NlpProblem, x, opts: SolverOptions) -> np.ndarray:
    if p.jacobian is not None:
        return np.asarray(p.jacobian(x), dtype=float)
    return fd_jacobian(p.residuals, x, opts.fd_step, p.scaling)


def _solve_least_squares(p: NlpProblem, x0, r0, opts: SolverOptions) -> Solution:
    s = p.scaling
    lo, hi = p.box.lower, p.box.upper
    fixed = lo >= hi
    free_idx = np.flatnonzero(~fixed)

    def embed(z):
        z = np.asarray(z, dtype=float)
        full = np.broadcast_to(x0, z.shape[:-1] + (p.dim,)).copy()
        full[..., free_idx] = z
        return full

    def fun(z):
        # scipy evaluates the start first; reuse the residuals already computed
        if r0 is not None and np.array_equal(z, z_start):
            return r0
        return p.residuals(embed(z))

    def jac(z, _r=None):
        return _residual_jacobian(p, embed(z), opts)[:, free_idx]

    # dogbox handles the tiny singular values of estimation windows well but
    # can give up after a single rejected step far from a stationary point;
    # trf (reflective) then continues from where it stopped
    z_start = x0[free_idx]
    common = dict(jac=jac, bounds=(lo[free_idx], hi[free_idx]), x_scale=s[free_idx],
                  ftol=opts.step_tol, xtol=opts.step_tol, gtol=opts.tol)
    if opts.ls_method not in ("trf", "dogbox"):
        raise ValueError(f"unknown least-squares method {opts.ls_method!r}")
    other = "dogbox" if opts.ls_method == "trf" else "trf"
    res = least_squares(fun, z_start, method=opts.ls_method, max_nfev=opts.max_iter, **common)
    nfev, njev = int(res.nfev), int(res.njev or 0)
    best = _ls_summary(p, embed, jac, res, free_idx)
    if best[3] > opts.tol and nfev < opts.max_iter and res.status != 0 and opts.fallback_evals > 0:
        z = np.clip(res.x, lo[free_idx], hi[free_idx])
        budget = min(opts.fallback_evals, opts.max_iter - nfev)
        res2 = least_squares(fun, z, method=other, max_nfev=budget, **common)
        nfev += int(res2.nfev)
        njev += int(res2.njev or 0)
        second = _ls_summary(p, embed, jac, res2, free_idx)
        if second[2] <= best[2]:
            best, res = second, res2
    x, _, cost, pg = best
    if pg <= opts.tol:
        status = CONVERGED
    elif res.status == 0 or nfev >= opts.max_iter:
        status = MAX_ITERATIONS
    else:
        # stopped on step or decrease size without meeting the gradient test
        status = LINE_SEARCH_FAILURE
    return Solution(x, cost, pg, nfev, status, nfev + njev)


def _ls_summary(p: NlpProblem, embed, jac, res, free_idx):
    x = embed(res.x)
    if np.array_equal(p.box.project(x), x):
        r, J = np.asarray(res.fun, dtype=float), np.asarray(res.jac, dtype=float)
    else:
        x = p.box.project(x)
        r, J = np.asarray(p.residuals(x), dtype=float), jac(x[free_idx])
    g = np.zeros(p.dim)
    g[free_idx] = 2.0 * J.T @ r
    return x, r, float(r @ r), projected_gradient_norm(x, g, p.box, p.scaling)


def _two_loop(g, s_list, y_list):
    # pairs restricted to the free coordinates may lose positive curvature
    pairs = [(s, y) for s, y in zip(s_list, y_list) if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y)]
    q = g.copy()
    alphas = []
    for s, y in reversed(pairs):
        a = (s @ q) / (y @ s)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), a in zip(pairs, reversed(alphas)):
        b = (y @ q) / (y @ s)
        q += (a - b) * s
    return q


def _solve_lbfgs(p: NlpProblem, x0, f0: float, opts: SolverOptions) -> Solution:
    s = p.scaling
    lo = p.box.lower / s
    hi = p.box.upper / s

    def fun(xi):
        return float(p.objective(xi * s))

    def grad(xi):
        return _gradient(p, xi * s, opts) * s

    xi = x0 / s
    f = f0
    g = grad(xi)
    s_hist, y_hist = [], []
    evals = 1
    status = MAX_ITERATIONS
    trace = [] if opts.trace_path else None
    it = 0
    for it in range(opts.max_iter + 1):
        pg = float(np.linalg.norm(np.clip(xi - g, lo, hi) - xi))
        if trace is not None:
            trace.append((it, f, pg))
        if pg <= opts.tol:
            status = CONVERGED
            break
        if it == opts.max_iter:
            break
        eps = 1e-12 * np.maximum(1.0, np.abs(xi))
        active = ((xi <= lo + eps) & (g > 0)) | ((xi >= hi - eps) & (g < 0))
        free = ~active
        d = np.zeros_like(xi)
        if s_hist:
            sf = [v[free] for v in s_hist]
            yf = [v[free] for v in y_hist]
            d[free] = -_two_loop(g[free], sf, yf)
        else:
            d[free] = -g[free] / max(1.0, np.linalg.norm(g[free]))
        if g @ d >= 0:
            d = np.where(free, -g, 0.0)
        accepted = False
        for direction in (d, np.where(free, -g, 0.0)):
            alpha = 1.0
            for _ in range(opts.max_backtracks):
                x_new = np.clip(xi + alpha * direction, lo, hi)
                f_new = fun(x_new)
                evals += 1
                if np.isfinite(f_new) and f_new <= f + opts.armijo * (g @ (x_new - xi)):
                    accepted = True
                    break
                alpha *= 0.5
            if accepted:
                break
            s_hist.clear()
            y_hist.clear()
        if not accepted:
            status = LINE_SEARCH_FAILURE
            break
        g_new = grad(x_new)
        step = x_new - xi
        dy = g_new - g
        if step @ dy > 1e-12 * np.linalg.norm(step) * np.linalg.norm(dy):
            s_hist.append(step)
            y_hist.append(dy)
            if len(s_hist) > opts.memory:
                s_hist.pop(0)
                y_hist.pop(0)
        xi, f, g = x_new, f_new, g_new
    if trace is not None:
        with open(opts.trace_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "cost", "projected_gradient_norm"])
            writer.writerows(trace)
    pg = float(np.linalg.norm(np.clip(xi - g, lo, hi) - xi))
    return Solution(xi * s, f, pg, it, status, evals)
