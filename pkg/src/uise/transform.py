"""Coordinate transforms that split off the unknown-input direction.

A transform maps ``x`` to ``z = (z_flat, z_sharp)`` such that ``z_flat`` can be
read back from the output (``z_flat = psi(y, z_sharp, v)``) and ``z_sharp``
evolves independently of the unknown input.  Substituting the measured output
for ``y`` in ``psi`` gives a reduced model driven by a fictitious input
``gamma``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import AssumptionViolation, DetectabilityError, NumericError
from .model import Box, SystemModel


@dataclass(frozen=True)
class StateTransform:
    """Diffeomorphism ``x -> (z_flat, z_sharp)`` with inverse and output inversion.

    All callables broadcast over leading axes.  ``domain_image`` is a box
    enclosing the image of ``domain_x``; ``contains_exact`` tests membership
    of the image itself through the inverse map.
    """

    n_flat: int
    n_sharp: int
    T_flat: Callable
    T_sharp: Callable
    inverse: Callable  # (z_flat, z_sharp) -> x
    psi: Callable  # (y, z_sharp, v) -> z_flat
    domain_image: Box
    domain_x: Box
    matrix: Optional[np.ndarray] = None  # set for linear transforms

    def __post_init__(self):
        if self.domain_image.dim != self.n_flat + self.n_sharp:
            raise ValueError("domain_image dimension does not match n_flat + n_sharp")

    @property
    def n_x(self) -> int:
        return self.n_flat + self.n_sharp

    def T(self, x) -> np.ndarray:
        return np.concatenate([self.T_flat(x), self.T_sharp(x)], axis=-1)

    def T_inv(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return self.inverse(z[..., : self.n_flat], z[..., self.n_flat:])

    @property
    def domain_flat(self) -> Box:
        return Box(self.domain_image.lower[: self.n_flat], self.domain_image.upper[: self.n_flat])

    @property
    def domain_sharp(self) -> Box:
        return Box(self.domain_image.lower[self.n_flat:], self.domain_image.upper[self.n_flat:])

    def contains_exact(self, z, atol: float = 0.0) -> np.ndarray:
        return self.domain_x.contains(self.T_inv(z), atol)


def _linear_image_box(L: np.ndarray, box: Box) -> Box:
    # tightest box around the image of a box under a linear map
    c = L @ box.center
    r = np.abs(L) @ (0.5 * box.width)
    return Box(c - r, c + r)


def _sampled_image_box(T: Callable, box: Box, n: int = 4096, pad: float = 0.01, seed: int = 0) -> Box:
    rng = np.random.default_rng(seed)
    pts = box.lower + rng.random((n, box.dim)) * box.width
    corners = np.array(np.meshgrid(*np.stack([box.lower, box.upper], axis=1))).reshape(box.dim, -1).T
    z = T(np.concatenate([pts, corners]))
    lo, hi = z.min(axis=0), z.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    return Box(lo - pad * span, hi + pad * span)


def affine_transform_from_factors(S_flat, C, M, domain_x: Box, g: Optional[Callable] = None,
                                  phi: Optional[Callable] = None, phi_inv: Optional[Callable] = None) -> StateTransform:
    """Transform ``T_flat = S_flat C phi(x)``, ``T_sharp = M phi(x)`` with
    ``psi(y, z_sharp, v) = S_flat (y - g(v))``.

    ``g`` defaults to the identity (additive noise); ``phi`` to the identity.
    """
    S_flat = np.atleast_2d(np.asarray(S_flat, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    M = np.asarray(M, dtype=float)
    n = C.shape[1]
    M = M.reshape(-1, n)
    top = S_flat @ C if S_flat.size else np.zeros((0, n))
    L = np.vstack([top, M])
    if L.shape != (n, n):
        raise ValueError(f"col(S_flat C, M) is {L.shape}, expected ({n}, {n})")
    cond = np.linalg.cond(L)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericError(f"col(S_flat C, M) is singular (condition number {cond:.3g})")
    L_inv = np.linalg.inv(L)
    n_flat = top.shape[0]
    g = (lambda v: np.asarray(v, dtype=float)) if g is None else g
    fwd = (lambda x: np.asarray(x, dtype=float)) if phi is None else phi
    back = (lambda xb: xb) if phi_inv is None else phi_inv
    if (phi is None) != (phi_inv is None):
        raise ValueError("phi and phi_inv must be given together")

    def T_flat(x):
        return fwd(x) @ top.T

    def T_sharp(x):
        return fwd(x) @ M.T

    # split columns so the inverse needs no concatenation (it sits in solver loops)
    inv_flat, inv_sharp = L_inv[:, :n_flat].T.copy(), L_inv[:, n_flat:].T.copy()

    def inverse(z_flat, z_sharp):
        return back(np.asarray(z_flat, float) @ inv_flat + np.asarray(z_sharp, float) @ inv_sharp)

    def psi(y, z_sharp, v):
        y = np.asarray(y, dtype=float)
        return (y - g(v)) @ S_flat.T if n_flat else np.zeros(y.shape[:-1] + (0,))

    if phi is None:
        image = _linear_image_box(L, domain_x)
    else:
        image = _sampled_image_box(lambda x: fwd(x) @ L.T, domain_x)
    return StateTransform(n_flat, n - n_flat, T_flat, T_sharp, inverse, psi, image, domain_x,
                          matrix=L if phi is None else None)


def build_affine_transform(C, B, domain_x: Box, g: Optional[Callable] = None, phi: Optional[Callable] = None,
                           phi_inv: Optional[Callable] = None, tol: Optional[float] = None) -> StateTransform:
    """Construct a decoupling transform for ``y = C phi(x) + g(v)`` with
    unknown-input direction ``B`` (in ``phi`` coordinates).

    ``S_flat`` is the leading left singular block of ``C B``; ``M`` is an
    orthonormal basis of the orthogonal complement of ``im(B)``, so
    ``M B = 0``.  Raises :class:`DetectabilityError` when
    ``rank(C B) != rank(B)``.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    n = C.shape[1]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    sB = np.linalg.svd(B, compute_uv=False) if B.size else np.zeros(0)
    U, sCB, _ = np.linalg.svd(C @ B) if B.size else (np.eye(C.shape[0]), np.zeros(0), None)
    scale = max(sB[0] if sB.size else 0.0, sCB[0] if sCB.size else 0.0)
    thr = tol if tol is not None else 1e-10 * scale
    rank_B = int(np.count_nonzero(sB > thr))
    rank_CB = int(np.count_nonzero(sCB > thr))
    if rank_B != rank_CB:
        raise DetectabilityError(
            f"rank(CB) = {rank_CB} differs from rank(B) = {rank_B}: the system is not strongly "
            "detectable in the linear sense, so no unknown-input decoupling transform exists"
        )
    S_flat = U[:, :rank_CB].T
    # orthonormal complement of im(B): trailing left singular vectors of B
    UB = np.linalg.svd(B)[0] if B.size else np.eye(n)
    M = UB[:, rank_B:].T
    t = affine_transform_from_factors(S_flat, C, M, domain_x, g, phi, phi_inv)
    mb = np.max(np.abs(M @ B), initial=0.0)
    if mb > 1e-12 * max(1.0, np.max(np.abs(B), initial=0.0)):
        raise NumericError(f"M B = {mb:.3g} exceeds 1e-12")
    return t


def crop_transform(p=None, domain_x: Optional[Box] = None) -> StateTransform:
    """Hand-chosen crop transform ``(x_c, x_d1, (a_d3/a_c1) x_c + x_d2)`` with
    ``psi(y, z_sharp, v) = y_c - v_c``."""
    from .crop import DEFAULT_STATE_BOX, CropParams

    p = CropParams() if p is None else p
    domain_x = DEFAULT_STATE_BOX if domain_x is None else domain_x
    ratio = p.a_d3 / p.a_c1
    C = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]])
    M = np.array([[0.0, 1.0, 0.0], [ratio, 0.0, 1.0]])
    return affine_transform_from_factors([[1.0, 0.0]], C, M, domain_x)


def crop_input_direction(p=None) -> np.ndarray:
    """Unknown-input direction ``(-a_c1, 0, a_d3)`` of the crop model."""
    from .crop import CropParams

    p = CropParams() if p is None else p
    return np.array([[-p.a_c1], [0.0], [p.a_d3]])


@dataclass(frozen=True)
class ReducedModel:
    """Unknown-input-free reduced model in the ``z_sharp`` coordinates.

    ``f_sharp_hat(z, gamma, u, v)`` and ``h_T_hat(z, gamma, v)`` broadcast over
    leading axes.  The unknown input is pinned to ``w_ref``; it has no effect
    by construction.
    """

    n_sharp: int
    f_sharp_hat: Callable
    h_T_hat: Callable
    domain_sharp: Box
    source_model: SystemModel
    transform: StateTransform
    w_ref: np.ndarray

    def lift(self, z_sharp, gamma, v) -> np.ndarray:
        """Full state consistent with ``z_sharp`` and the output ``gamma``."""
        return self.transform.inverse(self.transform.psi(gamma, z_sharp, v), z_sharp)


def reduce_model(model: SystemModel, t: StateTransform, w_ref=None, n_checks: int = 100, seed: int = 0,
                 tol: float = 1e-7, fd_step: float = 1e-5, w_surrogate: Optional[Box] = None) -> ReducedModel:
    """Build the reduced model and spot-check that ``T_sharp(f(x, u, w))``
    does not depend on ``w``.

    The check uses central differences at ``n_checks`` random points; any
    derivative above ``tol`` (absolute) raises :class:`AssumptionViolation`.
    """
    if t.n_x != model.n_x:
        raise ValueError(f"transform acts on {t.n_x} states, model has {model.n_x}")
    if w_ref is None:
        w_ref = model.domain_w.center
    w_ref = np.asarray(w_ref, dtype=float).reshape(model.n_w)
    if w_surrogate is None:
        w_surrogate = model.domain_w if model.w_bounded else Box(w_ref - 1.0, w_ref + 1.0)
    rng = np.random.default_rng(seed)
    if n_checks > 0:
        box_x, box_u = model.domain_x, model.domain_u
        x = box_x.lower + rng.random((n_checks, model.n_x)) * box_x.width
        u = box_u.lower + rng.random((n_checks, model.n_u)) * box_u.width
        w = w_surrogate.lower + rng.random((n_checks, model.n_w)) * w_surrogate.width
        for i in range(model.n_w):
            h = fd_step * np.maximum(1.0, np.abs(w[:, i]))
            wp, wm = w.copy(), w.copy()
            wp[:, i] += h
            wm[:, i] -= h
            d = (t.T_sharp(model.f(x, u, wp)) - t.T_sharp(model.f(x, u, wm))) / (2 * h[:, None])
            worst = np.max(np.abs(d), axis=1)
            if np.any(worst > tol):
                j = int(np.argmax(worst > tol))
                raise AssumptionViolation(
                    f"T_sharp(f) depends on w[{i}] (derivative {worst[j]:.3g} > {tol:g})",
                    sample=dict(x=x[j], u=u[j], w=w[j], derivative=d[j]),
                )

    def lift(z, gamma, v):
        return t.inverse(t.psi(gamma, z, v), z)

    def f_sharp_hat(z, gamma, u, v):
        return t.T_sharp(model.f(lift(z, gamma, v), u, w_ref))

    def h_T_hat(z, gamma, v):
        return model.h(lift(z, gamma, v), v)

    return ReducedModel(t.n_sharp, f_sharp_hat, h_T_hat, t.domain_sharp, model, t, w_ref)


def recover_full_state(t: StateTransform, y, z_sharp, v_bar) -> np.ndarray:
    """``T_inv(psi(y, z_sharp, v_bar), z_sharp)``; may leave the state domain."""
    return t.inverse(t.psi(y, z_sharp, v_bar), z_sharp)


def project_estimate(t: StateTransform, z_candidate, domain: Optional[Box] = None) -> np.ndarray:
    """Clamp a transformed candidate onto ``domain`` (default: the stored image
    box) and map it back to original coordinates."""
    box = t.domain_image if domain is None else domain
    return t.T_inv(box.project(z_candidate))
