"""System abstraction, boxes, trajectories and open-loop simulation.

Models are discrete-time maps

    x[k+1] = f(x[k], u[k], w[k])
    y[k]   = h(x[k], v[k])

where ``w`` is an unknown input (possibly unbounded) and ``v`` bounded
measurement noise.  ``f`` and ``h`` are plain callables that must broadcast
over leading axes: the estimators evaluate whole batches of finite-difference
perturbations in one call.  Pass ``vectorized=False`` for callables that only
accept 1-D arrays; they are then looped over the batch.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericError


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``lower <= x <= upper``; infinite bounds are allowed."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float)).copy()
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float)).copy()
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError(f"box bounds must be 1-D of equal length, got {lo.shape} and {hi.shape}")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ValueError("box bounds must not be NaN")
        if np.any(lo > hi):
            raise ValueError(f"box lower bound exceeds upper bound: {lo} > {hi}")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls, n: int) -> "Box":
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    @classmethod
    def symmetric(cls, radius) -> "Box":
        r = np.atleast_1d(np.asarray(radius, dtype=float))
        return cls(-r, r)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def is_bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def center(self) -> np.ndarray:
        if not self.is_bounded:
            # free coordinates are centred at zero
            lo = np.where(np.isfinite(self.lower), self.lower, np.where(np.isfinite(self.upper), self.upper, 0.0))
            hi = np.where(np.isfinite(self.upper), self.upper, lo)
            return 0.5 * (lo + hi)
        return 0.5 * (self.lower + self.upper)

    def contains(self, x, atol: float = 0.0) -> np.ndarray:
        """Membership test; broadcasts over leading axes."""
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lower - atol) & (x <= self.upper + atol), axis=-1)

    def project(self, x) -> np.ndarray:
        """Euclidean projection (componentwise clamp)."""
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def violation(self, x) -> np.ndarray:
        """Signed distance to the box per component (zero inside)."""
        x = np.asarray(x, dtype=float)
        return x - self.project(x)

    def inflate(self, fraction: float) -> "Box":
        """Grow each side by ``fraction`` of the width (bounded boxes only)."""
        pad = fraction * self.width
        return Box(self.lower - pad, self.upper + pad)


def _loop_over_batch(fn: Callable, n_out: int) -> Callable:
    def batched(*args):
        arrays = [np.asarray(a, dtype=float) for a in args]
        lead = np.broadcast_shapes(*(a.shape[:-1] for a in arrays))
        if not lead:
            return np.asarray(fn(*arrays), dtype=float)
        flat = [np.broadcast_to(a, lead + a.shape[-1:]).reshape(-1, a.shape[-1]) for a in arrays]
        out = np.empty((flat[0].shape[0], n_out))
        for i in range(out.shape[0]):
            out[i] = fn(*(a[i] for a in flat))
        return out.reshape(lead + (n_out,))

    return batched


@dataclass(frozen=True)
class SystemModel:
    """Black-box discrete-time model with dimensions and box domains.

    ``domain_w`` may be ``None`` (or an infinite box) for unbounded unknown
    inputs; ``domain_x``, ``domain_v`` and ``domain_y`` must be bounded.
    """

    n_x: int
    n_u: int
    n_w: int
    n_v: int
    n_y: int
    f: Callable
    h: Callable
    domain_x: Box
    domain_u: Box
    domain_v: Box
    domain_y: Box
    domain_w: Optional[Box] = None
    vectorized: bool = True
    name: str = "model"
    state_names: Sequence[str] = ()
    control_names: Sequence[str] = ()
    input_names: Sequence[str] = ()
    noise_names: Sequence[str] = ()
    output_names: Sequence[str] = ()

    def __post_init__(self):
        for label, box, dim in (
            ("domain_x", self.domain_x, self.n_x),
            ("domain_u", self.domain_u, self.n_u),
            ("domain_v", self.domain_v, self.n_v),
            ("domain_y", self.domain_y, self.n_y),
        ):
            if box.dim != dim:
                raise ValueError(f"{label} has dimension {box.dim}, expected {dim}")
        for label in ("domain_x", "domain_v", "domain_y"):
            if not getattr(self, label).is_bounded:
                raise ValueError(f"{label} must be bounded (compact)")
        if self.domain_w is None:
            object.__setattr__(self, "domain_w", Box.unbounded(self.n_w))
        elif self.domain_w.dim != self.n_w:
            raise ValueError(f"domain_w has dimension {self.domain_w.dim}, expected {self.n_w}")
        if not self.vectorized:
            object.__setattr__(self, "f", _loop_over_batch(self.f, self.n_x))
            object.__setattr__(self, "h", _loop_over_batch(self.h, self.n_y))
            object.__setattr__(self, "vectorized", True)
        defaults = {
            "state_names": ("x", self.n_x),
            "control_names": ("u", self.n_u),
            "input_names": ("w", self.n_w),
            "noise_names": ("v", self.n_v),
            "output_names": ("y", self.n_y),
        }
        for attr, (prefix, n) in defaults.items():
            names = tuple(getattr(self, attr))
            if not names:
                names = (prefix,) if n == 1 else tuple(f"{prefix}{i + 1}" for i in range(n))
            if len(names) != n:
                raise ValueError(f"{attr} has {len(names)} entries, expected {n}")
            object.__setattr__(self, attr, names)

    @property
    def w_bounded(self) -> bool:
        return self.domain_w.is_bounded


@dataclass
class Trajectory:
    """Simulated trajectory.

    Offsets: ``controls`` has K rows (u[0..K-1]); ``states``, ``unknown_inputs``,
    ``noises`` and ``outputs`` have K+1 rows (index 0..K).  The last unknown
    input never enters the dynamics but is kept so every time index has a full
    tuple.
    """

    states: np.ndarray
    controls: np.ndarray
    unknown_inputs: np.ndarray
    noises: np.ndarray
    outputs: np.ndarray
    out_of_domain: list = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.states.shape[0] - 1


def _as_sequence(values, rows: int, cols: int, label: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1 and cols == 1 and arr.shape[0] == rows:
        arr = arr[:, None]
    if arr.ndim == 1 and rows == 1 and arr.shape[0] == cols:
        arr = arr[None, :]
    if arr.shape != (rows, cols):
        raise ValueError(f"{label} must have shape ({rows}, {cols}), got {arr.shape}")
    return arr


def simulate(model: SystemModel, x0, controls, unknown_inputs, noises, check_domains: bool = True) -> Trajectory:
    """Roll the model forward from ``x0``.

    The horizon K is the number of control rows.  ``unknown_inputs`` is either
    a (K+1, n_w) array or a callable ``(k, x_k) -> w_k`` for inputs generated
    by state feedback (such as the crop model's growth-dependent input).
    Out-of-domain states are recorded in ``Trajectory.out_of_domain`` and
    reported with a warning.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != model.n_x:
        raise ValueError(f"x0 has {x0.size} entries, expected {model.n_x}")
    u = np.asarray(controls, dtype=float)
    if u.ndim == 1:
        u = u.reshape(-1, model.n_u) if model.n_u else u.reshape(-1, 0)
    K = u.shape[0]
    u = _as_sequence(u, K, model.n_u, "controls")
    w_rule = unknown_inputs if callable(unknown_inputs) else None
    if w_rule is None:
        w = _as_sequence(unknown_inputs, K + 1, model.n_w, "unknown_inputs")
    else:
        w = np.empty((K + 1, model.n_w))
    v = _as_sequence(noises, K + 1, model.n_v, "noises")
    if check_domains:
        if not model.domain_x.contains(x0, atol=1e-12):
            raise ValueError(f"x0 = {x0} lies outside domain_x")
        if K and not np.all(model.domain_u.contains(u, atol=1e-12)):
            raise ValueError("controls leave domain_u")
        if not np.all(model.domain_v.contains(v, atol=1e-12)):
            raise ValueError("noises leave domain_v")
        if w_rule is None and not np.all(model.domain_w.contains(w, atol=1e-12)):
            raise ValueError("unknown inputs leave domain_w")

    x = np.empty((K + 1, model.n_x))
    y = np.empty((K + 1, model.n_y))
    x[0] = x0
    flagged = []
    for k in range(K + 1):
        if w_rule is not None:
            w[k] = np.asarray(w_rule(k, x[k]), dtype=float).reshape(model.n_w)
        y[k] = model.h(x[k], v[k])
        if not np.all(np.isfinite(y[k])):
            raise NumericError(f"output map produced non-finite value at step {k}: {y[k]}", index=k)
        if not model.domain_x.contains(x[k]):
            flagged.append(k)
        if k < K:
            x[k + 1] = model.f(x[k], u[k], w[k])
            if not np.all(np.isfinite(x[k + 1])):
                raise NumericError(f"transition map produced non-finite state at step {k}: {x[k + 1]}", index=k)
    if flagged:
        warnings.warn(f"{len(flagged)} state(s) outside domain_x, first at k={flagged[0]}", RuntimeWarning, stacklevel=2)
    return Trajectory(states=x, controls=u, unknown_inputs=w, noises=v, outputs=y, out_of_domain=flagged)


def sample_uniform_noise(bounds: Box, length: int, seed: int) -> np.ndarray:
    """Independent uniform samples inside ``bounds``, shape ``(length, dim)``.

    Deterministic in ``seed``; degenerate boxes give constant sequences.
    """
    if length < 0:
        raise ValueError("length must be nonnegative")
    if not bounds.is_bounded:
        raise ValueError("uniform noise needs a bounded box")
    rng = np.random.default_rng(seed)
    return bounds.lower + rng.random((length, bounds.dim)) * bounds.width
