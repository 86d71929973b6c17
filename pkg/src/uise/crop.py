"""Simplified indoor-farm crop-growth plant.

State ``x = (x_c, x_d1, x_d2)``: CO2 concentration and the dry weights of two
crop types.  The temperature ``u_d`` is the control input and the unknown input
``w`` is the output of an unmodelled growth function of ``x_d2``.

The photosynthesis constants are taken from the van Henten lettuce model
(``c_rad_phot = 3.55e-9``, ``c_gamma = 5.2e-5``, ``c_co2_1..3 = 5.11e-6,
2.3e-4, 6.29e-4``); everything else is fixed by the experiment description.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .errors import NumericError
from .model import Box, SystemModel

STATE_NAMES = ("x_c", "x_d1", "x_d2")


@dataclass(frozen=True)
class CropParams:
    dt: float = 60.0  # s
    a_c1: float = 1.0 / 4.1
    a_c2: float = 4.87e-7 / 4.1
    xi1: float = 53.0
    a_d1: float = 0.544
    a_d2: float = 2.65e-7
    a_d3: float = 0.8
    a_d4: float = 1.85e-7
    c_rad_phot: float = 3.55e-9
    c_gamma: float = 5.2e-5
    c_co2_1: float = 5.11e-6
    c_co2_2: float = 2.3e-4
    c_co2_3: float = 6.29e-4
    u_d: float = 25.0  # degC
    radiation: float = 100.0
    w_growth_rate: float = 45.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        for f in fields(self):
            if not np.isfinite(getattr(self, f.name)):
                raise ValueError(f"crop parameter {f.name} is not finite")

    def as_dict(self) -> dict:
        return asdict(self)

    def with_updates(self, **kw) -> "CropParams":
        return replace(self, **kw)


def co2_response(u_d, p: CropParams):
    """Temperature factor ``-c1 u^2 + c2 u - c3`` of the photosynthesis rate."""
    return -p.c_co2_1 * u_d**2 + p.c_co2_2 * u_d - p.c_co2_3


def photosynthesis(u_d, x_c, p: CropParams):
    """Gross photosynthesis rate as a rational function of temperature and CO2."""
    light = p.radiation * p.c_rad_phot
    carbon = (x_c - p.c_gamma) * co2_response(u_d, p)
    denom = light + carbon
    if np.any(denom == 0):
        raise NumericError(
            f"photosynthesis denominator vanishes: light term {light!r}, "
            f"CO2 term {np.asarray(carbon)!r} (u_d={u_d!r}, x_c={x_c!r})"
        )
    return light * carbon / denom


def unknown_input_truth(x_d2, p: CropParams | None = None):
    """Growth function generating the unknown input, ``1 - exp(-45 x_d2)``."""
    rate = 45.0 if p is None else p.w_growth_rate
    return 1.0 - np.exp(-rate * np.asarray(x_d2, dtype=float))


def crop_step(x, u_d, w, p: CropParams):
    """One sampling period of the crop model; broadcasts over leading axes."""
    x = np.asarray(x, dtype=float)
    xc, xd1, xd2 = x[..., 0], x[..., 1], x[..., 2]
    phi = photosynthesis(u_d, xc, p)
    fx = np.expm1(-p.xi1 * xd1)
    temp = p.dt * 2.0 ** (0.1 * np.asarray(u_d, dtype=float) - 2.5)
    dphi = p.dt * phi
    out = np.empty(np.broadcast_shapes(xc.shape, np.shape(u_d), np.shape(w)) + (3,))
    out[..., 0] = xc + p.a_c1 * (fx - w) * dphi + p.a_c2 * temp * (xd1 + xd2)
    out[..., 1] = xd1 - p.a_d1 * fx * dphi - p.a_d2 * temp * xd1
    out[..., 2] = xd2 + p.a_d3 * dphi * w - p.a_d4 * temp * xd2
    return out


def crop_output(x, v):
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    out = np.empty(np.broadcast_shapes(x.shape[:-1], v.shape[:-1]) + (2,))
    out[..., 0] = x[..., 0] + v[..., 0]
    out[..., 1] = x[..., 1] + x[..., 2] + v[..., 1]
    return out


DEFAULT_STATE_BOX = Box([0.0, 0.08, 0.08], [0.0027, 0.1, 0.1])
DEFAULT_NOISE_BOUND = 3e-6
DEFAULT_W_BOX = Box([0.965], [1.0])


def crop_model(
    p: CropParams | None = None,
    domain_x: Box = DEFAULT_STATE_BOX,
    noise_bound: float = DEFAULT_NOISE_BOUND,
    domain_w: Box | None = DEFAULT_W_BOX,
) -> SystemModel:
    """Crop plant as a :class:`SystemModel` with the control ``u = (u_d,)``."""
    p = CropParams() if p is None else p
    domain_v = Box.symmetric([noise_bound, noise_bound])
    # outputs are affine in (x, v), so the image box is exact
    domain_y = Box(
        [domain_x.lower[0] - noise_bound, domain_x.lower[1] + domain_x.lower[2] - noise_bound],
        [domain_x.upper[0] + noise_bound, domain_x.upper[1] + domain_x.upper[2] + noise_bound],
    )

    def f(x, u, w):
        u = np.asarray(u, dtype=float)
        w = np.asarray(w, dtype=float)
        return crop_step(x, u[..., 0], w[..., 0], p)

    return SystemModel(
        n_x=3,
        n_u=1,
        n_w=1,
        n_v=2,
        n_y=2,
        f=f,
        h=crop_output,
        domain_x=domain_x,
        domain_u=Box([0.0], [40.0]),
        domain_v=domain_v,
        domain_y=domain_y,
        domain_w=domain_w,
        name="crop",
        state_names=STATE_NAMES,
        control_names=("u_d",),
        input_names=("w",),
        noise_names=("v_c", "v_d"),
        output_names=("y_c", "y_d"),
    )


def crop_unknown_input(p: CropParams | None = None):
    """State-feedback rule ``(k, x) -> w`` for :func:`uise.model.simulate`."""
    def rule(k, x):
        return np.array([unknown_input_truth(x[2], p)])

    return rule
