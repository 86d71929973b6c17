"""Small box-constrained problems with grid-search reference minima."""
from dataclasses import dataclass
from typing import Callable

import numpy as np

from uise.detectability import LyapunovCertificate
from uise.model import Box, SystemModel
from uise.shooting import CostSpec, Window, build_shooting_objective
from uise.solver import NlpProblem


@dataclass
class Toy:
    name: str
    nlp: NlpProblem
    batch_cost: Callable  # (B, dim) -> (B,)
    x_init: np.ndarray
    identifiable: np.ndarray = None  # coordinates the cost depends on

    def __post_init__(self):
        if self.identifiable is None:
            self.identifiable = np.ones(self.nlp.dim, dtype=bool)


def scalar_model():
    """``x+ = 0.5 x + w``, ``y = x + v`` with noise fixed to zero."""
    return SystemModel(1, 1, 1, 1, 1,
                       lambda x, u, w: 0.5 * np.asarray(x) + np.asarray(w),
                       lambda x, v: np.asarray(x) + np.asarray(v),
                       Box([-2], [2]), Box([0], [0]), Box([0], [0]), Box([-3], [3]), Box([-1], [1]))


def scalar_mhe_toy() -> Toy:
    m = scalar_model()
    cert = LyapunovCertificate([[1.0]], 0.5, 1.0, 1.0, 0.5, 1.0)
    win = Window([[0.4], [0.35], [0.1]], np.zeros((2, 1)), np.zeros((3, 1)), [0.3])
    prob = build_shooting_objective(m, win, CostSpec.full_order(cert, w_box=Box([-0.5], [0.5])))
    batch = lambda X: np.sum(prob.nlp.residuals(X) ** 2, axis=-1)
    mask = np.ones(prob.nlp.dim, dtype=bool)
    mask[prob.slices["w"].stop - 1] = False  # the last unknown input never enters the window
    return Toy("scalar-mhe-N2", prob.nlp, batch, prob.nlp.box.center, mask)


def _toy(name, dim, box, batch, x_init, residuals=None):
    obj = lambda x: float(batch(np.atleast_2d(x))[0])
    return Toy(name, NlpProblem(dim, obj, box, residuals=residuals), batch, np.asarray(x_init, float))


def toy_problems() -> list:
    Q = np.array([[2.0, 0.6], [0.6, 1.0]])
    c = np.array([1.5, -2.0])
    quad = lambda X: np.einsum("bi,ij,bj->b", X - c, Q, X - c)
    rosen = lambda X: (1 - X[:, 0]) ** 2 + 100 * (X[:, 1] - X[:, 0] ** 2) ** 2
    smooth = lambda X: np.exp(X[:, 0] + X[:, 1] - 1) + X[:, 0] ** 2 + 2 * X[:, 1] ** 2 - 0.5 * X[:, 0] * X[:, 1]
    t = np.linspace(0, 1, 8)
    d = 0.8 * np.exp(-1.3 * t) + 0.01 * np.sin(7 * t)
    fit_res = lambda X: np.atleast_2d(X)[:, :1] * np.exp(np.atleast_2d(X)[:, 1:2] * t) - d
    return [
        scalar_mhe_toy(),
        _toy("clamped-quadratic", 2, Box([-1, -1], [1, 1]), quad, [0.0, 0.0]),
        _toy("rosenbrock-clamped", 2, Box([-2, -2], [0.5, 2]), rosen, [-1.2, 1.0]),
        _toy("coupled-exp", 2, Box([-1, -1], [1, 1]), smooth, [0.9, 0.9]),
        _toy("exp-fit", 2, Box([0, -3], [2, 0]), lambda X: np.sum(fit_res(X) ** 2, axis=1), [1.0, -0.5],
             residuals=lambda x: fit_res(x)[0] if np.ndim(x) == 1 else fit_res(x)),
    ]
