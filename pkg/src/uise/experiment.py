"""Experiment harness: build models and estimators from a config, run them on
one shared simulated measurement stream, and write CSV/JSON artifacts.

Config keys (see ``data/crop.cfg`` for a complete example)::

    model = crop | linear
    run.steps, run.noise (noiseless | noisy), run.seed, run.estimators,
    run.max_failure_fraction
    crop.*            CropParams fields, crop.x0, crop.u_d
    linear.*          A, B (control), E (unknown input), C, x0, u, w, w_slope
    domain.*          x_lower, x_upper, noise_bound, w_lower, w_upper, u_lower, u_upper
    prior.*           x0 | rule = output + weight_error
    cert.lyapunov.*   P, mu, a1, a2, s_v, s_y
    cert.exp_ioss.*   mu, c_x, c_v, c_y, c_gamma
    cert.grid.*       sampling grid of the certificate check
    baseline.*        mu, p1, q_w, q_v, q_y
    estimator.*       horizon, w_box, penalty_factor, project
    solver.*          SolverOptions fields; estimator.<name>.solver.* overrides

Wall times exclude all I/O: they are measured inside the estimator step.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .config import Config, load_config, parse_config
from .crop import DEFAULT_STATE_BOX, CropParams, crop_model, crop_unknown_input
from .detectability import (
    ExpIossCertificate,
    LyapunovCertificate,
    PairGrid,
    directional_pair_grid,
    random_pair_grid,
    sample_reduced_pairs,
)
from .errors import ConfigError
from .estimators import BASELINE, FIE, FULL_ORDER, SCHEMES, TWO_STAGE, EstimatorConfig, make_estimator, run_estimator
from .model import Box, SystemModel, Trajectory, sample_uniform_noise, simulate
from .shooting import CostSpec
from .solver import CONVERGED, SolverOptions
from .transform import StateTransform, build_affine_transform, crop_transform, reduce_model

NOISELESS = "noiseless"
NOISY = "noisy"


def default_config_path() -> Path:
    return Path(str(resources.files("uise") / "data" / "crop.cfg"))


def default_config() -> Config:
    return load_config(default_config_path())


# --------------------------------------------------------------------------
# certificates <-> config


def lyapunov_from_config(cfg: Config) -> LyapunovCertificate:
    P = cfg.get_matrix("P")
    return LyapunovCertificate(P, cfg.get_float("mu"), cfg.get_float("a1"), cfg.get_float("a2"),
                               cfg.get_float("s_v"), cfg.get_float("s_y"))


def exp_ioss_from_config(cfg: Config) -> ExpIossCertificate:
    return ExpIossCertificate(cfg.get_float("mu"), cfg.get_float("c_x"), cfg.get_float("c_v"),
                              cfg.get_float("c_y"), cfg.get_float("c_gamma"))


def certificate_to_config(cert, prefix: str) -> dict:
    """Key/value pairs under ``prefix`` for either certificate type."""
    if isinstance(cert, LyapunovCertificate):
        names = ("P", "mu", "a1", "a2", "s_v", "s_y")
    else:
        names = ("mu", "c_x", "c_v", "c_y", "c_gamma")
    return {f"{prefix}.{n}": getattr(cert, n) for n in names}


# --------------------------------------------------------------------------
# model setup


@dataclass
class Setup:
    """Everything an experiment needs besides the estimator list."""

    model: SystemModel
    x0: np.ndarray
    controls: np.ndarray
    unknown_input: object  # (K+1, n_w) array or (k, x) -> w rule
    transform: Optional[StateTransform]
    reduced: object
    params: Optional[CropParams] = None


def _box(cfg: Config, prefix: str, default: Optional[Box]) -> Optional[Box]:
    lo, hi = f"{prefix}_lower", f"{prefix}_upper"
    if lo in cfg and hi in cfg:
        return Box(cfg.get_vector(lo), cfg.get_vector(hi))
    return default


def crop_params_from_config(cfg: Config) -> CropParams:
    values = {}
    for f in fields(CropParams):
        key = f"crop.{f.name}"
        if key in cfg:
            values[f.name] = cfg.get_float(key)
    return CropParams(**values)


def build_setup(cfg: Config, steps: int) -> Setup:
    kind = cfg.get_str("model", "crop")
    dom = cfg.section("domain")
    try:
        if kind == "crop":
            p = crop_params_from_config(cfg)
            domain_x = _box(dom, "x", DEFAULT_STATE_BOX)
            w_box = _box(dom, "w", Box([0.965], [1.0]))
            model = crop_model(p, domain_x, dom.get_float("noise_bound", 3e-6), w_box)
            t = crop_transform(p, domain_x)
            reduced = reduce_model(model, t)
            x0 = cfg.get_vector("crop.x0", np.array([0.0013, 0.09, 0.09]))
            controls = np.full((steps, 1), cfg.get_float("crop.u_d", p.u_d))
            return Setup(model, x0, controls, crop_unknown_input(p), t, reduced, p)
        if kind == "linear":
            return _linear_setup(cfg, dom, steps)
    except (ValueError, ArithmeticError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{cfg.source}: cannot build the {kind} model: {exc}") from exc
    raise ConfigError(f"{cfg.source}: unknown model {kind!r} (expected crop or linear)")


def _linear_setup(cfg: Config, dom: Config, steps: int) -> Setup:
    lin = cfg.section("linear")
    A = lin.get_matrix("A")
    C = lin.get_matrix("C")
    n_x, n_y = A.shape[0], C.shape[0]
    B = lin.get_matrix("B", np.zeros((n_x, 0)))
    E = lin.get_matrix("E")
    if B.size == 0:
        B = np.zeros((n_x, 1))
    n_u, n_w = B.shape[1], E.shape[1]

    def f(x, u, w):
        return np.asarray(x) @ A.T + np.asarray(u) @ B.T + np.asarray(w) @ E.T

    def h(x, v):
        return np.asarray(x) @ C.T + np.asarray(v)

    domain_x = _box(dom, "x", None)
    if domain_x is None:
        raise ConfigError(f"{cfg.source}: linear models need domain.x_lower/x_upper")
    nb = dom.get_float("noise_bound", 0.0)
    domain_v = Box.symmetric(np.full(n_y, nb))
    img = Box(*_affine_image(C, domain_x))
    domain_y = Box(img.lower - nb, img.upper + nb)
    model = SystemModel(n_x, n_u, n_w, n_y, n_y, f, h, domain_x, _box(dom, "u", Box.symmetric(np.full(n_u, 1e3))),
                        domain_v, domain_y, _box(dom, "w", None), name="linear")
    t = build_affine_transform(C, E, domain_x)
    reduced = reduce_model(model, t) if t.n_sharp > 0 else None
    x0 = lin.get_vector("x0")
    u = np.broadcast_to(lin.get_vector("u", np.zeros(n_u)), (steps, n_u)).copy()
    w0 = lin.get_vector("w", np.zeros(n_w))
    slope = lin.get_vector("w_slope", np.zeros(n_w))
    w = w0 + np.arange(steps + 1)[:, None] * slope
    return Setup(model, x0, u, w, t, reduced)


def _affine_image(C, box: Box):
    lo = np.where(C > 0, C * box.lower, C * box.upper).sum(axis=1)
    hi = np.where(C > 0, C * box.upper, C * box.lower).sum(axis=1)
    return lo, hi


def certificate_grid(cfg: Config, model: SystemModel) -> PairGrid:
    """Sampling grid of the Lyapunov certificate check declared under ``cert.grid``."""
    g = cfg.section("cert.grid")
    seed = g.get_int("seed", 0)
    controls = g.get_vector("controls", None)
    grid = random_pair_grid(model, g.get_int("n_random", 2000), seed, controls=controls,
                            local_fraction=g.get_float("local_fraction", 0.5),
                            local_radius=g.get_float("local_radius", 0.05))
    if "directions" in g:
        radii = g.get_vector("radii")
        grid = grid.concat(directional_pair_grid(model, g.get_matrix("directions"), radii,
                                                 g.get_int("n_base", 50), seed + 1, controls=controls))
    return grid


def exp_ioss_pairs(cfg: Config, reduced) -> list:
    g = cfg.section("cert.ioss_grid")
    controls = g.get_vector("controls", None)
    dirs = g.get_matrix("directions", None)
    return sample_reduced_pairs(reduced, g.get_int("n_pairs", 40), g.get_int("length", 30), g.get_int("seed", 0),
                                controls=controls, local_radius=g.get_float("local_radius", 0.05), directions=dirs)


# --------------------------------------------------------------------------
# estimators


def solver_options(cfg: Config, name: str) -> SolverOptions:
    base = cfg.section("solver")
    over = cfg.section(f"estimator.{name}.solver")
    kw = {}
    for f in fields(SolverOptions):
        src = over if f.name in over else base
        if f.name not in src:
            continue
        if f.type in ("float", float):
            kw[f.name] = src.get_float(f.name)
        elif f.type in ("int", int):
            kw[f.name] = src.get_int(f.name)
        else:
            kw[f.name] = src.get_str(f.name)
    return SolverOptions(**kw)


def prior_state(cfg: Config, setup: Setup, y0) -> np.ndarray:
    """Initial guess: explicit ``prior.x0`` or the output-based crop rule
    (carbon state from ``y_0``, weights off by ``prior.weight_error``)."""
    pr = cfg.section("prior")
    if "x0" in pr:
        return pr.get_vector("x0")
    rule = pr.get_str("rule", "truth")
    if rule == "truth":
        return setup.x0.copy()
    if rule == "output":
        err = pr.get_vector("weight_error", np.zeros(setup.model.n_x - 1))
        x = setup.x0.copy()
        x[0] = y0[0]
        x[1:] = x[1:] * (1.0 + err)
        return setup.model.domain_x.project(x)
    raise ConfigError(f"{cfg.source}: unknown prior.rule {rule!r}")


def estimator_config(cfg: Config, name: str, setup: Setup, x0_prior) -> EstimatorConfig:
    scheme = cfg.get_str(f"estimator.{name}.scheme", name)
    if scheme not in SCHEMES:
        raise ConfigError(f"{cfg.source}: unknown estimator scheme {scheme!r}")
    est = cfg.section("estimator")
    horizon = est.get_int(f"{name}.horizon", est.get_int("horizon", 30))
    pf = est.get_float("penalty_factor", 1e6)
    w_box = setup.model.domain_w if est.get_bool("w_box", True) and setup.model.w_bounded else None
    try:
        if scheme in (FULL_ORDER, FIE):
            cert = lyapunov_from_config(cfg.section("cert.lyapunov"))
            factory = CostSpec.full_order if scheme == FULL_ORDER else CostSpec.fie
            cost = factory(cert, w_box=w_box, penalty_factor=pf)
        elif scheme == TWO_STAGE:
            if setup.reduced is None:
                raise ConfigError(f"{cfg.source}: the two-stage estimator needs a nontrivial reduced model")
            cost = CostSpec.two_stage(exp_ioss_from_config(cfg.section("cert.exp_ioss")), penalty_factor=pf)
        else:
            b = cfg.section("baseline")
            cost = CostSpec.baseline(b.get_float("mu"), b.get_float("p1"), b.get_float("q_w"), b.get_float("q_v"),
                                     b.get_float("q_y"), w_box=w_box, penalty_factor=pf)
        return EstimatorConfig(scheme, horizon, x0_prior, cost, solver=solver_options(cfg, name),
                               project=est.get_bool("project", True), name=name)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{cfg.source}: estimator {name!r}: {exc}") from exc


# --------------------------------------------------------------------------
# experiment


@dataclass
class ExperimentConfig:
    config: Config
    steps: int = 600
    estimators: list = field(default_factory=lambda: [FULL_ORDER, TWO_STAGE, BASELINE])
    noise: str = NOISELESS
    seed: int = 0
    out_dir: Path = Path("out")
    max_failure_fraction: float = 0.1

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("run.steps must be nonnegative")
        if self.noise not in (NOISELESS, NOISY):
            raise ConfigError(f"run.noise must be '{NOISELESS}' or '{NOISY}', got {self.noise!r}")
        self.out_dir = Path(self.out_dir)

    @classmethod
    def from_config(cls, cfg: Config, **overrides) -> "ExperimentConfig":
        run = cfg.section("run")
        kw = dict(
            config=cfg,
            steps=run.get_int("steps", 600),
            estimators=run.get_list("estimators", [FULL_ORDER, TWO_STAGE, BASELINE]),
            noise=run.get_str("noise", NOISELESS),
            seed=run.get_int("seed", 0),
            out_dir=Path(run.get_str("out", "out")),
            max_failure_fraction=run.get_float("max_failure_fraction", 0.1),
        )
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)

    def with_noise(self, noise: str) -> "ExperimentConfig":
        return ExperimentConfig(self.config, self.steps, list(self.estimators), noise, self.seed, self.out_dir,
                                self.max_failure_fraction)


def load_experiment(path=None, **overrides) -> ExperimentConfig:
    cfg = default_config() if path is None else load_config(path)
    return ExperimentConfig.from_config(cfg, **overrides)


def simulate_truth(exp: ExperimentConfig, setup: Optional[Setup] = None) -> Trajectory:
    setup = build_setup(exp.config, exp.steps) if setup is None else setup
    K = exp.steps
    if exp.noise == NOISY:
        v = sample_uniform_noise(setup.model.domain_v, K + 1, exp.seed)
    else:
        v = np.zeros((K + 1, setup.model.n_v))
    return simulate(setup.model, setup.x0, setup.controls, setup.unknown_input, v)


@dataclass
class RunArtifacts:
    out_dir: Path
    truth_csv: Path
    estimate_csvs: dict
    errors_csv: Path
    summary_json: Path
    summary: dict

    def failure_fraction(self) -> float:
        est = self.summary["estimators"]
        if not est:
            return 0.0
        return max(e["solver_failures"] / max(1, e["steps"]) for e in est.values())


def measurement_hash(outputs) -> str:
    return hashlib.sha256(np.ascontiguousarray(outputs, dtype=float).tobytes()).hexdigest()


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    return repr(float(x))


def truth_csv_text(model: SystemModel, tr: Trajectory) -> str:
    header = (["k", *model.state_names, *model.control_names, *model.input_names, *model.noise_names,
               *model.output_names])
    rows = []
    K = tr.length
    for k in range(K + 1):
        u = [_fmt(c) for c in tr.controls[k]] if k < K else [""] * model.n_u
        rows.append([k, *map(_fmt, tr.states[k]), *u, *map(_fmt, tr.unknown_inputs[k]), *map(_fmt, tr.noises[k]),
                     *map(_fmt, tr.outputs[k])])
    return _csv_text(header, rows)


def estimates_csv_text(model: SystemModel, estimates) -> str:
    header = ["k", *(f"x_hat_{n}" for n in model.state_names), "cost", "status", "wall_time_ms"]
    rows = [[e.k, *map(_fmt, e.x_hat), _fmt(e.cost), e.status, _fmt(e.wall_time * 1e3)] for e in estimates]
    return _csv_text(header, rows)


def error_statistics(states, x_hat, wall_ms, statuses, state_names) -> dict:
    """Summary numbers of one estimator, recomputable from its CSVs."""
    err = np.asarray(x_hat) - np.asarray(states)
    norm = np.linalg.norm(err, axis=1)
    n = norm.size
    tail = max(1, n // 10)
    wall = np.asarray(wall_ms, dtype=float)
    return {
        "steps": int(n),
        "final_error_norm": float(norm[-1]),
        "max_error_norm": float(norm.max()),
        "mean_error_norm": float(norm.mean()),
        "last10_max_error_norm": float(norm[-tail:].max()),
        "last10_max_abs_error": {s: float(np.abs(err[-tail:, i]).max()) for i, s in enumerate(state_names)},
        "wall_time_ms": {"mean": float(wall.mean()), "max": float(wall.max()), "total": float(wall.sum())},
        "solver_failures": int(sum(s != CONVERGED for s in statuses)),
        "status_counts": {s: int(c) for s, c in zip(*np.unique(np.asarray(statuses, dtype=str), return_counts=True))},
    }


def run_estimators(exp: ExperimentConfig, setup: Setup, tr: Trajectory) -> dict:
    """Run every configured estimator on the same measurement stream."""
    x0_prior = prior_state(exp.config, setup, tr.outputs[0])
    configs = {name: estimator_config(exp.config, name, setup, x0_prior) for name in exp.estimators}
    results = {}
    for name, ec in configs.items():
        st = make_estimator(setup.model, ec, setup.reduced)
        results[name] = run_estimator(st, tr.outputs, tr.controls)
    return results


def run_experiment(exp: ExperimentConfig) -> RunArtifacts:
    """Simulate the truth once, run all estimators on it and write artifacts.

    Config problems surface as :class:`ConfigError` before any estimation.
    """
    setup = build_setup(exp.config, exp.steps)
    x_probe = prior_state(exp.config, setup, setup.model.h(setup.x0, np.zeros(setup.model.n_v)))
    for name in exp.estimators:
        estimator_config(exp.config, name, setup, setup.model.domain_x.project(x_probe))
    tr = simulate_truth(exp, setup)
    results = run_estimators(exp, setup, tr)
    return write_artifacts(exp, setup.model, tr, results)


def write_artifacts(exp: ExperimentConfig, model: SystemModel, tr: Trajectory, results: dict) -> RunArtifacts:
    out = exp.out_dir
    truth = out / "truth.csv"
    _atomic_write(truth, truth_csv_text(model, tr))
    est_paths, stats = {}, {}
    err_cols, err_header = [], []
    for name, ests in results.items():
        path = out / f"estimates_{name}.csv"
        _atomic_write(path, estimates_csv_text(model, ests))
        est_paths[name] = path
        x_hat = np.array([e.x_hat for e in ests])
        stats[name] = error_statistics(tr.states, x_hat, [e.wall_time * 1e3 for e in ests], [e.status for e in ests],
                                       model.state_names)
        err = x_hat - tr.states
        err_header += [f"{name}_norm", *(f"{name}_{s}" for s in model.state_names)]
        err_cols += [np.linalg.norm(err, axis=1), *err.T]
    errors = out / "errors.csv"
    rows = [[k, *(_fmt(c[k]) for c in err_cols)] for k in range(tr.length + 1)]
    _atomic_write(errors, _csv_text(["k", *err_header], rows))
    summary = {
        "model": model.name,
        "steps": exp.steps,
        "noise": exp.noise,
        "seed": exp.seed,
        "measurement_sha256": measurement_hash(tr.outputs),
        "states_out_of_domain": len(tr.out_of_domain),
        "estimators": stats,
    }
    path = out / "summary.json"
    _atomic_write(path, json.dumps(summary, indent=2) + "\n")
    return RunArtifacts(out, truth, est_paths, errors, path, summary)


# --------------------------------------------------------------------------
# timing benchmark


def bench_timing(exp: ExperimentConfig, repeats: int = 5, regimes=(NOISELESS, NOISY)) -> dict:
    """Maximal over steps of the mean over repeats of the per-step wall time.

    Returns ``{regime: {estimator: t_max_ms}}``.  Every repeat re-runs the
    estimators sequentially on the same truth.
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    table = {}
    for regime in regimes:
        e = exp.with_noise(regime)
        setup = build_setup(e.config, e.steps)
        tr = simulate_truth(e, setup)
        acc = {}
        for _ in range(repeats):
            for name, ests in run_estimators(e, setup, tr).items():
                acc.setdefault(name, []).append([x.wall_time * 1e3 for x in ests])
        table[regime] = {name: float(np.max(np.mean(np.array(t), axis=0))) for name, t in acc.items()}
    return table


def bench_table_text(table: dict, fmt: str = "csv") -> str:
    names = sorted({n for row in table.values() for n in row}, key=_order_key)
    if fmt == "csv":
        return _csv_text(["regime", *names], [[r, *(_fmt(row.get(n, float("nan"))) for n in names)]
                                              for r, row in table.items()])
    lines = ["| regime | " + " | ".join(names) + " |", "|---" * (len(names) + 1) + "|"]
    for r, row in table.items():
        lines.append(f"| {r} | " + " | ".join(f"{row[n]:.1f}" if n in row else "" for n in names) + " |")
    return "\n".join(lines) + "\n"


def _order_key(name):
    order = {BASELINE: 0, FULL_ORDER: 1, TWO_STAGE: 2, FIE: 3}
    return (order.get(name, 9), name)


def write_bench(table: dict, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    csv_path, md_path = out / "bench.csv", out / "bench.md"
    _atomic_write(csv_path, bench_table_text(table, "csv"))
    _atomic_write(md_path, bench_table_text(table, "md"))
    return csv_path, md_path


# --------------------------------------------------------------------------
# plot data


def _read_csv(path: Path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise FileNotFoundError(f"missing artifact file {path}: {exc}") from exc


def emit_plot_data(out_dir, state: Optional[str] = None) -> Path:
    """Long-format ``k,series,value`` data behind the three figure analogs.

    Series: ``truth_<state>``, ``w`` and, per estimator, ``<name>_<state>``
    plus ``<name>_error_norm``.  ``state`` defaults to ``x_d1`` when present,
    otherwise the first state.
    """
    out = Path(out_dir)
    summary_path = out / "summary.json"
    try:
        summary = json.loads(summary_path.read_text())
    except OSError as exc:
        raise FileNotFoundError(f"missing artifact file {summary_path}: {exc}") from exc
    truth = _read_csv(out / "truth.csv")
    cols = list(truth[0].keys()) if truth else []
    state_cols = [c for c in cols if f"x_hat_{c}" in _estimate_header(out, summary)] or cols[1:2]
    if state is None:
        state = "x_d1" if "x_d1" in cols else state_cols[0]
    w_col = "w" if "w" in cols else next(c for c in cols if c.startswith("w"))
    rows = [[r["k"], f"truth_{state}", r[state]] for r in truth]
    rows += [[r["k"], "w", r[w_col]] for r in truth]
    x_true = {r["k"]: np.array([float(r[c]) for c in state_cols]) for r in truth}
    for name in summary["estimators"]:
        est = _read_csv(out / f"estimates_{name}.csv")
        rows += [[r["k"], f"{name}_{state}", r[f"x_hat_{state}"]] for r in est]
        for r in est:
            x_hat = np.array([float(r[f"x_hat_{c}"]) for c in state_cols])
            rows.append([r["k"], f"{name}_error_norm", _fmt(np.linalg.norm(x_hat - x_true[r["k"]]))])
    path = out / "plot_data.csv"
    _atomic_write(path, _csv_text(["k", "series", "value"], rows))
    return path


def _estimate_header(out: Path, summary: dict) -> list:
    for name in summary["estimators"]:
        with open(out / f"estimates_{name}.csv", newline="") as fh:
            return next(csv.reader(fh))
    return []


def config_text_with(cfg: Config, extra: dict) -> Config:
    """Copy of ``cfg`` with ``extra`` keys replaced (values formatted)."""
    new = parse_config(cfg.to_text(), cfg.source)
    for k, v in extra.items():
        new.set(k, v)
    return new
