"""Manufactured test cases, the convergence driver and report output."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.integrate import quad

from .assembly import Discretization, Method, QuadratureConfig
from .errors import (
    ErrorBundle,
    UndefinedValueError,
    eoc,
    f_distance_error,
    jump_functional,
    pressure_error,
)
from .mesh import mesh_hierarchy
from .nfunction import NFunctionRE
from .solver import SolverConfig, SolverError, prolong_cr, relaxed_kacanov

ROT = np.array([[0.0, 1.0], [-1.0, 0.0]])  # J x = (x2, -x1)


class RotationalPower:
    """u(x) = |x|^alpha (x2, -x1) with closed-form derivatives.

    Writing s = rho^alpha, grad u = s J + (s'/rho) (J x) (x) x and, for
    A(Q) = (eps + |Q|)^(r-2) Q with h(rho) = (eps + c rho^alpha)^(r-2),

        div A(grad u) = [(1 + alpha) h' rho^(alpha-1)
                         + alpha (alpha + 2) h rho^(alpha-2)] J x,

    where c = sqrt((1 + alpha)^2 + 1) is |grad u| / rho^alpha.
    """

    def __init__(self, alpha: float):
        self.alpha = float(alpha)
        self.c = math.sqrt((1.0 + alpha) ** 2 + 1.0)

    def u(self, x):
        x = np.asarray(x, float)
        rho = np.hypot(x[:, 0], x[:, 1])
        return rho[:, None] ** self.alpha * (x @ ROT.T)

    def grad_u(self, x):
        x = np.asarray(x, float)
        a = self.alpha
        rho = np.hypot(x[:, 0], x[:, 1])
        safe = np.where(rho > 0, rho, 1.0)
        s = np.where(rho > 0, safe**a, 0.0)
        q = np.where(rho > 0, a * safe ** (a - 2.0), 0.0)
        Jx = x @ ROT.T
        return s[:, None, None] * ROT + q[:, None, None] * Jx[:, :, None] * x[:, None, :]

    def minus_div_stress(self, nf: NFunctionRE, x):
        x = np.asarray(x, float)
        a, r, eps = self.alpha, nf.r, nf.epsilon
        rho = np.hypot(x[:, 0], x[:, 1])
        t = self.c * rho**a
        h = (eps + t) ** (r - 2.0)
        dh = (r - 2.0) * (eps + t) ** (r - 3.0) * self.c * a * rho ** (a - 1.0)
        coef = (1.0 + a) * dh * rho ** (a - 1.0) + a * (a + 2.0) * h * rho ** (a - 2.0)
        return -coef[:, None] * (x @ ROT.T)


@dataclass
class TestCase:
    """Manufactured solution on a square with declared singular set."""

    __test__ = False  # keep pytest from collecting this class

    id: str
    r: float
    lower: tuple
    upper: tuple
    alpha: float
    params: dict
    singular_points: tuple = ((0.0, 0.0),)
    cut_lines: tuple = ()

    def __post_init__(self):
        self._u = RotationalPower(self.alpha)

    def u(self, x):
        return self._u.u(x)

    def grad_u(self, x):
        return self._u.grad_u(x)

    def p(self, x):
        x = np.asarray(x, float)
        if self.id == "PowerFunctions":
            eta, gamma, mean = self.params["eta"], self.params["gamma"], self.params["p_mean"]
            rho = np.hypot(x[:, 0], x[:, 1])
            return eta * (rho**gamma - mean)
        c, left, right = self.params["jump_at"], self.params["p_left"], self.params["p_right"]
        return np.where(x[:, 0] < c, left, right)

    def grad_p_smooth(self, x):
        x = np.asarray(x, float)
        if self.id == "PowerFunctions":
            eta, gamma = self.params["eta"], self.params["gamma"]
            rho = np.hypot(x[:, 0], x[:, 1])
            return (eta * gamma * rho ** (gamma - 2.0))[:, None] * x
        return np.zeros_like(x)

    def f_smooth(self, nf: NFunctionRE, x):
        """-div A(grad u) + grad p away from pressure jumps."""
        return self._u.minus_div_stress(nf, x) + self.grad_p_smooth(x)

    def pressure_jumps(self):
        if self.id == "PowerFunctions":
            return []
        return [(self.params["jump_at"], self.params["p_right"] - self.params["p_left"])]


def _rho_power_mean(gamma: float) -> float:
    """Mean of |x|^gamma over (-1, 1)^2 by symmetry over one octant."""
    val, _ = quad(lambda th: math.cos(th) ** (-(gamma + 2.0)), 0.0, math.pi / 4, epsabs=0, epsrel=1e-13)
    return 8.0 / (gamma + 2.0) * val / 4.0


def make_testcase(id: str, r: float) -> TestCase:
    """Test case 1 (``PowerFunctions``) or 2 (``JumpingPressure``)."""
    if r <= 1:
        raise ValueError("r must exceed 1")
    key = str(id).strip()
    if key in ("1", "PowerFunctions", "power"):
        gamma = 2.0 / r - 1.0 + 0.01
        eta = 0.01 if r < 2 else 1.0
        return TestCase(
            "PowerFunctions", r, (-1.0, -1.0), (1.0, 1.0), 0.01,
            {"gamma": gamma, "eta": eta, "p_mean": _rho_power_mean(gamma)},
        )
    if key in ("2", "JumpingPressure", "jump"):
        return TestCase(
            "JumpingPressure", r, (0.0, 0.0), (1.0, 1.0), 0.5,
            {"jump_at": 2.0 / 3.0, "p_left": -1.5, "p_right": 3.0},
            cut_lines=(2.0 / 3.0,),
        )
    raise ValueError(f"unknown test case {id!r}")


# configuration -------------------------------------------------------------------

class ConfigError(ValueError):
    """Invalid experiment configuration."""


CSV_COLUMNS = (
    "level", "dofs", "h_max",
    "err_F_broken", "eoc_F_broken",
    "err_F_smoothed", "eoc_F_smoothed",
    "err_p", "eoc_p",
    "outer_iters", "inner_iters_total", "wall_time",
)


@dataclass
class ExperimentConfig:
    """Everything that affects the numbers of one convergence study.

    ``error_quad_degree`` and ``error_grading_levels`` override the
    quadrature of the error functionals only (``None`` means: same as the
    load).  With ``timings=False`` the wall-time column is written as 0 so
    that reruns give byte-identical CSV files.
    """

    method: int = 1
    r: float = 2.0
    epsilon: float = 0.0
    testcase: str = "PowerFunctions"
    max_level: int = 6
    tol_nonlinear: float = 1e-8
    tol_linear: float = 1e-10
    max_outer: int = 200
    linear_solver: str = "minres"
    quad_degree: int = 8
    grading_levels: int = 12
    error_quad_degree: int | None = None
    error_grading_levels: int | None = None
    nested: bool = True
    timings: bool = True
    plots: bool = False
    out_dir: str | None = None
    seed: int = 0

    def __post_init__(self):
        try:
            self.method = int(Method.parse(self.method))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.r = float(self.r)
        self.epsilon = float(self.epsilon)
        if not self.r > 1.0:
            raise ConfigError(f"r must exceed 1, got {self.r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")
        if int(self.max_level) < 1:
            raise ConfigError(f"max_level must be at least 1, got {self.max_level}")
        self.max_level = int(self.max_level)
        try:
            self.testcase = make_testcase(self.testcase, self.r).id
            self.solver_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            tol_nonlinear=self.tol_nonlinear,
            max_outer=self.max_outer,
            tol_linear=self.tol_linear,
            linear_solver=self.linear_solver,
        )

    def load_quadrature(self) -> QuadratureConfig:
        return QuadratureConfig(self.quad_degree, self.grading_levels)

    def error_quadrature(self) -> QuadratureConfig:
        return QuadratureConfig(
            self.error_quad_degree if self.error_quad_degree is not None else self.quad_degree,
            self.error_grading_levels if self.error_grading_levels is not None else self.grading_levels,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        """Read ``key = value`` lines; ``#`` starts a comment."""
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_mapping(_parse_key_values(text, path))

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, known[key].type)
        return cls(**kwargs)


def _parse_key_values(text: str, source="config") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            key, _, value = line.partition(":")
            if not _:
                raise ConfigError(f"{source}:{n}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def _coerce(key, raw, annotation):
    if not isinstance(raw, str):
        return raw
    kind = str(annotation)
    try:
        if raw.lower() in ("none", "null", "") and "None" in kind:
            return None
        if kind.startswith("bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


# convergence study -----------------------------------------------------------------

@dataclass
class LevelReport:
    level: int
    errors: ErrorBundle
    outer_iters: int
    inner_iters_total: int
    wall_time: float
    kacanov_log: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["errors"] = self.errors.to_dict()
        return d

    @classmethod
    def from_dict(cls, d) -> "LevelReport":
        d = dict(d)
        d["errors"] = ErrorBundle(**d["errors"])
        return cls(**d)


_ERROR_COLUMNS = ("err_F_broken", "err_F_smoothed", "err_p")


@dataclass
class EocTable:
    """Per-level errors and EOCs of one run, with the config echo."""

    config: dict
    rows: list = field(default_factory=list)
    failure: str | None = None

    def errors(self, name: str) -> list[float]:
        return [getattr(row.errors, name) for row in self.rows]

    def eocs(self, name: str) -> list[float | None]:
        """EOC per level (None on level 0 or for undefined values)."""
        vals = self.errors(name)
        out: list[float | None] = [None]
        for a, b in zip(vals[:-1], vals[1:]):
            try:
                out.append(eoc(a, b))
            except UndefinedValueError:
                out.append(None)
        return out[: len(vals)]

    #: velocity error behind EOC_vel: the broken F-distance, which the
    #: a priori bounds of all three methods control
    velocity_error_name = "err_F_broken"

    def velocity_eocs(self):
        return self.eocs(self.velocity_error_name)

    def csv_rows(self):
        eocs = {name: self.eocs(name) for name in _ERROR_COLUMNS}
        for i, row in enumerate(self.rows):
            e = row.errors
            yield [
                row.level, e.dofs, e.h_max,
                e.err_F_broken, eocs["err_F_broken"][i],
                e.err_F_smoothed, eocs["err_F_smoothed"][i],
                e.err_p, eocs["err_p"][i],
                row.outer_iters, row.inner_iters_total, row.wall_time,
            ]

    def to_csv(self) -> str:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(v)
            return str(v)

        lines = [",".join(CSV_COLUMNS)]
        lines += [",".join(fmt(v) for v in row) for row in self.csv_rows()]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "failure": self.failure,
            "levels": [row.to_dict() for row in self.rows],
            "eoc": {name: self.eocs(name) for name in _ERROR_COLUMNS},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EocTable":
        d = json.loads(text)
        return cls(d["config"], [LevelReport.from_dict(r) for r in d["levels"]], d.get("failure"))


class ConvergenceFailure(RuntimeError):
    """Solver failure during a study; ``table`` holds the completed levels."""

    def __init__(self, message, table: EocTable, level: int):
        super().__init__(message)
        self.table = table
        self.level = level


def level_errors(config: ExperimentConfig, tc: TestCase, nf: NFunctionRE, disc: Discretization, u, p) -> ErrorBundle:
    """All error functionals for one discrete solution."""
    mesh = disc.mesh
    quad = config.error_quadrature()
    sym = disc.method.symmetric
    sing = tc.singular_points
    eb = f_distance_error(nf, tc.grad_u, mesh, u, symmetric=sym, quad=quad, singular_points=sing)
    es = f_distance_error(
        nf, tc.grad_u, mesh, u, smoothed=True, symmetric=sym, smoother=disc.smoother,
        quad=quad, singular_points=sing,
    )
    p = np.asarray(p, float)
    p = p - mesh.areas @ p / mesh.areas.sum()
    ep = pressure_error(nf.r_conj, tc.p, mesh, p, quad, sing, tc.cut_lines)
    J = jump_functional(nf, mesh, u, boundary_data=tc.u)
    return ErrorBundle(eb, es, ep, J, disc.n_dofs + mesh.n_elements, mesh.h_max)


def run_convergence(config: ExperimentConfig, progress=None) -> EocTable:
    """Solve on levels 0..max_level and collect errors and EOCs.

    Each level starts from the prolongated solution of the previous one
    (``config.nested``).  A solver failure raises
    :class:`ConvergenceFailure` carrying the partial table; when
    ``config.out_dir`` is set the partial reports are written first.
    """
    tc = make_testcase(config.testcase, config.r)
    nf = NFunctionRE(config.r, config.epsilon)
    table = EocTable(config.to_dict())
    solver = config.solver_config()
    qload = config.load_quadrature()
    prev_mesh, prev_u = None, None
    for mesh in mesh_hierarchy(config.max_level, tc.lower, tc.upper):
        t0 = time.perf_counter()
        try:
            disc = Discretization(mesh, config.method)
            load = disc.load(tc, nf, qload)
            lift = disc.lifting(tc, qload)
            u0 = prolong_cr(prev_mesh, mesh, prev_u) if (config.nested and prev_u is not None) else None
            state = relaxed_kacanov(disc, nf, load, lift, solver, u0=u0)
        except SolverError as exc:
            table.failure = f"level {mesh.level}: {exc}"
            if config.out_dir:
                emit_reports(table, config.out_dir)
            raise ConvergenceFailure(table.failure, table, mesh.level) from exc
        errors = level_errors(config, tc, nf, disc, state.u, state.p)
        wall = time.perf_counter() - t0 if config.timings else 0.0
        table.rows.append(LevelReport(
            mesh.level, errors, state.outer_iterations, state.inner_iterations, wall, state.log_rows(),
        ))
        if progress is not None:
            progress(table.rows[-1])
        prev_mesh, prev_u = mesh, state.u
    if config.out_dir:
        emit_reports(table, config.out_dir)
    return table


# reports -----------------------------------------------------------------------------

def report_paths(out_dir, stem: str = "convergence") -> dict:
    out = Path(out_dir)
    return {
        "csv": out / f"{stem}.csv",
        "json": out / f"{stem}.json",
        "error_svg": out / f"{stem}_errors.svg",
        "eoc_svg": out / f"{stem}_eoc.svg",
    }


def emit_reports(table: EocTable, out_dir, plots: bool | None = None, stem: str = "convergence") -> dict:
    """Write CSV, JSON and (optionally) SVG plots; returns the paths."""
    paths = report_paths(out_dir, stem)
    if plots is None:
        plots = bool(table.config.get("plots", False))
    try:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        paths["csv"].write_text(table.to_csv())
        paths["json"].write_text(table.to_json())
        if plots:
            _plot(table, paths["error_svg"], paths["eoc_svg"])
    except OSError as exc:
        raise OSError(f"writing reports to {out_dir}: {exc}") from exc
    if not plots:
        paths.pop("error_svg")
        paths.pop("eoc_svg")
    return paths


def _plot(table: EocTable, error_path, eoc_path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    levels = [row.level for row in table.rows]
    labels = {"err_F_broken": "F-distance (broken)", "err_F_smoothed": "F-distance (smoothed)", "err_p": "pressure"}
    for path, kind in ((error_path, "err"), (eoc_path, "eoc")):
        fig, ax = plt.subplots(figsize=(5, 4))
        for name, label in labels.items():
            if kind == "err":
                ax.semilogy(levels, table.errors(name), "o-", label=label)
            else:
                vals = table.eocs(name)
                ax.plot(levels[1:], [np.nan if v is None else v for v in vals[1:]], "o-", label=label)
        ax.set_xlabel("level k")
        ax.set_ylabel("error" if kind == "err" else "EOC_k")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
