"""End-to-end convergence experiments for the total-variation model.

Four default experiment families reproduce the published convergence-rate
studies at desk scale:

* ``6.1`` two rotated, shifted touching-ball phantoms on uniform meshes
  (Crouzeix-Raviart, rate about h^(1/2) despite the non-Lipschitz dual),
* ``6.2`` the one-dimensional sign phantom on beta-graded grids
  (P1, rate about h^(beta/2)),
* ``6.3`` the single-disc phantom on meshes graded towards the jump circle
  (nearly linear rate for Crouzeix-Raviart),
* ``6.4`` the same phantom with estimator-driven adaptive refinement.

Every run emits one row per refinement level into a deterministic csv;
wall-clock times are reported separately so that identical configurations
produce bit-identical files.
"""

import time
from dataclasses import dataclass, replace

import numpy as np

from .estimator import (
    AdaptiveLoopConfig,
    adaptive_loop,
    estimate_total,
    reconstruct_dual,
)
from .fem import CR, P1, l2_error
from .mesh import (
    Circle,
    grade_towards_set,
    grading_strength,
    make_graded_interval_mesh,
    make_square_mesh,
    mesh_stats,
    red_refine,
    rgb_close,
)
from .rof import (
    RofProblem,
    exact_sign_1d,
    exact_single_disc,
    exact_two_disc,
)
from .solver import FlowConfig, FlowSystem, run_flow

EXAMPLES = ("6.1", "6.2", "6.3", "6.4")

_EPS_RULES = ("h^1", "h^2", "h^beta")
_STOP_RULES = ("h/20", "h^2/20", "h^beta+1/20")


@dataclass(frozen=True)
class ExperimentSpec:
    example: str
    space: str = CR
    levels: int = 6
    beta: float = 1.0
    alpha: float = 10.0
    r: float = 0.5
    epsilon_rule: str = "h^2"
    eps_stop_rule: str = "h^2/20"
    rotate_deg: float = 0.0
    shift: tuple = (0.0, 0.0)
    dirichlet: str = "exact-trace"
    initial_cells: int = 2
    marking_fraction: float = 0.5
    out: str = None

    def __post_init__(self):
        if self.example not in EXAMPLES + ("custom",):
            raise ValueError(f"unknown example {self.example!r}")
        if self.space not in (P1, CR):
            raise ValueError("space must be p1 or cr")
        if self.levels < 2:
            raise ValueError("need at least two levels")
        if self.dirichlet not in ("zero", "exact-trace"):
            raise ValueError("dirichlet must be zero or exact-trace")


def default_spec(example, **overrides):
    """Desk-scale defaults reproducing the published figures."""
    base = {
        "6.1": dict(example="6.1", space=CR, levels=6, r=0.4, alpha=10.0,
                    epsilon_rule="h^1", eps_stop_rule="h/20",
                    rotate_deg=70.0, shift=(0.1, 0.0), initial_cells=4),
        "6.2": dict(example="6.2", space=P1, levels=7, beta=1.0, alpha=10.0,
                    r=2.0, epsilon_rule="h^beta", eps_stop_rule="h/20"),
        "6.3": dict(example="6.3", space=CR, levels=13, r=0.5, alpha=10.0,
                    epsilon_rule="h^2", eps_stop_rule="h^2/20",
                    dirichlet="zero", initial_cells=2),
        "6.4": dict(example="6.4", space=CR, levels=18, r=0.5, alpha=10.0,
                    epsilon_rule="h^2", eps_stop_rule="h^2/20",
                    dirichlet="zero", initial_cells=2),
    }[example]
    base.update(overrides)
    if base["example"] == "6.2" and base.get("beta", 1.0) > 1.0 \
            and "eps_stop_rule" not in overrides:
        base["eps_stop_rule"] = "h^beta+1/20"
    return ExperimentSpec(**base)


def rule_value(rule, h, beta=1.0):
    """Evaluate a mesh-size rule string at average mesh size h."""
    table = {
        "h": h,
        "h^1": h,
        "h^2": h * h,
        "h^beta": h ** beta,
        "h/20": h / 20.0,
        "h^2/20": h * h / 20.0,
        "h^beta+1/20": h ** (beta + 1.0) / 20.0,
    }
    if rule in table:
        return table[rule]
    if rule.startswith("fixed:"):
        return float(rule.split(":", 1)[1])
    raise ValueError(f"unknown rule {rule!r}")


@dataclass
class RunRecord:
    level: int
    n_vertices: int
    n_cells: int
    n_sides: int
    h_min: float
    h_avg: float
    error_l2: float
    error_pi_l2: float
    eta_total: float = float("nan")
    osc_total: float = float("nan")
    e_est: float = float("nan")
    beta_emergent: float = float("nan")
    eoc: float = float("nan")
    wall_time: float = 0.0
    error_l2_p1: float = float("nan")
    error_l2_cr: float = float("nan")


def eoc(errors, h_values):
    """Experimental orders of convergence between consecutive levels."""
    errors = np.asarray(errors, dtype=float)
    h_values = np.asarray(h_values, dtype=float)
    if len(errors) != len(h_values) or len(errors) < 2:
        raise ValueError("need matching lists with at least two entries")
    if np.any(errors <= 0) or np.any(h_values <= 0):
        raise ValueError("errors and mesh sizes must be positive")
    return list(np.log(errors[:-1] / errors[1:])
                / np.log(h_values[:-1] / h_values[1:]))


def final_eoc(records, window=3):
    """Least-squares convergence rate over the last levels (vs h_avg)."""
    recs = [r for r in records if np.isfinite(r.error_l2) and r.error_l2 > 0]
    recs = recs[-window:]
    if len(recs) < 2:
        return float("nan")
    x = np.log([r.h_avg for r in recs])
    y = np.log([r.error_l2 for r in recs])
    return float(np.polyfit(x, y, 1)[0])


def _problem_and_solution(spec):
    from .rof import DataFunction
    if spec.example == "6.1":
        sol = exact_two_disc(spec.r, spec.alpha, rotate_deg=spec.rotate_deg,
                             shift=spec.shift, domain_half_width=1.0)
        data = DataFunction.two_balls(spec.r, rotate_deg=spec.rotate_deg,
                                      shift=spec.shift)
    elif spec.example == "6.2":
        sol = exact_sign_1d(spec.alpha)
        data = DataFunction.sign_1d()
    else:
        sol = exact_single_disc(spec.r, spec.alpha)
        data = DataFunction.char_ball((0.0, 0.0), spec.r)
    dirichlet = None if spec.dirichlet == "zero" else sol.u
    problem = RofProblem(alpha=spec.alpha, epsilon=1.0, data=data,
                         dirichlet=dirichlet)
    return problem, sol


def _solve_on_mesh(problem, mesh, spaces, eps, eps_stop):
    problem_l = problem.with_epsilon(eps)
    cfg = FlowConfig(eps_stop=eps_stop)
    out = {}
    for space in spaces:
        system = FlowSystem(problem_l, mesh, space)
        out[space] = run_flow(system.initial_iterate(), problem_l, cfg,
                              system=system)
    return problem_l, out


def _record_from_level(level, mesh, stats_seq, sol, states, problem_l,
                       spec, wall, with_estimator=True, grading_window=4):
    stats = stats_seq[-1]
    errors = {sp: l2_error(st.u, sol.u) for sp, st in states.items()}
    err = errors[spec.space]
    err_pi = l2_error(states[spec.space].u, sol.u, projected=True)
    # the gap estimator pairs the cr reconstruction with a p1 iterate
    eta_total = osc_total = e_est = float("nan")
    if with_estimator and CR in states and P1 in states and mesh.dim == 2:
        z = reconstruct_dual(states[CR].u, problem_l)
        u_ind = states[P1].u
        bd = estimate_total(u_ind, z, problem_l)
        eta_total = np.sqrt(max(bd.eta_sq_total, 0.0))
        osc_total = bd.osc_total
        e_est = bd.estimate
    beta_em = float("nan")
    if len(stats_seq) >= 2:
        try:
            beta_em = grading_strength(stats_seq, window=grading_window)
        except ValueError:
            pass
    return RunRecord(
        level=level, n_vertices=stats.n_vertices, n_cells=stats.n_cells,
        n_sides=len(mesh.sides), h_min=stats.h_min, h_avg=stats.h_avg,
        error_l2=err, error_pi_l2=err_pi,
        eta_total=float(eta_total), osc_total=float(osc_total),
        e_est=float(e_est), beta_emergent=beta_em, wall_time=wall,
        error_l2_p1=errors.get(P1, float("nan")),
        error_l2_cr=errors.get(CR, float("nan")))


def _fill_eoc(records):
    for prev, cur in zip(records[:-1], records[1:]):
        if prev.error_l2 > 0 and cur.error_l2 > 0:
            cur.eoc = float(np.log(prev.error_l2 / cur.error_l2)
                            / np.log(prev.h_avg / cur.h_avg))
    return records


def _push(records, rec, progress):
    if records and rec.error_l2 > 0 and records[-1].error_l2 > 0:
        rec.eoc = float(np.log(records[-1].error_l2 / rec.error_l2)
                        / np.log(records[-1].h_avg / rec.h_avg))
    records.append(rec)
    if progress:
        progress(rec)


def run_experiment(spec, progress=None, artifacts=None):
    """Run one experiment family; returns one record per refinement level.

    When a dict is passed as ``artifacts`` the final mesh, iterate and
    problem are stored in it (for rendering figures without re-solving).
    """
    problem, sol = _problem_and_solution(spec)
    records = []
    stats_seq = []

    def keep(mesh, u, problem_l):
        if artifacts is not None:
            artifacts.update(mesh=mesh, u=u, problem=problem_l, solution=sol)

    if spec.example == "6.2":
        for level in range(spec.levels):
            t0 = time.perf_counter()
            j = 16 * 2 ** level
            mesh = make_graded_interval_mesh(-1.0, 1.0, j, spec.beta)
            h = 1.0 / j
            eps = rule_value(spec.epsilon_rule, h, spec.beta)
            eps_stop = rule_value(spec.eps_stop_rule, h, spec.beta)
            problem_l, states = _solve_on_mesh(problem, mesh, [spec.space],
                                               eps, eps_stop)
            stats_seq.append(mesh_stats(mesh))
            keep(mesh, states[spec.space].u, problem_l)
            _push(records, _record_from_level(
                level, mesh, stats_seq, sol, states, problem_l, spec,
                time.perf_counter() - t0), progress)
        return _fill_eoc(records)

    if spec.example == "6.4":
        cfg = AdaptiveLoopConfig(
            marking_fraction=spec.marking_fraction,
            max_levels=spec.levels,
            epsilon_rule=lambda h: rule_value(spec.epsilon_rule, h, spec.beta),
            eps_stop_rule=lambda h: rule_value(spec.eps_stop_rule, h,
                                               spec.beta),
            report_space=P1, indicator_space=P1)
        mesh0 = make_square_mesh(1.0, spec.initial_cells)
        levels = adaptive_loop(problem, cfg, mesh0)
        for rec in levels:
            t0 = time.perf_counter()
            stats_seq.append(rec.stats)
            states = {P1: _Shim(rec.u_report), CR: _Shim(rec.u_cr)}
            problem_l = problem.with_epsilon(
                rule_value(spec.epsilon_rule, rec.stats.h_avg, spec.beta))
            # adaptive refinement halves h_min only every few levels, so the
            # grading estimate needs a window spanning several periods
            r = _record_from_level(rec.level, rec.mesh, stats_seq, sol,
                                   states, problem_l, spec,
                                   rec.wall_time + time.perf_counter() - t0,
                                   with_estimator=False, grading_window=8)
            r.eta_total = float(np.sqrt(max(rec.breakdown.eta_sq_total, 0.0)))
            r.osc_total = rec.breakdown.osc_total
            r.e_est = rec.breakdown.estimate
            keep(rec.mesh,
                 rec.u_report if spec.space == P1 else rec.u_cr, problem_l)
            _push(records, r, progress)
        return _fill_eoc(records)

    # uniform (6.1) or graded (6.3) two-dimensional mesh schedules
    mesh = make_square_mesh(1.0, spec.initial_cells)
    target = Circle((0.0, 0.0), spec.r)
    for level in range(spec.levels):
        t0 = time.perf_counter()
        if spec.example == "6.1":
            mesh = rgb_close(red_refine(mesh, range(len(mesh.cells))))
            h = 2.0 ** -(level + 1)
        else:
            if level > 0:
                mesh = grade_towards_set(mesh, target, 1)
            h = mesh_stats(mesh).h_avg
        eps = rule_value(spec.epsilon_rule, h, spec.beta)
        eps_stop = rule_value(spec.eps_stop_rule, h, spec.beta)
        spaces = [CR] if spec.example == "6.1" else [CR, P1]
        if spec.space not in spaces:
            spaces.append(spec.space)
        problem_l, states = _solve_on_mesh(problem, mesh, spaces, eps,
                                           eps_stop)
        stats_seq.append(mesh_stats(mesh))
        keep(mesh, states[spec.space].u, problem_l)
        _push(records, _record_from_level(
            level, mesh, stats_seq, sol, states, problem_l, spec,
            time.perf_counter() - t0), progress)
    return _fill_eoc(records)


class _Shim:
    def __init__(self, u):
        self.u = u


# ----------------------------------------------------------------------
# csv emission

CSV_COLUMNS = ("level", "N_vertices", "N_cells", "N_sides", "h_min", "h_avg",
               "error_L2", "error_PiL2", "eta_total", "osc_total", "E_est",
               "beta_emergent", "EOC")

ADAPTIVE_CSV_COLUMNS = ("level", "N_cells", "N_vertices", "h_min", "h_avg",
                        "error_L2", "eta_total", "osc_total", "E_est",
                        "beta_emergent")


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{x:.17g}"


def emit_csv(records, path):
    """Deterministic per-level table; wall times go to the console summary,
    not the file, so identical runs produce identical bytes."""
    with open(path, "w") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for r in records:
            row = [r.level, r.n_vertices, r.n_cells, r.n_sides, r.h_min,
                   r.h_avg, r.error_l2, r.error_pi_l2, r.eta_total,
                   r.osc_total, r.e_est, r.beta_emergent, r.eoc]
            fh.write(",".join(_fmt(x) for x in row) + "\n")


def emit_adaptive_csv(records, path):
    """Per-level table in the adaptive-loop column layout."""
    with open(path, "w") as fh:
        fh.write(",".join(ADAPTIVE_CSV_COLUMNS) + "\n")
        for r in records:
            row = [r.level, r.n_cells, r.n_vertices, r.h_min, r.h_avg,
                   r.error_l2, r.eta_total, r.osc_total, r.e_est,
                   r.beta_emergent]
            fh.write(",".join(_fmt(x) for x in row) + "\n")


def read_csv_records(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected csv columns {header}")
        records = []
        for line in fh:
            vals = line.strip().split(",")
            records.append(RunRecord(
                level=int(vals[0]), n_vertices=int(vals[1]),
                n_cells=int(vals[2]), n_sides=int(vals[3]),
                h_min=float(vals[4]), h_avg=float(vals[5]),
                error_l2=float(vals[6]), error_pi_l2=float(vals[7]),
                eta_total=float(vals[8]), osc_total=float(vals[9]),
                e_est=float(vals[10]), beta_emergent=float(vals[11]),
                eoc=float(vals[12])))
    return records


# ----------------------------------------------------------------------
# flat key-value configuration files

_CONFIG_FIELDS = {
    "example": str,
    "space": str,
    "levels": int,
    "beta": float,
    "alpha": float,
    "r": float,
    "epsilon_rule": str,
    "eps_stop_rule": str,
    "rotate_deg": float,
    "shift_x": float,
    "shift_y": float,
    "data": str,
    "dirichlet": str,
    "initial_cells": int,
    "marking_fraction": float,
    "out": str,
}

_DATA_BY_EXAMPLE = {"6.1": "two_balls", "6.2": "sign_1d",
                    "6.3": "char_ball", "6.4": "char_ball",
                    "custom": "char_ball"}

_REQUIRED = ("example", "alpha")


def emit_config(spec, path):
    lines = [
        f"example = {spec.example}",
        f"space = {spec.space}",
        f"levels = {spec.levels}",
        f"beta = {_fmt(spec.beta)}",
        f"alpha = {_fmt(spec.alpha)}",
        f"r = {_fmt(spec.r)}",
        f"epsilon_rule = {spec.epsilon_rule}",
        f"eps_stop_rule = {spec.eps_stop_rule}",
        f"rotate_deg = {_fmt(spec.rotate_deg)}",
        f"shift_x = {_fmt(spec.shift[0])}",
        f"shift_y = {_fmt(spec.shift[1])}",
        f"data = {_DATA_BY_EXAMPLE[spec.example]}",
        f"dirichlet = {spec.dirichlet}",
        f"initial_cells = {spec.initial_cells}",
        f"marking_fraction = {_fmt(spec.marking_fraction)}",
    ]
    if spec.out is not None:
        lines.append(f"out = {spec.out}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_config(path):
    """Parse a flat key-value experiment configuration.

    Unknown keys are rejected with the offending line; missing required
    fields are reported by name.
    """
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', "
                                 f"got {raw.strip()!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in _CONFIG_FIELDS:
                raise ValueError(f"{path}:{lineno}: unknown field {key!r}")
            try:
                values[key] = _CONFIG_FIELDS[key](val)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad value for "
                                 f"{key!r}: {exc}") from None
    for req in _REQUIRED:
        if req not in values:
            raise ValueError(f"{path}: missing required field {req!r}")
    example = values.pop("example")
    data = values.pop("data", None)
    if data is not None and data != _DATA_BY_EXAMPLE.get(example):
        raise ValueError(f"{path}: data variant {data!r} does not match "
                         f"example {example}")
    shift = (values.pop("shift_x", 0.0), values.pop("shift_y", 0.0))
    if example in EXAMPLES:
        return default_spec(example, shift=shift, **values)
    return ExperimentSpec(example=example, shift=shift, **values)


# ----------------------------------------------------------------------
# batch driver

@dataclass
class SummaryRow:
    label: str
    space: str
    levels: int
    final_eoc: float
    final_error: float
    grading: float
    wall_time: float


def run_all_defaults(out_dir=None, progress=None, levels_61=6, levels_62=7,
                     levels_63=14, levels_64=18):
    """Run every default experiment and return the EOC summary rows.

    Failures are isolated per experiment: a failing run contributes a row
    with NaN results instead of aborting the batch.
    """
    jobs = []
    for r in (0.4, 5.0):
        jobs.append((f"6.1 r={r}", default_spec("6.1", r=r,
                                                levels=levels_61), CR))
    for beta in (1.0, 2.0, 3.0, 4.0):
        jobs.append((f"6.2 beta={beta:g}",
                     default_spec("6.2", beta=beta, levels=levels_62), P1))
    spec63 = default_spec("6.3", levels=levels_63)
    jobs.append(("6.3 p1", replace(spec63, space=P1), P1))
    jobs.append(("6.3 cr", spec63, CR))
    spec64 = default_spec("6.4", levels=levels_64)
    jobs.append(("6.4 p1", replace(spec64, space=P1), P1))
    jobs.append(("6.4 cr", spec64, CR))

    summary = []
    cache = {}
    for label, spec, space in jobs:
        t0 = time.perf_counter()
        key = (spec.example, spec.levels, spec.r, spec.beta)
        try:
            if spec.example in ("6.3", "6.4"):
                # both spaces are solved in one pass; reuse across the rows
                if key not in cache:
                    cache[key] = run_experiment(spec, progress=progress)
                records = _fill_eoc([replace_record_space(r, space)
                                     for r in cache[key]])
            else:
                records = run_experiment(spec, progress=progress)
            wall = time.perf_counter() - t0
            grading = records[-1].beta_emergent if records else float("nan")
            summary.append(SummaryRow(
                label=label, space=space, levels=len(records),
                final_eoc=final_eoc(records,
                                    window=4 if spec.example == "6.4" else 3),
                final_error=records[-1].error_l2, grading=grading,
                wall_time=wall))
            if out_dir is not None:
                import os
                os.makedirs(out_dir, exist_ok=True)
                name = label.replace(" ", "_").replace("=", "")
                emit_csv(records, os.path.join(out_dir, f"{name}.csv"))
        except Exception as exc:  # isolate failures per experiment
            summary.append(SummaryRow(label=f"{label} [failed: {exc}]",
                                      space=space, levels=0,
                                      final_eoc=float("nan"),
                                      final_error=float("nan"),
                                      grading=float("nan"),
                                      wall_time=time.perf_counter() - t0))
    return summary


def replace_record_space(record, space):
    """A copy of the record reporting the error of the requested space."""
    import copy
    new = copy.copy(record)
    new.error_l2 = record.error_l2_p1 if space == P1 else record.error_l2_cr
    new.eoc = float("nan")
    return new


def acceptance_checks(spec, records):
    """Rate windows for the default experiments; used by the cli check mode.

    Returns (name, passed, value) triples.  The windows mirror the published
    rates: about h^(1/2) on uniform meshes, h^(beta/2) on 1d graded grids,
    nearly linear for the graded Crouzeix-Raviart runs, and the adaptive
    rates 0.76 (cr) / 0.58 (p1) with emergent grading about 1.7.
    """
    checks = []
    if spec.example == "6.1":
        e = final_eoc(records, 3)
        checks.append(("eoc(last 3) in [0.40, 0.60]", 0.40 <= e <= 0.60, e))
    elif spec.example == "6.2":
        e = final_eoc(records, 3)
        target = spec.beta / 2.0
        checks.append((f"eoc(last 3) within 0.15 of {target:g}",
                       abs(e - target) <= 0.15, e))
    elif spec.example == "6.3":
        cr = final_eoc(_fill_eoc([replace_record_space(r, CR)
                                  for r in records]), 3)
        p1 = final_eoc(_fill_eoc([replace_record_space(r, P1)
                                  for r in records]), 3)
        checks.append(("cr eoc(last 3) in [0.8, 1.1]", 0.8 <= cr <= 1.1, cr))
        checks.append(("p1 eoc <= cr eoc - 0.1", p1 <= cr - 0.1, p1))
    elif spec.example == "6.4":
        cr = final_eoc(_fill_eoc([replace_record_space(r, CR)
                                  for r in records]), 4)
        p1 = final_eoc(_fill_eoc([replace_record_space(r, P1)
                                  for r in records]), 4)
        grading = records[-1].beta_emergent
        checks.append(("cr eoc(last 4) within 0.15 of 0.76",
                       abs(cr - 0.76) <= 0.15, cr))
        checks.append(("p1 eoc(last 4) within 0.15 of 0.58",
                       abs(p1 - 0.58) <= 0.15, p1))
        checks.append(("emergent grading within 0.25 of 1.7",
                       abs(grading - 1.7) <= 0.25, grading))
    return checks


def format_summary(rows):
    lines = [f"{'experiment':<16} {'space':<6} {'levels':>6} "
             f"{'final EOC':>10} {'final error':>12} {'grading':>8} "
             f"{'time [s]':>9}"]
    for r in rows:
        lines.append(f"{r.label:<16} {r.space:<6} {r.levels:>6d} "
                     f"{r.final_eoc:>10.3f} {r.final_error:>12.4e} "
                     f"{r.grading:>8.3f} {r.wall_time:>9.1f}")
    return "\n".join(lines)
