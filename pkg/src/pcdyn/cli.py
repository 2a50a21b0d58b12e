"""Scenario front end: TOML configs in, CSV trajectories and JSON summaries out.

Subcommands
    simulate        integrate one model, write trajectory CSV + summary JSON
    compare         integrate >= 2 models from shared initial data, emit norms
    scaling-study   per-epsilon comparison norms and fitted log-log slopes
    verify-algebra  randomized checks of the transform/constraint identities
    energy-audit    recompute energy diagnostics from an existing CSV

Exit codes: 0 completed, 1 check failure, 2 config error, 3 collision,
4 escape, 5 solver failure, 6 runaway suspected.

CSV files start with the schema comment line `# pcdyn-csv v1`.  Outputs are
deterministic: a fixed config and seed reproduce byte-identical files, also
across process restarts.  Randomized checks use the counter-based Philox
generator with an explicit 64-bit seed recorded in every summary.
Epsilon sweeps run in a thread pool capped by PCDYN_THREADS; results are
merged in epsilon order.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys as _sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import diagnostics as diag
from .forces import MODELS, coulomb_rhs
from .integrate import (CollisionGuard, StepperConfig, Trajectory,
                        integrate_dae, integrate_model, resample)
from .manifold import (DAEState, Regularization, apply_A, apply_At,
                       apply_P, fast_jacobian, growth_coefficient,
                       growth_coefficient_slaved, h0, m0_det_closed_form,
                       m0_matrix, manifold_init, solve_A)
from .params import ParticleSystem, PhaseState, electromagnetic_mass, \
    make_form_factor

CSV_SCHEMA = "# pcdyn-csv v1"

EXIT_CODES = {
    "completed": 0,
    "check-failure": 1,
    "config-error": 2,
    "collision": 3,
    "escape": 4,
    "solver-failure": 5,
    "runaway-suspected": 6,
}

ALL_MODELS = MODELS + ("third_order",)


class ConfigError(ValueError):
    """Config problem with a field-level diagnostic."""


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ParticleSpec:
    charge: float
    position: tuple[float, float, float]
    velocity: tuple[float, float, float]
    mass: float | None = None
    mass_star: float | None = None
    mass_bare: float | None = None


@dataclass(frozen=True)
class ScenarioConfig:
    particles: tuple[ParticleSpec, ...]
    epsilons: tuple[float, ...] = (0.05,)
    models: tuple[str, ...] = ("darwin",)
    t_end: float = 1.0
    seed: int = 0
    em_mass: float | None = None
    form_factor_radius: float | None = None
    stepper: StepperConfig = field(default_factory=StepperConfig)
    min_separation: float | None = None
    escape_radius: float | None = None
    c_v: float | None = None
    c_sep_lower: float | None = None
    c_sep_upper: float | None = None
    refine_steps: int = 1


def _expect(table: dict, key: str, types, where: str, default=None,
            required=False):
    if key not in table:
        if required:
            raise ConfigError(f"{where}.{key}: required field is missing")
        return default
    val = table[key]
    if not isinstance(val, types):
        raise ConfigError(f"{where}.{key}: expected {types}, got {type(val).__name__}")
    return val


def _vec3(table, key, where, required=True):
    v = _expect(table, key, list, where, required=required)
    if v is None:
        return None
    if len(v) != 3 or not all(isinstance(x, (int, float)) for x in v):
        raise ConfigError(f"{where}.{key}: expected a list of 3 numbers")
    return tuple(float(x) for x in v)


def parse_config(text: str) -> ScenarioConfig:
    """Parse and validate a scenario config; raises ConfigError with
    field-level diagnostics."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML parse error: {exc}") from exc

    sc = data.get("scenario", {})
    if not isinstance(sc, dict):
        raise ConfigError("scenario: expected a table")

    raw_particles = data.get("particles", [])
    if not isinstance(raw_particles, list) or len(raw_particles) < 1:
        raise ConfigError("particles: at least one [[particles]] entry is required")
    particles = []
    for i, p in enumerate(raw_particles):
        where = f"particles[{i}]"
        if not isinstance(p, dict):
            raise ConfigError(f"{where}: expected a table")
        charge = float(_expect(p, "charge", (int, float), where, required=True))
        pos = _vec3(p, "position", where)
        vel = _vec3(p, "velocity", where)
        mass = _expect(p, "mass", (int, float), where)
        mass_star = _expect(p, "mass_star", (int, float), where)
        mass_bare = _expect(p, "mass_bare", (int, float), where)
        if mass is None and mass_bare is None:
            raise ConfigError(f"{where}: needs either mass or mass_bare")
        if mass is not None and mass_bare is not None:
            raise ConfigError(f"{where}: mass and mass_bare are exclusive")
        particles.append(ParticleSpec(
            charge=charge, position=pos, velocity=vel,
            mass=None if mass is None else float(mass),
            mass_star=None if mass_star is None else float(mass_star),
            mass_bare=None if mass_bare is None else float(mass_bare)))
    for i in range(len(particles)):
        for j in range(i + 1, len(particles)):
            if particles[i].position == particles[j].position:
                raise ConfigError(
                    f"particles[{j}].position: coincides with particles[{i}]")

    epsilons = sc.get("epsilons")
    if epsilons is None:
        eps_single = _expect(sc, "epsilon", (int, float), "scenario", default=0.05)
        epsilons = [eps_single]
    if not isinstance(epsilons, list) or not epsilons:
        raise ConfigError("scenario.epsilons: expected a nonempty list")
    eps_t = []
    for k, e in enumerate(epsilons):
        if not isinstance(e, (int, float)) or not (0.0 < e <= 1.0):
            raise ConfigError(f"scenario.epsilons[{k}]: must be a number in (0, 1]")
        eps_t.append(float(e))

    models = sc.get("models")
    if models is None:
        models = [_expect(sc, "model", str, "scenario", default="darwin")]
    if not isinstance(models, list) or not models:
        raise ConfigError("scenario.models: expected a nonempty list")
    for k, mname in enumerate(models):
        if mname not in ALL_MODELS:
            raise ConfigError(
                f"scenario.models[{k}]: unknown model {mname!r}; "
                f"expected one of {ALL_MODELS}")

    t_end = float(_expect(sc, "t_end", (int, float), "scenario", default=1.0))
    if t_end <= 0.0:
        raise ConfigError("scenario.t_end: must be positive")
    seed = _expect(sc, "seed", int, "scenario", default=0)
    if not (0 <= seed < 2 ** 64):
        raise ConfigError("scenario.seed: must fit in 64 bits")

    em_mass = _expect(sc, "em_mass", (int, float), "scenario")
    ff_radius = _expect(sc, "form_factor_radius", (int, float), "scenario")
    if any(p.mass_bare is not None for p in particles):
        if em_mass is None and ff_radius is None:
            raise ConfigError(
                "scenario: mass_bare particles need em_mass or form_factor_radius")

    st = data.get("stepper", {})
    if not isinstance(st, dict):
        raise ConfigError("stepper: expected a table")
    try:
        stepper = StepperConfig(
            method=_expect(st, "method", str, "stepper", default="rk45"),
            rtol=float(_expect(st, "rtol", (int, float), "stepper", default=1e-8)),
            atol=float(_expect(st, "atol", (int, float), "stepper", default=1e-10)),
            max_steps=_expect(st, "max_steps", int, "stepper", default=2_000_000),
            fixed_step=float(_expect(st, "fixed_step", (int, float), "stepper",
                                     default=1e-3)),
            stiffness_kappa=float(_expect(st, "kappa", (int, float), "stepper",
                                          default=0.1)),
            n_samples=_expect(st, "n_samples", int, "stepper", default=200),
        )
    except ValueError as exc:
        raise ConfigError(f"stepper: {exc}") from exc

    gd = data.get("guard", {})
    rg = data.get("regularization", {})
    mf = data.get("manifold", {})
    for name, tab in (("guard", gd), ("regularization", rg), ("manifold", mf)):
        if not isinstance(tab, dict):
            raise ConfigError(f"{name}: expected a table")

    refine = _expect(mf, "refine_steps", int, "manifold", default=1)
    if refine < 0:
        raise ConfigError("manifold.refine_steps: must be nonnegative")

    def opt_pos(tab, key, where):
        v = _expect(tab, key, (int, float), where)
        if v is not None and v <= 0:
            raise ConfigError(f"{where}.{key}: must be positive")
        return None if v is None else float(v)

    return ScenarioConfig(
        particles=tuple(particles), epsilons=tuple(eps_t),
        models=tuple(models), t_end=t_end, seed=seed,
        em_mass=None if em_mass is None else float(em_mass),
        form_factor_radius=None if ff_radius is None else float(ff_radius),
        stepper=stepper,
        min_separation=opt_pos(gd, "min_separation", "guard"),
        escape_radius=opt_pos(gd, "escape_radius", "guard"),
        c_v=opt_pos(rg, "c_v", "regularization"),
        c_sep_lower=opt_pos(rg, "c_sep_lower", "regularization"),
        c_sep_upper=opt_pos(rg, "c_sep_upper", "regularization"),
        refine_steps=refine,
    )


def _toml_value(v):
    if isinstance(v, str):
        return '"%s"' % v.replace("\\", "\\\\").replace('"', '\\"')
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)}")


def serialize_config(cfg: ScenarioConfig) -> str:
    """Canonical TOML text; parse(serialize(parse(text))) == parse(text)."""
    out = ["[scenario]"]
    out.append(f"epsilons = {_toml_value(list(cfg.epsilons))}")
    out.append(f"models = {_toml_value(list(cfg.models))}")
    out.append(f"t_end = {_toml_value(cfg.t_end)}")
    out.append(f"seed = {_toml_value(cfg.seed)}")
    for key in ("em_mass", "form_factor_radius"):
        v = getattr(cfg, key)
        if v is not None:
            out.append(f"{key} = {_toml_value(v)}")
    out.append("")
    st = cfg.stepper
    out += ["[stepper]",
            f"method = {_toml_value(st.method)}",
            f"rtol = {_toml_value(st.rtol)}",
            f"atol = {_toml_value(st.atol)}",
            f"max_steps = {_toml_value(st.max_steps)}",
            f"fixed_step = {_toml_value(st.fixed_step)}",
            f"kappa = {_toml_value(st.stiffness_kappa)}",
            f"n_samples = {_toml_value(st.n_samples)}", ""]
    guard_lines = [(k, getattr(cfg, k)) for k in ("min_separation", "escape_radius")]
    if any(v is not None for _, v in guard_lines):
        out.append("[guard]")
        out += [f"{k} = {_toml_value(v)}" for k, v in guard_lines if v is not None]
        out.append("")
    reg_lines = [(k, getattr(cfg, k)) for k in ("c_v", "c_sep_lower", "c_sep_upper")]
    if any(v is not None for _, v in reg_lines):
        out.append("[regularization]")
        out += [f"{k} = {_toml_value(v)}" for k, v in reg_lines if v is not None]
        out.append("")
    out += ["[manifold]", f"refine_steps = {_toml_value(cfg.refine_steps)}", ""]
    for p in cfg.particles:
        out.append("[[particles]]")
        out.append(f"charge = {_toml_value(p.charge)}")
        if p.mass is not None:
            out.append(f"mass = {_toml_value(p.mass)}")
        if p.mass_star is not None:
            out.append(f"mass_star = {_toml_value(p.mass_star)}")
        if p.mass_bare is not None:
            out.append(f"mass_bare = {_toml_value(p.mass_bare)}")
        out.append(f"position = {_toml_value(list(p.position))}")
        out.append(f"velocity = {_toml_value(list(p.velocity))}")
        out.append("")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# config -> model objects

def build_system(cfg: ScenarioConfig, eps: float) -> ParticleSystem:
    charges = [p.charge for p in cfg.particles]
    if any(p.mass_bare is not None for p in cfg.particles):
        em = cfg.em_mass
        if em is None:
            em = electromagnetic_mass(make_form_factor(cfg.form_factor_radius))
        bares = [p.mass_bare for p in cfg.particles]
        return ParticleSystem.from_bare(charges, bares, em, epsilon=eps)
    masses = [p.mass for p in cfg.particles]
    stars = [p.mass_star if p.mass_star is not None else p.mass
             for p in cfg.particles]
    return ParticleSystem.direct(charges, masses, stars, epsilon=eps)


def build_state(cfg: ScenarioConfig) -> PhaseState:
    return PhaseState([p.position for p in cfg.particles],
                      [p.velocity for p in cfg.particles])


def build_regularization(cfg: ScenarioConfig) -> Regularization:
    return Regularization.from_phase_state(
        build_state(cfg), c_v=cfg.c_v, c_sep_lower=cfg.c_sep_lower,
        c_sep_upper=cfg.c_sep_upper)


def build_guard(cfg: ScenarioConfig) -> CollisionGuard:
    reg = build_regularization(cfg)
    base = CollisionGuard.from_regularization(reg)
    return CollisionGuard(
        min_separation=cfg.min_separation or base.min_separation,
        escape_radius=cfg.escape_radius or base.escape_radius)


def run_one(cfg: ScenarioConfig, model: str, eps: float) -> Trajectory:
    sys_ = build_system(cfg, eps)
    state = build_state(cfg)
    guard = build_guard(cfg)
    if model == "third_order":
        reg = build_regularization(cfg)
        y0 = manifold_init(state.positions, state.velocities, sys_, eps,
                           refine_steps=cfg.refine_steps, reg=reg)
        d0 = DAEState(state.positions, state.velocities, y0)
        return integrate_dae(d0, sys_, eps, (0.0, cfg.t_end),
                             cfg=cfg.stepper, guard=guard, reg=reg)
    return integrate_model(model, state, sys_, eps, (0.0, cfg.t_end),
                           cfg=cfg.stepper, guard=guard)


# ---------------------------------------------------------------------------
# output

def _fmt(x) -> str:
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return repr(float(x))


def write_trajectory_csv(path: Path, traj: Trajectory, sys_: ParticleSystem,
                         eps: float, n_samples: int) -> None:
    n = traj.n_particles
    grid = np.linspace(traj.times[0], traj.times[-1], n_samples)
    vals, dvals = resample(traj, grid, derivative=True)
    resid = np.full(n_samples, np.nan)
    if traj.is_dae and traj.constraint_residuals is not None:
        resid = np.interp(grid, traj.times, traj.constraint_residuals)
    cols = ["t"]
    for a in range(n):
        cols += [f"r{a}{c}" for c in "xyz"]
    for a in range(n):
        cols += [f"u{a}{c}" for c in "xyz"]
    for a in range(n):
        cols += [f"udot{a}{c}" for c in "xyz"]
    if traj.is_dae:
        cols += ["yx", "yy", "yz"]
    cols += ["h_c", "h_d", "h_rr", "diss_rate", "constraint_residual"]
    lines = [CSV_SCHEMA, ",".join(cols)]
    for i in range(n_samples):
        r = vals[i, :3 * n].reshape(n, 3)
        u = vals[i, 3 * n:6 * n].reshape(n, 3)
        w = dvals[i, 3 * n:6 * n].reshape(n, 3)
        st = PhaseState(r, u, float(grid[i]))
        row = [grid[i]]
        row += list(vals[i, :6 * n])
        row += list(dvals[i, 3 * n:6 * n])
        if traj.is_dae:
            row += list(vals[i, 6 * n:6 * n + 3])
        row += [diag.energy_coulomb(st, sys_),
                diag.energy_darwin(st, sys_, eps),
                diag.energy_rr(st, w, sys_, eps),
                diag.dissipation_rate(w, sys_),
                resid[i]]
        lines.append(",".join(_fmt(x) for x in row))
    path.write_text("\n".join(lines) + "\n")


def _json_dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _summary_base(cfg: ScenarioConfig) -> dict:
    return {
        "rng": {"generator": "philox", "seed": cfg.seed},
        "n_particles": len(cfg.particles),
        "t_end": cfg.t_end,
    }


def _pool_map(fn, items):
    threads = int(os.environ.get("PCDYN_THREADS", "0") or 0)
    if threads <= 0:
        threads = min(4, os.cpu_count() or 1)
    if threads == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(cfg: ScenarioConfig, out_dir: Path) -> int:
    if len(cfg.models) != 1:
        raise ConfigError("scenario.models: simulate needs exactly one model")
    model = cfg.models[0]
    out_dir.mkdir(parents=True, exist_ok=True)

    def task(eps):
        traj = run_one(cfg, model, eps)
        sys_ = build_system(cfg, eps)
        name = f"traj_{model}_eps{eps:g}.csv"
        write_trajectory_csv(out_dir / name, traj, sys_, eps,
                             cfg.stepper.n_samples)
        return eps, name, traj

    results = _pool_map(task, list(cfg.epsilons))
    results.sort(key=lambda r: r[0])
    summary = _summary_base(cfg)
    summary["model"] = model
    summary["runs"] = []
    worst = 0
    for eps, name, traj in results:
        summary["runs"].append({
            "epsilon": eps,
            "csv": name,
            "termination": traj.termination,
            "exit_code": EXIT_CODES[traj.termination],
            "t_final": float(traj.times[-1]),
            "n_steps": traj.n_steps,
            "n_rhs": traj.n_rhs,
        })
        worst = max(worst, EXIT_CODES[traj.termination])
    _json_dump(out_dir / "summary.json", summary)
    print(f"simulate: {len(results)} run(s) of {model} -> {out_dir}")
    for run in summary["runs"]:
        print(f"  eps={run['epsilon']:g}  {run['termination']}  "
              f"t_final={run['t_final']:g}  steps={run['n_steps']}")
    return worst


def cmd_compare(cfg: ScenarioConfig, out_dir: Path) -> int:
    if len(cfg.models) < 2:
        raise ConfigError("scenario.models: compare needs at least two models")
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []

    def task(eps):
        sys_ = build_system(cfg, eps)
        trajs = {m: run_one(cfg, m, eps) for m in cfg.models}
        base = cfg.models[0]
        rows = []
        for other in cfg.models[1:]:
            norms = diag.compare(trajs[base], trajs[other], sys=sys_, eps=eps)
            rows.append({
                "models": [base, other],
                "epsilon": eps,
                "sup_dr": norms.sup_dr,
                "sup_du": norms.sup_du,
                "sup_dudot": norms.sup_dudot,
                "sup_dh_d": norms.sup_dh_d,
                "window": list(norms.window),
                "terminations": {m: trajs[m].termination for m in cfg.models},
            })
        return eps, rows

    for eps, rows in sorted(_pool_map(task, list(cfg.epsilons))):
        entries.extend(rows)
    summary = _summary_base(cfg)
    summary["models"] = list(cfg.models)
    summary["comparisons"] = entries
    _json_dump(out_dir / "compare.json", summary)
    print(f"compare: {cfg.models} -> {out_dir / 'compare.json'}")
    for row in entries:
        print(f"  eps={row['epsilon']:g} {row['models'][0]} vs {row['models'][1]}"
              f"  sup|dr|={row['sup_dr']:.3e} sup|du|={row['sup_du']:.3e}"
              f" sup|dudot|={row['sup_dudot']:.3e}")
    return 0


def cmd_scaling_study(cfg: ScenarioConfig, out_dir: Path,
                      self_test_power: float | None = None) -> int:
    if self_test_power is None and len(cfg.epsilons) < 3:
        raise ConfigError("scenario.epsilons: scaling-study needs >= 3 values")
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = _summary_base(cfg)
    eps_list = sorted(cfg.epsilons, reverse=True)

    if self_test_power is not None:
        if len(cfg.epsilons) < 3:
            raise ConfigError("scenario.epsilons: self-test needs >= 3 values")
        errors = [2.7 * e ** self_test_power for e in eps_list]
        fit = diag.fit_order(eps_list, errors)
        summary["self_test"] = {"injected_power": self_test_power,
                                "recovered_slope": fit.slope,
                                "r_squared": fit.r_squared}
        _json_dump(out_dir / "scaling.json", summary)
        print(f"scaling-study self-test: injected {self_test_power}, "
              f"recovered {fit.slope:.6f}")
        return 0

    if len(cfg.models) != 2:
        raise ConfigError("scenario.models: scaling-study needs exactly two models")

    def task(eps):
        sys_ = build_system(cfg, eps)
        ta = run_one(cfg, cfg.models[0], eps)
        tb = run_one(cfg, cfg.models[1], eps)
        norms = diag.compare(ta, tb, sys=sys_, eps=eps)
        return eps, norms

    rows = sorted(_pool_map(task, list(eps_list)))
    table = {
        "epsilon": [r[0] for r in rows],
        "sup_dr": [r[1].sup_dr for r in rows],
        "sup_du": [r[1].sup_du for r in rows],
        "sup_dudot": [r[1].sup_dudot for r in rows],
        "sup_dh_d": [r[1].sup_dh_d for r in rows],
    }
    fits = {}
    for key in ("sup_dr", "sup_du", "sup_dudot", "sup_dh_d"):
        errs = table[key]
        if all(np.isfinite(errs)) and all(e >= 0 for e in errs):
            fit = diag.fit_order(table["epsilon"], errs)
            fits[key] = {"slope": fit.slope, "intercept": fit.intercept,
                         "r_squared": fit.r_squared}
    summary["models"] = list(cfg.models)
    summary["table"] = table
    summary["fits"] = fits
    _json_dump(out_dir / "scaling.json", summary)
    print(f"scaling-study: {cfg.models[0]} vs {cfg.models[1]}")
    header = f"{'epsilon':>10} {'sup|dr|':>12} {'sup|du|':>12} {'sup|dudot|':>12}"
    print(header)
    for i, e in enumerate(table["epsilon"]):
        print(f"{e:>10g} {table['sup_dr'][i]:>12.4e} "
              f"{table['sup_du'][i]:>12.4e} {table['sup_dudot'][i]:>12.4e}")
    for key, fit in fits.items():
        print(f"  fit {key}: slope {fit['slope']:.3f} (R^2 {fit['r_squared']:.4f})")
    return 0


def _verify_algebra_checks(seed: int, trials: int):
    """Yields (name, passed, detail) tuples."""
    # fixed instances with exact expected determinants
    det2 = m0_det_closed_form([1.0, 1.0], [1.0, 1.0])
    yield ("m0 det N=2 unit == 8",
           abs(det2 - 8.0) < 1e-12, f"got {det2}")
    lu2 = float(np.linalg.det(m0_matrix([1.0, 1.0], [1.0, 1.0])))
    yield ("m0 LU det N=2 unit == 8", abs(lu2 - 8.0) < 1e-9, f"got {lu2}")
    det3 = m0_det_closed_form([1.0, 1.0, 1.0], [1.0, 1.0, 1.0])
    yield ("m0 det N=3 unit == 27", abs(det3 - 27.0) < 1e-12, f"got {det3}")
    if trials <= 0:
        return

    rng = np.random.Generator(np.random.Philox(seed))
    det_ok = ata_ok = rt_ok = h0_ok = rank_ok = 0
    worst_det = worst_ata = worst_rt = worst_h0 = 0.0
    per_n = max(1, trials // 5)
    total = 0
    for n in (2, 3, 4, 5, 6):
        for _ in range(per_n):
            total += 1
            e = rng.uniform(0.5, 2.0, n) * rng.choice([-1.0, 1.0], n)
            m = rng.uniform(0.5, 3.0, n)
            closed = m0_det_closed_form(e, m)
            lu = float(np.linalg.det(m0_matrix(e, m)))
            rel = abs(closed - lu) / max(abs(closed), 1e-300)
            worst_det = max(worst_det, rel)
            det_ok += rel <= 1e-9

            z = rng.normal(size=(n, 3))
            lhs = apply_At(e, apply_P(e, apply_A(e, z)))
            target = np.zeros_like(z)
            e2 = float(np.sum(e ** 2))
            target[0] = e2 ** 2 / (6.0 * math.pi) * z[0]
            dev = np.linalg.norm(lhs - target) / np.linalg.norm(z)
            worst_ata = max(worst_ata, dev)
            ata_ok += dev <= 1e-12

            rt = solve_A(e, apply_A(e, z))
            rdev = np.max(np.abs(rt - z)) / max(1.0, np.max(np.abs(z)))
            worst_rt = max(worst_rt, rdev)
            rt_ok += rdev <= 1e-12

            sys_ = ParticleSystem.direct(e, m)
            r = rng.normal(size=(n, 3)) * 2.0
            spread = rng.normal(size=(n, 3))
            r = r + 3.0 * np.arange(n)[:, None] * np.array([1.0, 0, 0]) + spread
            st = PhaseState(r, np.zeros((n, 3)))
            hval = h0(r, sys_)
            alt = (e @ coulomb_rhs(st, sys_)) / e2
            hdev = np.linalg.norm(hval - alt) / max(np.linalg.norm(alt), 1e-300)
            worst_h0 = max(worst_h0, hdev)
            h0_ok += hdev <= 1e-12

            # rank of the coupling map (3 when a charge is nonzero)
            pmat = np.outer(e, e) / (6.0 * math.pi)
            rank = np.linalg.matrix_rank(np.kron(pmat, np.eye(3)), tol=1e-12)
            rank_ok += rank == 3

    yield (f"closed-form det vs LU ({total} draws)",
           det_ok == total, f"worst rel {worst_det:.2e}")
    yield (f"A^t P A diagonalization ({total} draws)",
           ata_ok == total, f"worst {worst_ata:.2e}")
    yield (f"A round-trip ({total} draws)",
           rt_ok == total, f"worst {worst_rt:.2e}")
    yield (f"h0 vs charge-weighted Coulomb ({total} draws)",
           h0_ok == total, f"worst {worst_h0:.2e}")
    yield (f"coupling map rank 3 ({total} draws)",
           rank_ok == total, "")

    # fast-field Jacobian at equal masses: matches 6 pi e^-4 sum e^2 m
    e = rng.uniform(0.5, 1.5, 3) * rng.choice([-1.0, 1.0], 3)
    m = np.full(3, float(rng.uniform(0.8, 1.5)))
    sys_ = ParticleSystem.direct(e, m)
    r = np.array([[0.0, 0, 0], [2.0, 0, 0], [0.5, 2.5, 0]])
    u = np.zeros((3, 3))
    jac = fast_jacobian(r, u, h0(r, sys_), sys_, 0.0)
    lam = growth_coefficient(sys_)
    dev = np.max(np.abs(jac - lam * np.eye(3))) / lam
    yield ("fast-field Jacobian == growth coefficient (equal masses)",
           dev <= 1e-7, f"dev {dev:.2e}")
    # general masses: matches the slaved coefficient
    m2 = rng.uniform(0.5, 2.0, 3)
    sys2 = ParticleSystem.direct(e, m2)
    jac2 = fast_jacobian(r, u, h0(r, sys2), sys2, 0.0)
    lam2 = growth_coefficient_slaved(sys2)
    dev2 = np.max(np.abs(jac2 - lam2 * np.eye(3))) / abs(lam2)
    yield ("fast-field Jacobian == slaved coefficient (general masses)",
           dev2 <= 1e-7, f"dev {dev2:.2e}")


def cmd_verify_algebra(seed: int, trials: int, out_dir: Path | None) -> int:
    results = list(_verify_algebra_checks(seed, trials))
    failed = [r for r in results if not r[1]]
    for name, ok, detail in results:
        mark = "PASS" if ok else "FAIL"
        print(f"[{mark}] {name}" + (f"  ({detail})" if detail else ""))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        _json_dump(out_dir / "verify.json", {
            "rng": {"generator": "philox", "seed": seed},
            "trials": trials,
            "checks": [{"name": n, "passed": bool(ok), "detail": d}
                       for n, ok, d in results],
        })
    print(f"verify-algebra: {len(results) - len(failed)}/{len(results)} passed")
    return 0 if not failed else 1


def read_trajectory_csv(path: Path):
    """Parse a pcdyn CSV back into arrays (times, columns dict)."""
    text = path.read_text().strip().splitlines()
    if not text or text[0].strip() != CSV_SCHEMA:
        raise ConfigError(f"{path}: missing schema line '{CSV_SCHEMA}'")
    header = text[1].split(",")
    data = np.array([[float(x) for x in line.split(",")] for line in text[2:]])
    return {name: data[:, i] for i, name in enumerate(header)}


def cmd_energy_audit(csv_path: Path, cfg: ScenarioConfig | None,
                     out_dir: Path) -> int:
    cols = read_trajectory_csv(csv_path)
    t = cols["t"]
    report = {"csv": str(csv_path), "n_samples": int(t.size)}
    for key in ("h_c", "h_d", "h_rr"):
        series = cols[key]
        scale = max(abs(series[0]), 1e-300)
        report[key] = {
            "initial": float(series[0]),
            "final": float(series[-1]),
            "max_rel_drift": float(np.max(np.abs(series - series[0])) / scale),
            "monotone_nonincreasing": bool(np.all(np.diff(series) <= 1e-12 * scale)),
        }
    if "diss_rate" in cols:
        rate = cols["diss_rate"]
        report["dissipation"] = {
            "max_rate": float(np.max(rate)),
            "all_nonnegative": bool(np.all(rate >= -1e-300)),
        }
    is_dae = "yx" in cols
    if is_dae and cfg is not None and t.size >= 5:
        eps = cfg.epsilons[0]
        dt = t[1] - t[0]
        h_rr = cols["h_rr"]
        dh = (h_rr[2:] - h_rr[:-2]) / (2.0 * dt)
        resid = dh + eps ** 1.5 * cols["diss_rate"][1:-1]
        report["identity_residual_max"] = float(np.max(np.abs(resid)))
    out_dir.mkdir(parents=True, exist_ok=True)
    _json_dump(out_dir / "audit.json", report)
    print(f"energy-audit: {csv_path} -> {out_dir / 'audit.json'}")
    for key in ("h_c", "h_d", "h_rr"):
        print(f"  {key}: rel drift {report[key]['max_rel_drift']:.3e}")
    if "identity_residual_max" in report:
        print(f"  identity residual max {report['identity_residual_max']:.3e}")
    return 0


# ---------------------------------------------------------------------------
# entry point

def _load_config(args) -> ScenarioConfig:
    if args.config is None:
        raise ConfigError("--config is required for this subcommand")
    text = Path(args.config).read_text()
    cfg = parse_config(text)
    if args.epsilon is not None:
        cfg = _replace_cfg(cfg, epsilons=(args.epsilon,))
    if args.model is not None:
        cfg = _replace_cfg(cfg, models=tuple(args.model.split(",")))
    if args.seed is not None:
        cfg = _replace_cfg(cfg, seed=args.seed)
    if args.tol is not None:
        st = cfg.stepper
        new_st = StepperConfig(method=st.method, rtol=args.tol,
                               atol=args.tol * 1e-2, max_steps=st.max_steps,
                               fixed_step=st.fixed_step,
                               stiffness_kappa=st.stiffness_kappa,
                               n_samples=st.n_samples)
        cfg = _replace_cfg(cfg, stepper=new_st)
    return cfg


def _replace_cfg(cfg: ScenarioConfig, **kw) -> ScenarioConfig:
    from dataclasses import replace
    new = replace(cfg, **kw)
    for k, mname in enumerate(new.models):
        if mname not in ALL_MODELS:
            raise ConfigError(f"--model: unknown model {mname!r}")
    for e in new.epsilons:
        if not (0.0 < e <= 1.0):
            raise ConfigError("--epsilon: must lie in (0, 1]")
    return new


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="pcdyn",
        description="Simulator for the charged-particle model hierarchy "
                    "(Coulomb, Darwin, radiation reaction).")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, help="TOML scenario file")
        p.add_argument("--epsilon", type=float, help="override scale ratio")
        p.add_argument("--model", type=str,
                       help="override model list (comma separated)")
        p.add_argument("--seed", type=int, help="override RNG seed")
        p.add_argument("--out", type=str, default="out", help="output directory")
        p.add_argument("--tol", type=float,
                       help="override stepper rtol (atol = tol/100)")

    common(sub.add_parser("simulate", help="run one model, write CSV + JSON"))
    common(sub.add_parser("compare", help="run several models, emit gap norms"))
    ps = sub.add_parser("scaling-study",
                        help="per-epsilon norms and fitted slopes")
    common(ps)
    ps.add_argument("--self-test", type=float, default=None, metavar="POWER",
                    help="inject an exact power law instead of integrating")
    pv = sub.add_parser("verify-algebra",
                        help="randomized identity checks of the transform "
                             "machinery")
    pv.add_argument("--seed", type=int, default=20240)
    pv.add_argument("--trials", type=int, default=100)
    pv.add_argument("--out", type=str, default=None)
    pa = sub.add_parser("energy-audit",
                        help="recompute diagnostics from an existing CSV")
    pa.add_argument("csv", type=str)
    pa.add_argument("--config", type=str, default=None)
    pa.add_argument("--out", type=str, default="out")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(_load_config(args), Path(args.out))
        if args.command == "compare":
            return cmd_compare(_load_config(args), Path(args.out))
        if args.command == "scaling-study":
            return cmd_scaling_study(_load_config(args), Path(args.out),
                                     self_test_power=args.self_test)
        if args.command == "verify-algebra":
            out = Path(args.out) if args.out else None
            return cmd_verify_algebra(args.seed, args.trials, out)
        if args.command == "energy-audit":
            cfg = None
            if args.config is not None:
                cfg = parse_config(Path(args.config).read_text())
            return cmd_energy_audit(Path(args.csv), cfg, Path(args.out))
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return EXIT_CODES["config-error"]
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return EXIT_CODES["config-error"]


if __name__ == "__main__":
    raise SystemExit(main())
