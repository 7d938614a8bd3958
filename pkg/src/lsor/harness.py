"""Pipeline orchestration: reduce, assess, simulate, compare, benchmark.

run_lsor executes the assessment-embedded reduction loop: partition ->
ROM/BLM -> assumption checks -> perturbation-size bounds -> accuracy gate,
with one feedback re-partition before failing. run_scenario drives the four
model variants (full, reduced, reduced+layer, small-signal baseline) over a
microgrid scenario, resamples them onto a common grid, and collects error
metrics and solver timing rows. emit writes the documented CSV/JSON bundle.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import microgrid as mg_mod
from .assessment import (
    fit_beta_x,
    AssessmentReport,
    DomainBox,
    EpsilonBounds,
    KLFunctionExp,
    check_blm_gas,
    check_growth,
    check_rom_stability,
    epsilon_double_star,
    epsilon_star,
    estimate_workspace,
    fit_beta_y,
)
from .errors import AssessmentFailed, InfeasibleConstants, NoFeasibleEpsilon
from .integrators import (
    EXPLICIT,
    STIFF,
    EventSchedule,
    SolverConfig,
    Trajectory,
    integrate,
    integrate_coupled,
)
from .microgrid import GRID_TIED, MicrogridSystem, baseline_small_signal, load_config
from .reduction import (
    BoundaryLayerModel,
    QssMap,
    ReducedModel,
    build_blm,
    build_rom,
    descriptor,
)
from .sysdef import InputSignal, SingularSystem

COMPARISON_GRID = 2000  # uniform samples for all cross-variant metrics
BENCH_REPEATS = 5
VARIANTS = ("full", "rom", "rom_blm", "smallsig")


@dataclass
class LsorConfig:
    gap_ratio: float = 10.0
    residual_tol: float = 1e-9
    res_scale: np.ndarray | None = None
    stability_margin: float = 1e-6
    xi: float | None = None
    k_override: float | None = None
    decay_horizon: float | None = None  # user T for the layer-negligibility bound
    x_eq: np.ndarray | None = None
    u_eq: np.ndarray | None = None
    seed: int = 0
    repartition: object = None  # () -> (SingularSystem, partition); enables the retry


@dataclass
class LsorResult:
    rom: ReducedModel
    blm: BoundaryLayerModel
    qss: QssMap
    report: AssessmentReport


def _assess_once(sys: SingularSystem, box: DomainBox, cfg: LsorConfig) -> LsorResult:
    qss = QssMap(sys, residual_tol=cfg.residual_tol, res_scale=cfg.res_scale)
    rom = build_rom(sys, qss)
    blm = build_blm(sys, qss)

    growth = check_growth(sys, box)
    if not growth:
        raise AssessmentFailed(1, f"unbounded {growth.offending} at {growth.witness}")

    x_eq = np.zeros(sys.n) if cfg.x_eq is None else np.asarray(cfg.x_eq, float)
    u_eq = np.zeros(sys.p) if cfg.u_eq is None else np.asarray(cfg.u_eq, float)
    rom_rep = check_rom_stability(rom, x_eq, box, u_eq=u_eq,
                                  stability_margin=cfg.stability_margin)
    if not rom_rep.exp_stable:
        raise AssessmentFailed(
            2, f"reduced model not exponentially stable "
               f"(max Re = {np.max(rom_rep.eigenvalues.real):.3e})"
        )

    gas = check_blm_gas(blm, box, stability_margin=cfg.stability_margin,
                        candidate="auto")
    if not gas:
        raise AssessmentFailed(3, f"boundary layer not uniformly GAS, witness {gas.witness}")

    beta_y = fit_beta_y(blm, box)
    beta_x = fit_beta_x(rom, box, rom_rep, x_eq, u_eq)
    ws = estimate_workspace(sys, rom_rep, beta_y, box, qss, x_eq=x_eq, u_eq=u_eq,
                            xi=cfg.xi, beta_x=beta_x)
    if cfg.k_override is not None:
        ws.k = float(cfg.k_override)
        ws.notes["k"] = "user override"

    eps_bar = sys.eps_bar
    eps_star_val, components = epsilon_star(ws, rom_rep.iss_gain, box)
    notes = []
    try:
        if cfg.decay_horizon is not None:
            eps2, T = epsilon_double_star(beta_y, ws.k, box.mu, "fix-T",
                                          cfg.decay_horizon, eps_max=max(1.0, eps_bar))
            notes.append(f"fix-T at user T={cfg.decay_horizon:g}")
        else:
            eps2, T = epsilon_double_star(beta_y, ws.k, box.mu, "fix-eps", eps_bar)
            notes.append("fix-eps at the system eps_bar")
    except NoFeasibleEpsilon as exc:
        eps2, T = None, None
        notes.append(f"no feasible layer-negligibility threshold: {exc}")
    if eps2 is not None and eps2 > eps_star_val:
        eps2 = eps_star_val  # the layer threshold never exceeds the validity bound
        notes.append("eps** clamped to eps*")
    bounds = EpsilonBounds(
        eps_star=eps_star_val, eps_star2=eps2, T=T, components=components,
        method_notes="; ".join(notes),
    )

    accepted = eps_bar <= eps_star_val
    if not accepted:
        raise AssessmentFailed(
            0, f"accuracy gate: eps_bar {eps_bar:.3e} > eps* {eps_star_val:.3e}"
        )
    reconstruction = "h" if (eps2 is not None and eps_bar <= eps2) else "h+yhat"
    report = AssessmentReport(
        growth_ok=True, rom_stable=True, blm_gas=True,
        rom_eigenvalues=rom_rep.eigenvalues, iss_gain=rom_rep.iss_gain,
        bounds=bounds, workspace=ws, accepted=True,
        reconstruction=reconstruction, seed=box.seed,
        notes={"eps_bar": eps_bar,
               "growth_sup": {"f": growth.sup_f, "g": growth.sup_g,
                              **growth.sup_partials}},
    )
    return LsorResult(rom=rom, blm=blm, qss=qss, report=report)


def run_lsor(sys: SingularSystem, box: DomainBox, cfg: LsorConfig | None = None) -> LsorResult:
    """Assessment-embedded reduction with one feedback re-partition.

    Raises AssessmentFailed carrying the failing assumption (1, 2 or 3; 0 for
    the accuracy gate) once the retry budget is exhausted, or immediately
    when no repartition hook is configured.
    """
    cfg = cfg or LsorConfig()
    current = sys
    for attempt in (0, 1):
        try:
            return _assess_once(current, box, cfg)
        except (AssessmentFailed, InfeasibleConstants) as exc:
            hook = cfg.repartition
            if attempt == 0 and hook is not None:
                current, _ = hook()
                continue
            if isinstance(exc, InfeasibleConstants):
                raise AssessmentFailed(2, str(exc)) from exc
            raise
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# scenario execution


@dataclass
class RunBundle:
    scenario_id: str
    grid: np.ndarray
    labels: tuple[str, ...]
    series: dict           # variant -> (len(grid), n+m) state matrix
    report: AssessmentReport | None
    report_error: str | None
    metrics: dict
    timing: list           # rows: dict(solver, model, wall_s, steps, rhs_evals)
    raw: dict = field(default_factory=dict)  # variant -> Trajectory


def _solver_cfg(options, method, h0=1e-4):
    s = options.get("solver", {})
    return SolverConfig(rtol=s.get("rtol", 1e-6), atol=s.get("atol", 1e-8),
                        h0=h0, method=method)


def _qss_on_grid(qss, x_grid, u, times):
    h_vals = np.empty((times.size, qss.sys.m))
    qss.invalidate()
    for i, t in enumerate(times):
        h_vals[i] = qss.solve(x_grid[i], u.value(t))
    return h_vals


def _layer_reconstruction(blm, qss, x_traj: Trajectory, u: InputSignal, z0,
                          times, h_vals, cfg: SolverConfig):
    """Piecewise boundary-layer correction on the comparison grid.

    A fresh layer launches at t = 0 and at every input breakpoint: the layer
    state is the mismatch between the previous reconstruction's left limit
    and the new quasi-steady value, integrated in stretched time with the
    slow state frozen at the segment entry.
    """
    base = blm.base
    eps_bar = base.eps_bar
    tau_scale = blm.tau_scale
    eps0 = np.zeros(base.m)
    bps = [b for b in u.breakpoints if times[0] < b < times[-1]]
    seg_edges = [times[0], *bps, times[-1]]
    y_grid = np.zeros((times.size, base.m))
    solver = QssMap(base, residual_tol=qss.residual_tol, res_scale=qss.res_scale)
    prev_end_state = np.asarray(z0, float)  # reconstruction value entering the segment

    for k in range(len(seg_edges) - 1):
        t_a, t_b = seg_edges[k], seg_edges[k + 1]
        x_a = x_traj.sample([t_a])[0]
        u_a = u.value(t_a)
        solver.invalidate()
        h_a = solver.solve(x_a, u_a)
        y0 = prev_end_state - h_a
        tau_span = (t_b - t_a) / eps_bar
        mask = (times >= t_a) & (times <= t_b)
        y_end = y0
        if np.linalg.norm(y0) > 0 and tau_span > 0:
            # the scaled layer is itself multirate, so integrate it implicitly
            layer = integrate(
                lambda tau, yv: tau_scale * np.asarray(
                    base.g(x_a, yv + h_a, u_a, eps0), dtype=float),
                y0, (0.0, tau_span),
                SolverConfig(rtol=cfg.rtol, atol=cfg.atol, h0=1e-3, method=STIFF),
            )
            y_grid[mask] = layer.sample((times[mask] - t_a) / eps_bar)
            y_end = layer.states[-1]
        # left limit of the reconstruction at the segment end seeds the next layer
        x_b = x_traj.sample([t_b])[0]
        solver.invalidate()
        prev_end_state = solver.solve(x_b, u_a) + y_end
    return y_grid


def run_scenario(cfg_source, grid_points: int = COMPARISON_GRID,
                 seed: int | None = None, solver_overrides=None,
                 bench: bool = True) -> RunBundle:
    """Simulate all model variants of a microgrid config and collect metrics.

    The full model integrates with the stiff method (its trajectories are the
    reference), the reduced variants with the explicit one; the timing table
    runs full and reduced models under both solver families at the bench
    horizon (medians of BENCH_REPEATS).
    """
    params, net, scn, options = load_config(cfg_source)
    if solver_overrides:
        options = {**options, "solver": {**options.get("solver", {}), **solver_overrides}}
    system, partition, mg = mg_mod.assemble_system(
        params, net, scn, convention=options.get("convention", "paper"))
    u = scn.input_signal(mg.n_der)
    u0 = u.value(0.0)
    eq = mg.equilibrium(u0)
    islow = list(partition.slow_indices)
    ifast = list(partition.fast_indices)
    x0 = eq[islow]
    z0 = eq[ifast]

    acfg = options.get("assessment", {})
    if seed is None:
        seed = int(acfg.get("seed", 0))
    scales = mg.state_scales(u)
    sx = scales[islow]
    sz = scales[ifast]
    # the input box spans exactly the scenario's command/load range: sampling
    # beyond it (e.g. negative load conductances) would assess unreachable and
    # unphysical operating points
    mu = float(acfg.get("mu", 2.0))
    seg_matrix = np.vstack([v for _, v in u.segments])
    u_lo = np.min(seg_matrix, axis=0)
    u_hi = np.max(seg_matrix, axis=0)
    u_center = 0.5 * (u_lo + u_hi)
    su = np.maximum((u_hi - u_lo) / (2.0 * mu),
                    1e-9 + 1e-3 * np.abs(u_center))
    box = DomainBox(
        mu=mu, samples=int(acfg.get("samples", 256)),
        scheme=acfg.get("scheme", "sobol"), seed=seed,
        x_scale=sx, z_scale=sz, u_scale=su,
        x_center=x0, z_center=z0, u_center=u_center,
    )
    lsor_cfg = LsorConfig(
        residual_tol=1e-9, res_scale=sz, x_eq=x0, u_eq=u0, seed=seed,
        repartition=None,
    )
    report = None
    report_error = None
    try:
        result = run_lsor(system, box, lsor_cfg)
        report = result.report
        qss = result.qss
        rom = result.rom
        blm = result.blm
    except AssessmentFailed as exc:
        report_error = str(exc)
        qss = QssMap(system, residual_tol=1e-9, res_scale=sz)
        rom = build_rom(system, qss)
        blm = build_blm(system, qss)

    horizon = scn.horizon
    events = EventSchedule(u.breakpoints)
    cfg_stiff = _solver_cfg(options, STIFF)
    cfg_expl = _solver_cfg(options, EXPLICIT, h0=1e-3)

    # full reference (stiff family)
    tr_full = integrate_coupled(system, x0, z0, u, (0.0, horizon), cfg_stiff)

    # reduced model (explicit family)
    qss.invalidate()
    qss.last_solution = z0.copy()
    tr_rom = integrate(
        lambda t, xv: rom.rhs(xv, u.value(t)), x0, (0.0, horizon), cfg_expl,
        events=events,
    )

    # small-signal baseline
    baseline = baseline_small_signal(system, (x0, z0, u0))
    tr_ss = integrate(
        lambda t, xv: baseline.rhs(xv, u.value(t)), x0, (0.0, horizon), cfg_expl,
        events=events,
    )

    # comparison grid: uniform CSV grid plus layer-resolving windows after
    # each input step (the boundary layer lives far below the uniform spacing)
    times_csv = np.linspace(0.0, horizon, grid_points)
    eps_bar = system.eps_bar
    window = max(60.0 * eps_bar, 0.02)
    dense = [np.linspace(b, min(b + window, horizon), 160)
             for b in u.breakpoints if b < horizon]
    times = np.union1d(times_csv, np.concatenate(dense)) if dense else times_csv
    csv_idx = np.searchsorted(times, times_csv)

    x_full = tr_full.sample(times)
    x_rom = tr_rom.sample(times)
    x_ss = tr_ss.sample(times)
    h_vals = _qss_on_grid(QssMap(system, residual_tol=1e-9, res_scale=sz),
                          x_rom[:, :system.n], u, times)
    y_grid = _layer_reconstruction(blm, qss, tr_rom, u, z0, times, h_vals, cfg_expl)
    z_ss = np.vstack([baseline.fast(x_ss[i], u.value(t)) for i, t in enumerate(times)])

    series_fine = {
        "full": x_full,
        "rom": np.hstack([x_rom, h_vals]),
        "rom_blm": np.hstack([x_rom, h_vals + y_grid]),
        "smallsig": np.hstack([x_ss, z_ss]),
    }
    series = {k: v[csv_idx] for k, v in series_fine.items()}

    metrics = _error_metrics(series_fine, system, times, report)
    metrics["reconstruction_ordering"] = _ordering_metrics(
        series_fine, system.n, times, u.breakpoints, window)

    timing = []
    if bench:
        timing = bench_models(system, rom, qss, u, z0, x0, scn, options)

    return RunBundle(
        scenario_id=f"{scn.mode}",
        grid=times_csv,
        labels=system.labels,
        series=series,
        report=report,
        report_error=report_error,
        metrics=metrics,
        timing=timing,
        raw={"full": tr_full, "rom": tr_rom, "smallsig": tr_ss,
             "fine_grid": times, "fine_series": series_fine},
    )


def _ordering_metrics(series_fine, n, times, breakpoints, window):
    """Max fast-state error of the two reconstructions on each step window."""
    out = []
    full = series_fine["full"]
    for b in breakpoints:
        mask = (times >= b) & (times <= b + window)
        if not np.any(mask):
            continue
        e_h = float(np.max(np.linalg.norm(
            series_fine["rom"][mask][:, n:] - full[mask][:, n:], axis=1)))
        e_hy = float(np.max(np.linalg.norm(
            series_fine["rom_blm"][mask][:, n:] - full[mask][:, n:], axis=1)))
        out.append({"t_step": float(b), "window": float(window),
                    "h_only": e_h, "h_plus_layer": e_hy,
                    "layer_improves": e_hy <= e_h})
    return out


def _error_metrics(series, system, times, report):
    n = system.n
    full = series["full"]
    eps_bar = system.eps_bar
    out = {"eps_bar": eps_bar, "quantities": {}}
    for variant in ("rom", "rom_blm", "smallsig"):
        diff = series[variant] - full
        per_state = {}
        for j, label in enumerate(system.labels or ()):
            per_state[label] = {
                "max_abs": float(np.max(np.abs(diff[:, j]))),
                "rms": float(np.sqrt(np.mean(diff[:, j] ** 2))),
            }
        out["quantities"][variant] = per_state
    # theorem error laws at the system's eps (slow / fast / fast-after-T)
    e_slow = float(np.max(np.linalg.norm(full[:, :n] - series["rom"][:, :n], axis=1)))
    e_fast = float(np.max(np.linalg.norm(full[:, n:] - series["rom_blm"][:, n:], axis=1)))
    laws = {"E_slow": e_slow, "E_fast_with_layer": e_fast}
    if report is not None and report.bounds and report.bounds.T is not None:
        tail = times >= report.bounds.T
        if np.any(tail):
            laws["E_fast_after_T"] = float(np.max(
                np.linalg.norm(full[tail][:, n:] - series["rom"][tail][:, n:], axis=1)
            ))
    if report is not None and report.error_slopes is not None:
        laws["slopes"] = report.error_slopes.as_dict()
    out["error_laws"] = laws
    return out


def bench_models(system, rom, qss, u, z0, x0, scn, options,
                 repeats: int = BENCH_REPEATS):
    """Timing rows (2 solvers x 2 models) on the bench horizon, median wall.

    Step counts are deterministic across repeats; only the wall-clock medians
    vary run to run.
    """
    horizon = scn.bench_horizon or scn.horizon
    events = EventSchedule([b for b in u.breakpoints if b < horizon])
    rows = []
    for method in (EXPLICIT, STIFF):
        for model in ("full", "reduced"):
            walls = []
            stats = None
            for _ in range(repeats):
                if model == "full":
                    cfg = _solver_cfg(options, method,
                                      h0=1e-5 if method == EXPLICIT else 1e-4)
                    tr = integrate_coupled(system, x0, z0, u, (0.0, horizon), cfg)
                else:
                    cfg = _solver_cfg(options, method, h0=1e-3)
                    qss.invalidate()
                    qss.last_solution = z0.copy()
                    tr = integrate(lambda t, xv: rom.rhs(xv, u.value(t)), x0,
                                   (0.0, horizon), cfg, events=events)
                walls.append(tr.stats.wall_s)
                stats = tr.stats
            rows.append({
                "solver": method,
                "model": model,
                "wall_s": float(np.median(walls)),
                "steps": stats.accepted,
                "rhs_evals": stats.n_rhs,
            })
    return rows


# ---------------------------------------------------------------------------
# emission


def emit(bundle: RunBundle, out_dir) -> list[str]:
    """Write trajectories.csv, metrics.json, timing.csv and report.json."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    path = os.path.join(out_dir, "trajectories.csv")
    cols = [bundle.grid]
    header = ["t"]
    for variant in VARIANTS:
        if variant not in bundle.series:
            continue
        mat = bundle.series[variant]
        for j, label in enumerate(bundle.labels):
            header.append(f"{variant}.{label}")
            cols.append(mat[:, j])
    np.savetxt(path, np.column_stack(cols), delimiter=",",
               header=",".join(header), comments="", fmt="%.17g")
    written.append(path)

    path = os.path.join(out_dir, "metrics.json")
    with open(path, "w") as fh:
        json.dump(bundle.metrics, fh, indent=2)
    written.append(path)

    path = os.path.join(out_dir, "timing.csv")
    with open(path, "w") as fh:
        fh.write("solver,model,wall_s,steps,rhs_evals\n")
        for row in bundle.timing:
            fh.write(f"{row['solver']},{row['model']},{row['wall_s']:.6f},"
                     f"{row['steps']},{row['rhs_evals']}\n")
    written.append(path)

    path = os.path.join(out_dir, "report.json")
    if bundle.report is not None:
        bundle.report.to_json(path)
    else:
        with open(path, "w") as fh:
            json.dump({"accepted": False, "error": bundle.report_error}, fh, indent=2)
    written.append(path)
    return written


def reduce_descriptor(cfg_source) -> dict:
    """ROM/BLM JSON descriptor for the CLI reduce subcommand."""
    params, net, scn, options = load_config(cfg_source)
    system, partition, mg = mg_mod.assemble_system(
        params, net, scn, convention=options.get("convention", "paper"))
    return descriptor(system, partition)
