"""Command-line front end: solve, simulate, reproduce, converge and rerun.

Every command writes ``manifest.json`` next to its outputs. The manifest holds
the full model, the resolved options, the seeds, the SHA-256 of every output
and per-stage timings; ``rerun`` replays it and compares the output hashes.
"""
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import click
import numpy as np

from . import __version__, _jit
from .costs import (
    ProbeSpec, convergence_study, cost_report, meanfield_gap, solve_mode,
)
from .errors import ConfigError, MFError, ReproducibilityError
from .io import atomic_write_bytes, csv_text, grid_block_csv, write_json
from .model import from_dict, load_model, table1_path
from .simulator import SimConfig, simulate_many, stored_steps, trapezoid_weights
from .svgplot import line_plot

MODES = ("openloop", "feedback")


# ---------------------------------------------------------------- run bookkeeping


class Run:
    """Output directory, output hashes, stage timings and the manifest."""

    def __init__(self, command, out, params, model_sha, args):
        self.command = command
        self.out = Path(out)
        self.params = params
        self.model_sha = model_sha
        self.args = args
        self.outputs = {}
        self.timings = {}
        self.summary = {}

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        try:
            yield
        except MFError as exc:
            if not hasattr(exc, "stage"):
                exc.stage = name
            raise
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0

    def write(self, rel, data):
        if isinstance(data, str):
            data = data.encode("utf-8")
        atomic_write_bytes(self.out / rel, data)
        self.outputs[rel] = hashlib.sha256(data).hexdigest()

    def manifest(self):
        p = self.params
        return {
            "tool": "mfstackelberg", "version": __version__, "backend": _jit.BACKEND,
            "command": self.command, "args": self.args,
            "model": p.to_dict(), "model_sha256": self.model_sha,
            "model_canonical_sha256": p.hash(),
            "solver_grid": {"T": p.T, "grid_steps": p.grid_steps},
            "seed": self.args.get("seed"),
            "outputs": dict(sorted(self.outputs.items())),
            "summary": self.summary,
            "timings": {k: round(v, 6) for k, v in sorted(self.timings.items())},
        }

    def finish(self):
        write_json(self.out / "manifest.json", self.manifest())


def _load(model, grid_steps=None, T=None):
    path = Path(model) if model else table1_path()
    params = load_model(path)
    sha = hashlib.sha256(path.read_bytes()).hexdigest()
    if T is not None:
        params = params.replace(T=T)
    if grid_steps is not None:
        if grid_steps < 1:
            raise ConfigError(f"grid steps must be positive, got {grid_steps}")
        params = params.replace(grid_steps=grid_steps)
    return params, sha


def _executor_map(workers):
    if workers is None or workers <= 1:
        return None, map
    pool = ProcessPoolExecutor(max_workers=workers)
    return pool, pool.map


# ---------------------------------------------------------------- solve


def _sym_eigs(M):
    return np.linalg.eigvalsh(0.5 * (M + np.swapaxes(M, -1, -2)))


def assumption_report(params, sol):
    """Per grid time: spectra of the control weights and the sign/range flags."""
    m = params.mats()
    if sol.mode == "openloop":
        fol, stk = sol.fol, sol.stk
        e = _sym_eigs(fol.Ups.values)
        e0 = _sym_eigs(stk.Ups0.values)
        cols = {"ups_min_eig": e[:, 0], "ups_max_eig": e[:, -1],
                "ups_minus_R_min_eig": _sym_eigs(fol.Ups.values - m.R)[:, 0],
                "a3_psd": fol.a3_psd.astype(float), "a3_range": fol.a3_range.astype(float),
                "ups0_min_eig": e0[:, 0], "ups0_max_eig": e0[:, -1]}
        t = fol.K.grid
    else:
        fb = sol.fb
        e = _sym_eigs(fb.Ups.values)
        e0 = _sym_eigs(fb.Ups0.values)
        cols = {"ups_min_eig": e[:, 0], "ups_max_eig": e[:, -1],
                "ups_minus_R_min_eig": _sym_eigs(fb.Ups.values - m.R)[:, 0],
                "ups0_min_eig": e0[:, 0], "ups0_max_eig": e0[:, -1],
                "theta1_min_eig": _sym_eigs(fb.Th1.values)[:, 0]}
        t = fb.M.grid
    rows = np.column_stack([t] + list(cols.values()))
    summary = {k: float(v.min()) for k, v in cols.items()}
    return csv_text(["t"] + list(cols), rows.tolist()), summary


def run_solve(run, mode, formulation):
    params = run.params
    with run.stage("solve"):
        sol = solve_mode(params, mode, formulation)
    with run.stage("export"):
        blocks = {}
        if mode == "openloop":
            blocks.update(sol.fol.blocks())
            blocks.update({"stacked_" + k if k in ("A", "B", "B0") else k: v
                           for k, v in sol.stk.blocks().items()})
        else:
            blocks.update(sol.fb.blocks())
        for name, f in blocks.items():
            run.write(f"solution/{name}.csv", grid_block_csv(f.grid, {name: f.values}))
        run.write("gains.csv", sol.policy.to_csv())
        text, summary = assumption_report(params, sol)
        run.write("assumptions.csv", text)
        run.summary = {"min_over_grid": summary}
    run.finish()
    return sol


# ---------------------------------------------------------------- simulate


def time_mean(ens, arr):
    """Trapezoidal time average of the path-mean of ``arr`` (paths, times, k)."""
    w = trapezoid_weights(ens.t)
    return arr.mean(axis=0).T @ w / (ens.t[-1] - ens.t[0])


def _gap_csv(gap):
    keys = [k for k in ("xbar", "x0", "follower") if k in gap]
    rows = np.column_stack([gap["t"]] + [gap[k] for k in keys])
    return csv_text(["t"] + [f"gap_{k}" for k in keys], rows.tolist())


def _simulate_mode(params, mode, cfg, formulation):
    sol = solve_mode(params, mode, formulation)
    ens = simulate_many(params, [(sol.policy, None, sol.stk)], cfg)[0]
    return sol, ens


def run_simulate(run, modes, cfg, formulation, ensemble_format):
    params = run.params
    cfg.check()
    summary_rows = []
    for mode in modes:
        prefix = f"{mode}/" if len(modes) > 1 else ""
        with run.stage(f"solve+simulate:{mode}"):
            sol, ens = _simulate_mode(params, mode, cfg, formulation)
        with run.stage(f"costs:{mode}"):
            rep = cost_report(params, sol, ens)
            gap = meanfield_gap(ens)
        with run.stage(f"export:{mode}"):
            if ensemble_format == "csv":
                run.write(prefix + "ensemble.csv", ens.to_csv())
            elif ensemble_format == "npz":
                run.write(prefix + "ensemble.npz", ens.to_npz())
            run.write(prefix + "path_costs.csv", ens.costs_csv())
            run.write(prefix + "costs.csv", rep.to_csv())
            run.write(prefix + "gap.csv", _gap_csv(gap))
        for name, arr in (("xN", ens.xN), ("xbar", ens.xbar), ("x0", ens.x0)):
            for j, v in enumerate(time_mean(ens, arr)):
                summary_rows.append((mode, f"{name}_time_mean[{j}]", float(v)))
        summary_rows.append((mode, "meanfield_gap_sup", gap["sup"]))
        summary_rows.append((mode, "leader_cost", rep.leader_cost))
        summary_rows.append((mode, "social_cost", rep.social_cost))
    run.write("summary.csv", csv_text(["mode", "quantity", "value"], summary_rows))
    run.summary = {f"{m}:{q}": v for m, q, v in summary_rows}
    run.finish()


# ---------------------------------------------------------------- reproduce


def _thin(f, every):
    idx = stored_steps(f.K, every)
    return f.grid[idx], f.values[idx]


def _component_series(prefix, t, vals):
    out = []
    for i in range(vals.shape[1]):
        for j in range(vals.shape[2]):
            out.append((f"{prefix}[{i}][{j}]", t, vals[:, i, j]))
    return out


def _path_mean_columns(name, arr):
    m = arr.mean(axis=0)
    return {f"{name}[{j}]": m[:, j] for j in range(m.shape[1])}


def run_reproduce(run, cfg, workers):
    params = run.params
    cfg.check()
    every = cfg.store_every
    pool, map_fn = _executor_map(workers)
    try:
        with run.stage("solve+simulate"):
            k = len(MODES)
            results = dict(zip(MODES, map_fn(_simulate_mode, [params] * k, MODES, [cfg] * k,
                                             ["derived"] * k)))
    finally:
        if pool is not None:
            pool.shutdown()
    (ol, ens_ol), (fb, ens_fb) = results["openloop"], results["feedback"]
    with run.stage("figures"):
        t, P = _thin(ol.stk.Pst, every)
        run.write("fig1_stacked_riccati.csv", grid_block_csv(t, {"Pst": P}))
        run.write("fig1_stacked_riccati.svg", line_plot(
            _component_series("Pst", t, P), "Stacked leader Riccati solution", "t", "value"))
        names = ("M", "Mbar", "M0", "Lam0", "Lambar", "Th1", "Th2", "Th3")
        thinned = {n: _thin(getattr(fb.fb, n), every)[1] for n in names}
        t2 = _thin(fb.fb.M, every)[0]
        run.write("fig2_feedback_riccati.csv", grid_block_csv(t2, thinned))
        series = [s for n in names for s in _component_series(n, t2, thinned[n])]
        run.write("fig2_feedback_riccati.svg", line_plot(
            series, "Feedback Riccati solutions", "t", "value"))
        cols3, cols4 = {}, {}
        for mode, ens in (("openloop", ens_ol), ("feedback", ens_fb)):
            cols3.update(_path_mean_columns(f"{mode}_xN", ens.xN))
            cols3.update(_path_mean_columns(f"{mode}_xbar", ens.xbar))
            gap = meanfield_gap(ens)
            cols3[f"{mode}_gap_rms"] = np.sqrt(gap["xbar"])
            cols4.update(_path_mean_columns(f"{mode}_x0", ens.x0))
            if ens.x0_limit is not None:
                cols4.update(_path_mean_columns(f"{mode}_x0_limit", ens.x0_limit))
        t3 = ens_ol.t
        run.write("fig3_state_averages.csv",
                  csv_text(["t"] + list(cols3), np.column_stack([t3] + list(cols3.values())).tolist()))
        run.write("fig3_state_averages.svg", line_plot(
            [(k, t3, v) for k, v in cols3.items() if "gap" not in k],
            f"Follower state averages and mean-field effects (N={cfg.N})", "t", "state"))
        run.write("fig4_leader_states.csv",
                  csv_text(["t"] + list(cols4), np.column_stack([t3] + list(cols4.values())).tolist()))
        run.write("fig4_leader_states.svg", line_plot(
            [(k, t3, v) for k, v in cols4.items()], "Leader state", "t", "x0"))
    summary = {}
    for mode, ens in (("openloop", ens_ol), ("feedback", ens_fb)):
        xbar_mean = time_mean(ens, ens.xbar)
        summary[f"{mode}:xN_time_mean"] = [float(v) for v in time_mean(ens, ens.xN)]
        summary[f"{mode}:xbar_time_mean"] = [float(v) for v in xbar_mean]
        rms = float(np.sqrt(meanfield_gap(ens)["sup"]))
        summary[f"{mode}:gap_rms_sup"] = rms
        summary[f"{mode}:gap_rms_sup_over_abs_xbar"] = rms / float(np.linalg.norm(
            time_mean(ens, np.abs(ens.xbar))))
    run.summary = summary
    run.finish()
    return summary


# ---------------------------------------------------------------- converge


def run_converge(run, mode, Ns, cfg, probe_spec, workers):
    params = run.params
    with run.stage("solve"):
        sol = solve_mode(params, mode)
    pool, map_fn = _executor_map(workers)
    try:
        with run.stage("sweep"):
            table = convergence_study(params, Ns, cfg, mode, probe_spec, sol=sol, map_fn=map_fn)
    finally:
        if pool is not None:
            pool.shutdown()
    run.write("convergence.csv", table.to_csv())
    run.write("slopes.csv", table.slopes_csv())
    run.summary = {"gap_slope": table.gap_slope.slope, "gap_slope_ci": [table.gap_slope.ci_low,
                                                                          table.gap_slope.ci_high]}
    run.finish()
    return table


# ---------------------------------------------------------------- dispatch

def _sim_cfg(a):
    return SimConfig(N=a["N"], paths=a["paths"], sim_steps=a["steps"], seed=a["seed"],
                     antithetic=a.get("antithetic", False), store_every=a["store_every"],
                     store_followers=a.get("store_followers"))


def execute(command, args, params, model_sha, out):
    """Run ``command`` with resolved ``args``; shared by the commands and ``rerun``."""
    run = Run(command, out, params, model_sha, args)
    if command == "solve":
        run_solve(run, args["mode"], args["formulation"])
    elif command == "simulate":
        modes = MODES if args["mode"] == "both" else (args["mode"],)
        run_simulate(run, modes, _sim_cfg(args), args["formulation"], args["ensemble"])
    elif command == "reproduce":
        run_reproduce(run, _sim_cfg(args), args["workers"])
    elif command == "converge":
        spec = ProbeSpec(directions=args["probe_directions"], seed=args["seed"]) \
            if args["probes"] else None
        run_converge(run, args["mode"], args["Ns"], _sim_cfg(dict(args, N=1)), spec,
                     args["workers"])
    else:
        raise ConfigError(f"unknown command {command!r}")
    return run


def _parse_Ns(text):
    try:
        Ns = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"follower counts must be comma-separated integers, got {text!r}")
    return Ns


# ---------------------------------------------------------------- click commands

model_opt = click.option("--model", type=click.Path(dir_okay=False), default=None,
                         help="Model file (YAML or JSON). Defaults to the bundled reference model.")
grid_opt = click.option("--grid-steps", type=int, default=None, help="Override the solver grid.")
out_opt = click.option("--out", type=click.Path(file_okay=False), required=True,
                       help="Output directory.")
seed_opt = click.option("--seed", type=int, default=0, show_default=True, help="Root seed (u64).")


@click.group()
@click.version_option(__version__, prog_name="mfstackelberg")
def main_group():
    """Mean-field LQG leader-follower games with multiplicative noise."""


@main_group.command()
@model_opt
@click.option("--mode", type=click.Choice(MODES), required=True)
@click.option("--formulation", type=click.Choice(("derived", "printed")), default="derived",
              show_default=True, help="Open-loop leader system variant.")
@grid_opt
@out_opt
def solve(model, mode, formulation, grid_steps, out):
    """Solve the Riccati systems and export every block on the grid."""
    params, sha = _load(model, grid_steps)
    execute("solve", {"mode": mode, "formulation": formulation}, params, sha, out)
    click.echo(f"wrote {out}")


@main_group.command()
@model_opt
@click.option("--mode", type=click.Choice(MODES + ("both",)), required=True)
@click.option("--N", "N", type=int, required=True, help="Number of followers.")
@click.option("--paths", type=int, default=1, show_default=True)
@seed_opt
@click.option("--steps", type=int, default=None, help="Euler steps (default: solver grid).")
@click.option("--store-every", type=int, default=10, show_default=True)
@click.option("--antithetic", is_flag=True, help="Antithetic path pairs.")
@click.option("--store-followers/--no-store-followers", default=False, show_default=True)
@click.option("--ensemble", type=click.Choice(("csv", "npz", "none")), default="csv",
              show_default=True)
@click.option("--formulation", type=click.Choice(("derived", "printed")), default="derived",
              show_default=True)
@grid_opt
@out_opt
def simulate(model, mode, N, paths, seed, steps, store_every, antithetic, store_followers,
             ensemble, formulation, grid_steps, out):
    """Solve, simulate N followers and report costs and mean-field gaps."""
    params, sha = _load(model, grid_steps)
    args = {"mode": mode, "N": N, "paths": paths, "seed": seed, "steps": steps,
            "store_every": store_every, "antithetic": antithetic,
            "store_followers": store_followers, "ensemble": ensemble, "formulation": formulation}
    run = execute("simulate", args, params, sha, out)
    for k, v in run.summary.items():
        click.echo(f"{k} = {v:.6g}")


@main_group.command()
@click.option("--N", "N", type=int, default=100, show_default=True)
@click.option("--paths", type=int, default=200, show_default=True)
@click.option("--seed", type=int, default=20240601, show_default=True)
@click.option("--steps", type=int, default=2000, show_default=True)
@click.option("--grid-steps", type=int, default=2000, show_default=True)
@click.option("--store-every", type=int, default=10, show_default=True)
@click.option("--T", "T", type=float, default=1.0, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@out_opt
def reproduce(N, paths, seed, steps, grid_steps, store_every, T, workers, out):
    """Four figures (SVG plus plotted data as CSV) for the reference model."""
    params, sha = _load(None, grid_steps, T)
    args = {"N": N, "paths": paths, "seed": seed, "steps": steps, "store_every": store_every,
            "workers": workers, "T": T, "grid_steps": grid_steps}
    run = execute("reproduce", args, params, sha, out)
    for k, v in run.summary.items():
        click.echo(f"{k} = {v}")


@main_group.command()
@model_opt
@click.option("--mode", type=click.Choice(MODES), required=True)
@click.option("--Ns", "Ns", default="25,50,100,200,400", show_default=True,
              help="Comma-separated follower counts (at least 3).")
@click.option("--paths", type=int, default=200, show_default=True)
@seed_opt
@click.option("--steps", type=int, default=None, help="Euler steps (default: solver grid).")
@click.option("--store-every", type=int, default=10, show_default=True)
@click.option("--probes/--no-probes", default=False, show_default=True,
              help="Also estimate the epsilon probes per N.")
@click.option("--probe-directions", type=int, default=12, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@grid_opt
@out_opt
def converge(model, mode, Ns, paths, seed, steps, store_every, probes, probe_directions,
             workers, grid_steps, out):
    """Sweep N: mean-field gaps, cost gaps and optional probes with log-log slopes."""
    params, sha = _load(model, grid_steps)
    args = {"mode": mode, "Ns": _parse_Ns(Ns), "paths": paths, "seed": seed, "steps": steps,
            "store_every": store_every, "probes": probes, "probe_directions": probe_directions,
            "workers": workers}
    run = execute("converge", args, params, sha, out)
    click.echo(f"gap slope = {run.summary['gap_slope']:.4g} "
               f"(95% CI {run.summary['gap_slope_ci'][0]:.4g} .. {run.summary['gap_slope_ci'][1]:.4g})")


@main_group.command()
@click.argument("manifest", type=click.Path(dir_okay=False, exists=True))
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--workers", type=int, default=None, help="Override the recorded worker count.")
def rerun(manifest, out, workers):
    """Replay a manifest into OUT and check that every output is byte-identical."""
    doc = json.loads(Path(manifest).read_text(encoding="utf-8"))
    try:
        params = from_dict(doc["model"], source=str(manifest))
        command, args = doc["command"], dict(doc["args"])
    except KeyError as exc:
        raise ConfigError(f"{manifest}: manifest lacks {exc}")
    if workers is not None and "workers" in args:
        args["workers"] = workers
    if doc.get("backend") != _jit.BACKEND:
        click.echo(f"note: recorded backend {doc.get('backend')}, running {_jit.BACKEND}", err=True)
    run = execute(command, args, params, doc.get("model_sha256"), out)
    want = doc.get("outputs", {})
    bad = sorted(k for k in set(want) | set(run.outputs) if want.get(k) != run.outputs.get(k))
    if bad:
        raise ReproducibilityError("outputs differ from the manifest: " + ", ".join(bad))
    click.echo(f"reproduced {len(want)} outputs byte-identically")


def main(argv=None):
    try:
        main_group.main(args=argv, prog_name="mfstackelberg", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except MFError as exc:
        stage = getattr(exc, "stage", None)
        where = f" [{stage}]" if stage else ""
        click.echo(f"mfstackelberg: error{where}: {exc}", err=True)
        sys.exit(exc.exit_code)
    sys.exit(0)


if __name__ == "__main__":
    main()
