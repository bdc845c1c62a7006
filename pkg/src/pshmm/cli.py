"""Command-line interface.

Exit codes: 0 on success, 2 for configuration/data problems, 3 for numerical
failures (non-convergent fits, singular systems).
"""

import csv
import sys

import click
import numpy as np

from . import io
from .config import ConfigError, build_model, load_config
from .model import ObservationTable
from .penalty import InnerNonConvergenceError
from .qreml import FitResult, OuterTrace, qreml, sdreport_outer

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
def main():
    """Markov-switching regression with penalized-spline transition effects."""


def _load_inputs(config_path, data_path):
    try:
        cfg = load_config(config_path)
    except (ConfigError, OSError) as err:
        _fail(EXIT_CONFIG, err)
    try:
        obs = io.ingest_csv(data_path, [n for n, _ in cfg.streams],
                            cfg.covariates, cfg.track)
    except (io.DataError, ValueError, OSError) as err:
        _fail(EXIT_CONFIG, err)
    return cfg, obs


@main.command()
@click.argument("config_path", metavar="CONFIG")
@click.argument("data_path", metavar="DATA")
@click.option("--out", default="result.json", show_default=True,
              help="Output result document.")
@click.option("--sdreport", "with_sd", is_flag=True,
              help="Also compute smoothing-parameter standard errors.")
@click.option("--verbose", is_flag=True, help="Print outer-iteration progress.")
def fit(config_path, data_path, out, with_sd, verbose):
    """Fit the model in CONFIG to the observations in DATA."""
    cfg, obs = _load_inputs(config_path, data_path)
    try:
        hmm, pen, lmap = build_model(cfg, obs)
    except (ConfigError, ValueError) as err:
        _fail(EXIT_CONFIG, err)
    try:
        result = qreml(
            hmm, obs, pen, lmap=lmap, alpha=cfg.alpha, outer_tol=cfg.outer_tol,
            max_outer=cfg.max_outer, inner_gtol=cfg.inner_tol,
            inner_maxiter=cfg.max_inner, verbose=verbose,
        )
    except (InnerNonConvergenceError,
            np.linalg.LinAlgError, FloatingPointError) as err:
        _fail(EXIT_NUMERIC, err)
    sdrep = None
    if with_sd and pen.blocks:
        try:
            sdrep = sdreport_outer(hmm, obs, pen, result, lmap=lmap,
                                   inner_gtol=cfg.inner_tol,
                                   inner_maxiter=cfg.max_inner)
        except (InnerNonConvergenceError, np.linalg.LinAlgError) as err:
            _fail(EXIT_NUMERIC, err)
    doc = io.build_result(cfg, hmm, pen, lmap, result, data_path=data_path,
                          config_path=config_path, obs=obs, sdrep=sdrep)
    io.write_result(doc, out)
    click.echo(f"log-likelihood {result.loglik:.4f}  edf {result.edf:.2f}  "
               f"AIC {result.aic:.2f}  BIC {result.bic:.2f}")
    for j, b in enumerate(pen.blocks):
        click.echo(f"  lambda[{b.label}] = {result.lam[j]:.6g}")
    status = "converged" if result.converged else "NOT converged"
    click.echo(f"{status} after {result.n_outer} outer iterations -> {out}")
    if not result.converged:
        sys.exit(EXIT_NUMERIC)


@main.command()
@click.argument("result_path", metavar="RESULT")
@click.option("--grid", multiple=True, required=True,
              help="Grid spec: 'var=start:stop:count' plus 'var=value' holds.")
@click.option("--draws", default=0, show_default=True,
              help="Posterior draws for pointwise intervals (0 = none).")
@click.option("--seed", default=0, show_default=True)
@click.option("--level", default=0.95, show_default=True)
@click.option("--out", default="-", help="Output CSV ('-' = stdout).")
def predict(result_path, grid, draws, seed, level, out):
    """Transition probabilities and periodically stationary state
    probabilities on a covariate grid, from a stored RESULT."""
    try:
        doc = io.load_result(result_path)
        var, grid_cols = io.parse_grid_spec(grid)
        pred = io.predict_transitions(doc, grid_cols, draws=draws,
                                      seed=seed, level=level)
    except (io.DataError, OSError, KeyError) as err:
        _fail(EXIT_CONFIG, err)
    except np.linalg.LinAlgError as err:
        _fail(EXIT_NUMERIC, err)
    N = pred["gamma"].shape[1]
    header = [var]
    for i in range(1, N + 1):
        for j in range(1, N + 1):
            header.append(f"gamma_{i}{j}")
            if draws > 0:
                header += [f"gamma_{i}{j}_lo", f"gamma_{i}{j}_hi"]
    for i in range(1, N + 1):
        header.append(f"stationary_{i}")
        if draws > 0:
            header += [f"stationary_{i}_lo", f"stationary_{i}_hi"]
    fh = sys.stdout if out == "-" else open(out, "w", newline="")
    try:
        w = csv.writer(fh)
        w.writerow(header)
        for t, z in enumerate(grid_cols[var]):
            row = [f"{z:.10g}"]
            for i in range(N):
                for j in range(N):
                    row.append(f"{pred['gamma'][t, i, j]:.10g}")
                    if draws > 0:
                        row.append(f"{pred['gamma_lo'][t, i, j]:.10g}")
                        row.append(f"{pred['gamma_hi'][t, i, j]:.10g}")
            for i in range(N):
                row.append(f"{pred['stationary'][t, i]:.10g}")
                if draws > 0:
                    row.append(f"{pred['stationary_lo'][t, i]:.10g}")
                    row.append(f"{pred['stationary_hi'][t, i]:.10g}")
            w.writerow(row)
    finally:
        if fh is not sys.stdout:
            fh.close()


def _simulate_covariates(cfg, T, n_tracks, rng):
    spec = cfg.simulate.get("covariates") or {}
    needed = cfg.covariates
    missing = [v for v in needed if v not in spec]
    if missing:
        raise ConfigError(f"simulate.covariates must define {missing}")
    track_len = T // n_tracks
    if track_len * n_tracks != T:
        raise ConfigError("simulate: length must be divisible by tracks")
    tracks = [(k * track_len, (k + 1) * track_len) for k in range(n_tracks)]
    cols = {}
    for var, g in spec.items():
        if not isinstance(g, dict) or "kind" not in g:
            raise ConfigError(f"simulate.covariates.{var}: need a mapping with 'kind'")
        kind = g["kind"]
        if kind == "cyclic":
            period = float(g["period"])
            step = float(g.get("step", 1.0))
            start = float(g.get("start", 0.0))
            t = np.arange(track_len)
            cols[var] = np.tile((start + step * t) % period, n_tracks)
        elif kind == "uniform":
            lo, hi = float(g.get("min", 0.0)), float(g.get("max", 1.0))
            cols[var] = rng.uniform(lo, hi, T)
        elif kind == "linear":
            a, b = float(g.get("start", 0.0)), float(g.get("stop", 1.0))
            cols[var] = np.tile(np.linspace(a, b, track_len), n_tracks)
        elif kind == "track":
            cols[var] = np.repeat(np.arange(1, n_tracks + 1), track_len).astype(float)
        else:
            raise ConfigError(f"simulate.covariates.{var}: unknown kind '{kind}'")
    return cols, tracks


@main.command()
@click.argument("config_path", metavar="CONFIG")
@click.option("--length", "-T", "T", default=None, type=int,
              help="Total rows (overrides simulate.length).")
@click.option("--seed", default=None, type=int, help="Overrides config seed.")
@click.option("--out", default="-", help="Output CSV ('-' = stdout).")
@click.option("--states-out", default=None, help="Optional CSV of true states.")
def simulate(config_path, T, seed, out, states_out):
    """Simulate observations from the model in CONFIG.

    Coefficients default to zero (transition intercepts to -2) and are set
    via the ``simulate.theta`` mapping of layout-block names to value lists.
    """
    try:
        cfg = load_config(config_path)
    except (ConfigError, OSError) as err:
        _fail(EXIT_CONFIG, err)
    sim = cfg.simulate
    T = T if T is not None else int(sim.get("length", 1000))
    n_tracks = int(sim.get("tracks", 1))
    seed = seed if seed is not None else cfg.seed
    rng = np.random.default_rng(seed)
    try:
        cols, tracks = _simulate_covariates(cfg, T, n_tracks, rng)
        dummy = ObservationTable(
            {n: np.zeros(T) for n, _ in cfg.streams}, cols, tracks
        )
        hmm, _, _ = build_model(cfg, dummy)
        theta = np.zeros(hmm.dim)
        for e in hmm.entries:
            theta[hmm.block(f"{e[0]}->{e[1]}.icpt").start] = -2.0
        for name, vals in (sim.get("theta") or {}).items():
            try:
                blk = hmm.block(name)
            except KeyError:
                raise ConfigError(
                    f"simulate.theta: unknown block '{name}'; available: "
                    f"{[b.name for b in hmm.layout]}"
                ) from None
            vals = np.atleast_1d(np.asarray(vals, dtype=float))
            if len(vals) != blk.size:
                raise ConfigError(
                    f"simulate.theta.{name}: expected {blk.size} values, got {len(vals)}"
                )
            theta[blk.slice] = vals
    except (ConfigError, ValueError) as err:
        _fail(EXIT_CONFIG, err)
    obs, states = hmm.simulate(theta, cols, tracks, seed=rng.integers(2**31))
    track_name = cfg.track or ("track" if n_tracks > 1 else None)
    header = ([track_name] if track_name else []) \
        + [n for n, _ in cfg.streams] + list(cols)
    track_col = np.repeat(np.arange(1, n_tracks + 1), T // n_tracks)
    fh = sys.stdout if out == "-" else open(out, "w", newline="")
    try:
        w = csv.writer(fh)
        w.writerow(header)
        for t in range(T):
            row = []
            if track_name:
                row.append(int(track_col[t]))
            row += [f"{obs.streams[n][t]:.10g}" for n, _ in cfg.streams]
            row += [f"{cols[v][t]:.10g}" for v in cols]
            w.writerow(row)
    finally:
        if fh is not sys.stdout:
            fh.close()
    if states_out:
        with open(states_out, "w", newline="") as sf:
            w = csv.writer(sf)
            w.writerow(["state"])
            for s in states:
                w.writerow([int(s)])


@main.command()
@click.argument("result_path", metavar="RESULT")
@click.option("--config", "config_path", default=None,
              help="Config path (defaults to the one stored in RESULT).")
@click.option("--data", "data_path", default=None,
              help="Training data path (defaults to the one stored in RESULT).")
@click.option("--out", default=None, help="Write updated result document here.")
def sdreport(result_path, config_path, data_path, out):
    """Standard errors for the smoothing parameters of a stored RESULT.

    Refits are warm-started at the stored coefficients, so the training data
    must be available.
    """
    try:
        doc = io.load_result(result_path)
    except (io.DataError, OSError) as err:
        _fail(EXIT_CONFIG, err)
    data_path = data_path or (doc.get("paths") or {}).get("data")
    if not data_path:
        _fail(EXIT_CONFIG, "no training data path stored in result; pass --data")
    cfg_src = config_path or (doc.get("paths") or {}).get("config")
    try:
        streams = list(doc["config"]["streams"])
        track = doc["config"].get("track")
        covs = set()
        from .bases import basis_covariates
        for items in doc["terms"].values():
            for it in items:
                covs |= basis_covariates(it["basis"])
        obs = io.ingest_csv(data_path, streams, sorted(covs), track)
        hmm, pen, lmap = io.model_from_result(doc, obs)
    except (io.DataError, ConfigError, ValueError, OSError) as err:
        _fail(EXIT_CONFIG, err)
    if pen is None or not pen.blocks or lmap is None:
        _fail(EXIT_CONFIG, "result has no free smoothing parameters")
    theta, _ = io.theta_from_result(doc)
    shim = FitResult(theta, pen.lam.copy(), pen, np.asarray(doc["J"]),
                     doc["fit"]["loglik"], doc["fit"]["edf"], doc["fit"]["aic"],
                     doc["fit"]["bic"], OuterTrace(), True, 0, lmap)
    try:
        rep = sdreport_outer(hmm, obs, pen, shim, lmap=lmap)
    except (InnerNonConvergenceError, np.linalg.LinAlgError) as err:
        _fail(EXIT_NUMERIC, err)
    for g, lam, sdl, s2, sds in zip(rep.groups, rep.lam, rep.sd_lam,
                                    rep.sigma2, rep.sd_sigma2):
        click.echo(f"{g}: lambda = {lam:.6g} (sd {sdl:.3g})  "
                   f"sigma^2 = {s2:.6g} (sd {sds:.3g})")
    if not rep.invertible:
        click.echo("warning: outer curvature not invertible; per-component "
                   "approximation reported", err=True)
    if out:
        doc["sdreport"] = rep.to_jsonable()
        doc["paths"]["config"] = cfg_src
        io.write_result(doc, out)
        click.echo(f"updated result -> {out}")


if __name__ == "__main__":
    main()
