"""Command-line frontend.

Every command reads one JSON config, writes its outputs into a fresh
timestamped subdirectory of --out (or directly into --out with --overwrite),
and drops a manifest.json recording the resolved config, seed, versions, and
per-stage wall times.  Result files are a pure function of (config, seed):
reruns are byte-identical regardless of --threads; only the manifest's
timing block varies between runs.

Exit codes: 0 ok, 2 config error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from . import __version__
from .ccp import Dataset, fit_bspline, fit_cell_mean
from .errors import ConfigError, KlscoreError, NumericError
from .inference import box_grid, confidence_set, counterfactual_ci, pseudo_true_grid, rao_statistic
from .mc import DgpConfig, default_h_grid, size_power_experiment, table1_theta
from .models import entry_probability, model_from_config
from .numerics import SeededRng, chi2_quantile
from .projection import project_closed_form, project_generic
from .score import SmoothingConfig, score_closed_form, score_multiplier, score_smoothed
from .events import build_constraints
from .inference import ConfidenceSet

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


SCHEMAS = {
    "project": {
        "model": "model config: {model: entry_probit|entry_uniform|choiceset, params: {...}}",
        "theta": "parameter vector (list of numbers)",
        "x": "covariate row (list of numbers)",
        "p0": "strictly positive pmf over the model's outcomes",
        "method": "generic | closed_form (default generic)",
    },
    "score": {
        "model": "model config",
        "theta": "parameter vector",
        "x": "covariate row",
        "p0": "pmf used as the conditioning estimate",
        "method": "closed_form | multiplier | smoothed",
        "smoothing": "{c_sigma: 0.075, draws: >=100, n: sample size} (smoothed only)",
    },
    "test": {
        "model": "model config",
        "data_csv": "dataset CSV path (outcome label + covariate columns)",
        "theta": "parameter vector to test",
        "ccp": "{kind: cell_mean|bspline, degree, knots_per_dim, clip}",
        "method": "closed_form | multiplier | smoothed",
        "alpha": "test level (flag --alpha overrides)",
        "epsilon": "covariance regularization (flag --epsilon overrides)",
    },
    "cs": {
        "model": "model config",
        "data_csv": "dataset CSV path",
        "grid": "{bounds: [[lo,hi],...], counts: [...]} or {csv: path}",
        "ccp": "first-stage config",
        "method": "score method",
        "alpha": "level",
        "epsilon": "regularization",
    },
    "ci": {
        "cs_csv": "confidence-set CSV produced by the cs command",
        "functional": "{type: coordinate, index: j} or {type: entry_prob, model: {...}, x: [...], d: 0|1}",
    },
    "pseudotrue": {
        "model": "model config",
        "grid": "as in cs",
        "population": "{x: [[...]], p0: [[...]], weights: [...]}",
        "tol": "acceptance tolerance above the grid minimum (optional)",
    },
    "mc": {
        "dgp": "{theta0: [...] (optional; calibrated default), kappa, gamma, n, design: D1|D2, covariate_source, seed}",
        "reps": "Monte Carlo replications",
        "h_grid": "local-alternative offsets (optional; calibrated default)",
        "direction": "drift direction (optional; both interaction effects)",
        "theta_star": "evaluation point (optional; located from the population)",
        "ccp": "first-stage config",
        "alpha": "level",
        "epsilon": "regularization",
    },
}


def _fmt(v) -> str:
    return repr(float(v))


def _load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON config: {exc}") from exc


def _out_dir(out: str | None, command: str, overwrite: bool) -> Path:
    root = Path(out) if out else Path("runs")
    if overwrite:
        target = root
        target.mkdir(parents=True, exist_ok=True)
        return target
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%f")
    target = root / f"{command}-{stamp}"
    k = 0
    while target.exists():
        k += 1
        target = root / f"{command}-{stamp}-{k}"
    target.mkdir(parents=True)
    return target


def _manifest(out_dir: Path, command: str, config: dict, seed, threads, timings):
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "threads": threads,
        "versions": {
            "klscore": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
        "timings": timings,
    }
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _run(command, fn):
    try:
        fn()
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except (NumericError, KlscoreError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        sys.exit(EXIT_IO)


def _maybe_schema(ctx, command: str, schema: bool):
    if schema:
        click.echo(json.dumps({command: SCHEMAS[command]}, indent=2))
        ctx.exit(0)


def _smoothing_from(cfg: dict | None):
    if not cfg:
        return None
    return SmoothingConfig(
        c_sigma=cfg.get("c_sigma", 0.075), draws=cfg.get("draws", 1000), n=cfg.get("n")
    )


def _fit_ccp_config(data: Dataset, cfg: dict | None):
    cfg = cfg or {}
    kind = cfg.get("kind", "bspline" if data.covariates.shape[1] else "cell_mean")
    if kind == "cell_mean":
        return fit_cell_mean(data, clip=cfg.get("clip", 1e-3))
    if kind == "bspline":
        knots = cfg.get("knots_per_dim") or [1] * data.covariates.shape[1]
        return fit_bspline(data, degree=cfg.get("degree", 2), knots_per_dim=knots,
                           clip=cfg.get("clip", 1e-3),
                           discrete_cols=cfg.get("discrete_cols", ()))
    raise ConfigError(f"unknown ccp kind {kind!r}")


def _grid_from(cfg: dict) -> np.ndarray:
    if "csv" in cfg:
        return np.atleast_2d(np.loadtxt(cfg["csv"], delimiter=",", ndmin=2))
    if "bounds" in cfg and "counts" in cfg:
        return box_grid(cfg["bounds"], cfg["counts"])
    raise ConfigError("grid config needs either 'csv' or 'bounds' + 'counts'")


def _write_cs_csv(path: Path, cs: ConfidenceSet):
    d = cs.grid.shape[1]
    lines = [",".join([f"theta_{j + 1}" for j in range(d)] + ["t_n", "accepted", "error"])]
    for i in range(cs.grid.shape[0]):
        stat = "" if np.isnan(cs.statistics[i]) else _fmt(cs.statistics[i])
        err = cs.errors.get(i, "").replace(",", ";").replace("\n", " ")
        row = [_fmt(v) for v in cs.grid[i]] + [stat, str(int(cs.accepted[i])), err]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")


@click.group()
@click.version_option(__version__)
def main():
    """Set inference for incomplete discrete-outcome models."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", default=None, type=click.Path())
@click.option("--overwrite", is_flag=True)
@click.option("--schema", is_flag=True, help="print this command's config schema and exit")
@click.pass_context
def project(ctx, config_path, out, overwrite, schema):
    """KL-project an observed pmf onto the model polytope at one (theta, x)."""
    _maybe_schema(ctx, "project", schema)

    def body():
        cfg = _load_config(config_path)
        model = model_from_config(cfg["model"])
        theta = np.asarray(cfg["theta"], dtype=float)
        x = np.asarray(cfg["x"], dtype=float)
        p0 = np.asarray(cfg["p0"], dtype=float)
        method = cfg.get("method", "generic")
        t0 = time.perf_counter()
        if method == "closed_form":
            res = project_closed_form(model, theta, x, p0)
        elif method == "generic":
            res = project_generic(p0, build_constraints(model, theta, x))
        else:
            raise ConfigError(f"unknown projection method {method!r}")
        elapsed = time.perf_counter() - t0
        out_dir = _out_dir(out, "project", overwrite)
        (out_dir / "projection.json").write_text(json.dumps(res.to_dict(), indent=2))
        _manifest(out_dir, "project", cfg, None, 1, {"projection_seconds": elapsed})
        click.echo(str(out_dir))

    _run("project", body)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", default=None, type=click.Path())
@click.option("--seed", default=0, type=int)
@click.option("--overwrite", is_flag=True)
@click.option("--schema", is_flag=True)
@click.pass_context
def score(ctx, config_path, out, seed, overwrite, schema):
    """Per-outcome score columns at one (theta, x)."""
    _maybe_schema(ctx, "score", schema)

    def body():
        cfg = _load_config(config_path)
        model = model_from_config(cfg["model"])
        theta = np.asarray(cfg["theta"], dtype=float)
        x = np.asarray(cfg["x"], dtype=float)
        p0 = np.asarray(cfg["p0"], dtype=float)
        method = cfg.get("method", "closed_form")
        t0 = time.perf_counter()
        if method == "closed_form":
            values = score_closed_form(model, theta, x, p0).values
        elif method == "multiplier":
            values = score_multiplier(model, theta, x, p0).values
        elif method == "smoothed":
            smoothing = _smoothing_from(cfg.get("smoothing")) or SmoothingConfig(n=1000)
            if smoothing.n is None:
                smoothing = smoothing.with_n(1000)
            rng = SeededRng(seed)
            cols = [
                score_smoothed(model, theta, y, x, p0, smoothing, rng.substream(y))
                for y in range(model.outcome_space.size)
            ]
            values = np.column_stack(cols)
        else:
            raise ConfigError(f"unknown score method {method!r}")
        elapsed = time.perf_counter() - t0
        out_dir = _out_dir(out, "score", overwrite)
        doc = {
            "method": method,
            "theta": [float(v) for v in theta],
            "x": [float(v) for v in x],
            "columns": {
                label: [float(v) for v in values[:, j]]
                for j, label in enumerate(model.outcome_space.labels)
            },
        }
        (out_dir / "score.json").write_text(json.dumps(doc, indent=2))
        _manifest(out_dir, "score", cfg, seed, 1, {"score_seconds": elapsed})
        click.echo(str(out_dir))

    _run("score", body)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", default=None, type=click.Path())
@click.option("--seed", default=0, type=int)
@click.option("--alpha", default=None, type=float)
@click.option("--epsilon", default=None, type=float)
@click.option("--overwrite", is_flag=True)
@click.option("--schema", is_flag=True)
@click.pass_context
def test(ctx, config_path, out, seed, alpha, epsilon, overwrite, schema):
    """Score test of one candidate parameter against a dataset."""
    _maybe_schema(ctx, "test", schema)

    def body():
        cfg = _load_config(config_path)
        model = model_from_config(cfg["model"])
        data = Dataset.read_csv(cfg["data_csv"], model.outcome_space)
        theta = np.asarray(cfg["theta"], dtype=float)
        a = alpha if alpha is not None else cfg.get("alpha", 0.05)
        eps = epsilon if epsilon is not None else cfg.get("epsilon", 0.05)
        t0 = time.perf_counter()
        p_hat = _fit_ccp_config(data, cfg.get("ccp"))
        t1 = time.perf_counter()
        outcome = rao_statistic(
            model, theta, data, p_hat, a, eps, cfg.get("method", "closed_form"),
            _smoothing_from(cfg.get("smoothing")), SeededRng(seed),
        )
        t2 = time.perf_counter()
        out_dir = _out_dir(out, "test", overwrite)
        (out_dir / "test.json").write_text(json.dumps(outcome.to_dict(), indent=2))
        _manifest(out_dir, "test", cfg, seed, 1,
                  {"ccp_seconds": t1 - t0, "statistic_seconds": t2 - t1})
        click.echo(str(out_dir))

    _run("test", body)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", default=None, type=click.Path())
@click.option("--seed", default=0, type=int)
@click.option("--alpha", default=None, type=float)
@click.option("--epsilon", default=None, type=float)
@click.option("--threads", default=1, type=int)
@click.option("--overwrite", is_flag=True)
@click.option("--schema", is_flag=True)
@click.pass_context
def cs(ctx, config_path, out, seed, alpha, epsilon, threads, overwrite, schema):
    """Confidence set: fit the first stage once, sweep a parameter grid."""
    _maybe_schema(ctx, "cs", schema)

    def body():
        cfg = _load_config(config_path)
        model = model_from_config(cfg["model"])
        data = Dataset.read_csv(cfg["data_csv"], model.outcome_space)
        grid = _grid_from(cfg["grid"])
        a = alpha if alpha is not None else cfg.get("alpha", 0.05)
        eps = epsilon if epsilon is not None else cfg.get("epsilon", 0.05)
        t0 = time.perf_counter()
        p_hat = _fit_ccp_config(data, cfg.get("ccp"))
        t1 = time.perf_counter()
        _ = chi2_quantile(model.param_dim, 1.0 - a)
        t2 = time.perf_counter()
        result = confidence_set(
            model, grid, data, a, eps, p_hat, cfg.get("method", "closed_form"),
            _smoothing_from(cfg.get("smoothing")), seed, threads,
        )
        t3 = time.perf_counter()
        out_dir = _out_dir(out, "cs", overwrite)
        _write_cs_csv(out_dir / "cs.csv", result)
        _manifest(out_dir, "cs", cfg, seed, threads, {
            "ccp_seconds": t1 - t0,
            "critical_value_seconds": t2 - t1,
            "statistic_seconds": t3 - t2,
        })
        click.echo(str(out_dir))

    _run("cs", body)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", default=None, type=click.Path())
@click.option("--overwrite", is_flag=True)
@click.option("--schema", is_flag=True)
@click.pass_context
def ci(ctx, config_path, out, overwrite, schema):
    """Interval for a scalar functional over an accepted parameter grid."""
    _maybe_schema(ctx, "ci", schema)

    def body():
        cfg = _load_config(config_path)
        rows = np.genfromtxt(cfg["cs_csv"], delimiter=",", names=True, dtype=None,
                             encoding="utf-8")
        rows = np.atleast_1d(rows)
        names = rows.dtype.names
        theta_cols = [n for n in names if n.startswith("theta_")]
        grid = np.column_stack([rows[n].astype(float) for n in theta_cols])
        accepted = rows["accepted"].astype(int).astype(bool)
        stats = np.array(
            [float(v) if v not in ("", None) else np.nan for v in np.atleast_1d(rows["t_n"])]
        )
        fcfg = cfg["functional"]
        if fcfg["type"] == "coordinate":
            j = int(fcfg["index"])
            functional = lambda th: float(th[j])  # noqa: E731
        elif fcfg["type"] == "entry_prob":
            model = model_from_config(fcfg["model"])
            functional = entry_probability(model, np.asarray(fcfg["x"], float), int(fcfg["d"]))
        else:
            raise ConfigError(f"unknown functional type {fcfg['type']!r}")
        fake = ConfidenceSet(grid, accepted, cfg.get("alpha", 0.05), stats, np.nan, {})
        t0 = time.perf_counter()
        lo, hi = counterfactual_ci(fake, functional)
        elapsed = time.perf_counter() - t0
        out_dir = _out_dir(out, "ci", overwrite)
        (out_dir / "ci.json").write_text(json.dumps({"lo": lo, "hi": hi}, indent=2))
        _manifest(out_dir, "ci", cfg, None, 1, {"ci_seconds": elapsed})
        click.echo(str(out_dir))

    _run("ci", body)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", default=None, type=click.Path())
@click.option("--overwrite", is_flag=True)
@click.option("--schema", is_flag=True)
@click.pass_context
def pseudotrue(ctx, config_path, out, overwrite, schema):
    """Grid approximation of the divergence-minimizing set from population inputs."""
    _maybe_schema(ctx, "pseudotrue", schema)

    def body():
        cfg = _load_config(config_path)
        model = model_from_config(cfg["model"])
        grid = _grid_from(cfg["grid"])
        pop_cfg = cfg["population"]
        weights = pop_cfg.get("weights") or [1.0] * len(pop_cfg["x"])
        population = list(zip(pop_cfg["x"], pop_cfg["p0"], weights))
        t0 = time.perf_counter()
        res = pseudo_true_grid(model, grid, population, tol=cfg.get("tol"))
        elapsed = time.perf_counter() - t0
        out_dir = _out_dir(out, "pseudotrue", overwrite)
        d = grid.shape[1]
        lines = [",".join([f"theta_{j + 1}" for j in range(d)] + ["d_value", "accepted"])]
        for i in range(grid.shape[0]):
            lines.append(",".join(
                [_fmt(v) for v in grid[i]] + [_fmt(res.d_values[i]), str(int(res.accepted[i]))]
            ))
        (out_dir / "pseudotrue.csv").write_text("\n".join(lines) + "\n")
        _manifest(out_dir, "pseudotrue", cfg, None, 1, {"grid_seconds": elapsed})
        click.echo(str(out_dir))

    _run("pseudotrue", body)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", default=None, type=click.Path())
@click.option("--seed", default=None, type=int)
@click.option("--threads", default=1, type=int)
@click.option("--overwrite", is_flag=True)
@click.option("--schema", is_flag=True)
@click.pass_context
def mc(ctx, config_path, out, seed, threads, overwrite, schema):
    """Monte Carlo size/power experiment on a calibrated design."""
    _maybe_schema(ctx, "mc", schema)

    def body():
        cfg = _load_config(config_path)
        dgp = dict(cfg["dgp"])
        if seed is not None:
            dgp["seed"] = seed
        design = dgp.get("design", "D1")
        if "theta0" not in dgp or dgp["theta0"] is None:
            dgp["theta0"] = [float(v) for v in table1_theta(design)]
        dcfg = DgpConfig(
            theta0=tuple(dgp["theta0"]), kappa=dgp.get("kappa", 0.0),
            gamma=dgp.get("gamma", 0.0), n=dgp["n"], design=design,
            covariate_source=dgp.get("covariate_source", "synthetic-uniform"),
            seed=dgp.get("seed", 0),
        )
        h_grid = cfg.get("h_grid")
        if h_grid is None:
            h_grid = [0.0] + [float(h) for h in default_h_grid()]
        t0 = time.perf_counter()
        _ = chi2_quantile(dcfg.model().param_dim, 1.0 - cfg.get("alpha", 0.05))
        t1 = time.perf_counter()
        table = size_power_experiment(
            dcfg, cfg.get("alpha", 0.05), cfg["reps"], h_grid,
            direction=cfg.get("direction"), theta_star=cfg.get("theta_star"),
            epsilon=cfg.get("epsilon", 0.05), method=cfg.get("method", "closed_form"),
            ccp_config=cfg.get("ccp"), threads=threads,
        )
        t2 = time.perf_counter()
        out_dir = _out_dir(out, "mc", overwrite)
        table.to_csv(out_dir / "rejections.csv")
        _manifest(out_dir, "mc", cfg, dcfg.seed, threads, {
            "critical_value_seconds": t1 - t0,
            "statistic_seconds": t2 - t1,
        })
        click.echo(str(out_dir))

    _run("mc", body)


@main.command()
def schemas():
    """Print the JSON config schema of every command."""
    click.echo(json.dumps(SCHEMAS, indent=2))


if __name__ == "__main__":
    main()
