"""Command-line front-end: ``simulate``, ``fit``, ``grid`` and ``report``.

Configuration is one JSON document. Defaults are embedded below and can be
dumped with ``--print-config``; presets and ``--set key.path=value``
overrides are applied on top in command-line order.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import statistics
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import em_driver as em
from . import flow as fl
from . import forward_op as fo
from . import metrics, textio
from .losses import ElboEstimate, PriorBox
from .noise_model import NoiseParams

log = logging.getLogger("mixnoise")

METHODS = ("forward", "reverse", "grid-forward", "grid-reverse")

DEFAULTS = {
    "problem": {
        "kind": "random_surrogate",
        "d": 3,
        "n": 23,
        "widths": [64, 64],
        "surrogate_seed": 0,
        "surrogate_path": None,
        "prior_lo": -1.0,
        "prior_hi": 1.0,
    },
    "theta_true": {"a": 0.005, "b": 0.1},
    "N_list": [1, 2, 4, 8],
    "seeds": 10,
    "seed_base": 0,
    "method": "forward",
    "em": asdict(em.EMConfig()),
    "grid": {"a_grid": list(em.GridConfig().a_grid), "b_grid": list(em.GridConfig().b_grid), "steps": 1200},
    "flow": {"n_blocks": 6, "hidden": [64, 64], "clamp": 2.0},
    "histogram": {"bins": 50, "bins_2d": 40, "samples": 2000},
    "trace_thin": 20,
    "checkpoints": True,
    "out": "runs",
}

PRESETS = {
    "photomask": {
        "problem": {"d": 3, "n": 23, "prior_lo": -1.0, "prior_hi": 1.0},
        "theta_true": {"a": 0.005, "b": 0.1},
    },
    "linegrating": {
        "problem": {"d": 7, "n": 77, "prior_lo": 0.0, "prior_hi": 1.0},
        "theta_true": {"a": 0.03, "b": 0.25},
    },
    "desk": {"em": {"R": 300, "K": 500, "m_elbo": 500}},
    "paper": {"em": {"R": 5000, "K": 2000, "m_elbo": 2000}},
}


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------------
# Config handling
# ----------------------------------------------------------------------------


def merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_set(cfg: dict, assignment: str) -> dict:
    key, sep, raw = assignment.partition("=")
    if not sep:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = {}
    cur = node
    parts = key.split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return merge(cfg, node)


def check_config(cfg: dict) -> None:
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if cfg["method"] not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}")
    Ns = cfg["N_list"]
    if not Ns or any(not isinstance(n, int) or n < 1 for n in Ns):
        raise ConfigError("N_list must be a nonempty list of positive integers")
    if not isinstance(cfg["seeds"], int) or cfg["seeds"] < 1:
        raise ConfigError("seeds must be a positive integer")
    try:
        ec = em_config(cfg)
        ec.check(max(Ns))
        grid_config(cfg)
        NoiseParams(**cfg["theta_true"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    p = cfg["problem"]
    if p["kind"] not in ("random_surrogate", "surrogate_file"):
        raise ConfigError(f"unknown problem kind {p['kind']!r}")
    if p["kind"] == "surrogate_file" and not p.get("surrogate_path"):
        raise ConfigError("surrogate_file problems need problem.surrogate_path")


def em_config(cfg: dict, **over) -> em.EMConfig:
    names = {f.name for f in fields(em.EMConfig)}
    extra = set(cfg["em"]) - names
    if extra:
        raise ConfigError(f"unknown em keys: {sorted(extra)}")
    return em.EMConfig(**{**cfg["em"], **over})


def grid_config(cfg: dict) -> em.GridConfig:
    g = cfg["grid"]
    return em.GridConfig(tuple(g["a_grid"]), tuple(g["b_grid"]), int(g["steps"]))


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            cfg = merge(cfg, textio.read_json(args.config))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    for name in args.preset or []:
        cfg = merge(cfg, PRESETS[name])
    for assignment in args.set or []:
        cfg = apply_set(cfg, assignment)
    if args.method:
        cfg["method"] = args.method
    if args.seed is not None:
        cfg["seed_base"] = args.seed
    if args.out:
        cfg["out"] = args.out
    check_config(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    # the output directory does not change any cell's numbers
    core = {k: v for k, v in cfg.items() if k not in ("out",)}
    return textio.config_hash(core)


# ----------------------------------------------------------------------------
# Problem construction
# ----------------------------------------------------------------------------


def build_problem(cfg: dict):
    p = cfg["problem"]
    if p["kind"] == "surrogate_file":
        op = fo.load_surrogate(p["surrogate_path"])
    else:
        box = (p["prior_lo"], p["prior_hi"])
        op = fo.make_random_surrogate(p["d"], p["n"], widths=tuple(p["widths"]), seed=p["surrogate_seed"], box=box)
    lo = np.full(op.d, float(p["prior_lo"]))
    hi = np.full(op.d, float(p["prior_hi"]))
    return op, (lo, hi)


def cells(cfg: dict) -> list[tuple[int, int]]:
    """(N, seed) per cell; seed = seed_base + cell index."""
    out = []
    for i, N in enumerate(cfg["N_list"]):
        for s in range(cfg["seeds"]):
            out.append((N, cfg["seed_base"] + i * cfg["seeds"] + s))
    return out


def measurement_path(out: Path, N: int, seed: int) -> Path:
    return out / "measurements" / f"N{N}_s{seed}.json"


def simulate_cell(cfg, op, box, N, seed) -> fo.MeasurementSet:
    ms = fo.simulate_measurements(op, NoiseParams(**cfg["theta_true"]), box, N, seed)
    ms.meta.update({"config_hash": config_hash(cfg), "seed": seed})
    return ms


def cmd_simulate(cfg: dict) -> int:
    out = Path(cfg["out"])
    op, box = build_problem(cfg)
    for N, seed in cells(cfg):
        path = measurement_path(out, N, seed)
        simulate_cell(cfg, op, box, N, seed).save(path)
        log.info("wrote %s", path)
    _write_config(out, cfg)
    return 0


def _write_config(out: Path, cfg: dict) -> None:
    textio.write_json(out / "config.json", {**cfg, "config_hash": config_hash(cfg)})


def _load_or_simulate(cfg, op, box, N, seed) -> fo.MeasurementSet:
    path = measurement_path(Path(cfg["out"]), N, seed)
    if path.exists():
        return fo.MeasurementSet.load(path)
    ms = simulate_cell(cfg, op, box, N, seed)
    ms.save(path)
    return ms


def make_flow(cfg: dict, d: int, n: int, seed: int) -> fl.ConditionalFlow:
    f = cfg["flow"]
    return fl.build_flow(d, n, n_blocks=f["n_blocks"], hidden=tuple(f["hidden"]), clamp=f["clamp"], seed=seed)


# ----------------------------------------------------------------------------
# fit / grid
# ----------------------------------------------------------------------------


def run_cell(cfg: dict, N: int, seed: int) -> dict:
    """Fit one (N, seed) cell and write its files. Returns the report dict."""
    method = cfg["method"]
    chash = config_hash(cfg)
    op, box = build_problem(cfg)
    ms = _load_or_simulate(cfg, op, box, N, seed)
    prior = PriorBox(*box)
    celldir = Path(cfg["out"]) / f"fit-{method}" / f"N{N}_s{seed}"
    celldir.mkdir(parents=True, exist_ok=True)
    theta_true = ms.theta_true
    factory = lambda: make_flow(cfg, op.d, op.n, seed)

    if method in ("forward", "reverse"):
        ec = em_config(cfg, loss=method, seed=seed)
        state = em.run_em(ms, factory(), ec, op, prior, checkpoint_dir=celldir if cfg["checkpoints"] else None)
        best = state.best
        theta, flow = best.theta, state.best_flow()
        est = ElboEstimate(best.elbo, ec.m_elbo * N, best.elbo_se)
        metrics.write_trace_csv(celldir / "trace.csv", metrics.trace_export(state, cfg["trace_thin"]), chash, seed)
        best_iter = best.r
    else:
        loss = method.split("-", 1)[1]
        ec = em_config(cfg, loss=loss, seed=seed)
        res = em.run_grid(ms, grid_config(cfg), loss, op, factory, ec, prior)
        theta, flow = res.theta, res.flow
        i, j = res.a_grid.index(theta.a), res.b_grid.index(theta.b)
        est = ElboEstimate(float(res.elbo_table[i, j]), ec.m_elbo * N, float(res.se_table[i, j]))
        _write_grid_csv(celldir / "elbo_grid.csv", res, chash, seed)
        if cfg["checkpoints"]:
            textio.write_json(celldir / "checkpoint_best.json", {
                "format": "mixnoise-best/1", "theta": {"a": theta.a, "b": theta.b},
                "elbo": est.value, "elbo_se": est.std_error, "flow": flow.to_dict()})
        best_iter = None

    h = cfg["histogram"]
    samples = fl.sample_posterior(flow, ms.ys[0], h["samples"], np.random.default_rng([seed, 5]))
    truth = None if ms.xs_true is None else ms.xs_true[0]
    marg = metrics.marginal_histograms(samples, box[0], box[1], h["bins"], h["bins_2d"], truth)
    metrics.write_marginals_csv(celldir / "marginals.csv", marg, chash, seed)
    metrics.write_pairs_csv(celldir / "pairs.csv", marg, chash, seed)

    report = metrics.MetricReport(method, N, seed, theta, theta_true, est, chash, best_iter)
    report.save(celldir / "report.json")
    return report.to_dict()


def _write_grid_csv(path, res: em.GridResult, chash, seed) -> None:
    rows = [(r["a"], r["b"], r["elbo"], r["elbo_se"]) for r in res.rows()]
    metrics.write_csv(path, ("a", "b", "elbo", "elbo_se"), rows, chash, seed)


def _cell_task(args):
    cfg, N, seed = args
    try:
        return N, seed, run_cell(cfg, N, seed), None
    except Exception as exc:  # a failed cell must not stop the sweep
        return N, seed, None, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"


def cmd_fit(cfg: dict, jobs: int = 1) -> int:
    out = Path(cfg["out"])
    _write_config(out, cfg)
    tasks = [(cfg, N, seed) for N, seed in cells(cfg)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_cell_task, tasks))
    else:
        results = [_cell_task(t) for t in tasks]
    reports, failed = [], []
    for N, seed, rep, err in results:
        if err is None:
            reports.append(rep)
        else:
            log.error("cell N=%d seed=%d failed: %s", N, seed, err.splitlines()[0])
            failed.append({"N": N, "seed": seed, "error": err.splitlines()[0]})
    methoddir = out / f"fit-{cfg['method']}"
    write_summary(methoddir, reports, failed, config_hash(cfg), cfg["seed_base"])
    return 2 if failed else 0


def aggregate(reports: list[dict]) -> list[dict]:
    """Median D and ELBO per (method, N)."""
    groups: dict[tuple, list[dict]] = {}
    for r in reports:
        groups.setdefault((r["method"], r["N"]), []).append(r)
    rows = []
    for (method, N), rs in sorted(groups.items()):
        Ds = [r["D"] for r in rs if r["D"] is not None]
        rows.append({
            "method": method,
            "N": N,
            "median_D": statistics.median(Ds) if Ds else float("nan"),
            "median_elbo": statistics.median(r["elbo"] for r in rs),
            "runs": len(rs),
        })
    return rows


def write_summary(outdir: Path, reports, failed, chash, seed) -> None:
    rows = aggregate(reports)
    metrics.write_csv(outdir / "summary.csv", ("method", "N", "median_D", "median_elbo", "runs"),
                       [(r["method"], r["N"], r["median_D"], r["median_elbo"], r["runs"]) for r in rows], chash, seed)
    Ns = sorted({r["N"] for r in rows})
    methods = sorted({r["method"] for r in rows})
    lookup = {(r["method"], r["N"]): r for r in rows}
    for key, name in (("median_D", "table_D.csv"), ("median_elbo", "table_elbo.csv")):
        table = [[m] + [lookup[(m, N)][key] if (m, N) in lookup else float("nan") for N in Ns] for m in methods]
        metrics.write_csv(outdir / name, ["method"] + [f"N={N}" for N in Ns], table, chash, seed)
    textio.write_json(outdir / "summary.json", {"config_hash": chash, "seed_base": seed, "rows": rows,
                                                "failed": failed})


# ----------------------------------------------------------------------------
# report
# ----------------------------------------------------------------------------


def cmd_report(outdir) -> int:
    outdir = Path(outdir)
    paths = sorted(outdir.rglob("report.json")) if outdir.is_dir() else []
    reports, corrupt, cell_dirs = [], [], []
    for p in paths:
        try:
            reports.append(metrics.MetricReport.load(p).to_dict())
            cell_dirs.append(p.parent)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            corrupt.append({"path": str(p), "error": str(exc)})
    for c in corrupt:
        print(f"corrupt report: {c['path']} ({c['error']})", file=sys.stderr)
    if not reports:
        print(f"nothing to merge under {outdir}", file=sys.stderr)
        return 1
    hashes = sorted({r["config_hash"] for r in reports})
    merged = outdir / "merged"
    chash = hashes[0] if len(hashes) == 1 else "mixed"
    write_summary(merged, reports, [], chash, "multiple" if len(reports) > 1 else reports[0]["seed"])
    metrics.write_csv(
        merged / "runs.csv",
        ("method", "N", "seed", "a", "b", "D", "elbo", "elbo_se", "config_hash"),
        [(r["method"], r["N"], r["seed"], r["a"], r["b"], r["D"] if r["D"] is not None else float("nan"),
          r["elbo"], r["elbo_se"], r["config_hash"]) for r in sorted(reports, key=lambda r: (r["method"], r["N"], r["seed"]))],
        chash, "multiple",
    )
    _merge_cell_csvs(merged, reports, cell_dirs, chash)
    textio.write_json(merged / "merged.json", {"config_hashes": hashes, "runs": reports, "corrupt": corrupt})
    print(f"merged {len(reports)} reports into {merged}" + (f"; {len(corrupt)} corrupt" if corrupt else ""))
    return 0


def _merge_cell_csvs(merged: Path, reports, cell_dirs, chash) -> None:
    """Stack per-run traces and 1-D marginals into long-format tables keyed by run."""
    for name, header in (("trace.csv", metrics.TRACE_HEADER), ("marginals.csv", metrics.MARGINAL_HEADER)):
        rows = []
        for rep, cdir in sorted(zip(reports, cell_dirs), key=lambda t: (t[0]["method"], t[0]["N"], t[0]["seed"])):
            path = cdir / name
            if not path.exists():
                continue
            try:
                _, head, body = metrics.read_csv(path)
            except (OSError, ValueError) as exc:
                print(f"corrupt file: {path} ({exc})", file=sys.stderr)
                continue
            if tuple(head) != header:
                print(f"corrupt file: {path} (unexpected header)", file=sys.stderr)
                continue
            rows.extend([rep["method"], rep["N"], rep["seed"], *r] for r in body)
        if rows:
            metrics.write_csv(merged / name.replace(".csv", "_all.csv"), ("method", "N", "seed") + header,
                               rows, chash, "multiple")


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--preset", action="append", choices=sorted(PRESETS),
                        help="apply a preset (repeatable, later wins)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. em.R=50 (value parsed as JSON)")
    common.add_argument("--method", choices=METHODS)
    common.add_argument("--seed", type=int, help="seed_base for the sweep")
    common.add_argument("--out", help="output directory")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("--jobs", type=int, default=1, help="parallel cells")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mixnoise", description="Mixed-noise parameter estimation with conditional flows")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("simulate", "write synthetic measurement sets"),
                        ("fit", "run nested EM per (N, seed) cell"),
                        ("grid", "grid baseline per (N, seed) cell"),
                        ("report", "merge per-run reports")):
        p = sub.add_parser(name, parents=[common], help=help_)
        if name == "report":
            p.add_argument("dir", nargs="?", help="directory to merge (default: --out or config out)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "grid" and not cfg["method"].startswith("grid-"):
            cfg["method"] = "grid-" + cfg["method"]
        if args.command == "fit" and cfg["method"].startswith("grid-"):
            raise ConfigError("fit runs the EM methods; use the grid subcommand for grid methods")
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    if args.print_config:
        print(textio.dumps(cfg))
        return 0
    try:
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command in ("fit", "grid"):
            return cmd_fit(cfg, args.jobs)
        return cmd_report(args.dir or cfg["out"])
    except (OSError, fo.SurrogateFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
