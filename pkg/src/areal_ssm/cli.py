"""Command-line entry point: ``fit``, ``compare``, ``simulate``, ``diagnose``.

Settings come from an INI-style config file (``key = value`` under
``[data]``, ``[model]``, ``[priors]``, ``[mcmc]``, ``[compare]``,
``[simulate]``) with command-line flags taking precedence.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import glob
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ArealSSMError, ConfigurationError, DataIOError
from .io import (
    Dataset,
    load_dataset,
    load_graph,
    read_numeric_csv,
    write_adjacency,
    write_csv,
    write_dataset,
)
from .mcmc import ChainConfig, PriorConfig, Trace, gelman_rubin, run_chains
from .model_compare import PredictiveReport, compare_models
from .model_spec import Family, HyperParams, SpecId
from .simulate import SimConfig, simulate_dataset
from .spatial_graph import RegionGraph

log = logging.getLogger("areal_ssm")

RISK_SCALE = 100000.0


@dataclass
class RunConfig:
    counts: str | None = None
    populations: str | None = None
    adjacency: str | None = None
    across: str | None = None
    model: str = "order1:spatial"
    models: list = field(default_factory=list)
    baseline: str | None = None
    t_star: int | None = None
    out: str = "out"
    seed: int = 0
    threads: int = 1
    priors: PriorConfig = field(default_factory=PriorConfig)
    init_mode: str = "fixed"  # or "reciprocal-population"
    chain: ChainConfig = field(default_factory=ChainConfig)
    compare_chain: ChainConfig = field(default_factory=lambda: ChainConfig(n_iter=8000, burn_in=4000, n_chains=1))
    monitor_latent: int = 5
    save_latent: bool = False
    sim: dict = field(default_factory=dict)

    def hash(self) -> str:
        d = dataclasses.asdict(self)
        for k in ("out", "threads"):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def meta(self, command: str) -> dict:
        return {"areal-ssm": __version__, "command": command, "config_hash": self.hash(), "seed": self.seed}


# ---------------------------------------------------------------------------
# configuration


def _get(cp, section, key, conv=str, default=None):
    if cp.has_option(section, key):
        raw = cp.get(section, key).strip()
        try:
            return conv(raw)
        except ValueError:
            raise ConfigurationError(f"config [{section}] {key} = {raw!r} is not a valid {conv.__name__}") from None
    return default


def _bool(s):
    v = str(s).lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(s)


def _floats(s):
    return [float(x) for x in str(s).replace(",", " ").split()]


def load_config(path: str | None, args=None) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    base = Path(".")
    if path:
        if not os.path.exists(path):
            raise DataIOError(f"config file {path} not found")
        cp.read(path)
        base = Path(path).parent

    def rel(p):
        return None if p is None else str(base / p) if not os.path.isabs(p) else p

    cfg = RunConfig(
        counts=rel(_get(cp, "data", "counts")),
        populations=rel(_get(cp, "data", "populations")),
        adjacency=rel(_get(cp, "data", "adjacency")),
        across=rel(_get(cp, "data", "across")),
        model=_get(cp, "model", "model", default="order1:spatial"),
        models=(_get(cp, "compare", "models", default="") or "").split(),
        baseline=_get(cp, "compare", "baseline"),
        t_star=_get(cp, "compare", "t_star", int),
        out=_get(cp, "output", "out", default="out"),
        seed=_get(cp, "output", "seed", int, 0),
        threads=_get(cp, "output", "threads", int, 1),
        monitor_latent=_get(cp, "output", "monitor_latent", int, 5),
        save_latent=_get(cp, "output", "save_latent", _bool, False),
    )
    pri = {}
    for key, conv in [("tau_shape", float), ("tau_rate", float), ("phi_upper", float), ("psi_shape", float),
                      ("psi_rate", float), ("init_var", float), ("init_gradient_var", float)]:
        v = _get(cp, "priors", key, conv)
        if v is not None:
            pri[key] = v
    init_mean = _get(cp, "priors", "init_mean", default=None)
    if init_mean is not None:
        if init_mean == "reciprocal-population":
            cfg.init_mode = init_mean
        else:
            try:
                pri["init_mean"] = float(init_mean)
            except ValueError:
                raise ConfigurationError("[priors] init_mean must be a number or 'reciprocal-population'") from None
    cfg.priors = PriorConfig(**pri)
    ch = {}
    for key, conv in [("n_iter", int), ("burn_in", int), ("n_chains", int), ("latent_thin", int),
                      ("adapt", _bool), ("random_scan", _bool)]:
        v = _get(cp, "mcmc", key, conv)
        if v is not None:
            ch[key] = v
    scales = {"phi": _get(cp, "mcmc", "rw_phi", float, 0.5), "kappa": _get(cp, "mcmc", "rw_kappa", float, 0.5)}
    cmp = {"n_iter": _get(cp, "compare", "n_iter", int, 8000), "burn_in": _get(cp, "compare", "burn_in", int, 4000),
           "n_chains": _get(cp, "compare", "n_chains", int, 1)}
    if cp.has_section("simulate"):
        cfg.sim = dict(cp.items("simulate"))
    if args is not None:
        for name in ("counts", "populations", "adjacency", "across", "model", "baseline", "out"):
            v = getattr(args, name, None)
            if v is not None:
                setattr(cfg, name, v)
        for name in ("seed", "threads", "t_star"):
            v = getattr(args, name, None)
            if v is not None:
                setattr(cfg, name, v)
        if getattr(args, "models", None):
            cfg.models = args.models
        for flag, key in (("iterations", "n_iter"), ("burn_in", "burn_in"), ("chains", "n_chains")):
            v = getattr(args, flag, None)
            if v is not None:
                ch[key] = v
        for flag, key in (("compare_iterations", "n_iter"), ("compare_burn_in", "burn_in")):
            v = getattr(args, flag, None)
            if v is not None:
                cmp[key] = v
        if getattr(args, "save_latent", False):
            cfg.save_latent = True
    cfg.chain = ChainConfig(seed=cfg.seed, rw_scales=scales, **ch)
    cfg.compare_chain = ChainConfig(seed=cfg.seed, rw_scales=scales, latent_thin=cfg.chain.latent_thin,
                                    adapt=cfg.chain.adapt, random_scan=cfg.chain.random_scan, **cmp)
    SpecId.parse(cfg.model)
    return cfg


def _require(cfg, *names):
    for n in names:
        if getattr(cfg, n) is None:
            raise ConfigurationError(f"missing required setting {n!r}")
        if n in ("counts", "populations", "adjacency", "across") and not os.path.exists(getattr(cfg, n)):
            raise DataIOError(f"{n} file {getattr(cfg, n)} not found")


def _load_inputs(cfg: RunConfig):
    _require(cfg, "counts", "populations", "adjacency")
    if cfg.across is not None:
        _require(cfg, "across")
    ds = load_dataset(cfg.counts, cfg.populations)
    graph = load_graph(cfg.adjacency, ds.S, cfg.across)
    priors = cfg.priors
    if cfg.init_mode == "reciprocal-population":
        priors = dataclasses.replace(priors, init_mean=float(np.log(1.0 / ds.populations[0].sum())))
    return ds, graph, priors


# ---------------------------------------------------------------------------
# fit


def _monitored(spec: SpecId, S: int, T: int, k: int):
    """Latent coordinates ``(t, j)`` tracked in the latent trace and PSRF report."""
    regions = sorted(set(np.linspace(0, S - 1, min(k, S)).round().astype(int))) if k > 0 else []
    times = sorted({max(T // 2, 1), T})
    coords = [(t, j) for t in times for j in regions]
    if spec.family.has_psi and k > 0:
        coords += [(t, S) for t in times]
    return coords


def _summary_rows(names, pooled):
    rows = []
    for j, n in enumerate(names):
        x = pooled[:, j]
        lo, hi = np.quantile(x, [0.025, 0.975])
        rows.append([n, float(x.mean()), float(lo), float(hi)])
    return rows


def fit_command(cfg: RunConfig):
    """Fit one model and write traces, PSRF, summaries, gradient and risk tables.

    Returns ``(traces, paths)``.
    """
    ds, graph, priors = _load_inputs(cfg)
    spec = SpecId.parse(cfg.model)
    obs = ds.observation()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = cfg.meta("fit") | {"model": spec.token}
    log.info("fitting %s: T=%d S=%d, %d chain(s) x %d iterations", spec.token, ds.T, ds.S,
             cfg.chain.n_chains, cfg.chain.n_iter)
    traces = run_chains(obs, spec, graph, priors, cfg.chain, threads=cfg.threads)
    paths = {}
    coords = _monitored(spec, ds.S, ds.T, cfg.monitor_latent)
    lat_names = [f"beta[{t},{j + 1}]" for t, j in coords]
    for k, tr in enumerate(traces, start=1):
        p = out / f"trace_chain{k}.csv"
        write_csv(p, ["iteration", *tr.names], ([int(i), *map(float, row)] for i, row in zip(tr.iterations, tr.hyper)),
                  meta | {"chain": k, "chain_seed": tr.seed, "acceptance": json.dumps(tr.acceptance, sort_keys=True)})
        paths[f"trace_chain{k}"] = p
        if coords:
            p = out / f"latent_chain{k}.csv"
            rows = ([int(i), *(float(b[t, j]) for t, j in coords)] for i, b in zip(tr.latent_iterations, tr.latent))
            write_csv(p, ["iteration", *lat_names], rows, meta | {"chain": k})
            paths[f"latent_chain{k}"] = p
        if cfg.save_latent:
            p = out / f"latent_full_chain{k}.csv"
            T1, pdim = tr.latent.shape[1:]
            cols = [f"beta[{t},{j + 1}]" for t in range(T1) for j in range(pdim)]
            write_csv(p, ["iteration", *cols],
                      ([int(i), *map(float, b.ravel())] for i, b in zip(tr.latent_iterations, tr.latent)), meta)
            paths[f"latent_full_chain{k}"] = p

    if len(traces) >= 2:
        paths["psrf"] = write_psrf(out / "psrf.csv", traces, coords, lat_names, meta)
    else:
        log.warning("single chain: Gelman-Rubin diagnostics skipped")

    pooled = np.concatenate([tr.hyper for tr in traces])
    p = out / "summary.csv"
    write_csv(p, ["parameter", "mean", "q2.5", "q97.5"], _summary_rows(traces[0].names, pooled), meta)
    paths["summary"] = p

    latent = np.concatenate([tr.latent for tr in traces])
    if spec.family.has_psi:
        g = latent[:, 1:, ds.S]
        lo, hi = np.quantile(g, [0.025, 0.975], axis=0)
        p = out / "gradient.csv"
        write_csv(p, ["time", "mean", "q2.5", "q97.5"],
                  ([t, float(m), float(a), float(b)] for t, m, a, b in zip(ds.times, g.mean(0), lo, hi)), meta)
        paths["gradient"] = p
    risk = posterior_mean_risk(latent, ds.S)
    p = out / "risk.csv"
    write_csv(p, ["time", *ds.regions], ([t, *map(float, row)] for t, row in zip(ds.times, risk)),
              meta | {"quantity": f"posterior mean of {int(RISK_SCALE)} * exp(theta)"})
    paths["risk"] = p
    return traces, paths


def posterior_mean_risk(latent, S):
    """``E[scale * exp(theta_ts)]`` over draws, for ``t = 1..T``."""
    return RISK_SCALE * np.exp(latent[:, 1:, :S]).mean(axis=0)


def write_psrf(path, traces: list[Trace], coords=(), lat_names=(), meta=None):
    names = list(traces[0].names)
    n = min(len(tr) for tr in traces)
    gr = gelman_rubin(np.stack([tr.hyper[:n] for tr in traces]))
    rows = [[nm, _psrf_cell(r, d)] for nm, r, d in zip(names, gr.rhat, gr.degenerate)]
    if coords:
        nl = min(tr.latent.shape[0] for tr in traces)
        if nl >= 10:
            arr = np.stack([np.stack([tr.latent[:nl, t, j] for t, j in coords], axis=-1) for tr in traces])
            grl = gelman_rubin(arr)
            rows += [[nm, _psrf_cell(r, d)] for nm, r, d in zip(lat_names, grl.rhat, grl.degenerate)]
    write_csv(path, ["parameter", "psrf"], rows, meta)
    return path


def _psrf_cell(r, degenerate):
    return "degenerate" if degenerate else float(r)


def diagnose_command(trace_paths, out_path, meta=None):
    """PSRF report from existing ``trace_chain*.csv`` files."""
    if len(trace_paths) < 2:
        raise ConfigurationError(f"diagnose needs at least two trace files, got {len(trace_paths)}")
    tables = [read_numeric_csv(p) for p in trace_paths]
    cols = tables[0][1]
    for p, (_, c, _) in zip(trace_paths, tables):
        if c != cols:
            raise ConfigurationError(f"trace {p} has columns {c}, expected {cols}")
    n = min(t[2].shape[0] for t in tables)
    arr = np.stack([t[2][:n, 1:] for t in tables])
    gr = gelman_rubin(arr)
    rows = [[nm, _psrf_cell(r, d)] for nm, r, d in zip(cols[1:], gr.rhat, gr.degenerate)]
    write_csv(out_path, ["parameter", "psrf"], rows, meta)
    return gr


# ---------------------------------------------------------------------------
# compare


def compare_command(cfg: RunConfig):
    """Conditional Bayes factors between ``cfg.models``; writes comparison CSVs."""
    if len(cfg.models) < 2:
        raise ConfigurationError("compare needs at least two model tokens")
    if cfg.t_star is None:
        raise ConfigurationError("compare needs t_star (size of the training window)")
    ds, graph, priors = _load_inputs(cfg)
    specs = [SpecId.parse(m) for m in cfg.models]
    baseline = SpecId.parse(cfg.baseline) if cfg.baseline else specs[0]
    if baseline not in specs:
        raise ConfigurationError(f"baseline {baseline.token} is not among the compared models")
    report = compare_models(ds.observation(), specs, graph, priors, cfg.compare_chain, cfg.t_star,
                            seed=cfg.seed, threads=cfg.threads)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = cfg.meta("compare") | {
        "t_star": cfg.t_star,
        "mcmc_per_time_point": f"{cfg.compare_chain.n_chains} chain(s) x {cfg.compare_chain.n_iter} iterations, "
                               f"{cfg.compare_chain.burn_in} burn-in (heuristic budget; set n_iter/burn_in under [compare])",
        "baseline": baseline.token,
    }
    return report, write_comparison(out, report, baseline, ds.times, meta)


def write_comparison(out: Path, report: PredictiveReport, baseline: SpecId, times, meta):
    paths = {}
    b = report.specs.index(baseline)
    p = out / "compare_predictive.csv"
    rows = []
    for k, t in enumerate(report.t_values):
        rows.append([times[t - 1], int(t), *(float(v) for v in report.log_pred[:, k]),
                     *(float(v) for v in report.se[:, k])])
    write_csv(p, ["time", "t", *report.labels, *(f"se:{l}" for l in report.labels)], rows, meta)
    paths["predictive"] = p

    p = out / "compare_summary.csv"
    se_tot = np.sqrt((report.se ** 2).sum(axis=1))
    write_csv(p, ["model", "joint_log_predictive", "se", "log_bf_vs_baseline"],
              ([l, float(j), float(s), float(report.log_bf[i, b])]
               for i, (l, j, s) in enumerate(zip(report.labels, report.joint, se_tot))), meta)
    paths["summary"] = p

    p = out / "compare_logbf.csv"
    write_csv(p, ["model", *report.labels],
              ([l, *map(float, row)] for l, row in zip(report.labels, report.log_bf)), meta)
    paths["logbf"] = p

    # families x innovation structures, log BF against the baseline
    p = out / "compare_table.csv"
    fams = list(Family)
    rows = []
    for innov in ("spatial", "diagonal"):
        row = [innov]
        for f in fams:
            s = SpecId(f, innov)
            row.append(float(report.log_bf[report.specs.index(s), b]) if s in report.specs else "")
        rows.append(row)
    write_csv(p, ["innovations", *(f.name for f in fams)], rows, meta)
    paths["table"] = p
    return paths


# ---------------------------------------------------------------------------
# simulate


def _sim_graph(sim: dict, base: Path) -> RegionGraph:
    if "adjacency" in sim:
        return load_graph(str(base / sim["adjacency"]) if not os.path.isabs(sim["adjacency"]) else sim["adjacency"])
    shape = sim.get("lattice", "3x3").lower().split("x")
    try:
        return RegionGraph.lattice(int(shape[0]), int(shape[1]))
    except (ValueError, IndexError):
        raise ConfigurationError(f"[simulate] lattice must look like '4x4', got {sim.get('lattice')!r}") from None


def simulate_command(cfg: RunConfig, truth: bool = False, base: Path = Path(".")):
    """Generate a dataset in the ingestion formats. Truth files only when ``truth``."""
    sim = cfg.sim
    spec = SpecId.parse(sim.get("model", cfg.model))
    graph = _sim_graph(sim, base)
    try:
        T = int(sim.get("t", sim.get("horizon", 10)))
        pop = float(sim.get("population", 1e5))
        tau = _floats(sim.get("tau", "10"))
        phi = _floats(sim.get("phi", "0.5")) if spec.spatial else []
        kappa = float(sim["kappa"]) if spec.family.has_kappa else None
        psi = float(sim.get("psi", 140)) if spec.family.has_psi else None
    except (ValueError, KeyError) as exc:
        raise ConfigurationError(f"[simulate] invalid or missing setting: {exc}") from None
    if len(tau) == 1:
        tau = tau * spec.family.n_fields
    if spec.spatial and len(phi) == 1:
        phi = phi * spec.family.n_fields
    hyper = HyperParams(tuple(tau), tuple(phi), kappa, psi)
    S = graph.S
    init = cfg.priors.init_state(spec, S)
    if "init_mean" in sim or "init_var" in sim or "init_gradient_var" in sim:
        init = dataclasses.replace(
            cfg.priors,
            init_mean=float(sim.get("init_mean", cfg.priors.init_mean)),
            init_var=float(sim.get("init_var", cfg.priors.init_var)),
            init_gradient_var=float(sim.get("init_gradient_var", cfg.priors.init_gradient_var)),
        ).init_state(spec, S)
    n = np.full((T, S), pop)
    obs, beta = simulate_dataset(SimConfig(spec, hyper, graph, n, init, seed=cfg.seed))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    regions = tuple(f"r{s + 1}" for s in range(S))
    times = tuple(f"t{t + 1}" for t in range(T))
    meta = cfg.meta("simulate") | {"model": spec.token}
    paths = {"counts": out / "counts.csv", "populations": out / "populations.csv", "adjacency": out / "adjacency.txt"}
    write_dataset(paths["counts"], paths["populations"], Dataset(obs.y, obs.n, regions, times))
    write_adjacency(paths["adjacency"], graph)
    if graph.across_time_neighbors != graph.neighbors:
        paths["across"] = out / "across.txt"
        write_adjacency(paths["across"], graph, across=True)
    if truth:
        p = out / "truth_latent.csv"
        write_csv(p, ["t", *(f"beta{j + 1}" for j in range(beta.shape[1]))],
                  ([t, *map(float, row)] for t, row in enumerate(beta)), meta)
        paths["truth_latent"] = p
        p = out / "truth_hyper.csv"
        write_csv(p, ["parameter", "value"], ([k, float(v)] for k, v in hyper.as_dict(spec).items()), meta)
        paths["truth_hyper"] = p
    return paths


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="INI config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker processes for independent chains")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--counts")
    data.add_argument("--populations")
    data.add_argument("--adjacency")
    data.add_argument("--across", help="across-time neighbor file (default: same as adjacency)")
    data.add_argument("--iterations", type=int)
    data.add_argument("--burn-in", type=int)
    data.add_argument("--chains", type=int)

    ap = argparse.ArgumentParser(prog="areal-ssm", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", parents=[common, data], help="fit one model by MCMC")
    f.add_argument("--model", help="family[:innovations], e.g. contamination-gradient:spatial")
    f.add_argument("--save-latent", action="store_true", help="also write full latent draws")

    c = sub.add_parser("compare", parents=[common, data], help="conditional Bayes factors between models")
    c.add_argument("--models", nargs="+")
    c.add_argument("--baseline")
    c.add_argument("--t-star", type=int)
    c.add_argument("--compare-iterations", type=int, help="MCMC iterations per time point")
    c.add_argument("--compare-burn-in", type=int)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--model")
    s.add_argument("--truth", action="store_true", help="also write the latent path and hyperparameters")

    d = sub.add_parser("diagnose", parents=[common], help="Gelman-Rubin PSRF over existing trace files")
    d.add_argument("traces", nargs="*", help="trace CSVs (default: OUT/trace_chain*.csv)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args)
        if args.command == "fit":
            _, paths = fit_command(cfg)
        elif args.command == "compare":
            report, paths = compare_command(cfg)
            for l, j in zip(report.labels, report.joint):
                print(f"{l}\t{j:.3f}")
        elif args.command == "simulate":
            base = Path(args.config).parent if args.config else Path(".")
            paths = simulate_command(cfg, truth=args.truth, base=base)
        else:
            traces = args.traces or sorted(glob.glob(str(Path(cfg.out) / "trace_chain*.csv")))
            out = Path(cfg.out) / "psrf.csv"
            Path(cfg.out).mkdir(parents=True, exist_ok=True)
            diagnose_command(traces, out, cfg.meta("diagnose"))
            paths = {"psrf": out}
        for k, p in paths.items():
            print(f"{k}: {p}")
    except ArealSSMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataIOError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
