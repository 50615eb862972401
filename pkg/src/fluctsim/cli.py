"""Command-line orchestration.

``fluctsim simulate --config cfg.json`` samples the ensemble, runs it through
``t_samples`` and executes the analyses switched on in the config.  The other
subcommands re-run a single stage, reusing a stored ensemble where relevant:

    simulate   ensemble + requested analyses
    analyze    covariance / Wick analyses of a stored ensemble
    fd-check   Galerkin generator and noise matrices, Lyapunov residual
    ou         OU field simulation on the assembled matrices
    clusters   conditioning scan and collision-graph summary
    balance    gain/loss balance of the one-fresh-particle collision operator
    report     summary of a finished output directory

Exit status: 0 on success, 2 for an invalid config, 3 when an analysis
precondition fails, 4 when a numerical check reports failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .ensemble import default_workers, run_ensemble, seed_entropy, stream
from .fields import FieldEnsemble, MomentRequest, estimate_moments, gaussianity, write_moments_csv
from .phasespace import DomainParams, FourierHermite, gram_inner, test_function_from_json
from .sampler import SamplerConfig, sample_configuration

ANALYSES = ("covariance", "wick", "fd_check", "ou", "clusters", "balance")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, msg: str):
        super().__init__(f"{field}: {msg}")
        self.field = field


class AnalysisError(RuntimeError):
    def __init__(self, analysis: str, msg: str):
        super().__init__(f"analysis {analysis!r}: {msg}")
        self.analysis = analysis


# ----------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    domain: DomainParams
    sampler: SamplerConfig
    t_samples: list
    test_functions: list
    n_runs: int
    base_seed: int
    analyses: dict
    output_dir: str = "fluctsim_out"
    workers: int | None = None
    lbe: dict = field(default_factory=dict)
    ou: dict = field(default_factory=dict)
    clusters: dict = field(default_factory=dict)
    balance: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"domain": self.domain.to_dict(), "sampler": self.sampler.to_dict(),
                "t_samples": list(self.t_samples),
                "test_functions": [h.to_json() for h in self.test_functions],
                "ensemble": {"n_runs": self.n_runs, "base_seed": self.base_seed},
                "analyses": dict(self.analyses), "output_dir": self.output_dir,
                "workers": self.workers, "lbe": self.lbe, "ou": self.ou,
                "clusters": self.clusters, "balance": self.balance}

    def hash(self) -> str:
        blob = json.dumps({k: v for k, v in self.to_json().items() if k not in ("output_dir", "workers")},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def _get(obj: dict, key: str, where: str, typ, default=None, required=False):
    if key not in obj:
        if required:
            raise ConfigError(f"{where}.{key}" if where else key, "missing")
        return default
    val = obj[key]
    if typ is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if not isinstance(val, typ) or (typ is int and isinstance(val, bool)):
        raise ConfigError(f"{where}.{key}" if where else key, f"expected {typ.__name__}, got {val!r}")
    return val


def parse_config(obj: dict) -> ExperimentConfig:
    """Validate a config mapping; raises :class:`ConfigError` naming the field."""
    if not isinstance(obj, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    known = {"domain", "sampler", "t_samples", "test_functions", "ensemble", "analyses",
             "output_dir", "workers", "lbe", "ou", "clusters", "balance"}
    for k in obj:
        if k not in known:
            raise ConfigError(k, "unknown key")
    dom = _get(obj, "domain", "", dict, required=True)
    d = _get(dom, "d", "domain", int, required=True)
    eps = _get(dom, "eps", "domain", float, required=True)
    if d not in (2, 3):
        raise ConfigError("domain.d", "must be 2 or 3")
    if not 0 < eps < 0.25:
        raise ConfigError("domain.eps", "must lie in (0, 0.25)")
    domain = DomainParams(d, eps)

    smp = _get(obj, "sampler", "", dict, default={})
    try:
        sampler = SamplerConfig(**smp)
    except TypeError as e:
        raise ConfigError("sampler", str(e)) from None
    except ValueError as e:
        raise ConfigError("sampler.mode" if "mode" in str(e) else "sampler", str(e)) from None

    ts = _get(obj, "t_samples", "", list, default=[0.0])
    try:
        ts = [float(t) for t in ts]
    except (TypeError, ValueError):
        raise ConfigError("t_samples", "entries must be numbers") from None
    if not ts or ts[0] < 0 or any(b <= a for a, b in zip(ts, ts[1:])):
        raise ConfigError("t_samples", "must be nonempty, nonnegative and strictly increasing")

    tfs = []
    for q, tf in enumerate(_get(obj, "test_functions", "", list, default=[])):
        try:
            h = test_function_from_json(tf)
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"test_functions[{q}]", str(e)) from None
        if isinstance(h, FourierHermite) and h.d != d:
            raise ConfigError(f"test_functions[{q}]", f"dimension {h.d} does not match domain.d={d}")
        tfs.append(h)

    ens = _get(obj, "ensemble", "", dict, required=True)
    n_runs = _get(ens, "n_runs", "ensemble", int, required=True)
    seed = _get(ens, "base_seed", "ensemble", int, required=True)
    if n_runs < 1:
        raise ConfigError("ensemble.n_runs", "must be >= 1")
    if seed < 0:
        raise ConfigError("ensemble.base_seed", "must be >= 0")

    an = _get(obj, "analyses", "", dict, default={})
    for k, v in an.items():
        if k not in ANALYSES:
            raise ConfigError(f"analyses.{k}", f"unknown analysis (choose from {', '.join(ANALYSES)})")
        if not isinstance(v, bool):
            raise ConfigError(f"analyses.{k}", "must be true or false")
    analyses = {k: bool(an.get(k, False)) for k in ANALYSES}
    if (analyses["covariance"] or analyses["wick"]) and not tfs:
        raise ConfigError("test_functions", "covariance/wick analyses need at least one test function")

    workers = obj.get("workers")
    if workers is not None and (not isinstance(workers, int) or workers < 1):
        raise ConfigError("workers", "must be a positive integer or null")
    out = _get(obj, "output_dir", "", str, default="fluctsim_out")
    sub = {k: _get(obj, k, "", dict, default={}) for k in ("lbe", "ou", "clusters", "balance")}
    return ExperimentConfig(domain, sampler, ts, tfs, n_runs, seed, analyses, out, workers,
                            sub["lbe"], sub["ou"], sub["clusters"], sub["balance"], obj)


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as f:
            obj = json.load(f)
    except FileNotFoundError:
        raise ConfigError("--config", f"file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError("--config", f"invalid JSON ({e})") from None
    return parse_config(obj)


# ----------------------------------------------------------------------------
# manifest


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    base_seed: int
    seed_rule: str
    run_seeds: list
    stages: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str) -> "RunManifest":
        with open(path) as f:
            return cls(**json.load(f))

    def record(self, stage: str, seconds: float, out_dir: str, produced: list) -> None:
        self.stages[stage] = {"wall_clock_s": round(seconds, 3),
                              "finished": time.strftime("%Y-%m-%dT%H:%M:%S")}
        for name in produced:
            self.files[name] = sha256_file(os.path.join(out_dir, name))

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=1, sort_keys=True)


def _manifest(cfg: ExperimentConfig, out: str) -> RunManifest:
    path = os.path.join(out, "manifest.json")
    if os.path.exists(path):
        m = RunManifest.load(path)
        if m.config_hash == cfg.hash():
            return m
    return RunManifest(cfg.hash(), __version__, cfg.base_seed,
                       "SeedSequence(base_seed, spawn_key=(run, crc32(tag)))",
                       [seed_entropy(cfg.base_seed, r, "sampler") for r in range(cfg.n_runs)])


# ----------------------------------------------------------------------------
# stages


def _write_csv(path: str, header: list, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(c)) if isinstance(c, (float, np.floating)) else c for c in r])


def stage_simulate(cfg: ExperimentConfig, out: str, workers) -> list:
    from .dynamics import advance, write_snapshot_jsonl

    produced = []
    # trajectory snapshot of run 0 at every sample time (same stream as the ensemble)
    st = sample_configuration(cfg.domain, cfg.sampler, stream(cfg.base_seed, 0, "sampler"))
    snaps = []
    for t in cfg.t_samples:
        st = advance(st, t, record=False) if t > st.time else st
        snaps.append(st.copy(keep_log=False))
    write_snapshot_jsonl(snaps, os.path.join(out, "snapshot_run0.jsonl"))
    produced.append("snapshot_run0.jsonl")
    if cfg.test_functions:
        ens, info = run_ensemble(cfg.domain, cfg.sampler, cfg.t_samples, cfg.test_functions,
                                 cfg.n_runs, cfg.base_seed, workers)
        ens.save(os.path.join(out, "ensemble.npz"))
        rows = []
        for r in range(ens.n_runs):
            for k, t in enumerate(ens.times):
                rows.append([int(ens.run_ids[r]), float(t)] + [float(c) for c in ens.raw[r, k]])
        _write_csv(os.path.join(out, "fields.csv"), ["run", "t"] + ens.test_ids, rows)
        _write_csv(os.path.join(out, "runs.csv"), ["run", "n_particles", "n_collisions"],
                   zip(ens.run_ids.tolist(), info["n_particles"].tolist(), info["n_collisions"].tolist()))
        produced += ["ensemble.npz", "fields.csv", "runs.csv"]
    return produced


def _load_ensemble(out: str, analysis: str) -> FieldEnsemble:
    path = os.path.join(out, "ensemble.npz")
    if not os.path.exists(path):
        raise AnalysisError(analysis, f"no stored ensemble at {path}; run 'simulate' first")
    return FieldEnsemble.load(path)


def stage_covariance(cfg: ExperimentConfig, out: str) -> list:
    ens = _load_ensemble(out, "covariance")
    if ens.n_runs < 100:
        raise AnalysisError("covariance", f"needs n_runs >= 100 (have {ens.n_runs})")
    t0 = float(ens.times[0])
    ids = ens.test_ids
    plan = [MomentRequest((t0, float(t)), (a, b)) for t in ens.times for a in ids for b in ids]
    est = estimate_moments(ens, plan)
    hs = {h.id: h for h in cfg.test_functions}
    rng = stream(cfg.base_seed, 0, "gram")
    gram = {}
    for a in ids:
        for b in ids:
            gram[a, b] = gram_inner(hs[a], hs[b], 100_000, rng, d=cfg.domain.d)
    rows = []
    for e in est:
        g, ge = gram[e.test_ids[0], e.test_ids[1]]
        rows.append([e.times[1], e.test_ids[0], e.test_ids[1], e.estimate, e.std_error, g, ge])
    _write_csv(os.path.join(out, "covariance.csv"),
               ["t", "g", "h", "cov_0t", "std_error", "gram", "gram_error"], rows)
    return ["covariance.csv"]


def stage_wick(cfg: ExperimentConfig, out: str) -> list:
    ens = _load_ensemble(out, "wick")
    if ens.n_runs < 100:
        raise AnalysisError("wick", f"needs n_runs >= 100 (have {ens.n_runs})")
    ids = ens.test_ids
    t0, t1 = float(ens.times[0]), float(ens.times[-1])
    a, b = ids[0], ids[min(1, len(ids) - 1)]
    plan = [MomentRequest((t0,) * 3, (a,) * 3), MomentRequest((t0, t0, t1), (a, b, a)),
            MomentRequest((t0,) * 4, (a,) * 4), MomentRequest((t0, t0, t1, t1), (a, b, a, b))]
    write_moments_csv(estimate_moments(ens, plan), os.path.join(out, "moments.csv"))
    rows = []
    for t in ens.times:
        for h in ids:
            g = gaussianity(ens, float(t), h)
            rows.append([float(t), h, g["skewness"], g["skewness_se"], g["excess_kurtosis"],
                         g["excess_kurtosis_se"]])
    _write_csv(os.path.join(out, "gaussianity.csv"),
               ["t", "test_id", "skewness", "skewness_se", "excess_kurtosis", "excess_kurtosis_se"], rows)
    return ["moments.csv", "gaussianity.csv"]


def _matrices(cfg: ExperimentConfig, workers):
    from .lbe import GalerkinBasis, assemble_generator, assemble_noise

    p = cfg.lbe
    basis = GalerkinBasis.full(cfg.domain.d, int(p.get("K", 1)), int(p.get("A", 2)))
    method = p.get("method", "mc")
    n_mc = int(p.get("n_mc", 1_000_000)) if method == "mc" else 0
    try:
        gen = assemble_generator(basis, n_mc, stream(cfg.base_seed, 0, "lbe_B"), method, workers or 1)
        noise = assemble_noise(basis, n_mc, stream(cfg.base_seed, 0, "lbe_C"), method, workers or 1)
    except ValueError as e:
        raise AnalysisError("fd_check", str(e)) from None
    return basis, gen, noise


def stage_fd_check(cfg: ExperimentConfig, out: str, workers) -> tuple[list, bool]:
    from .lbe import dissipativity, fd_check, write_matrix_csv

    basis, gen, noise = _matrices(cfg, workers)
    rep = fd_check(gen, noise)
    lam, tol, ok = dissipativity(gen)
    hdr = {"n_mc": gen.n_mc, "method": gen.method, "base_seed": cfg.base_seed}
    write_matrix_csv(os.path.join(out, "generator.csv"), gen.B, basis, hdr, gen.mc_error)
    write_matrix_csv(os.path.join(out, "noise.csv"), noise.C, basis, hdr, noise.mc_error)
    write_matrix_csv(os.path.join(out, "fd_residual.csv"), rep.residual, basis, hdr, rep.sigma)
    summary = rep.to_dict()
    summary.update({"sym_max_eigenvalue": lam, "dissipativity_tol": tol, "dissipative": ok})
    with open(os.path.join(out, "fd_check.json"), "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    files = ["generator.csv", "generator.csv.json", "noise.csv", "noise.csv.json",
             "fd_residual.csv", "fd_residual.csv.json", "fd_check.json"]
    return files, rep.passed and ok


def stage_ou(cfg: ExperimentConfig, out: str, workers) -> list:
    from .lbe import ou_lagged_covariance, ou_simulate, propagate_covariance

    basis, gen, noise = _matrices(cfg, workers)
    p = cfg.ou
    norm = float(np.linalg.norm(gen.B, 2))
    dt = float(p.get("dt", 0.1 / max(norm, 1e-12)))
    scheme = p.get("scheme", "euler")
    try:
        res = ou_simulate(gen, noise, dt, float(p.get("t_end", 20.0)), int(p.get("n_paths", 1000)),
                          stream(cfg.base_seed, 0, "ou"), scheme, p.get("record_every"),
                          float(p.get("burn_in", 0.0)))
    except ValueError as e:
        raise AnalysisError("ou", str(e)) from None
    ids = [e.id for e in basis.elements]
    n = len(ids)
    _write_csv(os.path.join(out, "ou_stationary_cov.csv"), ["row", "col", "value", "std_error"],
               [[ids[i], ids[j], float(res.stationary_cov[i, j]), float(res.cov_error[i, j])]
                for i in range(n) for j in range(n)])
    step = res.times[1] - res.times[0] if res.times.size > 1 else dt
    lags = [q * step for q in range(int(p.get("n_lags", 10)) + 1)]
    rows = []
    for i in range(n):
        e = np.eye(n)[i]
        pred = propagate_covariance(gen, e, e, lags)
        for q, lag in enumerate(lags):
            m, s = ou_lagged_covariance(res, lag, e, e)
            rows.append([float(lag), ids[i], float(m), float(s), float(pred[q])])
    _write_csv(os.path.join(out, "ou_lagged.csv"), ["lag", "element", "empirical", "std_error", "predicted"], rows)
    return ["ou_stationary_cov.csv", "ou_lagged.csv"]


def stage_clusters(cfg: ExperimentConfig, out: str, workers) -> list:
    from .clusters import ConditioningParams, classify_collision_graph, upsilon_check, upsilon_probability_scan
    from .dynamics import advance

    p = cfg.clusters
    produced = []
    d = cfg.domain.d

    def params_for(dom):
        kw = {k: p[k] for k in ("gamma", "V", "delta", "tau", "Theta") if k in p}
        base = ConditioningParams.standard(d, dom.eps, p.get("tau"), float(p.get("Theta", 1.0)),
                                           tuple(p.get("thetas", ())), strict=False)
        return base.with_(**kw, strict=bool(p.get("strict", False))) if kw else base

    try:
        prm = params_for(cfg.domain)
    except ValueError as e:
        raise AnalysisError("clusters", str(e)) from None
    st = sample_configuration(cfg.domain, cfg.sampler, stream(cfg.base_seed, 0, "sampler"))
    with open(os.path.join(out, "clusters_run0.jsonl"), "w") as f:
        f.write(upsilon_check(st, prm, stop_early=False).to_jsonl())
    produced.append("clusters_run0.jsonl")

    window = float(p.get("window", prm.delta))
    t_end = float(p.get("graph_t_end", 1.0))
    st = advance(st, t_end)
    with open(os.path.join(out, "collision_graphs.jsonl"), "w") as f:
        t0 = 0.0
        while t0 < t_end - 1e-12:
            g = classify_collision_graph(st, (t0, min(t0 + window, t_end)))
            f.write(json.dumps(g.summary(), sort_keys=True) + "\n")
            t0 += window
    produced.append("collision_graphs.jsonl")

    n_scan = int(p.get("scan_runs", 0))
    if n_scan:
        eps_list = [float(e) for e in p.get("scan_eps", [cfg.domain.eps, cfg.domain.eps / 2])]
        doms = [DomainParams(d, e) for e in eps_list]
        try:
            rows = upsilon_probability_scan(doms, params_for, n_scan, base_seed=cfg.base_seed,
                                            sampler=cfg.sampler, workers=workers)
        except ValueError as e:
            raise AnalysisError("clusters", str(e)) from None
        with open(os.path.join(out, "upsilon_scan.jsonl"), "w") as f:
            for r in rows:
                f.write(json.dumps(r, sort_keys=True) + "\n")
        produced.append("upsilon_scan.jsonl")
    return produced


def stage_balance(cfg: ExperimentConfig, out: str) -> tuple[list, bool]:
    from .lbe import GalerkinBasis, equilibrium_balance

    p = cfg.balance
    basis = GalerkinBasis.full(cfg.domain.d, int(p.get("K", 1)), int(p.get("A", 2)))
    try:
        rep = equilibrium_balance(int(p.get("n_mc", 1_000_000)), cfg.domain.eps,
                                  stream(cfg.base_seed, 0, "balance"), basis,
                                  bool(p.get("symmetrized", False)))
    except ValueError as e:
        raise AnalysisError("balance", str(e)) from None
    _write_csv(os.path.join(out, "balance.csv"), ["test_id", "gain", "loss", "residual", "mc_error"],
               [[r["test_id"], r["gain"], r["loss"], r["residual"], r["mc_error"]] for r in rep.rows()])
    return ["balance.csv"], rep.passed


def stage_report(out: str) -> dict:
    path = os.path.join(out, "manifest.json")
    if not os.path.exists(path):
        raise AnalysisError("report", f"no manifest in {out}")
    m = RunManifest.load(path)
    bad = [n for n, h in m.files.items()
           if not os.path.exists(os.path.join(out, n)) or sha256_file(os.path.join(out, n)) != h]
    rep = {"config_hash": m.config_hash, "tool_version": m.tool_version, "base_seed": m.base_seed,
           "n_runs": len(m.run_seeds), "stages": m.stages, "n_files": len(m.files),
           "hash_mismatches": bad}
    for name in ("fd_check.json",):
        if name in m.files:
            with open(os.path.join(out, name)) as f:
                rep[name.split(".")[0]] = json.load(f)
    return rep


# ----------------------------------------------------------------------------
# entry points


def run_experiment(config_path: str, seed: int | None = None, workers: int | None = None,
                   out: str | None = None, command: str = "simulate") -> int:
    """Execute ``command`` for the config at ``config_path``; returns an exit status."""
    try:
        if command == "report":
            if out is None:
                out = load_config(config_path).output_dir
            print(json.dumps(stage_report(out), indent=1, sort_keys=True))
            return 0
        cfg = load_config(config_path)
        if seed is not None:
            if seed < 0:
                raise ConfigError("--seed", "must be >= 0")
            cfg.base_seed = seed
        if workers is not None:
            if workers < 1:
                raise ConfigError("--workers", "must be >= 1")
            cfg.workers = workers
        out = out or cfg.output_dir
        os.makedirs(out, exist_ok=True)
        nw = cfg.workers or default_workers()
        man = _manifest(cfg, out)
        with open(os.path.join(out, "config.json"), "w") as f:
            json.dump(cfg.to_json(), f, indent=1, sort_keys=True)
        man.files["config.json"] = sha256_file(os.path.join(out, "config.json"))

        stages = {"simulate": ["simulate"] + [a for a in ANALYSES if cfg.analyses[a]],
                  "analyze": [a for a in ("covariance", "wick") if cfg.analyses[a]] or ["covariance"],
                  "fd-check": ["fd_check"], "ou": ["ou"], "clusters": ["clusters"],
                  "balance": ["balance"]}[command]
        ok = True
        for s in stages:
            t0 = time.perf_counter()
            if s == "simulate":
                files = stage_simulate(cfg, out, nw)
            elif s == "covariance":
                files = stage_covariance(cfg, out)
            elif s == "wick":
                files = stage_wick(cfg, out)
            elif s == "fd_check":
                files, passed = stage_fd_check(cfg, out, nw)
                ok &= passed
            elif s == "ou":
                files = stage_ou(cfg, out, nw)
            elif s == "clusters":
                files = stage_clusters(cfg, out, nw)
            else:
                files, passed = stage_balance(cfg, out)
                ok &= passed
            man.record(s, time.perf_counter() - t0, out, files)
            man.save(os.path.join(out, "manifest.json"))
        return 0 if ok else 4
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except AnalysisError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fluctsim", description="Hard-sphere fluctuation experiments")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("simulate", "analyze", "fd-check", "ou", "clusters", "balance", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=(name != "report"), help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="override ensemble.base_seed")
        p.add_argument("--workers", type=int, help="worker processes (default: FLUCTSIM_WORKERS or all CPUs)")
        p.add_argument("--out", help="output directory (default: config output_dir)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report" and args.config is None and args.out is None:
        print("config error: report needs --out or --config", file=sys.stderr)
        return 2
    return run_experiment(args.config, args.seed, args.workers, args.out, args.command)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
