"""Command-line experiment runner.

Every subcommand reads the same configuration format (see
``config_schema.json``), runs the requested analysis together with the
analyses it depends on, and writes plot-ready tables, JSON results, a
manifest and a plain-text summary into the output directory.

Exit codes: 0 on success, 1 for configuration or usage errors, 2 when a
numerical certification fails (for example a non-converged Ulam operator).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__, kernels
from . import coupling as cp
from . import interval_maps as im
from . import martingale_lab as ml
from . import observables as ob
from . import statistics as st
from . import transfer as tr
from .config import MANIFEST_VERSION, ConfigError, load_config, make_grid, make_map, make_observable, resolve

__all__ = ["main", "Runner", "NumericalFailure", "AnalysisError", "ORDER"]

ORDER = ["map_validate", "density", "mixing", "correlations", "variance", "gordin", "clt", "wip",
         "lil", "decompose", "martingale", "ddm", "scan", "coupling"]

_DEPENDS = {
    "correlations": ["density"],
    "variance": ["density"],
    "gordin": ["density"],
    "clt": ["density", "variance"],
    "wip": ["density", "variance"],
    "lil": ["density"],
    "martingale": ["density"],
    "ddm": ["mixing"],
}

_SUBCOMMANDS = {
    "map-validate": "map_validate", "density": "density", "correlations": "correlations",
    "variance": "variance", "clt": "clt", "wip": "wip", "lil": "lil", "mixing": "mixing",
    "gordin": "gordin", "decompose": "decompose", "martingale": "martingale", "ddm": "ddm",
    "coupling-demo": "coupling", "scan": "scan",
}

_CERTIFICATION_ERRORS = (tr.UlamConvergenceError, tr.DivergentProfileError, ob.QuadratureError,
                         ob.UnboundedVariationError, cp.ScheduleStallError)


class NumericalFailure(RuntimeError):
    """A numerical certification failed inside an analysis."""


class AnalysisError(RuntimeError):
    """An analysis rejected its inputs."""


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def dumps_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _jsonable(v) for k, v in r.items()})
    return buf.getvalue()


class Runner:
    """Holds the resolved configuration and the lazily built shared objects."""

    def __init__(self, cfg: dict, threads: int = 1):
        self.cfg = cfg
        self.threads = max(1, int(threads))
        try:
            self.map = make_map(cfg["map"])
            self.f = make_observable(cfg["observable"])
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"config invalid: {exc}") from None
        self._op = None
        self._var = None
        self._ens = None
        self._profile = None
        self.tables: dict[str, list[dict]] = {}
        self.results: dict[str, dict] = {}
        self.summary: list[str] = []

    # -- shared objects -------------------------------------------------------
    @property
    def op(self) -> tr.UlamOperator:
        if self._op is None:
            g = self.cfg["grid"]
            self._op = _guard("transfer", "build_ulam",
                              lambda: tr.build_ulam(self.map, make_grid(g), tol=g["tol"],
                                                    max_iter=g["max_iter"]))
        return self._op

    def variance(self) -> st.VarianceEstimate:
        if self._var is None:
            a = self.cfg["analysis"].get("variance") or resolve({}, ["variance"])["analysis"]["variance"]
            rule = ("fixed", a["K"]) if a["rule"] == "fixed" else ("adaptive", a["threshold"])
            self._var = _guard("statistics", "sigma2",
                               lambda: st.sigma2(self.op, self.f, rule, a["max_lag"]))
        return self._var

    def ensemble(self) -> st.TrajectoryEnsemble:
        if self._ens is None:
            r = self.cfg["run"]
            init = r["init"] if r["init"] == "stationary" else (r["init"], r["burnin"])
            times = self.cfg["analysis"].get("wip", {}).get("times", ())
            self._ens = _guard("statistics", "birkhoff_ensemble", lambda: st.birkhoff_ensemble(
                self.map, self.f, r["n"], r["R"], r["seed"], init=init, op=self.op,
                checkpoints=r.get("checkpoints"), times=times, threads=self.threads))
            self.tables["ensemble"] = self._ens.summary_rows()
        return self._ens

    def profile(self) -> tr.MixingProfile:
        if self._profile is None:
            a = self.cfg["analysis"].get("mixing") or resolve({}, ["mixing"])["analysis"]["mixing"]

            def build():
                op = self.op if self.op.B <= a["B"] else tr.build_ulam(
                    self.map, make_grid({**self.cfg["grid"], "B": a["B"],
                                         "first_width": max(self.cfg["grid"].get("first_width", 1e-6), 1e-6)}))
                return tr.phi_coefficients(op, a["kmax"], pair_bins=min(a["pair_bins"], op.B))
            self._profile = _guard("transfer", "phi_coefficients", build)
        return self._profile

    # -- analyses -------------------------------------------------------------
    def run(self, names) -> None:
        for name in names:
            getattr(self, "_a_" + name)(self.cfg["analysis"][name])

    def _a_map_validate(self, a):
        rep = im.validate(self.map, a["grid_size"])
        d = rep.as_dict()
        d["ok"] = rep.ok
        self.results["map_validate"] = d
        self.summary.append(f"map-validate: {self.map.name} ok={rep.ok}")

    def _a_density(self, a):
        op = self.op
        e = op.edges
        self.tables["density"] = [{"bin": i, "left": float(e[i]), "right": float(e[i + 1]),
                                   "pi": float(op.pi[i]), "h": float(op.h[i])} for i in range(op.B)]
        self.results["density_meta"] = {"B": op.B, "grid": op.grid.as_dict(), "residual": op.residual,
                                        "iterations": op.iterations}
        self.summary.append(f"density: B={op.B} residual={op.residual:.3e} iterations={op.iterations}")

    def _a_correlations(self, a):
        c = _guard("transfer", "correlations", lambda: tr.correlations(self.op, self.f, self.f, a["kmax"]))
        self.tables["correlations"] = [{"lag": k, "correlation": float(v)} for k, v in enumerate(c)]
        self.summary.append(f"correlations: lag0={c[0]:.6g} lag1={c[1] if len(c) > 1 else 0.0:.6g}")

    def _a_variance(self, a):
        v = self.variance()
        self.tables["variance"] = v.rows()
        self.results["variance_summary"] = {"sigma2_hat": v.sigma2_hat, "raw": v.raw, "lags_used": v.lags_used,
                                            "rule": v.rule, "standard_error": v.standard_error,
                                            "tail_estimate": v.tail_estimate, "flags": list(v.flags)}
        self.summary.append(f"variance: sigma2={v.sigma2_hat:.6g} (se {v.standard_error:.2e}, K={v.lags_used})")

    def _a_gordin(self, a):
        g = _guard("transfer", "gordin_sum", lambda: tr.gordin_sum(self.op, self.f, a["N"]))
        self.tables["gordin"] = [{"n": k, "term": float(t)} for k, t in enumerate(g["terms"])]
        self.results["gordin_summary"] = {k: v for k, v in g.items() if k != "terms"}
        self.summary.append(f"gordin: partial={g['partial_sum']:.6g} total={g['total']:.6g}")

    def _a_mixing(self, a):
        p = self.profile()
        self.tables["mixing"] = p.rows()
        meta = {"kmax": p.kmax, "horizon": p.horizon, "pair_bins": p.pair_bins, "fit": p.decay_fit,
                "label": p.label}
        try:
            s, idx = tr.sum_sqrt_phi1(p)
            meta.update(sum_sqrt_phi1=s, truncation_index=idx, C=16.0 * s, certified=True)
        except tr.DivergentProfileError:
            meta.update(certified=False)
        self.results["mixing_meta"] = meta
        self.summary.append(f"mixing: certified={meta['certified']} fit={p.decay_fit['model']}")

    def _sigma(self) -> float:
        v = self.variance()
        if not v.sigma2_hat > 0:
            raise AnalysisError("statistics.clt_ks: degenerate sigma (sigma2_hat <= 0)")
        return math.sqrt(v.sigma2_hat)

    def _a_clt(self, a):
        sigma = self._sigma()
        ens = self.ensemble()
        res = st.clt_ks(ens, sigma, a["tol"])
        self.results["clt"] = res
        self.summary.append(f"clt: ks={res['ks_distance']:.4f} pass={res['pass']}")

    def _a_wip(self, a):
        sigma = self._sigma()
        ens = self.ensemble()
        res = st.wip_marginals(ens, sigma, a["times"])
        res["relative_error"] = res["cov_error"] / sigma ** 2
        self.results["wip"] = res
        self.summary.append(f"wip: cov_error={res['cov_error']:.4g} ({res['relative_error']:.3f} sigma^2)")

    def _a_lil(self, a):
        ens = self.ensemble()
        thr = a["threshold"]
        meta = {}
        if thr == "3CM":
            p = self.profile()
            s, idx = _guard("transfer", "sum_sqrt_phi1", lambda: tr.sum_sqrt_phi1(p))
            M = ml.l2_norm(self.op, self.f)
            thr = 3.0 * 16.0 * s * M
            meta = {"C": 16.0 * s, "M": M, "threshold_rule": "3CM (discretized phi surrogate)"}
        res = st.lil_statistic(ens, float(thr))
        U = res.pop("U")
        res.update(meta)
        res["U_max"] = float(np.max(U))
        self.results["lil"] = res
        self.tables["lil_series"] = [{"k": k, "term": t, "partial": s} for k, t, s in
                                     zip(res["checkpoints"], res["series_terms"], res["series_partial"])]
        self.summary.append(f"lil: threshold={thr:.4g} exceedance={res['exceedance_rate']:.4f} "
                            f"median U={res['median']:.4f}")

    def _a_decompose(self, a):
        f = self.f
        xs = np.linspace(1e-9, 1.0, 20001)
        fv = ob.eval_observable(f, xs)
        rows = []
        for m in a["m"]:
            bv, rem = ob.decompose_H(f, m)
            err = float(np.max(np.abs(ob.eval_observable(bv, xs) + ob.eval_observable(rem, xs) - fv)))
            var = _guard("observables", "variation_norm", lambda: ob.variation_norm(bv))
            bound = 3.0 * m * f.weight_sum
            rows.append({"m": m, "reconstruction_error": err, "variation_bv": var,
                         "bound_3m": bound, "within_bound": var <= bound + 1e-9})
        self.tables["decompose"] = rows
        out = {"rows": rows}
        if isinstance(f.tag, ob.L2Class):
            op = self.op
            bv, rem, info = _guard("observables", "decompose_L2",
                                   lambda: ob.decompose_L2(f, a["eps"], op.edges, op.h))
            out["L2"] = {"eps": a["eps"], "K": info["K"], "K_star": info["K_star"],
                         "alpha": info["alpha"], "degenerate": info["degenerate"]}
        self.results["decompose"] = out
        self.summary.append(f"decompose: all within bound={all(r['within_bound'] for r in rows)}")

    def _a_martingale(self, a):
        op = self.op
        seed = self.cfg["run"]["seed"]
        n = a["n"]
        ctx = _guard("martingale_lab", "build_context",
                     lambda: ml.build_context(op, self.f, n, a.get("M"), profile=self.profile()))
        paths = ml.simulate_chain(op, n + 2, seed, a["paths"])
        rows, ds, ys = [], [], []
        for p in range(a["paths"]):
            x = ml.chain_positions(op, paths[p], seed, p)
            res = ml.martingale_path(ctx, paths[p], positions=x)
            rows.append({"path": p, "identity_residual": res["identity_residual"],
                         "M_n": float(res["M"][-1]), "S_n": float(res["S"][-1])})
            ds.append(res["d"][1:])
            ys.append(res["Y"][1:-1])
        cm = ml.conditional_mean_test(np.concatenate(ds), np.concatenate(ys), op.B)
        self.tables["martingale"] = rows
        self.results["martingale"] = {"context": ctx.summary(), "max_identity_residual":
                                      max(r["identity_residual"] for r in rows),
                                      "conditional_mean": cm}
        self.summary.append(f"martingale: max residual={self.results['martingale']['max_identity_residual']:.3e} "
                            f"conditional-mean pass={cm['pass']}")

    def _a_ddm(self, a):
        res = ml.ddm_condition(self.profile(), a["kmax"])
        self.tables["ddm"] = [{"k": k, "term": t, "partial_sum": s}
                              for k, t, s in zip(res["k"], res["terms"], res["partial_sums"])]
        self.results["ddm"] = {k: v for k, v in res.items() if k not in ("k", "terms", "partial_sums")}
        self.summary.append(f"ddm: verdict={res['verdict']}")

    def _a_scan(self, a):
        r = self.cfg["run"]
        init = r["init"] if r["init"] == "stationary" else (r["init"], r["burnin"])
        res = _guard("statistics", "normalization_scan", lambda: st.normalization_scan(
            self.map, self.f, a["ns"], a["R"], r["seed"], init=init, op=self.op, threads=self.threads))
        self.tables["scan"] = [{"n": n, "var_over_n": v} for n, v in zip(res["ns"], res["var_over_n"])]
        self.results["scan"] = res
        self.summary.append(f"scan: model={res['model']} ratio={res['residual_ratio']:.3g}")

    def _a_coupling(self, a):
        base = self.cfg["run"]["seed"]
        rows, finals, first = [], [], None
        cps = [c for c in (10 ** 3, 10 ** 4, 10 ** 5, 10 ** 6, 10 ** 7) if c < a["n"]] + [a["n"]]
        for s in range(a["seeds"]):
            inp = cp.synthetic_harness(base + s, a["levels"], a["n"], a["sigma"],
                                       perturbation=a["perturbation"])
            run = _guard("coupling", "schedule",
                         lambda: cp.coupling_run(inp, base + s, "powers_of_2", a["safety"], cps))
            if first is None:
                first = (inp, run)
            for k, d in zip(run.checkpoints, run.D):
                rows.append({"seed": base + s, "n": int(k), "D_n": float(d)})
            finals.append(run.D)
        inp, run = first
        med = np.median(np.asarray(finals), axis=0)
        self.tables["coupling"] = rows
        self.results["coupling"] = {
            "schedule": [int(x) for x in run.A], "decay_verified": run.decay_verified,
            "sigma_m": inp.sigma_m, "eps": inp.eps, "assumptions": cp.check_assumptions(inp),
            "iid_checks": cp.iid_normal_checks(run.Z[: min(len(run.Z), 100_000)], inp.sigma),
            "checkpoints": run.checkpoints, "median_D": med,
            "median_strictly_decreasing": bool(np.all(np.diff(med) < 0)),
        }
        self.summary.append(f"coupling: schedule={[int(x) for x in run.A][:4]}... median D={med.tolist()}")

    # -- output ---------------------------------------------------------------
    def render(self, fmt: str) -> dict[str, str]:
        files = {}
        for name, rows in self.tables.items():
            if fmt == "csv":
                files[f"{name}.csv"] = dumps_csv(rows)
            else:
                files[f"{name}.json"] = dumps_json(rows)
        for name, obj in self.results.items():
            files[f"{name}.json"] = dumps_json(obj)
        files["summary.txt"] = "\n".join(self.summary) + "\n"
        manifest = {
            "manifest_version": MANIFEST_VERSION,
            "config": {k: ({kk: vv for kk, vv in v.items() if kk != "dir"} if k == "output" else v)
                       for k, v in self.cfg.items()},
            "package": {"name": "asipdyn", "version": __version__, "kernel_backend": kernels.BACKEND},
            "versions": {"python": platform.python_version(), "numpy": np.__version__,
                         "scipy": scipy.__version__},
            "files": {k: hashlib.sha256(v.encode()).hexdigest() for k, v in sorted(files.items())},
        }
        files["manifest.json"] = dumps_json(manifest)
        return files


def _guard(module: str, op: str, fn):
    try:
        return fn()
    except _CERTIFICATION_ERRORS as exc:
        raise NumericalFailure(f"{module}.{op}: {exc}") from exc
    except (ValueError, cp.CouplingContractError) as exc:
        raise AnalysisError(f"{module}.{op}: {exc}") from exc


def _plan(requested) -> list[str]:
    need = set()

    def add(n):
        for d in _DEPENDS.get(n, []):
            add(d)
        need.add(n)
    for r in requested:
        add(r)
    return [n for n in ORDER if n in need]


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override run.seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--format", choices=["csv", "json"], default=argparse.SUPPRESS,
                        help="table format")
    parser = argparse.ArgumentParser(prog="asipdyn", parents=[common],
                                     description="Limit-theorem numerics for interval maps.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="run every analysis listed in a config")
    p.add_argument("config", help="YAML/JSON config or a manifest.json")
    p = sub.add_parser("full-report", parents=[common], help="run every analysis (config optional)")
    p.add_argument("--config", help="YAML/JSON config or a manifest.json")
    for name in _SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common], help=f"run the {name} analysis")
        p.add_argument("--config", help="YAML/JSON config or a manifest.json")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config) if getattr(args, "config", None) else {}
        if hasattr(args, "seed"):
            cfg.setdefault("run", {})["seed"] = args.seed
        if hasattr(args, "out"):
            cfg.setdefault("output", {})["dir"] = args.out
        if hasattr(args, "format"):
            cfg.setdefault("output", {})["format"] = args.format
        if args.command == "run":
            requested = list(cfg.get("analysis", {}))
        elif args.command == "full-report":
            requested = list(cfg.get("analysis", {})) or [n for n in ORDER if n not in ("scan", "coupling")]
        else:
            requested = [_SUBCOMMANDS[args.command]]
        plan = _plan(requested)
        cfg = resolve(cfg, plan)
        runner = Runner(cfg, getattr(args, "threads", 1))
        runner.run(plan)
        files = runner.render(cfg["output"]["format"])
    except ConfigError as exc:
        print(f"asipdyn: config error: {exc}", file=sys.stderr)
        return 1
    except AnalysisError as exc:
        print(f"asipdyn: error: {exc}", file=sys.stderr)
        return 1
    except NumericalFailure as exc:
        print(f"asipdyn: numerical certification failed: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text)
    print(f"asipdyn: wrote {len(files)} files to {out} in {time.perf_counter() - t0:.1f} s", file=sys.stderr)
    sys.stdout.write(files["summary.txt"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
