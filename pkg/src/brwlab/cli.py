"""Command-line experiment runner.

    brwlab <command> [--config PATH] [--seed N] [--workers N] [--out DIR] [--replicas N]

Commands: validate, simulate, min-tail, w-tail, d-tail, conditional,
renewal, report. Each command writes CSV/JSON under ``--out`` and records
every file with its sha256 in ``manifest.json``.

Exit codes: 0 ok, 1 condition/verdict failure, 2 usage or parse error,
3 runtime failure (overflow, budget, degenerate weights, ...).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from scipy import stats as sps

from . import __version__
from .errors import BrwlabError, EmptyExperiment, MissingArtifact, ModelError
from .model import BUILTIN, find_kappa, model_from_dict, model_to_dict, validate_conditions
from .parallel import resolve_workers

EXIT_OK, EXIT_VERDICT, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3

DEFAULTS = {
    "simulate": {"replicas": 10_000, "n_max": 10, "thetas": [1.0, 2.0], "K": None,
                 "record": None},
    "min_tail": {"x_grid": [3, 4, 5, 6, 7, 8], "replicas": 10_000, "K": 5.0, "n": None,
                 "tilt": "first_passage", "ess_floor": 500, "slope_tol": 0.1},
    "w_tail": {"replicas": 100_000, "K": 5.0, "top_fraction": 0.01,
               "x_grid": [10, 20, 50, 100], "slope_tol": 0.1},
    "d_tail": {"replicas": 100_000, "K": 5.0, "x_grid": [10, 20, 50, 100], "tol": 0.3},
    "conditional": {"condition": "min_below", "x": 8.0, "eps": 0.1, "replicas": 4000,
                    "K": 5.0, "A": 2.0, "ess_floor": 500, "alpha": 0.01},
    "renewal": {"replicas": 50_000, "horizon": 2000, "x_grid": [8, 16], "h": [1, 2],
                "x_blackwell": 12, "exp_sum_x": [6, 10], "window_x": 10, "envelope_x": 10,
                "a_grid": [0, 2, 5, 10]},
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config and artifacts
# ---------------------------------------------------------------------------


def _config_schema() -> dict:
    text = resources.files("brwlab").joinpath("schema/config.schema.json").read_text()
    return json.loads(text)


def load_config(path: str | None) -> dict:
    if path is None:
        cfg = {"schema_version": 1}
    else:
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: malformed JSON at line {e.lineno} col {e.colno}: {e.msg}")
        except OSError as e:
            raise UsageError(f"cannot read config: {e}")
    try:
        jsonschema.validate(cfg, _config_schema())
    except jsonschema.ValidationError as e:
        loc = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise UsageError(f"config invalid at {loc}: {e.message}")
    if "model" in cfg:
        try:
            model_from_dict(cfg["model"])
        except ModelError as e:
            raise UsageError(str(e))
    return cfg


def section(cfg: dict, name: str, replicas: int | None) -> dict:
    out = dict(DEFAULTS[name])
    out.update(cfg.get(name, {}))
    if replicas is not None:
        out["replicas"] = replicas
    if "replicas" in out and out["replicas"] <= 0:
        raise EmptyExperiment(f"{name}: replicas must be positive")
    return out


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o)}")


def _clean(obj):
    """Replace non-finite floats so the JSON stays standard."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


class Artifacts:
    """Files written by one command plus the shared manifest."""

    def __init__(self, out: Path, command: str, cfg: dict, seed: int, workers: int):
        self.out, self.command = out, command
        self.cfg, self.seed, self.workers = cfg, seed, workers
        self.files: list[str] = []
        out.mkdir(parents=True, exist_ok=True)
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def json(self, name: str, obj) -> None:
        self.path(name).write_text(_dump(_clean(obj)), encoding="utf-8")

    def close(self) -> None:
        mpath = self.out / "manifest.json"
        manifest = {"runs": {}}
        if mpath.exists():
            try:
                manifest = json.loads(mpath.read_text())
            except json.JSONDecodeError:
                pass
        cfg_text = json.dumps(self.cfg, sort_keys=True).encode()
        manifest["code_version"] = __version__
        manifest["runs"][self.command] = {
            "config_sha256": hashlib.sha256(cfg_text).hexdigest(),
            "seed": self.seed, "workers": self.workers,
            "started": self.started, "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "files": {f: _sha256(self.out / f) for f in self.files},
        }
        mpath.write_text(_dump(manifest), encoding="utf-8")


def _model(cfg):
    return model_from_dict(cfg["model"]) if "model" in cfg else BUILTIN


def _mean_se(v):
    v = np.asarray(v, dtype=float)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_validate(cfg, args, art: Artifacts) -> tuple[bool, str]:
    model = _model(cfg)
    rep = validate_conditions(model)
    doc = {"model": model_to_dict(model), "conditions": rep.to_json()}
    ll = rep.log_laplace
    if ll is not None:
        doc["log_laplace"] = {"kappa": ll.kappa, "psi1": ll.psi1, "psi1_kappa": ll.psi1_kappa,
                              "psi2_kappa": ll.psi2_kappa, "kappa_prime": ll.kappa_prime,
                              "delta0": ll.delta0, "closed_form": ll.closed_form}
    art.json("validate.json", doc)
    failed = [e["condition"] for e in rep.to_json() if e["verdict"] == "fail"]
    kappa = f"kappa={ll.kappa:.12g}" if ll is not None else "kappa=n/a"
    return rep.ok, f"validate: {kappa}; failed conditions: {failed or 'none'}"


def cmd_simulate(cfg, args, art: Artifacts) -> tuple[bool, str]:
    from .brw import Prune, simulate

    p = section(cfg, "simulate", args.replicas)
    model = _model(cfg)
    ll = find_kappa(model)
    n = int(p["n_max"])
    record = p["record"] if p["record"] is not None else list(range(n + 1))
    prune = None if p["K"] is None else Prune(float(p["K"]), budget_cap=math.inf)
    s = simulate(model, p["replicas"], n, seed=args.seed, thetas=p["thetas"], prune=prune,
                 record=record, workers=args.workers, ll=ll)
    thetas = sorted(s.W)
    with open(art.path("simulate.csv"), "w", newline="") as fh:
        hdr = ["seed", "replica", "n"] + [f"W_n({t!r})" for t in thetas] + [
            "D_n", "M_n", "M", "ustar_gen", "certified", "prune_budget"]
        fh.write(",".join(hdr) + "\n")
        for i, g in enumerate(s.record):
            cols = [np.full(s.replicas, args.seed), np.arange(s.replicas), np.full(s.replicas, g)]
            cols += [s.W[t][i] for t in thetas]
            cols += [s.D[i], s.Mn[i], s.M, s.ustar_gen, s.certified.astype(int), s.budget]
            for row in zip(*cols):
                fh.write(",".join(repr(float(v)) if isinstance(v, (float, np.floating))
                                  else str(int(v)) for v in row) + "\n")
    last = len(s.record) - 1
    checks = {}
    for t in thetas:
        m, se = _mean_se(s.W[t][last])
        checks[f"W({t!r})"] = {"mean": m, "se": se, "target": 1.0,
                               "ok": abs(m - 1.0) <= 3 * se}
    m, se = _mean_se(s.D[last])
    checks["D"] = {"mean": m, "se": se, "target": 0.0, "ok": abs(m) <= 3 * se}
    ok = all(c["ok"] for c in checks.values())
    art.json("simulate.json", {"n": s.record[last], "replicas": s.replicas, "seed": args.seed,
                               "martingale_means": checks, "verdict": "pass" if ok else "fail"})
    return ok, "simulate: martingale means " + ", ".join(
        f"{k}={v['mean']:.4f}±{v['se']:.4f}" for k, v in checks.items())


def cmd_min_tail(cfg, args, art: Artifacts) -> tuple[bool, str]:
    from .spine import estimate_min_tail
    from .stats import fit_tail, write_rows

    p = section(cfg, "min_tail", args.replicas)
    model = _model(cfg)
    ll = find_kappa(model)
    ests = [estimate_min_tail(model, float(x), p["replicas"], seed=args.seed, n=p["n"],
                              K=p["K"], tilt=p["tilt"], ess_floor=p["ess_floor"],
                              workers=args.workers, ll=ll) for x in p["x_grid"]]
    write_rows(art.path("min_tail.csv"), ["x", "p_hat", "se", "ess", "prune_budget"],
               [(e.x, e.p_hat, e.se, e.ess, e.prune_budget) for e in ests])
    env = [e.p_hat <= math.exp(-ll.kappa * e.x) + e.se for e in ests]
    doc = {"estimates": [e.to_json() for e in ests], "kappa": ll.kappa,
           "envelope_ok": all(env)}
    ok = all(env)
    msg = f"min-tail: envelope {'ok' if all(env) else 'violated'}"
    if len(ests) >= 4:
        fit = fit_tail([(e.x, e.p_hat, e.se) for e in ests], "exp_in_x")
        rel = abs(fit.exponent / -ll.kappa - 1.0)
        doc["fit"] = fit.to_json()
        doc["slope_rel_error"] = rel
        ok = ok and rel <= p["slope_tol"]
        msg += f"; slope {fit.exponent:.4f}±{fit.exponent_se:.4f} (target {-ll.kappa:.4g})"
    doc["verdict"] = "pass" if ok else "fail"
    art.json("min_tail.json", doc)
    return ok, msg


def _limit_samples(cfg, args, name):
    from .stats import limit_samples

    p = section(cfg, name, args.replicas)
    model = _model(cfg)
    ll = find_kappa(model)
    s = limit_samples(model, p["replicas"], seed=args.seed, K=p["K"], workers=args.workers,
                      ll=ll)
    return p, model, ll, s


def cmd_w_tail(cfg, args, art: Artifacts) -> tuple[bool, str]:
    from .stats import compensated_tail, heavy_tail_fit, pareto_conditioning, write_rows

    p, model, ll, s = _limit_samples(cfg, args, "w_tail")
    fit = heavy_tail_fit(s.W_inf, p["top_fraction"])
    rows = compensated_tail(s.W_inf, p["x_grid"], ll.kappa)
    write_rows(art.path("w_tail.csv"), ["x", "x^kappa*P(W>=x)", "se"], rows)
    rel = abs(fit.rank_alpha / ll.kappa - 1.0)
    ok = rel <= p["slope_tol"] and fit.agree
    pareto = pareto_conditioning(s.W_inf, s.D_inf, ll.kappa,
                                 (ll.psi1_kappa - ll.psi1) / ll.psi1_kappa,
                                 provenance={"seed": args.seed, "replicas": p["replicas"]})
    art.json("w_tail.json", {"fit": fit.to_json(), "kappa": ll.kappa, "rank_rel_error": rel,
                             "pareto_conditioning": [r.to_json() for r in pareto],
                             "replicas": p["replicas"], "seed": args.seed,
                             "certified": float(s.certified.mean()),
                             "prune_budget": float(s.budget.mean()),
                             "verdict": "pass" if ok else "fail"})
    return ok, (f"w-tail: rank-size {fit.rank_alpha:.4f}±{fit.rank_se:.4f}, "
                f"Hill {fit.hill_alpha:.4f}±{fit.hill_se:.4f}, agree={fit.agree}; "
                + ", ".join(f"{r.law}={r.verdict}" for r in pareto))


def cmd_d_tail(cfg, args, art: Artifacts) -> tuple[bool, str]:
    from .stats import d_tail_suite, write_rows

    p, model, ll, s = _limit_samples(cfg, args, "d_tail")
    rep = d_tail_suite(model, p["x_grid"], p["replicas"], seed=args.seed, K=p["K"],
                       tol=p["tol"], ll=ll, summary=s)
    pl = rep.details["plateau"]
    write_rows(art.path("d_tail.csv"), ["x", "x^kappa*P(D>=x ln x)", "se"],
               zip(pl["x"], pl["value"], pl["se"]))
    art.json("d_tail.json", rep.to_json())
    return rep.verdict == "pass", (f"d-tail: plateau/C0 = {rep.details['ratio']:.3f} "
                                   f"(target {rep.details['target_ratio']:.3g}), "
                                   f"flat={pl['flat']}")


def cmd_conditional(cfg, args, art: Artifacts) -> tuple[bool, str]:
    from .spine import MinBelow, WLimitAbove, conditional_sample
    from .stats import ks_test, report

    p = section(cfg, "conditional", args.replicas)
    model = _model(cfg)
    ll = find_kappa(model)
    x = float(p["x"])
    cond = MinBelow(x) if p["condition"] == "min_below" else WLimitAbove(x, p["eps"])
    ws = conditional_sample(model, cond, p["replicas"], seed=args.seed, K=p["K"], A=p["A"],
                            ess_floor=p["ess_floor"], workers=args.workers, ll=ll)
    prov = {"seed": args.seed, "replicas": p["replicas"], "x": x, "condition": p["condition"],
            "K": p["K"], "prune_budget": ws.prune_budget}
    reports = []
    if isinstance(cond, MinBelow):
        names = ["overshoot", "gen_std", "ratio_DW", "W_M", "D_M", "nbhd_count", "in_window"]
        v, w = ws.sample("overshoot")
        ks = ks_test(v, lambda t: 1 - np.exp(-ll.kappa * np.maximum(t, 0)), w, p["ess_floor"])
        reports.append(report("ExpOvershoot", ks.distance, p["alpha"], ks.passes(p["alpha"]),
                              ks.n_eff, {"p_value": ks.p_value}, prov))
        v, w = ws.sample("gen_std")
        sd = math.sqrt(ll.gaussian_variance)
        ks = ks_test(v, lambda t: sps.norm.cdf(t, scale=sd), w, p["ess_floor"])
        reports.append(report("GaussianGeneration", ks.distance, p["alpha"],
                              ks.passes(p["alpha"]), ks.n_eff, {"p_value": ks.p_value}, prov))
        target = ll.psi1_kappa - ll.psi1
        med = ws.quantile("ratio_DW", 0.5)
        rel = abs(med / target - 1)
        reports.append(report("RatioDW", rel, 0.15, rel <= 0.15, ws.ess,
                              {"median": med, "target": target}, prov))
    else:
        names = ["W_over_x", "D_over_xlnx", "M"]
        probs = {}
        ok = True
        for t in (1.5, 2.0, 3.0):
            pr, se = ws.prob("W_over_x", lambda v, t=t: v > t)
            probs[repr(t)] = {"p": pr, "se": se, "target": t ** -ll.kappa}
            ok &= abs(pr - t ** -ll.kappa) <= 3 * se
        stat = max(abs(d["p"] - d["target"]) / d["se"] for d in probs.values())
        reports.append(report("ParetoWRatio", stat, 3.0, ok, ws.ess, {"survival": probs}, prov))
        r = ws.values["D_over_xlnx"] / ws.values["W_over_x"]
        ws.values["ratio_D_W_scaled"] = r
        med = ws.quantile("ratio_D_W_scaled", 0.5)
        target = (ll.psi1_kappa - ll.psi1) / ll.psi1_kappa
        rel = abs(med / target - 1)
        reports.append(report("RatioDW", rel, 0.2, rel <= 0.2, ws.ess,
                              {"median": med, "target": target}, prov))
    ws.to_csv(art.path(f"conditional_{p['condition']}.csv"), names)
    p_hat, p_se = ws.p_hat
    art.json(f"conditional_{p['condition']}.json", {"condition": p["condition"], "x": x, "ess": ws.ess,
                                  "p_hat": p_hat, "p_se": p_se,
                                  "reports": [r.to_json() for r in reports]})
    ok = all(r.verdict == "pass" for r in reports)
    return ok, "conditional: " + ", ".join(f"{r.law}={r.verdict}({r.statistic:.4g})"
                                           for r in reports) + f", ESS={ws.ess:.0f}"


def cmd_renewal(cfg, args, art: Artifacts) -> tuple[bool, str]:
    from . import rng as rngmod
    from .rwalk import (envelope_check, extract_ladders, ladder_exp_sum, renewal_limits,
                        walk_law, window_ratio)

    p = section(cfg, "renewal", args.replicas)
    model = _model(cfg)
    ll = find_kappa(model)
    law = walk_law(model, ll.kappa)
    R = p["replicas"]
    st = lambda tag: rngmod.stream(args.seed, "renewal", tag)
    asc = extract_ladders(law, "strict_ascending", p["horizon"], R, st("ascending"))
    x_bw = float(p["x_blackwell"])
    desc = extract_ladders(law, "strict_descending", p["horizon"], R, st("descending"),
                           x_max=max(x_bw, max(p["x_grid"])))
    asc.grid_to_csv(art.path("renewal_ascending.csv"))
    desc.grid_to_csv(art.path("renewal_descending.csv"))
    pl = renewal_limits(asc, p["x_grid"], p["h"], x_bw).plateau
    bw = renewal_limits(desc, p["x_grid"], p["h"], x_bw).blackwell
    es = [ladder_exp_sum(law, float(x), R, st(f"expsum:{x!r}")) for x in p["exp_sum_x"]]
    wr = window_ratio(law, float(p["window_x"]), R, st("window"))
    env = envelope_check(law, float(p["envelope_x"]), p["a_grid"], R, st("envelope"))
    checks = {
        "plateau": abs(pl["diff"]) <= 3 * pl["combined_se"],
        "blackwell": abs(bw["ratio"] - bw["target_ratio"]) <= 3 * bw["ratio_se"],
        "exp_sum": abs(es[-1][0] - es[0][0]) <= 3 * math.hypot(es[-1][1], es[0][1]),
        "window_ratio": abs(wr.ratio - 0.5) <= 3 * wr.ratio_se,
        "envelope": env.holds,
    }
    art.json("renewal.json", {
        "plateau": pl, "blackwell": bw, "no_ascending_ladder_fraction": asc.no_ladder_fraction(),
        "exp_sum": [{"x": float(x), "value": v, "se": s} for x, (v, s) in zip(p["exp_sum_x"], es)],
        "window_ratio": {"x": wr.x, "ratio": wr.ratio, "se": wr.ratio_se,
                         "generations": list(wr.generations)},
        "envelope": {"x": env.x, "a": list(env.a), "counts": list(env.counts),
                     "se": list(env.se), "c_hat": env.c_hat, "holds": env.holds},
        "checks": checks, "replicas": R, "seed": args.seed,
        "verdict": "pass" if all(checks.values()) else "fail"})
    return all(checks.values()), "renewal: " + ", ".join(
        f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items())


def _verdicts(reports, laws):
    got = [r for r in reports if r["law"] in laws]
    if not got:
        return None, None
    return all(r["verdict"] == "pass" for r in got), {r["law"]: r["statistic"] for r in got}


def _crit_validate(docs):
    d = docs["validate.json"]
    return all(e["verdict"] != "fail" for e in d["conditions"]), d.get("log_laplace")


def _crit_simulate(docs):
    d = docs["simulate.json"]
    return d["verdict"] == "pass", d["martingale_means"]


def _crit_min_tail(docs):
    d = docs["min_tail.json"]
    return d["verdict"] == "pass", {"fit": d.get("fit"), "envelope_ok": d["envelope_ok"]}


def _crit_w_tail(docs):
    d = docs["w_tail.json"]
    return d["verdict"] == "pass", d["fit"]


def _crit_cond(laws):
    def f(docs):
        return _verdicts(docs["conditional_min_below.json"]["reports"], laws)
    return f


def _crit_pareto(docs):
    reps = []
    if "w_tail.json" in docs:
        reps += docs["w_tail.json"].get("pareto_conditioning", [])
    if "conditional_w_limit_above.json" in docs:
        reps += docs["conditional_w_limit_above.json"]["reports"]
    return _verdicts(reps, ("ParetoWRatio", "RatioDW"))


def _crit_d_tail(docs):
    d = docs["d_tail.json"]
    return d["verdict"] == "pass", {"ratio": d["details"]["ratio"],
                                    "flat": d["details"]["plateau"]["flat"]}


def _crit_renewal(docs):
    d = docs["renewal.json"]
    return d["verdict"] == "pass", d["checks"]


# criterion -> (title, artifacts that can feed it, evaluator)
CRITERIA = {
    1: ("kappa solver", ("validate.json",), _crit_validate),
    2: ("martingale means", ("simulate.json",), _crit_simulate),
    3: ("many-to-one identity", (), None),
    4: ("spine marginal", (), None),
    5: ("change-of-measure unbiasedness", (), None),
    6: ("minimum tail exponent", ("min_tail.json",), _crit_min_tail),
    7: ("W tail exponent", ("w_tail.json",), _crit_w_tail),
    8: ("conditional overshoot", ("conditional_min_below.json",), _crit_cond(("ExpOvershoot",))),
    9: ("conditional generation", ("conditional_min_below.json",),
        _crit_cond(("GaussianGeneration",))),
    10: ("ratio law", ("conditional_min_below.json",), _crit_cond(("RatioDW",))),
    11: ("Pareto conditioning", ("w_tail.json", "conditional_w_limit_above.json"), _crit_pareto),
    12: ("D tail structure", ("d_tail.json",), _crit_d_tail),
    13: ("renewal suite", ("renewal.json",), _crit_renewal),
    14: ("L^p boundedness", (), None),
    15: ("reproducibility", (), None),
}


def cmd_report(cfg, args, art: Artifacts) -> tuple[bool, str]:
    out = Path(args.out)
    names = {f for _, files, _ in CRITERIA.values() for f in files}
    docs = {f: json.loads((out / f).read_text()) for f in sorted(names) if (out / f).exists()}
    if not docs:
        raise MissingArtifact(f"no command artifacts in {out}")
    rows = []
    for num, (title, files, fn) in CRITERIA.items():
        row = {"criterion": num, "name": title, "status": "not run", "detail": None,
               "sources": [f for f in files if f in docs]}
        if fn is not None and row["sources"]:
            try:
                ok, detail = fn(docs)
            except KeyError:
                ok, detail = None, None
            if ok is not None:
                row["status"] = "pass" if ok else "fail"
                row["detail"] = detail
        rows.append(row)
    art.json("report.json", {"rows": rows})
    with open(art.path("report.txt"), "w", newline="") as fh:
        for r in rows:
            fh.write(f"{r['criterion']:>2}  {r['status']:<7}  {r['name']}\n")
    for r in rows:
        print(f"  {r['criterion']:>2}  {r['status']:<7}  {r['name']}")
    count = lambda st: sum(r["status"] == st for r in rows)
    return True, f"report: {count('pass')} pass, {count('fail')} fail, {count('not run')} not run"


COMMANDS = {
    "validate": cmd_validate, "simulate": cmd_simulate, "min-tail": cmd_min_tail,
    "w-tail": cmd_w_tail, "d-tail": cmd_d_tail, "conditional": cmd_conditional,
    "renewal": cmd_renewal, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="brwlab", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"brwlab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, default=None, help="master seed (u64)")
        sp.add_argument("--workers", type=int, default=None,
                        help="worker processes (default: $BRWLAB_WORKERS or 1)")
        sp.add_argument("--out", default="brwlab-out", help="output directory")
        sp.add_argument("--replicas", type=int, default=None, help="override replica count")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        cfg = load_config(args.config)
        if args.seed is None:
            args.seed = int(cfg.get("seed", 0))
        if not 0 <= args.seed < 2 ** 64:
            raise UsageError("seed must be an unsigned 64-bit integer")
        if args.workers is None:
            args.workers = cfg.get("workers")
        args.workers = resolve_workers(args.workers)
        art = Artifacts(Path(args.out), args.command, cfg, args.seed, args.workers)
        ok, msg = COMMANDS[args.command](cfg, args, art)
        art.close()
    except (UsageError, EmptyExperiment) as e:
        print(f"brwlab {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifact as e:
        print(f"brwlab {args.command}: MissingArtifact: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ModelError as e:
        print(f"brwlab {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_VERDICT
    except BrwlabError as e:
        print(f"brwlab {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(("PASS " if ok else "FAIL ") + msg)
    return EXIT_OK if ok else EXIT_VERDICT


if __name__ == "__main__":
    sys.exit(main())
