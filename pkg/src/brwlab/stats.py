"""Tail fits, goodness-of-fit tests and limit-law suites.

All verdicts are computed from a statistic and a configured threshold; the
reports carry their inputs (seeds, replica counts, ESS) so any verdict can
be re-derived.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats as sps

from .errors import IllConditioned, InsufficientESS

FIT_KINDS = ("exp_in_x", "power_in_x", "power_with_log")


@dataclass(frozen=True)
class TailFit:
    kind: str
    exponent: float
    prefactor: float         # intercept on the log scale
    exponent_se: float
    prefactor_se: float
    window: tuple
    r2: float
    chi2: float
    n_points: int
    kappa_known: float | None = None

    def to_json(self) -> dict:
        return asdict(self)


def fit_tail(points: Sequence[tuple[float, float, float]], kind: str = "exp_in_x",
             kappa_known: float | None = None) -> TailFit:
    """Weighted least squares of ``ln p`` on ``x`` or ``ln x``.

    ``points`` are ``(x, p_hat, se)``; each log-estimate gets weight
    ``(p / se)^2``. ``power_with_log`` regresses
    ``ln p + kappa (ln x - ln ln x)`` on ``ln x``; its intercept is
    ``ln c`` in ``p ~ c (ln x)^kappa / x^kappa`` and its slope should vanish.
    """
    if kind not in FIT_KINDS:
        raise ValueError(f"kind must be one of {FIT_KINDS}")
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 4:
        raise ValueError("need at least 4 points")
    x, p, se = pts[:, 0], pts[:, 1], pts[:, 2]
    if np.any(p <= 0) or not np.all(np.isfinite(se)):
        raise ValueError("estimates must be positive with finite SE")
    y = np.log(p)
    if kind == "exp_in_x":
        t = x
    else:
        if np.any(x <= (1.0 if kind == "power_with_log" else 0.0)):
            raise ValueError("power fits need x > 0 (x > 1 with the log factor)")
        t = np.log(x)
        if kind == "power_with_log":
            if kappa_known is None:
                raise ValueError("power_with_log needs kappa_known")
            y = y + kappa_known * (np.log(x) - np.log(np.log(x)))
    sig = np.where(se > 0, se / p, 0.0)
    w = np.where(sig > 0, 1.0 / np.where(sig > 0, sig, 1.0) ** 2, 1.0)
    if np.all(sig == 0):
        w = np.ones_like(y)
    X = np.column_stack([np.ones_like(t), t])
    XtW = X.T * w
    A = XtW @ X
    if np.linalg.cond(A) > 1e12 or np.ptp(t) == 0:
        raise IllConditioned("design matrix is degenerate")
    cov = np.linalg.inv(A)
    beta = cov @ (XtW @ y)
    resid = y - X @ beta
    chi2 = float(np.sum(w * resid ** 2))
    ybar = np.sum(w * y) / np.sum(w)
    ss_tot = float(np.sum(w * (y - ybar) ** 2))
    r2 = 1.0 - chi2 / ss_tot if ss_tot > 0 else 1.0
    if np.all(sig == 0):
        cov = cov * 0.0
    return TailFit(kind, float(beta[1]), float(beta[0]), float(math.sqrt(max(cov[1, 1], 0))),
                   float(math.sqrt(max(cov[0, 0], 0))), (float(x.min()), float(x.max())),
                   float(r2), chi2, int(x.size), kappa_known)


# ---------------------------------------------------------------------------
# Kolmogorov-Smirnov with weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KSResult:
    distance: float
    p_value: float
    n_eff: float

    def passes(self, alpha: float = 0.01) -> bool:
        return self.p_value > alpha


def ks_test(values, cdf: Callable[[np.ndarray], np.ndarray], weights=None,
            ess_floor: float = 500.0) -> KSResult:
    """Weighted empirical CDF against ``cdf``.

    With weights the p-value treats the effective sample size as the sample
    size, which is conservative for self-normalized samples.
    """
    v = np.asarray(values, dtype=float)
    if weights is None:
        w = np.full(v.size, 1.0)
        n_eff = float(v.size)
    else:
        w = np.asarray(weights, dtype=float)
        n_eff = float(w.sum() ** 2 / np.sum(w * w)) if np.any(w > 0) else 0.0
        if n_eff < ess_floor:
            raise InsufficientESS(f"ESS {n_eff:.1f} < {ess_floor}")
    if v.size == 0:
        raise InsufficientESS("empty sample")
    order = np.argsort(v, kind="stable")
    v, w = v[order], w[order] / w.sum()
    # collapse ties so the statistic does not depend on sample order
    uniq, idx = np.unique(v, return_index=True)
    cw = np.cumsum(w)
    hi = cw[np.r_[idx[1:] - 1, v.size - 1]]
    lo = np.r_[0.0, hi[:-1]]
    F = np.asarray(cdf(uniq), dtype=float)
    d = float(max(np.max(np.abs(hi - F)), np.max(np.abs(F - lo))))
    n = max(int(math.floor(n_eff)), 1)
    return KSResult(d, float(sps.kstwo.sf(d, n)), n_eff)


# ---------------------------------------------------------------------------
# heavy tails from raw samples
# ---------------------------------------------------------------------------


def hill(values, k: int) -> tuple[float, float]:
    """Hill estimate of the tail index from the top ``k`` order statistics."""
    x = np.sort(np.asarray(values, dtype=float))[::-1]
    if not 1 <= k < x.size or x[k] <= 0:
        raise ValueError("need 1 <= k < n and positive order statistics")
    a = 1.0 / (np.mean(np.log(x[:k])) - math.log(x[k]))
    return float(a), float(a / math.sqrt(k))


def rank_size(values, k: int) -> tuple[float, float]:
    """Tail index from the regression of ``ln(rank - 1/2)`` on ``ln x`` over
    the top ``k`` values; SE ``alpha sqrt(2/k)``."""
    x = np.sort(np.asarray(values, dtype=float))[::-1][:k]
    if k < 3 or np.any(x <= 0):
        raise ValueError("need k >= 3 positive values")
    r = np.arange(1, k + 1) - 0.5
    slope = np.polyfit(np.log(x), np.log(r), 1)[0]
    a = -float(slope)
    return a, float(a * math.sqrt(2.0 / k))


@dataclass(frozen=True)
class HeavyTailFit:
    k: int
    threshold: float
    rank_alpha: float
    rank_se: float
    hill_alpha: float
    hill_se: float
    z_crit: float = 1.96

    @property
    def agree(self) -> bool:
        return abs(self.rank_alpha - self.hill_alpha) <= self.z_crit * math.hypot(
            self.rank_se, self.hill_se)

    def to_json(self) -> dict:
        d = asdict(self)
        d["agree"] = self.agree
        return d


def heavy_tail_fit(values, top_fraction: float = 0.01) -> HeavyTailFit:
    x = np.asarray(values, dtype=float)
    k = max(3, int(round(top_fraction * x.size)))
    ra, rs = rank_size(x, k)
    ha, hs = hill(x, k)
    thr = float(np.sort(x)[::-1][k])
    return HeavyTailFit(k, thr, ra, rs, ha, hs)


def survival_points(values, xs, scale: Callable[[np.ndarray], np.ndarray] | None = None):
    """Empirical ``P(X >= x)`` with binomial SE, as ``(x, p, se)`` rows."""
    v = np.asarray(values, dtype=float)
    out = []
    for x in xs:
        thr = x if scale is None else scale(x)
        p = float(np.mean(v >= thr))
        out.append((float(x), p, math.sqrt(p * (1 - p) / v.size)))
    return out


# ---------------------------------------------------------------------------
# limit-law reports
# ---------------------------------------------------------------------------

LAWS = ("ExpOvershoot", "GaussianGeneration", "ParetoWRatio", "RatioDW", "GammaCurve", "DTailLog")


@dataclass
class LimitLawReport:
    law: str
    statistic: float
    threshold: float
    verdict: str
    ess_used: float
    details: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def report(law: str, statistic: float, threshold: float, passed: bool, ess_used: float,
           details: dict | None = None, provenance: dict | None = None) -> LimitLawReport:
    if law not in LAWS:
        raise ValueError(f"unknown law {law}")
    return LimitLawReport(law, float(statistic), float(threshold),
                          "pass" if passed else "fail", float(ess_used),
                          details or {}, provenance or {})


def compensated_tail(values, x_grid, kappa: float, log_factor: bool = False):
    """``x^kappa P(X >= x)`` (or ``P(X >= x ln x)`` with ``log_factor``) with SE."""
    v = np.asarray(values, dtype=float)
    rows = []
    for x in x_grid:
        thr = x * math.log(x) if log_factor else x
        p = float(np.mean(v >= thr))
        se = math.sqrt(p * (1 - p) / v.size)
        rows.append((float(x), p * x ** kappa, se * x ** kappa))
    return rows


def plateau(rows) -> dict:
    """Log-change of a compensated tail between the first and last grid points.

    ``level`` is the inverse-variance weighted mean over the grid.
    """
    xs = [r[0] for r in rows]
    g = np.array([r[1] for r in rows])
    s = np.array([r[2] for r in rows])
    if np.any(g <= 0):
        return {"x": xs, "value": g.tolist(), "se": s.tolist(), "level": math.nan,
                "level_se": math.nan, "log_change": math.nan, "log_change_se": math.nan,
                "flat": False}
    rel = s / g
    w = 1.0 / rel ** 2
    lvl = float(math.exp(np.sum(w * np.log(g)) / np.sum(w)))
    lvl_se = float(lvl / math.sqrt(np.sum(w)))
    ch = float(math.log(g[-1] / g[0]))
    ch_se = float(math.hypot(rel[-1], rel[0]))
    return {"x": xs, "value": g.tolist(), "se": s.tolist(), "level": lvl, "level_se": lvl_se,
            "log_change": ch, "log_change_se": ch_se, "flat": abs(ch) <= 3 * ch_se}


def c0_estimate(W, x_grid, kappa: float) -> tuple[float, float]:
    """``C_0`` as the plateau level of ``x^kappa P(W >= x)``."""
    p = plateau(compensated_tail(W, x_grid, kappa))
    return p["level"], p["level_se"]


@dataclass(frozen=True)
class GammaCurve:
    x: float
    a: tuple
    gamma: tuple
    se: tuple
    c_M: float
    c_M_se: float
    ess: float

    @property
    def monotone(self) -> bool:
        g, s = self.gamma, self.se
        return all(g[i] >= g[j] - 2 * s[j] for i in range(len(g)) for j in range(i + 1, len(g)))

    def to_json(self) -> dict:
        d = asdict(self)
        d["monotone"] = self.monotone
        return d


def gamma_curve(model, a_grid, x: float, replicas: int, seed: int = 0, K: float | None = None,
                workers: int | None = 1, ll=None) -> GammaCurve:
    """``x^kappa P(W_inf >= a x, e^{-M} >= x)`` on ``a_grid`` by conditional IS
    on ``{M <= -ln x}``; ``c_M`` is the same quantity without the ``W`` constraint."""
    from .model import find_kappa
    from .spine import MinBelow, conditional_sample

    ll = ll or find_kappa(model)
    ws = conditional_sample(model, MinBelow(math.log(x)), replicas, seed=seed, K=K,
                            ess_floor=0.0, workers=workers, ll=ll)
    w = np.where(ws.mask(), ws.weights, 0.0)
    W = ws.values["W_inf"]
    scale = x ** ll.kappa
    gam, se = [], []
    for a in a_grid:
        h = w * (W >= a * x)
        gam.append(float(h.mean() * scale))
        se.append(float(h.std(ddof=1) / math.sqrt(h.size) * scale))
    return GammaCurve(float(x), tuple(float(a) for a in a_grid), tuple(gam), tuple(se),
                      float(w.mean() * scale), float(w.std(ddof=1) / math.sqrt(w.size) * scale),
                      ws.ess)


def d_tail_report(D, W, x_grid, kappa: float, target_ratio: float, c0_grid=None,
                 tol: float = 0.3, provenance: dict | None = None) -> LimitLawReport:
    """Plateau of ``x^kappa P(D >= x ln x)`` over ``x_grid`` and its ratio to ``C_0``.

    ``D``/``W`` are samples of the martingale limits. ``C_0`` is read off the
    ``W`` sample on ``c0_grid`` (default ``x_grid``). The verdict requires
    both a flat compensated curve and ``|ratio / target - 1| <= tol``.
    """
    rows = compensated_tail(D, x_grid, kappa, log_factor=True)
    pl = plateau(rows)
    c0, c0_se = c0_estimate(W, x_grid if c0_grid is None else c0_grid, kappa)
    ratio = pl["level"] / c0
    ratio_se = ratio * math.hypot(pl["level_se"] / pl["level"], c0_se / c0)
    stat = abs(ratio / target_ratio - 1.0)
    return report("DTailLog", stat, tol, pl["flat"] and stat <= tol, float(len(D)),
                  {"plateau": pl, "C0": c0, "C0_se": c0_se, "ratio": ratio,
                   "ratio_se": ratio_se, "target_ratio": target_ratio},
                  provenance)


def limit_samples(model, replicas: int, seed: int = 0, K: float = 5.0, n_max: int = 2000,
                  workers: int | None = 1, ll=None):
    """Frozen ``(W_inf, D_inf)`` samples under ``P`` (barrier ``K`` above the
    running minimum, grown until no particle is left below the barrier)."""
    from .brw import Prune, simulate
    from .model import find_kappa

    ll = ll or find_kappa(model)
    return simulate(model, replicas, n_max, seed=seed, prune=Prune(K, budget_cap=math.inf),
                    workers=workers, tag="limits", ll=ll)


def d_tail_suite(model, x_grid, replicas: int, seed: int = 0, K: float = 5.0,
                 workers: int | None = 1, tol: float = 0.3, ll=None,
                 summary=None) -> LimitLawReport:
    """:func:`d_tail_report` on freshly simulated (or supplied) limit samples."""
    from .model import find_kappa

    ll = ll or find_kappa(model)
    s = summary or limit_samples(model, replicas, seed, K, workers=workers, ll=ll)
    target = ((ll.psi1_kappa - ll.psi1) / ll.psi1_kappa) ** ll.kappa
    return d_tail_report(s.D_inf, s.W_inf, x_grid, ll.kappa, target, tol=tol,
                         provenance={"seed": seed, "replicas": int(s.W_inf.size), "K": K,
                                     "certified": float(s.certified.mean()),
                                     "prune_budget": float(s.budget.mean())})


def pareto_conditioning(W, D, kappa: float, target_ratio: float, q: float = 0.999,
                        t_grid=(1.5, 2.0, 3.0), tol: float = 0.2,
                        provenance: dict | None = None) -> list[LimitLawReport]:
    """Law of ``(W/x, D/(x ln x))`` given ``W >= x`` at ``x`` = the ``q`` quantile of ``W``.

    Returns two reports: survival of ``W/x`` at ``t_grid`` against ``t^-kappa``
    (each within 3 binomial SE) and the conditional median of
    ``(D/(x ln x)) / (W/x)`` against ``target_ratio`` (relative ``tol``).
    """
    W = np.asarray(W, dtype=float)
    D = np.asarray(D, dtype=float)
    x = float(np.quantile(W, q))
    keep = W >= x
    w, d = W[keep] / x, D[keep] / (x * math.log(x))
    m = int(w.size)
    surv = {}
    worst = 0.0
    for t in t_grid:
        p = float(np.mean(w > t))
        se = math.sqrt(max(p * (1 - p), 1.0 / m) / m)
        z = (p - t ** -kappa) / se
        worst = max(worst, abs(z))
        surv[repr(float(t))] = {"p": p, "se": se, "target": t ** -kappa, "z": z}
    prov = dict(provenance or {}, x=x, quantile=q, n_conditional=m)
    med = float(np.median(d / w))
    rel = abs(med / target_ratio - 1.0)
    return [report("ParetoWRatio", worst, 3.0, worst <= 3.0, m, {"survival": surv}, prov),
            report("RatioDW", rel, tol, rel <= tol, m,
                   {"median": med, "target": target_ratio}, prov)]


def write_rows(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
