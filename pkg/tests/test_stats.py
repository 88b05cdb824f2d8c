import csv
import math

import numpy as np
import pytest
from scipy import stats as sps

from brwlab import rng as rngmod
from brwlab.errors import IllConditioned, InsufficientESS
from brwlab.model import BUILTIN
from brwlab.stats import (compensated_tail, d_tail_report, fit_tail, gamma_curve,
                          heavy_tail_fit, hill, ks_test, pareto_conditioning, plateau,
                          rank_size, report, survival_points, write_rows)


def pareto(alpha, size, seed):
    return rngmod.stream(seed, "pareto").pareto(alpha, size) + 1.0


def test_fit_tail_recovers_exponential_slope():
    xs = np.arange(3.0, 9.0)
    pts = [(x, 0.4 * math.exp(-2 * x), 0.01 * 0.4 * math.exp(-2 * x)) for x in xs]
    f = fit_tail(pts, "exp_in_x")
    assert f.exponent == pytest.approx(-2.0, abs=1e-10)
    assert math.exp(f.prefactor) == pytest.approx(0.4, rel=1e-9)
    assert f.r2 == pytest.approx(1.0)


def test_fit_tail_power_with_log():
    xs = np.array([10.0, 20, 50, 100])
    pts = [(x, 0.7 * math.log(x) ** 2 / x ** 2, 1e-9) for x in xs]
    f = fit_tail(pts, "power_with_log", kappa_known=2.0)
    assert f.exponent == pytest.approx(0.0, abs=1e-8)
    p = fit_tail([(x, 3 * x ** -1.5, 1e-3) for x in xs], "power_in_x")
    assert p.exponent == pytest.approx(-1.5, abs=1e-9)


def test_fit_tail_errors():
    with pytest.raises(IllConditioned):
        fit_tail([(1.0, 0.1, 0.01)] * 4)
    with pytest.raises(ValueError):
        fit_tail([(1.0, 0.1, 0.01)] * 3)
    with pytest.raises(ValueError):
        fit_tail([(1, 0.1, 0.1), (2, 0.0, 0.1), (3, 0.1, 0.1), (4, 0.1, 0.1)])


def test_ks_unweighted_matches_scipy():
    v = rngmod.stream(1, "ks").normal(size=800)
    r = ks_test(v, sps.norm.cdf)
    ref = sps.kstest(v, sps.norm.cdf, method="exact")
    assert r.distance == pytest.approx(ref.statistic, abs=1e-12)
    assert r.p_value == pytest.approx(ref.pvalue, rel=1e-6)
    assert r.passes(0.01)


def test_ks_weighted():
    rng = rngmod.stream(2, "ksw")
    # sample from N(0,1), reweight to N(1,1): weights exp(v - 1/2)
    v = rng.normal(size=20_000)
    w = np.exp(v - 0.5)
    good = ks_test(v, sps.norm(1.0).cdf, w)
    bad = ks_test(v, sps.norm(0.0).cdf, w)
    assert good.passes(0.01) and not bad.passes(0.01)
    assert good.n_eff < v.size
    # integer weights act like repetitions
    r1 = ks_test(np.r_[0.1, 0.5, 0.5], sps.uniform.cdf, ess_floor=0)
    r2 = ks_test(np.r_[0.1, 0.5], sps.uniform.cdf, np.r_[1.0, 2.0], ess_floor=0)
    assert r1.distance == pytest.approx(r2.distance)
    with pytest.raises(InsufficientESS):
        ks_test(v[:10], sps.norm.cdf, w[:10], ess_floor=500)


@pytest.mark.parametrize("alpha", [1.5, 2.0, 3.0])
def test_tail_index_estimators(alpha):
    x = pareto(alpha, 200_000, int(alpha * 10))
    k = 2000
    ha, hs = hill(x, k)
    ra, rs = rank_size(x, k)
    assert abs(ha - alpha) <= 4 * hs
    assert abs(ra - alpha) <= 4 * rs
    fit = heavy_tail_fit(x, 0.01)
    assert fit.agree and fit.k == k


def test_survival_and_compensated_tail():
    x = pareto(2.0, 100_000, 7)
    rows = survival_points(x, [2.0, 4.0])
    for t, p, se in rows:
        assert abs(p - t ** -2) <= 4 * se
    comp = compensated_tail(x, [2.0, 4.0, 8.0], 2.0)
    pl = plateau(comp)
    assert pl["flat"] and pl["level"] == pytest.approx(1.0, rel=0.1)
    trend = plateau([(1, 1.0, 0.01), (2, 2.0, 0.01)])
    assert not trend["flat"]


def test_report_rejects_unknown_law():
    with pytest.raises(ValueError):
        report("Nope", 0, 1, True, 1)
    r = report("RatioDW", 0.1, 0.15, True, 1000.0)
    assert r.verdict == "pass" and r.to_json()["law"] == "RatioDW"


def test_pareto_conditioning_on_synthetic_pareto():
    W = pareto(2.0, 400_000, 9)
    # D = 2 W ln W has ratio (D/(x ln x)) / (W/x) = 2 ln W / ln x -> 2 near x
    D = 2.0 * W * np.log(W)
    surv, ratio = pareto_conditioning(W, D, 2.0, 2.0)
    assert surv.verdict == "pass"
    assert ratio.details["median"] >= 2.0
    assert ratio.provenance["n_conditional"] == pytest.approx(400, abs=2)


def test_d_tail_report_synthetic():
    W = pareto(2.0, 400_000, 11)
    # P(D >= x ln x) ~ 4 / x^2 when D = 2 W ln W
    D = 2.0 * W * np.log(W)
    r = d_tail_report(D, W, [10.0, 20.0, 40.0, 80.0], 2.0, 4.0, tol=0.3)
    assert r.details["C0"] == pytest.approx(1.0, rel=0.1)
    assert r.details["ratio"] > 2.0


def test_gamma_curve_is_monotone():
    g = gamma_curve(BUILTIN, [0.0, 0.5, 1.0, 2.0], 20.0, 2000, seed=3, K=5.0)
    assert g.monotone
    assert g.gamma[0] == pytest.approx(g.c_M, rel=1e-12)


def test_write_rows(tmp_path):
    p = tmp_path / "r.csv"
    write_rows(p, ["x", "y"], [(1.0, 0.1), (2, np.float64(1 / 3))])
    raw = open(p, "rb").read()
    assert b"\r" not in raw
    rows = list(csv.reader(open(p)))
    assert rows == [["x", "y"], ["1.0", "0.1"], ["2", repr(1 / 3)]]
