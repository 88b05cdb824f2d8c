import math

import numpy as np
import pytest

from brwlab import rng as rngmod
from brwlab.errors import HorizonTooShort
from brwlab.model import BUILTIN, LN2, Gaussian, TwoPoint, find_kappa
from brwlab.rwalk import (WalkLaw, WindowSpec, envelope_check, extract_ladders,
                          gaussian_window_sum, ladder_exp_sum, ladder_exp_sum_direct,
                          renewal_limits, sample_walks, strip_visits, tilt_identity_check,
                          walk_law, window_ratio)

LL = find_kappa(BUILTIN)


def test_walk_laws_of_builtin():
    s1, sk = walk_law(BUILTIN, 1.0), walk_law(BUILTIN, LL.kappa)
    # mean -psi'(theta), variance psi''(theta)
    assert s1.mean == pytest.approx(0.5 * LN2)
    assert sk.mean == pytest.approx(-0.5 * LN2)
    assert s1.variance == pytest.approx(LN2) and sk.variance == pytest.approx(LN2)
    # Gaussian steps: rho = 2 |mean| / variance = 1
    assert s1.lundberg() == pytest.approx(1.0, rel=1e-9)
    assert sk.lundberg() == pytest.approx(1.0, rel=1e-9)


def test_lundberg_two_point():
    law = WalkLaw(1.0, TwoPoint(1.0, -1.0, 0.3))
    rho = law.lundberg()
    # drift down: E exp(rho X) = 1  <=>  rho = ln(q / p) for a +-1 walk
    assert rho == pytest.approx(math.log(0.7 / 0.3), rel=1e-9)


def test_sample_walks_moments():
    law = walk_law(BUILTIN, 1.0)
    p = sample_walks(law, 20, 40_000, rngmod.stream(0, "walks"), start=1.0)
    assert p.shape == (40_000, 21) and np.all(p[:, 0] == 1.0)
    end = p[:, -1]
    assert end.mean() == pytest.approx(1.0 + 20 * law.mean, abs=4 * math.sqrt(20 * LN2 / 4e4))
    assert end.var() == pytest.approx(20 * LN2, rel=0.03)


@pytest.mark.parametrize("n", [3, 6])
def test_tilt_identity(n):
    g = lambda s: ((s[:, -1] > -1.0) & (s[:, -1] <= 1.0)).astype(float)
    tc = tilt_identity_check(BUILTIN, g, n, 50_000, rngmod.stream(1, "tilt", n))
    assert abs(tc.z) <= 3.5


def brute_occupation(law, kind_up, x, replicas, rng, horizon=600):
    """Independent oracle: E #{k < exit: Y_k <= x} from whole paths."""
    sgn = 1.0 if kind_up else -1.0
    y = sgn * sample_walks(law, horizon, replicas, rng)
    alive = np.cumprod(np.concatenate([np.ones((replicas, 1), bool), y[:, 1:] > 0], axis=1),
                       axis=1).astype(bool)
    c = np.sum(alive & (y <= x), axis=1).astype(float)
    return c.mean(), c.std(ddof=1) / math.sqrt(replicas)


@pytest.mark.parametrize("kind,theta", [("strict_ascending", 1.0),
                                         ("strict_descending", 2.0)])
def test_renewal_function_matches_brute_force(kind, theta):
    law = walk_law(BUILTIN, theta)
    up = kind.endswith("ascending")
    t = extract_ladders(law, kind, 4000, 20_000, rngmod.stream(2, kind), x_max=6.0)
    for x in (1.0, 4.0):
        m, s = t.renewal(x)
        bm, bs = brute_occupation(law, up, x, 20_000, rngmod.stream(3, kind, x))
        assert abs(m - bm) <= 4 * math.hypot(s, bs)


def test_ladder_structure():
    law = walk_law(BUILTIN, 1.0)
    t = extract_ladders(law, "strict_ascending", 500, 500, rngmod.stream(4, "lad"))
    for r in range(20):
        m = t.ladder_rep == r
        assert np.all(np.diff(t.epochs[m]) > 0)
        assert np.all(np.diff(t.heights[m]) > 0)
    d = extract_ladders(law, "strict_descending", 4000, 2000, rngmod.stream(4, "desc"))
    # walk drifts up, so descending ladders stop and get certified
    assert d.terminated.mean() > 0.999
    assert np.all(d.heights < 0)
    assert 0.0 < d.no_ladder_fraction() < 1.0


def test_skip_free_walk_ladders():
    # +-1 walk drifting up: strict ascending ladder heights are 1, 2, 3, ...
    law = WalkLaw(1.0, TwoPoint(1.0, -1.0, 0.7))
    t = extract_ladders(law, "strict_ascending", 300, 200, rngmod.stream(5, "pm"), x_max=10)
    for r in range(200):
        h = t.heights[t.ladder_rep == r]
        assert np.array_equal(h, np.arange(1, h.size + 1, dtype=float))


def test_horizon_too_short():
    law = walk_law(BUILTIN, 1.0)
    with pytest.raises(HorizonTooShort):
        extract_ladders(law, "strict_ascending", 3, 500, rngmod.stream(6, "short"))


def test_renewal_limits_report():
    law = walk_law(BUILTIN, LL.kappa)
    asc = extract_ladders(law, "strict_ascending", 2000, 20_000, rngmod.stream(7, "a"))
    rep = renewal_limits(asc, (8.0, 16.0), (1.0, 2.0), 12.0)
    assert abs(rep.plateau["diff"]) <= 3 * rep.plateau["combined_se"]
    assert rep.to_json()["blackwell"]["target_ratio"] == 2.0


def test_ladder_exp_sum_matches_direct_paths():
    law = walk_law(BUILTIN, LL.kappa)
    a = ladder_exp_sum(law, 3.0, 40_000, rngmod.stream(8, "ladder"))
    b = ladder_exp_sum_direct(law, 3.0, 150, 40_000, rngmod.stream(8, "direct"))
    assert abs(a[0] - b[0]) <= 4 * math.hypot(a[1], b[1])


def test_window_spec():
    w = WindowSpec(16.0, 0.5 * LN2)
    lo, hi = w.bounds
    assert w.center == pytest.approx(32 / LN2)
    assert hi - lo == pytest.approx(2 * 2 * 4)
    assert np.all(w.contains(w.generations))
    assert w.standardize(w.center) == pytest.approx(0.0)


def test_window_ratio_and_sum():
    law = walk_law(BUILTIN, LL.kappa)
    wr = window_ratio(law, 10.0, 20_000, rngmod.stream(9, "wr"))
    assert abs(wr.ratio - 0.5) <= 4 * wr.ratio_se
    full, se = gaussian_window_sum(law, 10.0, np.ones_like, 20_000, rngmod.stream(9, "wr"))
    assert full == pytest.approx(wr.denominator, rel=1e-12)


def test_envelope_and_strip_visits():
    law = walk_law(BUILTIN, LL.kappa)
    env = envelope_check(law, 10.0, [0, 2, 5, 10], 4000, rngmod.stream(10, "env"))
    assert env.holds
    assert len(env.margins) == 4
    with pytest.raises(ValueError):
        strip_visits(walk_law(BUILTIN, 1.0), 5.0, 0.0, 10, rngmod.stream(0))
