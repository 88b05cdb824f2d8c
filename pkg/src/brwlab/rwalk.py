"""Associated one-dimensional random walks.

``S^(theta)`` has i.i.d. steps whose law is the displacement law tilted by
``exp(-theta x)``, so that ``E[exp(-l S_1)] = exp(psi(l + theta) - psi(theta))``.
The module provides path samplers, the change-of-measure identity between
``S = S^(1)`` and ``S^(kappa)``, ladder tables, renewal functions and the
exponentially weighted sums over the strip ``I(x) = (-x-1, -x]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from .errors import HorizonTooShort
from .model import DisplacementLaw, LogLaplace, ModelSpec, find_kappa

KINDS = ("strict_ascending", "strict_descending", "weak_ascending", "weak_descending")


@dataclass(frozen=True)
class WalkLaw:
    """Step law of ``S^(theta)``."""

    theta: float
    step: DisplacementLaw

    @classmethod
    def from_model(cls, model: ModelSpec, theta: float) -> "WalkLaw":
        return cls(float(theta), model.displacement.tilted(theta))

    @property
    def mean(self) -> float:
        """``-psi'(theta)``."""
        return self.step.log_mgf_d1(0.0)

    @property
    def variance(self) -> float:
        """``psi''(theta)``."""
        return self.step.log_mgf_d2(0.0)

    def sample_steps(self, rng: np.random.Generator, size) -> np.ndarray:
        return self.step.sample(rng, size)

    def lundberg(self) -> float:
        """Rate ``rho > 0`` with ``E[exp(rho * sign * X)] = 1``, ``sign`` pointing
        against the drift. Overshoot past a level ``y`` against the drift has
        probability at most ``exp(-rho * y)``."""
        s = -1.0 if self.mean > 0 else 1.0
        f = lambda r: self.step.log_mgf(s * r)
        hi = 1.0
        while f(hi) <= 0:
            hi *= 2.0
            if hi > 1e6:
                raise ValueError("no Lundberg exponent (zero drift?)")
        lo = 2.0 * abs(self.mean) / max(self.variance, 1e-300) * 1e-6
        lo = min(lo, hi / 2)
        while f(lo) >= 0 and lo > 1e-12:
            lo /= 2.0
        return float(optimize.brentq(f, lo, hi, xtol=1e-14))


def walk_law(model: ModelSpec, theta: float) -> WalkLaw:
    return WalkLaw.from_model(model, theta)


def sample_walk(law: WalkLaw, n: int, rng: np.random.Generator, start: float = 0.0) -> np.ndarray:
    """One path ``(S_0, ..., S_n)`` with ``S_0 = start``."""
    if n < 0:
        raise ValueError("n must be >= 0")
    return start + np.concatenate([[0.0], np.cumsum(law.sample_steps(rng, n))])


def sample_walks(law: WalkLaw, n: int, size: int, rng: np.random.Generator,
                 start: float = 0.0) -> np.ndarray:
    """``size`` paths as a ``(size, n + 1)`` array."""
    steps = law.sample_steps(rng, (size, n))
    out = np.empty((size, n + 1))
    out[:, 0] = start
    np.cumsum(steps, axis=1, out=out[:, 1:])
    out[:, 1:] += start
    return out


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    v = np.asarray(v, dtype=float)
    if v.size < 2:
        return float(v.mean()) if v.size else math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


@dataclass(frozen=True)
class TiltCheck:
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float

    @property
    def z(self) -> float:
        se = math.hypot(self.lhs_se, self.rhs_se)
        if se == 0:
            return 0.0 if self.lhs == self.rhs else math.inf
        return (self.lhs - self.rhs) / se


def tilt_identity_check(model: ModelSpec, g: Callable[[np.ndarray], np.ndarray], n: int,
                        replicas: int, rng: np.random.Generator, start: float = 0.0,
                        ll: LogLaplace | None = None) -> TiltCheck:
    """Estimate both sides of ``E_a[g(S)] = E_a[exp(k'(S^k_n - a)) g(S^k)]``.

    ``g`` maps an array of paths ``(R, n)`` (steps 1..n) to ``R`` values.
    """
    ll = ll or find_kappa(model)
    p1 = sample_walks(walk_law(model, 1.0), n, replicas, rng, start)
    pk = sample_walks(walk_law(model, ll.kappa), n, replicas, rng, start)
    lhs = np.asarray(g(p1[:, 1:]), dtype=float)
    rhs = np.exp(ll.kappa_prime * (pk[:, -1] - start)) * np.asarray(g(pk[:, 1:]), dtype=float)
    a, sa = _mean_se(lhs)
    b, sb = _mean_se(rhs)
    return TiltCheck(a, sa, b, sb)


# ---------------------------------------------------------------------------
# ladders and renewal functions
# ---------------------------------------------------------------------------


@dataclass
class LadderTable:
    """Ladder epochs/heights per replica and the pre-exit occupation of the
    walk that defines the renewal function of the ladder kind.

    For ascending kinds the occupation is ``{S_k : k < tau^-}``, for
    descending kinds ``{-S_k : k < tau^+}``; the renewal function is
    ``R(x) = E #{occupation points <= x}``.
    """

    kind: str
    theta: float
    replicas: int
    ladder_rep: np.ndarray
    epochs: np.ndarray
    heights: np.ndarray
    terminated: np.ndarray      # per replica: no further ladder epochs (certified)
    occ_rep: np.ndarray
    occ_val: np.ndarray
    grid: np.ndarray
    kcert: float
    horizon: int
    _cum: dict = field(default_factory=dict, repr=False)

    @property
    def ascending(self) -> bool:
        return self.kind.endswith("ascending")

    def counts_upto(self, x: float) -> np.ndarray:
        """Per-replica ``#{occupation points <= x}``."""
        m = self.occ_val <= x
        return np.bincount(self.occ_rep[m], minlength=self.replicas).astype(float)

    def counts_in(self, lo: float, hi: float) -> np.ndarray:
        """Per-replica ``#{occupation points in (lo, hi]}``."""
        m = (self.occ_val > lo) & (self.occ_val <= hi)
        return np.bincount(self.occ_rep[m], minlength=self.replicas).astype(float)

    def renewal(self, x: float) -> tuple[float, float]:
        return _mean_se(self.counts_upto(x))

    @property
    def renewal_grid(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(x, R(x), SE)`` on :attr:`grid`."""
        if "grid" not in self._cum:
            R = np.empty(self.grid.size)
            S = np.empty(self.grid.size)
            order = np.argsort(self.occ_val, kind="stable")
            vals = self.occ_val[order]
            reps = self.occ_rep[order]
            cum = np.zeros(self.replicas)
            j = 0
            for i, x in enumerate(self.grid):
                k = np.searchsorted(vals, x, side="right")
                if k > j:
                    np.add.at(cum, reps[j:k], 1.0)
                    j = k
                R[i] = cum.mean()
                S[i] = cum.std(ddof=1) / math.sqrt(self.replicas) if self.replicas > 1 else 0.0
            self._cum["grid"] = (self.grid.copy(), R, S)
        return self._cum["grid"]

    def no_ladder_fraction(self) -> float:
        """Fraction of replicas with no ladder epoch at all."""
        has = np.zeros(self.replicas, dtype=bool)
        has[self.ladder_rep] = True
        return float(1.0 - has.mean())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "replica", "epoch", "height"])
            for r, e, h in zip(self.ladder_rep.tolist(), self.epochs.tolist(),
                               self.heights.tolist()):
                w.writerow([self.kind, r, e, repr(h)])

    def grid_to_csv(self, path) -> None:
        x, R, S = self.renewal_grid
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "R", "se"])
            for row in zip(x.tolist(), R.tolist(), S.tolist()):
                w.writerow([repr(v) for v in row])


def extract_ladders(law: WalkLaw, kind: str, horizon: int, replicas: int,
                    rng: np.random.Generator, x_max: float = 32.0, grid_step: float = 0.1,
                    miss: float = 1e-6, max_uncertified: float = 1e-3) -> LadderTable:
    """Simulate ``replicas`` paths and tabulate ladders and the renewal function.

    Paths run until both the ladder sequence and the occupation are certified
    complete: the exit time was reached, or the walk has drifted more than
    ``Kcert = ln(1/miss) / rho`` beyond every level that could still matter
    (``rho`` is the Lundberg exponent of the walk). Ladder sequences of a walk
    drifting in the ladder direction never terminate; they are cut at
    ``horizon`` without counting as uncertified.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    up = kind.endswith("ascending")
    strict = kind.startswith("strict")
    sgn = 1.0 if up else -1.0
    # work with Y = sgn * S so that ladders are always ascending in Y
    drift_y = sgn * law.mean
    rho = law.lundberg()
    kcert = math.log(1.0 / miss) / rho

    R = int(replicas)
    y = np.zeros(R)
    best = np.zeros(R)
    alive_occ = np.ones(R, dtype=bool)     # still before the exit time
    alive_lad = np.ones(R, dtype=bool)     # ladder sequence may continue
    lad_r, lad_e, lad_h = [], [], []
    occ_r, occ_v = [np.arange(R)], [np.zeros(R)]
    k = 0
    while k < horizon and (alive_occ.any() or alive_lad.any()):
        act = np.flatnonzero(alive_occ | alive_lad)
        k += 1
        y[act] += sgn * law.sample_steps(rng, act.size)
        ya = y[act]
        new = ya > best[act] if strict else ya >= best[act]
        new &= alive_lad[act]
        if new.any():
            idx = act[new]
            lad_r.append(idx)
            lad_e.append(np.full(idx.size, k, dtype=np.int64))
            lad_h.append(y[idx].copy())
            best[idx] = y[idx]
        # occupation before the opposite exit: k < tau^- means Y_k > 0 (strict)
        oc = alive_occ[act]
        stay = (ya > 0) if strict else (ya >= 0)
        exit_now = oc & ~stay
        alive_occ[act[exit_now]] = False
        rec = oc & stay
        if rec.any():
            occ_r.append(act[rec])
            occ_v.append(ya[rec].copy())
        # certification once the walk is far on the drift side
        if drift_y < 0:
            alive_lad[act[ya < best[act] - kcert]] = False
        else:
            far = ya > x_max + kcert
            alive_occ[act[far & alive_occ[act]]] = False
    if drift_y < 0:
        uncertified = alive_lad | alive_occ
    else:
        uncertified = alive_occ
    if uncertified.mean() > max_uncertified:
        raise HorizonTooShort(f"{uncertified.mean():.3%} of paths uncertified at horizon {horizon}")
    terminated = ~alive_lad if drift_y < 0 else np.zeros(R, dtype=bool)
    cat = lambda parts, dt: np.concatenate(parts) if parts else np.zeros(0, dtype=dt)
    heights = cat(lad_h, float)
    return LadderTable(
        kind=kind, theta=law.theta, replicas=R,
        ladder_rep=cat(lad_r, np.int64), epochs=cat(lad_e, np.int64),
        heights=sgn * heights, terminated=terminated,
        occ_rep=np.concatenate(occ_r), occ_val=np.concatenate(occ_v),
        grid=np.round(np.arange(0.0, x_max + 0.5 * grid_step, grid_step), 12),
        kcert=kcert, horizon=horizon,
    )


@dataclass(frozen=True)
class RenewalReport:
    plateau: dict
    blackwell: dict

    def to_json(self) -> dict:
        return {"plateau": self.plateau, "blackwell": self.blackwell}


def renewal_limits(table: LadderTable, x_grid: Sequence[float] = (8.0, 16.0),
                   h: Sequence[float] = (1.0, 2.0), x_blackwell: float = 12.0) -> RenewalReport:
    """Plateau of ``R`` across ``x_grid`` and Blackwell increments at ``x_blackwell``.

    The ratio of increments ``U((x-h2, x]) / U((x-h1, x])`` should approach
    ``h2 / h1``; its standard error uses the paired delta method.
    """
    vals = [table.renewal(x) for x in x_grid]
    lo, hi = vals[0], vals[-1]
    plateau = {
        "x": list(map(float, x_grid)), "R": [v[0] for v in vals], "se": [v[1] for v in vals],
        "diff": hi[0] - lo[0], "combined_se": math.hypot(hi[1], lo[1]),
    }
    inc = [table.counts_in(x_blackwell - hh, x_blackwell) for hh in h]
    means = [float(c.mean()) for c in inc]
    ses = [float(c.std(ddof=1) / math.sqrt(c.size)) for c in inc]
    a, b = inc[0], inc[-1]
    ma, mb = a.mean(), b.mean()
    ratio = mb / ma if ma > 0 else math.nan
    cov = np.cov(np.vstack([a, b]), ddof=1) / a.size
    var = (cov[1, 1] / ma ** 2 - 2 * mb * cov[0, 1] / ma ** 3 + mb ** 2 * cov[0, 0] / ma ** 4
           if ma > 0 else math.nan)
    blackwell = {
        "x": float(x_blackwell), "h": list(map(float, h)), "increment": means, "se": ses,
        "ratio": float(ratio), "ratio_se": float(math.sqrt(max(var, 0.0))),
        "target_ratio": float(h[-1] / h[0]),
    }
    return RenewalReport(plateau, blackwell)


# ---------------------------------------------------------------------------
# exponential sums over I(x)
# ---------------------------------------------------------------------------


def _kappa_of(law: WalkLaw, kappa: float | None) -> float:
    return law.theta if kappa is None else float(kappa)


def ladder_exp_sum(law: WalkLaw, x: float, replicas: int, rng: np.random.Generator,
                   kappa: float | None = None) -> tuple[float, float]:
    """``sum_n E[exp(k S_n + k x); max_{[1,n]} S < 0, S_n in I(x)]`` via ladder heights.

    Equals ``int_{[x, x+1)} exp(k (x - y)) U^-(dy)`` where ``U^-`` is the
    renewal measure of the strict descending ladder heights (``H_0 = 0``
    included). ``law`` must drift downwards.
    """
    k = _kappa_of(law, kappa)
    if law.mean >= 0:
        raise ValueError("ladder_exp_sum needs a walk with negative drift")
    R = int(replicas)
    acc = np.zeros(R)
    if 0.0 >= x and 0.0 < x + 1:
        acc += math.exp(k * x)
    s = np.zeros(R)
    low = np.zeros(R)
    act = np.arange(R)
    while act.size:
        s[act] += law.sample_steps(rng, act.size)
        sa = s[act]
        new = sa < low[act]
        idx = act[new]
        low[idx] = s[idx]
        H = -s[idx]
        hit = (H >= x) & (H < x + 1)
        acc[idx[hit]] += np.exp(k * (x - H[hit]))
        act = act[-s[act] < x + 1]
    return _mean_se(acc)


def ladder_exp_sum_direct(law: WalkLaw, x: float, N: int, replicas: int,
                          rng: np.random.Generator,
                          kappa: float | None = None) -> tuple[float, float]:
    """Brute-force path version of :func:`ladder_exp_sum` truncated at ``n <= N``."""
    k = _kappa_of(law, kappa)
    paths = sample_walks(law, N, replicas, rng)
    runmax = np.maximum.accumulate(np.where(np.arange(N + 1) == 0, -np.inf, paths), axis=1)
    ok = (runmax < 0) | (np.arange(N + 1) == 0)
    inI = (paths > -x - 1) & (paths <= -x)
    terms = np.where(ok & inI, np.exp(k * (paths + x)), 0.0)
    return _mean_se(terms.sum(axis=1))


@dataclass(frozen=True)
class WindowSpec:
    """``J(x) = [x/psi'(k) - b sqrt(x), x/psi'(k) + b sqrt(x)]``, ``b = x^(1/4)``."""

    x: float
    psi1_kappa: float
    b_of_x: float | None = None

    @property
    def b(self) -> float:
        return self.x ** 0.25 if self.b_of_x is None else float(self.b_of_x)

    @property
    def center(self) -> float:
        return self.x / self.psi1_kappa

    @property
    def bounds(self) -> tuple[float, float]:
        w = self.b * math.sqrt(self.x)
        return self.center - w, self.center + w

    @property
    def generations(self) -> np.ndarray:
        lo, hi = self.bounds
        return np.arange(max(0, math.ceil(lo)), math.floor(hi) + 1)

    def standardize(self, n) -> np.ndarray:
        return np.sqrt(self.psi1_kappa / self.x) * (np.asarray(n, dtype=float) - self.center)

    def contains(self, n) -> np.ndarray:
        lo, hi = self.bounds
        n = np.asarray(n)
        return (n >= lo) & (n <= hi)


def _window_terms(law: WalkLaw, x: float, a: float, replicas: int, rng, kappa):
    """Per-replica terms ``exp(k S_n + k x) 1{max<0, S_n in I(x)}`` for n in J(x)."""
    k = _kappa_of(law, kappa)
    win = WindowSpec(x, -law.mean)
    gens = win.generations
    if gens.size == 0:
        raise ValueError(f"window J({x}) is empty")
    paths = sample_walks(law, int(gens[-1]), replicas, rng, start=-a)
    n = np.arange(paths.shape[1])
    runmax = np.maximum.accumulate(np.where(n == 0, -np.inf, paths), axis=1)
    cols = paths[:, gens]
    ok = (runmax[:, gens] < 0) & (cols > -x - 1) & (cols <= -x)
    terms = np.where(ok, np.exp(k * (cols + x)), 0.0)
    return win, gens, terms


def gaussian_window_sum(law: WalkLaw, x: float, phi0: Callable[[np.ndarray], np.ndarray],
                        replicas: int, rng: np.random.Generator, a: float = 0.0,
                        kappa: float | None = None) -> tuple[float, float]:
    """``sum_{n in J(x)} phi0(z_n) E_{-a}[exp(k S_n + k x); max<0, S_n in I(x)]``
    with ``z_n = sqrt(psi'(k)/x) (n - x/psi'(k))``."""
    win, gens, terms = _window_terms(law, x, a, replicas, rng, kappa)
    phi = np.asarray(phi0(win.standardize(gens)), dtype=float)
    return _mean_se(terms @ phi)


@dataclass(frozen=True)
class WindowRatio:
    x: float
    a: float
    numerator: float
    denominator: float
    ratio: float
    ratio_se: float
    generations: tuple


def window_ratio(law: WalkLaw, x: float, replicas: int, rng: np.random.Generator,
                 a: float = 0.0, kappa: float | None = None) -> WindowRatio:
    """Ratio of the window sums with ``phi0 = 1{z <= 0}`` and ``phi0 = 1``,
    from the same paths, with a paired delta-method standard error."""
    win, gens, terms = _window_terms(law, x, a, replicas, rng, kappa)
    num = terms[:, win.standardize(gens) <= 0].sum(axis=1)
    den = terms.sum(axis=1)
    mn, md = num.mean(), den.mean()
    r = mn / md
    resid = (num - r * den) / md
    se = float(resid.std(ddof=1) / math.sqrt(resid.size))
    return WindowRatio(float(x), float(a), float(mn), float(md), float(r), se,
                       tuple(int(g) for g in gens))


@dataclass(frozen=True)
class Envelope:
    """Expected strip visits against the starting depth ``a``.

    ``c_hat`` is fitted on the ``n_fit`` smallest depths as the largest
    ``count / (1 + a)``; the envelope then has to hold at the remaining
    depths within 3 SE.
    """

    x: float
    a: tuple
    counts: tuple
    se: tuple
    c_hat: float
    n_fit: int

    @property
    def margins(self) -> tuple:
        """``c_hat (1 + a) - count`` in units of SE (negative means violated)."""
        return tuple((self.c_hat * (1 + a) - m) / s if s > 0 else math.inf
                     for a, m, s in zip(self.a, self.counts, self.se))

    @property
    def holds(self) -> bool:
        return all(z >= -3.0 for z in self.margins[self.n_fit:])


def strip_visits(law: WalkLaw, x: float, a: float, replicas: int, rng: np.random.Generator,
                 miss: float = 1e-6, horizon: int = 100_000) -> np.ndarray:
    """Per-replica ``sum_k 1{max_{[1,k]} S < 0, S_k in I(x)}`` under ``P_{-a}``.

    Paths stop at the first return to ``[0, inf)`` or once they are
    ``Kcert`` below the strip (no way back up with probability ``> miss``).
    """
    if law.mean >= 0:
        raise ValueError("strip_visits needs a walk with negative drift")
    kcert = math.log(1.0 / miss) / law.lundberg()
    R = int(replicas)
    s = np.full(R, -float(a))
    cnt = ((s > -x - 1) & (s <= -x)).astype(float)
    act = np.arange(R)
    k = 0
    while act.size and k < horizon:
        k += 1
        s[act] += law.sample_steps(rng, act.size)
        sa = s[act]
        cnt[act] += (sa > -x - 1) & (sa <= -x) & (sa < 0)
        act = act[(sa < 0) & (sa > -x - 1 - kcert)]
    if act.size:
        raise HorizonTooShort(f"{act.size} strip-visit paths still active")
    return cnt


def envelope_check(law: WalkLaw, x: float, a_grid: Sequence[float], replicas: int,
                   rng: np.random.Generator, n_fit: int = 2) -> Envelope:
    """Check ``sum_k P_{-a}(max_{[1,k]} S < 0, S_k in I(x)) <= c (1 + a)``."""
    a_grid = sorted(float(a) for a in a_grid)
    res = [_mean_se(strip_visits(law, x, a, replicas, rng)) for a in a_grid]
    m = tuple(r[0] for r in res)
    s = tuple(r[1] for r in res)
    n_fit = max(1, min(n_fit, len(a_grid)))
    c_hat = max(mi / (1 + a) for mi, a in zip(m[:n_fit], a_grid[:n_fit]))
    return Envelope(float(x), tuple(a_grid), m, s, float(c_hat), n_fit)
