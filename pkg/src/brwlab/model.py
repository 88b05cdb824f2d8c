"""Reproduction laws, their log-Laplace transform psi, and the root kappa.

A reproduction law is an i.i.d. family: a random number of children whose
displacements are drawn independently from a :class:`DisplacementLaw`.
For every built-in family

    psi(theta) = log E[N] + log E[exp(-theta X)],

so psi and all its derivatives are available in closed form.
"""

from __future__ import annotations

import json
import functools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from typing import Callable, Union

import numpy as np
from scipy import optimize

from .errors import DivergentPsi, ModelError, NoRootInWindow, UnsupportedFamily

LN2 = math.log(2.0)


# ---------------------------------------------------------------------------
# displacement laws
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Gaussian:
    mean: float
    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ModelError("Gaussian variance must be > 0")

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return rng.normal(self.mean, math.sqrt(self.variance), size)

    def log_mgf(self, t: float) -> float:
        return t * self.mean + 0.5 * t * t * self.variance

    def log_mgf_d1(self, t: float) -> float:
        return self.mean + t * self.variance

    def log_mgf_d2(self, t: float) -> float:
        return self.variance

    def tilted(self, theta: float) -> "Gaussian":
        """Law with density proportional to ``exp(-theta x)`` times this one."""
        return Gaussian(self.mean - theta * self.variance, self.variance)

    def atoms(self):
        return None

    def to_dict(self) -> dict:
        return {"kind": "gaussian", "mean": self.mean, "variance": self.variance}


@dataclass(frozen=True)
class TwoPoint:
    """Mass ``p`` at ``a`` and ``1 - p`` at ``b``. Always lattice."""

    a: float
    b: float
    p: float

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ModelError("TwoPoint requires p in (0, 1)")

    def sample(self, rng, size) -> np.ndarray:
        return np.where(rng.random(size) < self.p, self.a, self.b)

    def _tilt_weights(self, t: float) -> tuple[float, float]:
        la = math.log(self.p) + t * self.a
        lb = math.log1p(-self.p) + t * self.b
        m = max(la, lb)
        wa, wb = math.exp(la - m), math.exp(lb - m)
        return wa / (wa + wb), wb / (wa + wb)

    def log_mgf(self, t: float) -> float:
        return float(np.logaddexp(math.log(self.p) + t * self.a,
                                  math.log1p(-self.p) + t * self.b))

    def log_mgf_d1(self, t: float) -> float:
        qa, qb = self._tilt_weights(t)
        return qa * self.a + qb * self.b

    def log_mgf_d2(self, t: float) -> float:
        qa, qb = self._tilt_weights(t)
        return qa * qb * (self.a - self.b) ** 2

    def tilted(self, theta: float) -> "TwoPoint":
        qa, _ = self._tilt_weights(-theta)
        qa = min(max(qa, np.nextafter(0.0, 1.0)), np.nextafter(1.0, 0.0))
        return TwoPoint(self.a, self.b, qa)

    def atoms(self):
        return [self.a, self.b]

    def to_dict(self) -> dict:
        return {"kind": "two_point", "a": self.a, "b": self.b, "p": self.p}


@dataclass(frozen=True)
class Shifted:
    base: "DisplacementLaw"
    offset: float

    def sample(self, rng, size) -> np.ndarray:
        return self.base.sample(rng, size) + self.offset

    def log_mgf(self, t: float) -> float:
        return self.base.log_mgf(t) + t * self.offset

    def log_mgf_d1(self, t: float) -> float:
        return self.base.log_mgf_d1(t) + self.offset

    def log_mgf_d2(self, t: float) -> float:
        return self.base.log_mgf_d2(t)

    def tilted(self, theta: float) -> "Shifted":
        return Shifted(self.base.tilted(theta), self.offset)

    def atoms(self):
        inner = self.base.atoms()
        return None if inner is None else [x + self.offset for x in inner]

    def to_dict(self) -> dict:
        return {"kind": "shifted", "base": self.base.to_dict(), "offset": self.offset}


DisplacementLaw = Union[Gaussian, TwoPoint, Shifted]


# ---------------------------------------------------------------------------
# reproduction families
# ---------------------------------------------------------------------------


class _IidFamily:
    """Shared behaviour: i.i.d. displacements, independent offspring count."""

    displacement: DisplacementLaw

    def log_mean_count(self) -> float:
        raise NotImplementedError

    def sample_counts(self, rng, size) -> np.ndarray:
        raise NotImplementedError

    def sample_biased_counts(self, rng, size) -> np.ndarray:
        """Offspring counts of a spine vertex (size-biased count law)."""
        raise NotImplementedError

    def psi(self, theta: float) -> float:
        return self.log_mean_count() + self.displacement.log_mgf(-theta)

    def psi_d1(self, theta: float) -> float:
        return -self.displacement.log_mgf_d1(-theta)

    def psi_d2(self, theta: float) -> float:
        return self.displacement.log_mgf_d2(-theta)

    def sample_offspring(self, rng: np.random.Generator) -> np.ndarray:
        """Displacements of one reproduction event."""
        n = int(self.sample_counts(rng, 1)[0])
        return self.displacement.sample(rng, n)

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class FixedCountIid(_IidFamily):
    n_children: int
    displacement: DisplacementLaw

    def __post_init__(self):
        if self.n_children < 1:
            raise ModelError("n_children must be >= 1")

    def log_mean_count(self) -> float:
        return math.log(self.n_children)

    def sample_counts(self, rng, size) -> np.ndarray:
        return np.full(size, self.n_children, dtype=np.int64)

    def sample_biased_counts(self, rng, size) -> np.ndarray:
        return np.full(size, self.n_children, dtype=np.int64)

    def to_dict(self) -> dict:
        return {"family": "fixed_count_iid",
                "params": {"n_children": self.n_children,
                           "displacement": self.displacement.to_dict()}}


@dataclass(frozen=True)
class PoissonCountIid(_IidFamily):
    lam: float
    displacement: DisplacementLaw

    def __post_init__(self):
        if not self.lam > 0:
            raise ModelError("Poisson rate must be > 0")

    def log_mean_count(self) -> float:
        return math.log(self.lam)

    def sample_counts(self, rng, size) -> np.ndarray:
        return rng.poisson(self.lam, size).astype(np.int64)

    def sample_biased_counts(self, rng, size) -> np.ndarray:
        return 1 + rng.poisson(self.lam, size).astype(np.int64)

    def to_dict(self) -> dict:
        return {"family": "poisson_count_iid",
                "params": {"lambda": self.lam,
                           "displacement": self.displacement.to_dict()}}


@dataclass(frozen=True)
class BinaryGaussian(_IidFamily):
    """Two children with i.i.d. Normal(mu, sigma2) displacements."""

    sigma2: float
    mu: float
    n_children: int = field(default=2, init=False)

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ModelError("sigma2 must be > 0")

    @property
    def displacement(self) -> Gaussian:
        return Gaussian(self.mu, self.sigma2)

    def log_mean_count(self) -> float:
        return LN2

    def sample_counts(self, rng, size) -> np.ndarray:
        return np.full(size, 2, dtype=np.int64)

    sample_biased_counts = sample_counts

    def psi(self, theta: float) -> float:
        return LN2 + 0.5 * theta * theta * self.sigma2 - theta * self.mu

    def to_dict(self) -> dict:
        return {"family": "binary_gaussian",
                "params": {"sigma2": self.sigma2, "mu": self.mu}}


ModelSpec = Union[BinaryGaussian, FixedCountIid, PoissonCountIid]

#: the reference model: psi(theta) = ln2 * (theta - 1) * (theta - 2) / 2
BUILTIN = BinaryGaussian(sigma2=LN2, mu=1.5 * LN2)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _schema() -> dict:
    text = resources.files("brwlab").joinpath("schema/model.schema.json").read_text()
    return json.loads(text)


def _law_from_dict(d: dict) -> DisplacementLaw:
    kind = d["kind"]
    if kind == "gaussian":
        return Gaussian(float(d["mean"]), float(d["variance"]))
    if kind == "two_point":
        return TwoPoint(float(d["a"]), float(d["b"]), float(d["p"]))
    if kind == "shifted":
        return Shifted(_law_from_dict(d["base"]), float(d["offset"]))
    raise ModelError(f"unknown displacement kind {kind!r}")


def model_from_dict(doc: dict) -> ModelSpec:
    """Build a model from its JSON document, validating against the schema."""
    import jsonschema

    try:
        jsonschema.validate(doc, _schema())
    except jsonschema.ValidationError as exc:
        raise ModelError(f"invalid model document: {exc.message}") from exc
    family, params = doc["family"], doc["params"]
    if family == "binary_gaussian":
        return BinaryGaussian(float(params["sigma2"]), float(params["mu"]))
    if family == "fixed_count_iid":
        return FixedCountIid(int(params["n_children"]), _law_from_dict(params["displacement"]))
    if family == "poisson_count_iid":
        return PoissonCountIid(float(params["lambda"]), _law_from_dict(params["displacement"]))
    raise ModelError(f"unknown family {family!r}")


def model_to_dict(model: ModelSpec) -> dict:
    return model.to_dict()


# ---------------------------------------------------------------------------
# psi and kappa
# ---------------------------------------------------------------------------


def sample_offspring(model: ModelSpec, rng: np.random.Generator) -> list[float]:
    return model.sample_offspring(rng).tolist()


def psi(model: ModelSpec, theta: float) -> float:
    """Closed-form log-Laplace transform; ``inf`` when divergent."""
    try:
        value = model.psi(theta)
    except OverflowError:
        return math.inf
    return value if math.isfinite(value) else math.inf


@dataclass(frozen=True)
class PsiEstimate:
    value: float
    se: float
    approximate: bool = True


def psi_mc(model: ModelSpec, theta: float, rng: np.random.Generator,
           samples: int = 100_000) -> PsiEstimate:
    """Monte Carlo estimate of psi(theta) with a delta-method standard error."""
    counts = model.sample_counts(rng, samples)
    disp = model.displacement.sample(rng, int(counts.sum()))
    owner = np.repeat(np.arange(samples), counts)
    sums = np.bincount(owner, weights=np.exp(-theta * disp), minlength=samples)
    mean = sums.mean()
    sd = sums.std(ddof=1)
    if not (mean > 0 and math.isfinite(mean)):
        return PsiEstimate(math.inf, math.inf)
    return PsiEstimate(math.log(mean), sd / (mean * math.sqrt(samples)))


@dataclass(frozen=True)
class LogLaplace:
    psi: Callable[[float], float]
    psi1: float
    kappa: float
    psi1_kappa: float
    psi2_kappa: float
    kappa_prime: float
    delta0: float
    closed_form: bool = True

    @property
    def gaussian_variance(self) -> float:
        """Variance of the limiting standardized minimizer generation."""
        return self.psi2_kappa / self.psi1_kappa ** 2


def find_kappa(model: ModelSpec, tol: float = 1e-12, theta_max: float = 11.0,
               theta_limit: float = 1e4) -> LogLaplace:
    """Locate kappa = inf{theta > 1 : psi(theta) = 0}.

    The upper end of the bracket starts at ``theta_max`` and doubles until
    psi turns positive; ``NoRootInWindow`` is raised if that never happens
    before ``theta_limit``.
    """
    f = functools.partial(psi, model)
    psi_one = f(1.0)
    if not math.isfinite(psi_one):
        raise DivergentPsi("psi(1) is infinite")
    hi = theta_max
    while True:
        v = f(hi)
        if not math.isfinite(v):
            raise DivergentPsi(f"psi diverges before a root was bracketed (theta={hi})")
        if v > 0:
            break
        hi *= 2.0
        if hi > theta_limit:
            raise NoRootInWindow("psi stays non-positive on (1, theta_limit]")
    res = optimize.minimize_scalar(f, bounds=(1.0, hi), method="bounded",
                                   options={"xatol": 1e-12})
    t_min, v_min = float(res.x), float(res.fun)
    if f(1.0) < v_min:
        t_min, v_min = 1.0, f(1.0)
    if not v_min < -tol:
        raise NoRootInWindow("psi has no sign change above 1")
    if psi_one > tol:
        # first zero lies between 1 and the minimizer
        kappa = optimize.brentq(f, 1.0, t_min, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    else:
        kappa = optimize.brentq(f, t_min, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    if abs(f(kappa)) > max(tol, 1e-12):
        raise NoRootInWindow(f"root polish failed: |psi(kappa)|={abs(f(kappa)):.3g}")
    # every built-in law has an everywhere-finite mgf, so any delta0 works
    return LogLaplace(
        psi=f,
        psi1=model.psi_d1(1.0),
        kappa=kappa,
        psi1_kappa=model.psi_d1(kappa),
        psi2_kappa=model.psi_d2(kappa),
        kappa_prime=kappa - 1.0,
        delta0=1.0,
        closed_form=True,
    )


# ---------------------------------------------------------------------------
# conditions
# ---------------------------------------------------------------------------


def is_lattice(atoms, max_denominator: int = 10_000, rel_tol: float = 1e-9) -> bool:
    """Exact-ish lattice test for a finite set of atoms.

    The atoms lie on ``a + h Z`` for some ``h > 0`` iff every pairwise
    difference is a rational multiple of the first nonzero one.
    """
    xs = sorted(set(float(a) for a in atoms))
    if len(xs) <= 2:
        return True
    diffs = [x - xs[0] for x in xs[1:]]
    base = diffs[0]
    for d in diffs[1:]:
        r = d / base
        frac = Fraction(r).limit_denominator(max_denominator)
        if abs(float(frac) - r) > rel_tol * max(1.0, abs(r)):
            return False
    return True


@dataclass
class ConditionReport:
    entries: list[dict]
    log_laplace: LogLaplace | None = None

    @property
    def ok(self) -> bool:
        return all(e["verdict"] != "fail" for e in self.entries)

    def verdict(self, condition: str) -> str:
        for e in self.entries:
            if e["condition"] == condition:
                return e["verdict"]
        raise KeyError(condition)

    def to_json(self) -> list[dict]:
        return self.entries


def validate_conditions(model: ModelSpec, tol: float = 1e-9) -> ConditionReport:
    """Check the four standing hypotheses; failures are verdicts, never errors."""
    entries = []
    psi0, psi1v = psi(model, 0.0), psi(model, 1.0)
    dpsi1 = model.psi_d1(1.0)
    # E[sum V e^{-V}] = -psi'(1) e^{psi(1)}
    drift_moment = -dpsi1 * math.exp(psi1v) if math.isfinite(psi1v) else math.nan
    c11 = psi0 > 0 and abs(psi1v) <= tol and drift_moment > 0
    entries.append({
        "condition": "1.1",
        "verdict": "pass" if c11 else "fail",
        "detail": {"psi0": psi0, "psi1": psi1v, "E_sum_V_exp_minus_V": drift_moment,
                   "supercritical": psi0 > 0, "normalized": abs(psi1v) <= tol},
    })

    ll = None
    try:
        ll = find_kappa(model)
        probes = [1.0 + (ll.kappa - 1.0) * k / 6.0 for k in range(1, 6)]
        convex = all(psi(model, t) < 0 for t in probes)
        ok = (abs(ll.psi(ll.kappa)) <= tol and ll.psi1 < 0 < ll.psi1_kappa
              and ll.psi2_kappa > 0 and convex)
        entries.append({"condition": "1.2", "verdict": "pass" if ok else "fail",
                        "detail": {"kappa": ll.kappa, "psi1_kappa": ll.psi1_kappa,
                                   "psi2_kappa": ll.psi2_kappa,
                                   "negative_on_interior_probes": convex}})
    except (NoRootInWindow, DivergentPsi) as exc:
        entries.append({"condition": "1.2", "verdict": "fail",
                        "detail": {"error": type(exc).__name__, "message": str(exc)}})

    atoms = model.displacement.atoms()
    if atoms is None:
        entries.append({"condition": "1.3", "verdict": "pass",
                        "detail": "continuous displacement law"})
    else:
        lattice = is_lattice(atoms)
        entries.append({"condition": "1.3", "verdict": "fail" if lattice else "pass",
                        "detail": {"atoms": list(atoms), "lattice": lattice}})

    entries.append({
        "condition": "1.4",
        "verdict": "pass" if ll is not None else "fail",
        "detail": ("displacement mgf finite on all of R and offspring count has all "
                   "moments; psi bounded on [1-delta0, kappa+delta0] and the weighted "
                   "sum has finite moments of every order"
                   if ll is not None else "kappa undefined"),
    })
    return ConditionReport(entries, ll)
