"""Parametric staleness models, empirical histograms and grid fitting.

Four delay families are supported: geometric, bounded uniform, Poisson and
Conway-Maxwell-Poisson (CMP). Fitting minimises the Bhattacharyya distance
between the model pmf and observed staleness frequencies over a fixed grid.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import specialfn
from .errors import InputError, ParameterError

TAIL_MASS = 1e-12
SUPPORT_CAP = 10_000

FAMILIES = ("geometric", "uniform", "poisson", "cmp")


class StalenessModel:
    """Base class; concrete models are frozen dataclasses below."""

    kind: str

    def log_pmf_array(self, n: int) -> np.ndarray:
        """ln P[tau = i] for i = 0..n-1 (-inf outside the support)."""
        raise NotImplementedError

    def pmf_array(self, n: int) -> np.ndarray:
        return np.exp(self.log_pmf_array(n))

    def pmf(self, i: int) -> float:
        if i < 0:
            raise ParameterError(f"staleness must be >= 0, got {i}")
        return float(self.pmf_array(i + 1)[i])

    def mode(self) -> int:
        raise NotImplementedError

    def mean(self) -> float:
        raise NotImplementedError

    def support_limit(self) -> int:
        """Truncation index I: cumulative mass >= 1 - 1e-12, or I = 10,000."""
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size=None):
        raise NotImplementedError

    @property
    def params(self) -> dict:
        raise NotImplementedError

    def to_spec(self) -> str:
        return f"{_SHORT[self.kind]}:" + ",".join(repr(v) for v in self.params.values())

    def __str__(self) -> str:
        return self.to_spec()


def _truncation_from_pmf(model: StalenessModel) -> int:
    n = 256
    while True:
        cdf = np.cumsum(model.pmf_array(n))
        hit = np.nonzero(cdf >= 1.0 - TAIL_MASS)[0]
        if hit.size:
            return int(hit[0])
        if n > SUPPORT_CAP:
            return SUPPORT_CAP
        n = min(4 * n, SUPPORT_CAP + 1)


@dataclass(frozen=True)
class Geometric(StalenessModel):
    """P[tau = k] = p (1 - p)**k."""

    p: float
    kind: str = field(default="geometric", init=False)

    def __post_init__(self):
        if not 0 < self.p <= 1:
            raise ParameterError(f"geometric p must be in (0, 1], got {self.p}")

    @property
    def params(self):
        return {"p": self.p}

    def log_pmf_array(self, n):
        i = np.arange(n)
        if self.p == 1.0:
            return np.where(i == 0, 0.0, -np.inf)
        return math.log(self.p) + i * math.log1p(-self.p)

    def mode(self):
        return 0

    def mean(self):
        return (1.0 - self.p) / self.p

    def support_limit(self):
        if self.p == 1.0:
            return 0
        # (1-p)**(I+1) <= 1e-12
        lim = math.ceil(math.log(TAIL_MASS) / math.log1p(-self.p)) - 1
        return int(min(max(lim, 0), SUPPORT_CAP))

    def sample(self, rng, size=None):
        return rng.geometric(self.p, size=size) - 1


@dataclass(frozen=True)
class Uniform(StalenessModel):
    """Uniform on {0, ..., tau_hat} (inclusive)."""

    tau_hat: int
    kind: str = field(default="uniform", init=False)

    def __post_init__(self):
        if int(self.tau_hat) != self.tau_hat or self.tau_hat < 0:
            raise ParameterError(f"uniform tau_hat must be a non-negative integer, got {self.tau_hat}")
        object.__setattr__(self, "tau_hat", int(self.tau_hat))

    @property
    def params(self):
        return {"tau_hat": self.tau_hat}

    def log_pmf_array(self, n):
        i = np.arange(n)
        return np.where(i <= self.tau_hat, -math.log(self.tau_hat + 1), -np.inf)

    def mode(self):
        return 0

    def mean(self):
        return self.tau_hat / 2.0

    def support_limit(self):
        return self.tau_hat

    def sample(self, rng, size=None):
        return rng.integers(0, self.tau_hat + 1, size=size)


@dataclass(frozen=True)
class Poisson(StalenessModel):
    lam: float
    kind: str = field(default="poisson", init=False)

    def __post_init__(self):
        if not self.lam > 0:
            raise ParameterError(f"Poisson lam must be > 0, got {self.lam}")

    @property
    def params(self):
        return {"lam": self.lam}

    def log_pmf_array(self, n):
        return specialfn.cmp_log_terms(self.lam, 1.0, n) - self.lam

    def mode(self):
        return math.floor(self.lam)

    def mean(self):
        return self.lam

    def support_limit(self):
        return _truncation_from_pmf(self)

    def sample(self, rng, size=None):
        return rng.poisson(self.lam, size=size)


@dataclass(frozen=True)
class CMP(StalenessModel):
    """Conway-Maxwell-Poisson: P[tau = i] = lam**i / ((i!)**nu Z(lam, nu))."""

    lam: float
    nu: float
    kind: str = field(default="cmp", init=False)

    def __post_init__(self):
        if not self.lam > 0 or not self.nu > 0:
            raise ParameterError(f"CMP needs lam > 0 and nu > 0, got ({self.lam}, {self.nu})")

    @property
    def params(self):
        return {"lam": self.lam, "nu": self.nu}

    @property
    def log_normalizer(self) -> float:
        return _cmp_log_z(self.lam, self.nu)

    def log_pmf_array(self, n):
        return specialfn.cmp_log_terms(self.lam, self.nu, n) - self.log_normalizer

    def mode(self):
        if self.lam < 1:
            return 0
        m = self.lam ** (1.0 / self.nu)
        k = math.floor(m)
        # floating error can put an exact integer root just below it
        if abs(m - round(m)) < 1e-9 * max(1.0, m):
            k = int(round(m))
        # lam**(1/nu) integer: pmf ties at k-1 and k, keep the smaller
        if k >= 1 and _is_integer_root(self.lam, self.nu, k):
            return k - 1
        return k

    def mean(self):
        lim = self.support_limit()
        p = self.pmf_array(lim + 1)
        return float(np.dot(np.arange(lim + 1), p))

    def support_limit(self):
        return _truncation_from_pmf(self)

    def sample(self, rng, size=None):
        lim = self.support_limit()
        cdf = np.cumsum(self.pmf_array(lim + 1))
        u = rng.random(size=size)
        out = np.searchsorted(cdf, u * cdf[-1], side="right")
        return np.minimum(out, lim) if size is not None else int(min(out, lim))


def _is_integer_root(lam, nu, k):
    # lam == k**nu to rounding: the pmf ratio lam / k**nu equals one
    return abs(nu * math.log(k) - math.log(lam)) < 1e-12


_LOGZ_CACHE: dict = {}


def _cmp_log_z(lam, nu):
    key = (lam, nu)
    val = _LOGZ_CACHE.get(key)
    if val is None:
        val = specialfn.cmp_normalizer(lam, nu).log_value
        if len(_LOGZ_CACHE) > 4096:
            _LOGZ_CACHE.clear()
        _LOGZ_CACHE[key] = val
    return val


_SHORT = {"geometric": "geom", "uniform": "uniform", "poisson": "poisson", "cmp": "cmp"}
_ALIASES = {
    "geom": "geometric", "geometric": "geometric",
    "unif": "uniform", "uniform": "uniform",
    "pois": "poisson", "poisson": "poisson",
    "cmp": "cmp",
}


def make_model(kind: str, **params) -> StalenessModel:
    kind = _ALIASES.get(kind.lower(), kind)
    if kind == "geometric":
        return Geometric(float(params["p"]))
    if kind == "uniform":
        return Uniform(params["tau_hat"])
    if kind == "poisson":
        return Poisson(float(params["lam"]))
    if kind == "cmp":
        return CMP(float(params["lam"]), float(params["nu"]))
    raise ParameterError(f"unknown staleness family {kind!r}")


def parse_model(text: str) -> StalenessModel:
    """Parse the short form used on the command line, e.g. ``cmp:8,1``."""
    try:
        kind, _, rest = text.partition(":")
        vals = [v for v in rest.split(",") if v.strip()]
        kind = _ALIASES.get(kind.strip().lower())
        if kind == "geometric":
            return Geometric(float(vals[0]))
        if kind == "uniform":
            return Uniform(int(vals[0]))
        if kind == "poisson":
            return Poisson(float(vals[0]))
        if kind == "cmp":
            return CMP(float(vals[0]), float(vals[1]))
    except (IndexError, ValueError) as exc:
        if isinstance(exc, ParameterError):
            raise
        raise ParameterError(f"cannot parse staleness model {text!r}: {exc}") from None
    raise ParameterError(f"unknown staleness model {text!r}")


# Module-level forms of the model operations.

def pmf(model: StalenessModel, i: int) -> float:
    return model.pmf(i)


def mode(model: StalenessModel) -> int:
    return model.mode()


def sample(model: StalenessModel, rng: np.random.Generator, size=None):
    return model.sample(rng, size)


@dataclass(frozen=True)
class StalenessHistogram:
    """Observed staleness counts keyed by tau."""

    counts: Mapping[int, int]

    def __post_init__(self):
        clean = {}
        for tau, c in self.counts.items():
            tau, c = int(tau), int(c)
            if tau < 0 or c < 0:
                raise InputError(f"histogram entries must be non-negative, got {tau}: {c}")
            if c:
                clean[tau] = clean.get(tau, 0) + c
        if not clean:
            raise InputError("histogram is empty")
        object.__setattr__(self, "counts", dict(sorted(clean.items())))

    @classmethod
    def from_samples(cls, taus) -> "StalenessHistogram":
        taus = np.asarray(taus, dtype=np.int64)
        if taus.size == 0:
            raise InputError("no staleness samples")
        vals, cnt = np.unique(taus, return_counts=True)
        return cls(dict(zip(vals.tolist(), cnt.tolist())))

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def max_tau(self) -> int:
        return max(self.counts)

    def arrays(self):
        taus = np.fromiter(self.counts.keys(), dtype=np.int64)
        cnt = np.fromiter(self.counts.values(), dtype=np.float64)
        return taus, cnt

    def frequencies(self):
        """(taus, freqs) over the observed support."""
        taus, cnt = self.arrays()
        return taus, cnt / cnt.sum()

    def dense_frequencies(self, n: int | None = None) -> np.ndarray:
        n = self.max_tau + 1 if n is None else n
        out = np.zeros(n)
        taus, f = self.frequencies()
        keep = taus < n
        out[taus[keep]] = f[keep]
        return out

    def mean(self) -> float:
        taus, f = self.frequencies()
        return float(np.dot(taus, f))

    def to_dict(self) -> dict:
        return {str(k): v for k, v in self.counts.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tau", "count"])
        for k, v in self.counts.items():
            w.writerow([k, v])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "StalenessHistogram":
        with open(path, encoding="utf-8", newline="") as fh:
            return cls.parse_csv(fh.read(), source=str(path))

    @classmethod
    def parse_csv(cls, text: str, source: str = "<string>") -> "StalenessHistogram":
        rows = list(csv.reader(io.StringIO(text)))
        rows = [r for r in rows if any(c.strip() for c in r)]
        if not rows:
            raise InputError(f"{source}: empty histogram file")
        header = [c.strip() for c in rows[0]]
        if header != ["tau", "count"]:
            raise InputError(f"{source}: expected header 'tau,count', got {','.join(header)!r}")
        counts = {}
        last = -1
        for lineno, r in enumerate(rows[1:], start=2):
            try:
                tau, c = int(r[0]), int(r[1])
            except (IndexError, ValueError):
                raise InputError(f"{source}:{lineno}: cannot parse row {r!r}") from None
            if tau <= last:
                raise InputError(f"{source}:{lineno}: rows must be sorted by tau without repeats")
            last = tau
            counts[tau] = c
        return cls(counts)


def bhattacharyya(hist: StalenessHistogram, model: StalenessModel) -> float:
    """-ln sum_i sqrt(q_i p_i); +inf when the supports do not overlap.

    Terms where the histogram is empty vanish, so only the observed support
    enters the sum.
    """
    taus, q = hist.frequencies()
    logp = model.log_pmf_array(int(taus.max()) + 1)[taus]
    return _distance_from_logs(np.log(q), logp[None, :])[0]


def _distance_from_logs(logq, logp) -> np.ndarray:
    """Row-wise Bhattacharyya distance for a (grid, support) array of log pmfs."""
    with np.errstate(divide="ignore"):
        bc = np.exp(0.5 * (logq[None, :] + logp)).sum(axis=1)
        d = -np.log(bc)
    # coefficient can round a hair above one for identical inputs
    return np.where(bc > 0, np.maximum(d, 0.0), np.inf)


@dataclass(frozen=True)
class FitReport:
    family: str
    model: StalenessModel | None
    distance: float
    grid: dict

    @property
    def params(self) -> dict:
        return dict(self.model.params) if self.model is not None else {}

    @property
    def degenerate(self) -> bool:
        return not math.isfinite(self.distance)

    def to_dict(self) -> dict:
        out = {
            "family": self.family,
            "params": self.params,
            "distance": self.distance if math.isfinite(self.distance) else None,
            "grid": self.grid,
        }
        if self.degenerate:
            out["degenerate_overlap"] = True
        return out


def _grid(start, stop, step):
    # integer multiples keep grid points exact in decimal
    k0, k1 = round(start / step), round(stop / step)
    return np.arange(k0, k1 + 1) * step if k1 >= k0 else np.array([start])


def fit(hist: StalenessHistogram, family: str, workers: int | None = None) -> FitReport:
    """Exhaustive grid search for the family member closest to `hist`.

    Grids: geometric p in 0.001..0.999 (step 0.001); uniform tau_hat in
    0..max+5; Poisson lam in 0.1..2*max (step 0.1); CMP nu in 0.05..10
    (step 0.01) with lam = workers**nu. Ties go to the first grid point.
    """
    if not isinstance(hist, StalenessHistogram):
        raise InputError("fit needs a StalenessHistogram")
    family = _ALIASES.get(family.lower(), family)
    taus, q = hist.frequencies()
    logq = np.log(q)
    tmax = int(taus.max())
    taus_f = taus.astype(float)

    if family == "geometric":
        ps = np.round(_grid(0.001, 0.999, 0.001), 3)
        logp = np.log(ps)[:, None] + taus_f[None, :] * np.log1p(-ps)[:, None]
        d = _distance_from_logs(logq, logp)
        k = int(np.argmin(d))
        return FitReport(family, Geometric(float(ps[k])), float(d[k]),
                         {"param": "p", "start": 0.001, "stop": 0.999, "step": 0.001})

    if family == "uniform":
        hats = np.arange(0, tmax + 6)
        inside = taus[None, :] <= hats[:, None]
        logp = np.where(inside, -np.log(hats + 1.0)[:, None], -np.inf)
        d = _distance_from_logs(logq, logp)
        k = int(np.argmin(d))
        return FitReport(family, Uniform(int(hats[k])), float(d[k]),
                         {"param": "tau_hat", "start": 0, "stop": int(tmax + 5), "step": 1})

    if family == "poisson":
        stop = max(0.1, 2.0 * tmax)
        lams = np.round(_grid(0.1, stop, 0.1), 1)
        lf = specialfn.log_factorials(taus)
        logp = taus_f[None, :] * np.log(lams)[:, None] - lf[None, :] - lams[:, None]
        d = _distance_from_logs(logq, logp)
        k = int(np.argmin(d))
        return FitReport(family, Poisson(float(lams[k])), float(d[k]),
                         {"param": "lam", "start": 0.1, "stop": float(lams[-1]), "step": 0.1})

    if family == "cmp":
        if workers is None or workers < 1:
            raise ParameterError("CMP fit needs workers m >= 1 (lam = m**nu)")
        nus = np.round(_grid(0.05, 10.0, 0.01), 2)
        lf = specialfn.log_factorials(taus)
        logm = math.log(workers)
        rows = []
        for nu in nus:
            lam = workers ** nu
            logz = _cmp_log_z(lam, float(nu))
            rows.append(taus_f * nu * logm - nu * lf - logz)
        d = _distance_from_logs(logq, np.array(rows))
        k = int(np.argmin(d))
        nu = float(nus[k])
        return FitReport(family, CMP(float(workers ** nu), nu), float(d[k]),
                         {"param": "nu", "start": 0.05, "stop": 10.0, "step": 0.01,
                          "constraint": f"lam = {workers}**nu"})

    raise ParameterError(f"unknown family {family!r}; expected one of {FAMILIES}")


def fit_families(hist: StalenessHistogram, families=FAMILIES, workers: int | None = None):
    """Fit each family; returns reports ranked by distance (ties keep input order)."""
    reports = [fit(hist, fam, workers) for fam in families]
    return sorted(reports, key=lambda r: r.distance)
