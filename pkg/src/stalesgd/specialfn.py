"""Special functions behind the staleness step-size formulas.

Everything that multiplies ``lam**-tau`` by ``(tau!)**nu`` is done in log
space; ``tau!`` overflows a double at 171.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import NumericError, ParameterError

TERM_CAP = 10_000
_REL_TOL = 1e-15
_EXACT_FACTORIAL_MAX = 20

_LOG_FACT_SMALL = np.array(
    [math.log(math.factorial(k)) for k in range(_EXACT_FACTORIAL_MAX + 1)]
)


def log_factorial(n: int) -> float:
    """ln(n!), exact integer arithmetic up to 20, log-gamma beyond."""
    if n < 0:
        raise ParameterError(f"log_factorial needs n >= 0, got {n}")
    if n <= _EXACT_FACTORIAL_MAX:
        return float(_LOG_FACT_SMALL[n])
    return math.lgamma(n + 1.0)


def log_factorials(n) -> np.ndarray:
    """Vectorised ln(n!) for an integer array (same split as `log_factorial`)."""
    n = np.asarray(n)
    out = gammaln(n + 1.0)
    small = n <= _EXACT_FACTORIAL_MAX
    if np.any(small):
        out = np.where(small, _LOG_FACT_SMALL[np.clip(n, 0, _EXACT_FACTORIAL_MAX)], out)
    return out


def cmp_log_terms(lam: float, nu: float, n: int) -> np.ndarray:
    """ln(lam**i / (i!)**nu) for i = 0..n-1."""
    i = np.arange(n)
    return i * math.log(lam) - nu * log_factorials(i)


@dataclass(frozen=True)
class CmpNormalizer:
    lam: float
    nu: float
    log_value: float
    terms_used: int
    truncation_bound: float  # relative to the value

    @property
    def value(self) -> float:
        # inf when Z exceeds the double range; log_value stays usable
        try:
            return math.exp(self.log_value)
        except OverflowError:
            return math.inf


def cmp_normalizer(lam: float, nu: float) -> CmpNormalizer:
    """Z(lam, nu) = sum_i lam**i / (i!)**nu by truncated series.

    Stops at the first index past the mode whose term is below 1e-15 of the
    running sum; the remaining tail is bounded with a geometric series since
    the term ratio lam / (i+1)**nu keeps shrinking past the mode.
    """
    if not lam > 0 or not nu > 0:
        raise ParameterError(f"CMP normalizer needs lam > 0 and nu > 0, got ({lam}, {nu})")
    mode = math.floor(lam ** (1.0 / nu)) if lam > 1 else 0
    if mode >= TERM_CAP:
        raise NumericError(
            f"CMP normalizer for lam={lam}, nu={nu} has its mode at {mode}, "
            f"beyond the {TERM_CAP}-term cap"
        )
    logt = cmp_log_terms(lam, nu, TERM_CAP)
    logS = np.logaddexp.accumulate(logt)
    idx = np.arange(TERM_CAP)
    done = (idx > mode) & (logt < logS + math.log(_REL_TOL))
    if not done.any():
        raise NumericError(
            f"CMP normalizer for lam={lam}, nu={nu} did not converge in {TERM_CAP} terms "
            f"(last term/sum = {math.exp(logt[-1] - logS[-1]):.3e})"
        )
    last = int(np.argmax(done))
    ratio = lam / (last + 1) ** nu
    tail = math.exp(logt[last] - logS[last]) * ratio / (1.0 - ratio)
    return CmpNormalizer(lam, nu, float(logS[last]), last + 1, tail)


def regularized_upper_gamma(tau: int, lam: float) -> float:
    """Q(tau, lam) = Gamma(tau, lam) / Gamma(tau) for integer tau.

    Uses Q(tau, lam) = exp(-lam) * sum_{j<tau} lam**j / j!, which is the
    Poisson(lam) CDF at tau - 1. Q(0, lam) is defined as 0 (empty sum).
    """
    if tau < 0:
        raise ParameterError(f"tau must be >= 0, got {tau}")
    if not lam > 0:
        raise ParameterError(f"lam must be > 0, got {lam}")
    if tau == 0:
        return 0.0
    logt = cmp_log_terms(lam, 1.0, tau)
    return min(1.0, math.exp(float(np.logaddexp.reduce(logt)) - lam))


def regularized_upper_gamma_table(tau_max: int, lam: float) -> np.ndarray:
    """Q(tau, lam) for tau = 0..tau_max."""
    if not lam > 0:
        raise ParameterError(f"lam must be > 0, got {lam}")
    out = np.zeros(tau_max + 1)
    if tau_max >= 1:
        logS = np.logaddexp.accumulate(cmp_log_terms(lam, 1.0, tau_max))
        out[1:] = np.minimum(1.0, np.exp(logS - lam))
    return out


def log_poisson_tail_table(tau_max: int, lam: float) -> np.ndarray:
    """ln P[Poisson(lam) >= tau] for tau = 0..tau_max.

    This is ln(1 - Q(tau, lam)), the regularized lower gamma, summed from the
    far tail so it keeps full relative precision where Q rounds to 1.
    """
    return _log_tail_sums(lam, 1.0, tau_max) - lam


def _log_tail_sums(lam: float, nu: float, tau_max: int) -> np.ndarray:
    """ln sum_{j>=tau} lam**j/(j!)**nu for tau = 0..tau_max."""
    n = tau_max + 1
    mode = math.floor(lam ** (1.0 / nu)) if lam > 1 else 0
    # extend until terms are negligible against every tail we return
    end = max(n, mode + 1) + 64
    while True:
        logt = cmp_log_terms(lam, nu, end)
        if end > mode + 1 and logt[-1] < logt[n - 1] - 50.0:
            break
        if end > 20 * TERM_CAP:
            raise NumericError(f"tail sums for lam={lam}, nu={nu} did not converge")
        end *= 2
    rev = np.logaddexp.accumulate(logt[::-1])[::-1]
    return rev[:n]


def cmp_log_head_sums(lam: float, nu: float, tau_max: int) -> np.ndarray:
    """ln sum_{j<tau} lam**j/(j!)**nu for tau = 0..tau_max (-inf at tau = 0)."""
    out = np.full(tau_max + 1, -np.inf)
    if tau_max >= 1:
        out[1:] = np.logaddexp.accumulate(cmp_log_terms(lam, nu, tau_max))
    return out


def cmp_log_tail_sums(lam: float, nu: float, tau_max: int) -> np.ndarray:
    """ln sum_{j>=tau} lam**j/(j!)**nu for tau = 0..tau_max."""
    return _log_tail_sums(lam, nu, tau_max)
