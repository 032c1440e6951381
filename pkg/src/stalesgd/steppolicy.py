"""Staleness-dependent step sizes alpha(tau) and their evaluation wrappers.

Every policy is evaluated as ``c(tau) * exp(log_shape(tau))``: ``c`` is the
(possibly negative) tuning factor and ``log_shape`` carries the
``lam**-tau * (tau!)**nu`` style growth in log space. Published steps clamp
negative ``c`` to zero, which means the update is skipped.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import specialfn
from .distributions import StalenessHistogram
from .errors import NormalizationError, ParameterError

DEFAULT_CLIP_MULT = 5.0
DEFAULT_CUTOFF = 150


def _positive(name, value):
    value = float(value)
    if not value > 0 or not math.isfinite(value):
        raise ParameterError(f"{name} must be a positive finite number, got {value}")
    return value


class StepPolicy:
    kind: str
    alpha: float

    def factor_array(self, n: int) -> np.ndarray:
        """Tuning factor c(tau) for tau < n, before clamping."""
        return np.ones(n)

    def log_shape_array(self, n: int) -> np.ndarray:
        raise NotImplementedError

    def raw_step_array(self, n: int) -> np.ndarray:
        """Formula values for tau < n, negative factors kept."""
        with np.errstate(over="ignore"):
            return self.factor_array(n) * np.exp(self.log_shape_array(n))

    def log_factor_array(self, n: int) -> np.ndarray:
        """log of the clamped factor; -inf where the update is skipped."""
        with np.errstate(divide="ignore"):
            return np.log(np.maximum(self.factor_array(n), 0.0))

    def step_array(self, n: int) -> np.ndarray:
        """Applied steps for tau < n; 0 means skip."""
        # factor and shape are combined in log space: a tiny tail factor times a
        # huge tau! lam**-tau stays finite
        with np.errstate(over="ignore"):
            return np.exp(self.log_factor_array(n) + self.log_shape_array(n))

    def step(self, tau: int) -> float:
        if tau < 0:
            raise ParameterError(f"staleness must be >= 0, got {tau}")
        return float(self.step_array(tau + 1)[tau])

    @property
    def params(self) -> dict:
        raise NotImplementedError

    @property
    def base_alpha(self) -> float:
        return self.alpha

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params,
                "wrappers": {"normalize_to": None, "clip_mult": None, "cutoff": None}}


@dataclass(frozen=True)
class Constant(StepPolicy):
    alpha: float
    kind: str = field(default="constant", init=False)

    def __post_init__(self):
        object.__setattr__(self, "alpha", _positive("alpha", self.alpha))

    @property
    def params(self):
        return {"alpha": self.alpha}

    def log_shape_array(self, n):
        return np.full(n, math.log(self.alpha))

    def step_array(self, n):
        return np.full(n, self.alpha)


def derive_C_for_momentum(p: float, mu_star: float) -> float:
    """C making the geometric drift kernel decay at rate mu_star.

    With tau ~ Geometric(p) and alpha(tau) = C**-tau alpha / p, the weights
    p(i) alpha(i) = alpha ((1 - p) / C)**i, so the implied momentum is
    (1 - p) / C and C = (1 - p) / mu_star. mu_star = 0 gives C = inf: only
    fresh gradients are applied.
    """
    if not 0 < p < 1:
        raise ParameterError(f"p must be in (0, 1), got {p}")
    if not 0 <= mu_star < 1:
        raise ParameterError(f"target momentum must be in [0, 1), got {mu_star}")
    if mu_star == 0:
        return math.inf
    return (1.0 - p) / mu_star


@dataclass(frozen=True)
class GeometricTuned(StepPolicy):
    """alpha(tau) = C**-tau * alpha / p with C set from a target momentum."""

    p: float
    mu_star: float
    alpha: float
    kind: str = field(default="geometric-tuned", init=False)

    def __post_init__(self):
        object.__setattr__(self, "alpha", _positive("alpha", self.alpha))
        derive_C_for_momentum(self.p, self.mu_star)

    @property
    def C(self) -> float:
        return derive_C_for_momentum(self.p, self.mu_star)

    @property
    def params(self):
        return {"p": self.p, "mu_star": self.mu_star, "alpha": self.alpha}

    def log_shape_array(self, n):
        tau = np.arange(n, dtype=float)
        base = math.log(self.alpha) - math.log(self.p)
        if math.isinf(self.C):
            return np.where(tau == 0, base, -np.inf)
        return base - tau * math.log(self.C)


@dataclass(frozen=True)
class CmpZero(StepPolicy):
    """alpha(tau) = C lam**-tau (tau!)**nu alpha; flattens the CMP drift."""

    lam: float
    nu: float
    C: float
    alpha: float
    kind: str = field(default="cmp-zero", init=False)

    def __post_init__(self):
        _positive("lam", self.lam), _positive("nu", self.nu), _positive("C", self.C)
        object.__setattr__(self, "alpha", _positive("alpha", self.alpha))

    @property
    def params(self):
        return {"lam": self.lam, "nu": self.nu, "C": self.C, "alpha": self.alpha}

    def log_shape_array(self, n):
        tau = np.arange(n)
        return (math.log(self.C) + math.log(self.alpha)
                - tau * math.log(self.lam) + self.nu * specialfn.log_factorials(tau))


@dataclass(frozen=True)
class CmpTune(StepPolicy):
    """c(tau) lam**-tau (tau!)**nu alpha with
    c(tau) = 1 - (K/alpha) e**-lam sum_{j<tau} lam**j / (j!)**nu."""

    lam: float
    nu: float
    K: float
    alpha: float
    kind: str = field(default="cmp-tune", init=False)

    def __post_init__(self):
        _positive("lam", self.lam), _positive("nu", self.nu)
        object.__setattr__(self, "alpha", _positive("alpha", self.alpha))
        if not math.isfinite(self.K):
            raise ParameterError(f"K must be finite, got {self.K}")

    @property
    def params(self):
        return {"lam": self.lam, "nu": self.nu, "K": self.K, "alpha": self.alpha}

    def log_shape_array(self, n):
        tau = np.arange(n)
        return (math.log(self.alpha)
                - tau * math.log(self.lam) + self.nu * specialfn.log_factorials(tau))

    def factor_array(self, n):
        kappa = self.K / self.alpha
        if self.nu == 1.0:
            # 1 - kappa Q = (1 - kappa) + kappa P[Pois >= tau], no cancellation near 1
            return _tail_factor(kappa, specialfn.log_poisson_tail_table(n - 1, self.lam))
        head = specialfn.cmp_log_head_sums(self.lam, self.nu, n - 1)
        return 1.0 - kappa * np.exp(head - self.lam)

    def log_factor_array(self, n):
        if self.nu == 1.0 and self.K == self.alpha:
            return specialfn.log_poisson_tail_table(n - 1, self.lam)
        return super().log_factor_array(n)


@dataclass(frozen=True)
class PoissonTune(StepPolicy):
    """c(tau) lam**-tau tau! alpha with c(tau) = 1 - (K/alpha) Q(tau, lam)."""

    lam: float
    K: float
    alpha: float
    kind: str = field(default="poisson-tune", init=False)

    def __post_init__(self):
        _positive("lam", self.lam)
        object.__setattr__(self, "alpha", _positive("alpha", self.alpha))
        if not math.isfinite(self.K):
            raise ParameterError(f"K must be finite, got {self.K}")

    @property
    def params(self):
        return {"lam": self.lam, "K": self.K, "alpha": self.alpha}

    def log_shape_array(self, n):
        tau = np.arange(n)
        return math.log(self.alpha) - tau * math.log(self.lam) + specialfn.log_factorials(tau)

    def factor_array(self, n):
        return _tail_factor(self.K / self.alpha, specialfn.log_poisson_tail_table(n - 1, self.lam))

    def log_factor_array(self, n):
        if self.K == self.alpha:
            return specialfn.log_poisson_tail_table(n - 1, self.lam)
        return super().log_factor_array(n)


def _tail_factor(kappa, log_tail):
    with np.errstate(under="ignore"):
        return (1.0 - kappa) + kappa * np.exp(log_tail)


@dataclass(frozen=True)
class InverseTau(StepPolicy):
    """alpha / max(tau, 1)."""

    alpha: float
    kind: str = field(default="inverse-tau", init=False)

    def __post_init__(self):
        object.__setattr__(self, "alpha", _positive("alpha", self.alpha))

    @property
    def params(self):
        return {"alpha": self.alpha}

    def log_shape_array(self, n):
        return math.log(self.alpha) - np.log(np.maximum(np.arange(n), 1))

    def step_array(self, n):
        return self.alpha / np.maximum(np.arange(n), 1)


@dataclass(frozen=True)
class PolicyWrapper(StepPolicy):
    """min(scale * inner(tau), clip_mult * alpha_c) for tau <= cutoff, skip beyond.

    ``alpha_c`` is the reference step for clipping: the normalisation target
    when there is one, else the inner policy's base alpha.
    """

    inner: StepPolicy
    scale: float = 1.0
    clip_mult: float | None = None
    cutoff: int | None = None
    alpha_c: float | None = None
    normalize_to: float | None = None

    def __post_init__(self):
        if isinstance(self.inner, PolicyWrapper):
            raise ParameterError("wrappers do not nest; pass the inner policy")
        _positive("scale", self.scale)
        if self.clip_mult is not None:
            _positive("clip_mult", self.clip_mult)
        if self.cutoff is not None and (int(self.cutoff) != self.cutoff or self.cutoff < 0):
            raise ParameterError(f"cutoff must be a non-negative integer, got {self.cutoff}")
        if self.alpha_c is None:
            ref = self.normalize_to if self.normalize_to is not None else self.inner.base_alpha
            object.__setattr__(self, "alpha_c", float(ref))

    @property
    def kind(self):
        return self.inner.kind

    @property
    def alpha(self):
        return self.inner.base_alpha

    @property
    def params(self):
        return self.inner.params

    def factor_array(self, n):
        return self.inner.factor_array(n)

    def log_shape_array(self, n):
        return self.inner.log_shape_array(n) + math.log(self.scale)

    def raw_step_array(self, n):
        return self.step_array(n)

    def step_array(self, n):
        out = self.inner.step_array(n) * self.scale
        if self.clip_mult is not None:
            out = np.minimum(out, self.clip_mult * self.alpha_c)
        if self.cutoff is not None:
            out[self.cutoff + 1:] = 0.0
        return out

    def to_dict(self):
        wr = {"normalize_to": self.normalize_to, "clip_mult": self.clip_mult, "cutoff": self.cutoff}
        if self.normalize_to is not None:
            wr["scale"] = self.scale
        return {"kind": self.kind, "params": self.params, "wrappers": wr}


def _unwrap(policy):
    if isinstance(policy, PolicyWrapper):
        return policy.inner, policy.clip_mult, policy.cutoff
    return policy, None, None


def normalize(policy: StepPolicy, hist: StalenessHistogram, alpha_c: float) -> PolicyWrapper:
    """Rescale so the histogram-weighted mean applied step equals alpha_c.

    Any clip and cutoff already on `policy` are kept and taken into account:
    the scale s solves sum_tau f(tau) min(s r(tau), cap alpha_c) = alpha_c
    over the non-skipped tau, so the condition holds for the steps actually
    applied. Without a clip this is s = alpha_c / sum f r.
    """
    alpha_c = _positive("alpha_c", alpha_c)
    inner, clip_mult, cutoff = _unwrap(policy)
    taus, freq = hist.frequencies()
    raw = inner.step_array(int(taus.max()) + 1)[taus]
    if cutoff is not None:
        raw = np.where(taus > cutoff, 0.0, raw)
    live = raw > 0
    if not live.any():
        raise NormalizationError("every observed staleness is skipped; weighted mean step is zero")
    r, f = raw[live], freq[live]
    if clip_mult is None:
        if not np.all(np.isfinite(r)):
            raise NormalizationError("raw steps overflow on the observed support; add a clip")
        s = alpha_c / float(np.dot(f, r))
    else:
        s = _clipped_scale(r, f, alpha_c, clip_mult * alpha_c)
    return PolicyWrapper(inner, s, clip_mult, cutoff, alpha_c=alpha_c, normalize_to=alpha_c)


def _clipped_scale(r, f, target, cap):
    """Smallest s with sum f min(s r, cap) = target (piecewise linear in s)."""
    if cap * f.sum() < target * (1 - 1e-12):
        raise NormalizationError(
            f"clip at {cap:g} cannot reach mean {target:g}: only {f.sum():.4f} of the mass is applied"
        )
    order = np.argsort(-r, kind="stable")
    r, f = r[order], f[order]
    # k largest steps clipped: mean = cap F_k + s R_k
    F = np.concatenate([[0.0], np.cumsum(f)])
    R = np.concatenate([np.cumsum((f * r)[::-1])[::-1], [0.0]])
    for k in range(len(r) + 1):
        if R[k] <= 0 or not np.isfinite(R[k]):
            continue
        s = (target - cap * F[k]) / R[k]
        lo = cap / r[k - 1] if k > 0 else 0.0
        hi = cap / r[k] if k < len(r) else math.inf
        if lo <= s <= hi and s > 0:
            return float(s)
    # everything clipped: any s past the last breakpoint works
    return float(cap / r[-1])


def weighted_mean_step(policy: StepPolicy, hist: StalenessHistogram) -> float:
    taus, freq = hist.frequencies()
    return float(np.dot(freq, policy.step_array(int(taus.max()) + 1)[taus]))


def clip_and_cutoff(policy: StepPolicy, clip_mult: float | None = DEFAULT_CLIP_MULT,
                    cutoff: int | None = DEFAULT_CUTOFF, alpha_c: float | None = None) -> PolicyWrapper:
    """Add (or replace) the clip cap and staleness cutoff, keeping any normalisation."""
    if isinstance(policy, PolicyWrapper):
        out = replace(policy, clip_mult=clip_mult, cutoff=cutoff)
        return replace(out, alpha_c=alpha_c) if alpha_c is not None else out
    return PolicyWrapper(policy, 1.0, clip_mult, cutoff, alpha_c=alpha_c)


# --- construction from JSON / command-line strings ---

_KINDS = {
    "constant": (Constant, ("alpha",)),
    "geometric-tuned": (GeometricTuned, ("p", "mu_star", "alpha")),
    "cmp-zero": (CmpZero, ("lam", "nu", "C", "alpha")),
    "cmp-tune": (CmpTune, ("lam", "nu", "K", "alpha")),
    "poisson-tune": (PoissonTune, ("lam", "K", "alpha")),
    "inverse-tau": (InverseTau, ("alpha",)),
}
_ALIASES = {"const": "constant", "geom-tuned": "geometric-tuned", "inv-tau": "inverse-tau"}


def make_policy(kind: str, **params) -> StepPolicy:
    kind = _ALIASES.get(kind, kind)
    if kind not in _KINDS:
        raise ParameterError(f"unknown policy kind {kind!r}; expected one of {sorted(_KINDS)}")
    cls, names = _KINDS[kind]
    missing = [n for n in names if n not in params]
    extra = [n for n in params if n not in names]
    if missing or extra:
        raise ParameterError(f"{kind} takes {names}; missing {missing}, unexpected {extra}")
    try:
        return cls(**{n: float(params[n]) for n in names})
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ParameterError):
            raise
        raise ParameterError(f"bad {kind} parameters: {exc}") from None


def parse_policy(text: str, model=None) -> StepPolicy:
    """Parse ``kind:v1,v2,...``.

    Full forms list every parameter in the order of `_KINDS`. When a staleness
    `model` is supplied the distribution parameters may be dropped:
    ``cmp-zero:C,alpha``, ``cmp-tune:K,alpha``, ``poisson-tune:K,alpha`` and
    ``geom-tuned:mu_star,alpha`` take lam/nu/p from the model.
    """
    kind, _, rest = text.partition(":")
    kind = _ALIASES.get(kind.strip().lower(), kind.strip().lower())
    if kind not in _KINDS:
        raise ParameterError(f"unknown policy {text!r}")
    try:
        vals = [float(v) for v in rest.split(",") if v.strip()]
    except ValueError:
        raise ParameterError(f"cannot parse policy {text!r}") from None
    names = _KINDS[kind][1]
    if len(vals) < len(names) and model is not None:
        from_model = {"cmp-zero": ("lam", "nu"), "cmp-tune": ("lam", "nu"),
                      "poisson-tune": ("lam",), "geometric-tuned": ("p",)}.get(kind, ())
        mp = dict(model.params)
        if model.kind == "poisson":
            mp.setdefault("nu", 1.0)
        if len(vals) + len(from_model) == len(names) and all(k in mp for k in from_model):
            vals = [mp[k] for k in from_model] + vals
    if len(vals) != len(names):
        raise ParameterError(f"policy {kind} needs values for {names}, got {text!r}")
    return make_policy(kind, **dict(zip(names, vals)))


def policy_from_dict(spec: dict, hist: StalenessHistogram | None = None) -> StepPolicy:
    """Inverse of ``to_dict``. A normalize_to without a stored scale needs `hist`."""
    try:
        policy = make_policy(spec["kind"], **spec.get("params", {}))
    except KeyError as exc:
        raise ParameterError(f"policy spec is missing {exc}") from None
    wr = spec.get("wrappers") or {}
    clip, cutoff, target = wr.get("clip_mult"), wr.get("cutoff"), wr.get("normalize_to")
    if clip is None and cutoff is None and target is None:
        return policy
    wrapped = PolicyWrapper(policy, 1.0, clip, cutoff, alpha_c=target)
    if target is None:
        return wrapped
    if wr.get("scale") is not None:
        return replace(wrapped, scale=float(wr["scale"]), normalize_to=float(target))
    if hist is None:
        raise ParameterError("policy asks for normalisation but no histogram was given")
    return normalize(wrapped, hist, float(target))


def policy_to_json(policy: StepPolicy) -> str:
    return json.dumps(policy.to_dict(), sort_keys=True)


def policy_from_json(text: str, hist: StalenessHistogram | None = None) -> StepPolicy:
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParameterError(f"policy JSON does not parse: {exc}") from None
    return policy_from_dict(spec, hist)
