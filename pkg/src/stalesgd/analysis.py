"""Drift coefficients, implicit-momentum estimation and convergence-time bounds."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.signal import lfilter

from .distributions import CMP, Geometric, Poisson, StalenessModel
from .errors import InputError, ParameterError
from .problems import Problem, QuadraticProblem
from .steppolicy import (CmpTune, CmpZero, Constant, GeometricTuned, PoissonTune,
                         PolicyWrapper, StepPolicy)

_MATCH_RTOL = 1e-12


def _close(a, b):
    return abs(a - b) <= _MATCH_RTOL * max(abs(a), abs(b))


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


# --- drift coefficients ---

@dataclass
class DriftReport:
    """w(i) = p(i) alpha(i) and d(i) = w(i) - w(i+1) for i <= imax.

    `theorem` names the identity that applies to the model/policy pair, if
    any; `residual` is its measured violation on the stated relative scale.
    """

    model: str
    policy: dict
    imax: int
    w: np.ndarray
    d: np.ndarray
    theorem: str | None
    claim: dict = field(default_factory=dict)
    residual: float | None = None
    scale: str | None = None

    @property
    def leading(self) -> float:
        return float(self.w[0])

    @property
    def max_abs_d(self) -> float:
        return float(np.max(np.abs(self.d)))

    def to_dict(self):
        return _jsonable({
            "model": self.model, "policy": self.policy, "imax": self.imax,
            "leading": self.leading, "max_abs_d": self.max_abs_d,
            "theorem": self.theorem or "no theorem applies", "claim": self.claim,
            "residual": self.residual, "residual_scale": self.scale,
            "w": self.w, "d": self.d,
        })


def _cmp_params(model):
    if isinstance(model, CMP):
        return model.lam, model.nu
    if isinstance(model, Poisson):
        return model.lam, 1.0
    return None


def drift_report(model: StalenessModel, policy: StepPolicy, imax: int = 150) -> DriftReport:
    """Drift coefficients of `policy` under staleness `model`.

    Identities checked when they apply (raw formula values, before clamping):

    * CmpZero over the matching CMP: w is flat; residual max|w(i) - w(0)| / w(0).
    * CmpTune / PoissonTune over the matching CMP/Poisson: d(i) = K e**-lam p(i);
      residual max|d(i) - K e**-lam p(i)| / max|w|.
    * Constant or GeometricTuned over Geometric(p): w(i+1) / w(i) is constant,
      the implied momentum (1 - p for a constant step, mu* when tuned);
      residual |measured - claimed|.
    """
    if int(imax) != imax or imax < 1:
        raise ParameterError(f"imax must be an integer >= 1, got {imax}")
    n = imax + 2
    logp = model.log_pmf_array(n)
    inner = policy.inner if isinstance(policy, PolicyWrapper) and policy.scale == 1.0 \
        and policy.clip_mult is None and policy.cutoff is None else policy
    if isinstance(inner, PolicyWrapper):
        with np.errstate(divide="ignore"):
            w = np.exp(logp) * inner.step_array(n)
    else:
        with np.errstate(over="ignore", invalid="ignore"):
            w = inner.factor_array(n) * np.exp(logp + inner.log_shape_array(n))
    w = np.nan_to_num(w, nan=0.0)
    d = w[:-1] - w[1:]
    rep = DriftReport(model.to_spec(), policy.to_dict(), int(imax), w[:-1], d, None)
    cm = _cmp_params(model)

    if isinstance(inner, CmpZero) and cm and _close(cm[0], inner.lam) and _close(cm[1], inner.nu):
        rep.theorem = "cmp-zero: w(i) constant, drift sum vanishes"
        rep.claim = {"w": float(w[0])}
        rep.residual = float(np.max(np.abs(w[:-1] - w[0])) / abs(w[0]))
        rep.scale = "w(0)"
    elif isinstance(inner, (CmpTune, PoissonTune)) and cm and _close(cm[0], inner.lam) \
            and _close(cm[1], getattr(inner, "nu", 1.0)):
        target = inner.K * math.exp(-inner.lam) * np.exp(logp[:-1])
        rep.theorem = "cmp-tune: d(i) = K exp(-lam) p(i)"
        rep.claim = {"K": inner.K, "K_exp_minus_lam": inner.K * math.exp(-inner.lam)}
        rep.residual = float(np.max(np.abs(d - target)) / np.max(np.abs(w)))
        rep.scale = "max|w|"
    elif isinstance(model, Geometric) and isinstance(inner, (Constant, GeometricTuned)) \
            and (isinstance(inner, Constant) or _close(inner.p, model.p)):
        claimed = 1.0 - model.p if isinstance(inner, Constant) else inner.mu_star
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = w[1:-1] / w[:-2]
        # subnormal weights carry too few digits for a ratio
        tiny = np.finfo(float).tiny
        live = np.isfinite(ratios) & (w[:-2] >= tiny) & (w[1:-1] >= tiny)
        measured = float(w[1] / w[0]) if w[0] > 0 else math.nan
        spread = float(np.max(np.abs(ratios[live] - measured))) if live.any() else 0.0
        rep.theorem = "geometric: w(i) = w(0) mu**i, implicit momentum mu"
        rep.claim = {"momentum": claimed, "measured_momentum": measured, "ratio_spread": spread}
        rep.residual = abs(measured - claimed)
        rep.scale = "absolute"
    return rep


# --- implicit momentum from a trajectory ---

@dataclass
class MomentumEstimate:
    mu: float
    stderr: float
    per_coordinate: list
    naive_slope: float
    leading_step: float
    increments: int

    def to_dict(self):
        return _jsonable(asdict(self))


def _path_gradients(problem: Problem, path: np.ndarray) -> np.ndarray:
    if isinstance(problem, QuadraticProblem):
        return (path - problem.x_star) @ problem.A.T
    return np.array([problem.full_grad(x) for x in path])


def _fit_coordinate(dj, gj, warm, mu0=0.3):
    """Least squares for dj[t] = -w0 (g[t] + mu h[t]), h[t] = sum_i mu**i g[t-1-i]."""

    def parts(mu):
        gs = np.concatenate([[0.0], gj[:-1]])
        h = lfilter([1.0], [1.0, -mu], gs)
        dh = lfilter([1.0], [1.0, -mu], np.concatenate([[0.0], h[:-1]]))
        return h, dh

    def res(th):
        h, _ = parts(th[1])
        return (dj + th[0] * (gj + th[1] * h))[warm:]

    def jac(th):
        h, dh = parts(th[1])
        return np.column_stack([gj + th[1] * h, th[0] * (h + th[1] * dh)])[warm:]

    gg = float(gj[warm:] @ gj[warm:])
    w0 = -float(dj[warm:] @ gj[warm:]) / gg if gg > 0 else 0.0
    sol = least_squares(res, [w0, mu0], jac=jac, bounds=([-np.inf, -0.99], [np.inf, 0.999]),
                        xtol=1e-15, ftol=1e-15, gtol=1e-15)
    J = sol.jac
    dof = max(len(sol.fun) - 2, 1)
    s2 = float(sol.fun @ sol.fun) / dof
    try:
        cov = np.linalg.inv(J.T @ J) * s2
        se = math.sqrt(max(cov[1, 1], 0.0))
    except np.linalg.LinAlgError:
        se = math.inf
    return float(sol.x[1]), se, float(sol.x[0])


def estimate_implicit_momentum(trace_or_path, problem: Problem, warmup: float = 0.1,
                               min_increments: int = 1000) -> MomentumEstimate:
    """Momentum coefficient mu of the asynchronous update, from a parameter path.

    The expected update of stale SGD is a weighted sum of past gradients; with
    geometric weights it is heavy-ball momentum. Per coordinate this fits

        x_{t+1} - x_t = -w0 (g_t + mu g_{t-1} + mu**2 g_{t-2} + ...)

    by nonlinear least squares, g_t being the exact gradient at x_t, after
    discarding the first `warmup` fraction of increments. The estimate is the
    mean over coordinates; the standard error combines the per-coordinate
    Gauss-Newton errors. The plain regression slope of Delta_{t+1} on
    Delta_t is reported alongside as `naive_slope`.
    """
    path = getattr(trace_or_path, "path", trace_or_path)
    if path is None:
        raise InputError("trace has no parameter path; run with record_path=True")
    path = np.asarray(path, dtype=float)
    if path.ndim == 1:
        path = path[:, None]
    D = np.diff(path, axis=0)
    if len(D) < min_increments:
        raise InputError(f"need at least {min_increments} increments, got {len(D)}")
    if not 0 <= warmup < 1:
        raise ParameterError(f"warmup fraction must be in [0, 1), got {warmup}")
    G = _path_gradients(problem, path[:-1])
    warm = int(len(D) * warmup)
    mus, ses, w0s, slopes = [], [], [], []
    for j in range(D.shape[1]):
        mu, se, w0 = _fit_coordinate(D[:, j], G[:, j], warm)
        mus.append(mu), ses.append(se), w0s.append(w0)
        a, b = D[warm:-1, j], D[warm + 1:, j]
        aa = float(a @ a)
        if aa > 0:
            a0, b0 = a - a.mean(), b - b.mean()
            slopes.append(float(a0 @ b0) / float(a0 @ a0))
    k = len(mus)
    return MomentumEstimate(
        mu=float(np.mean(mus)), stderr=float(math.sqrt(sum(s * s for s in ses)) / k),
        per_coordinate=mus, naive_slope=float(np.mean(slopes)) if slopes else math.nan,
        leading_step=float(np.mean(w0s)), increments=len(D) - warm,
    )


# --- convergence-time bounds ---

@dataclass
class BoundsInput:
    c: float
    L: float
    M: float
    eps: float
    d0: float  # |x0 - x*|**2
    tau_bar: float | None = None
    theta: float | None = None
    E_alpha: float | None = None
    E_tau_alpha: float | None = None
    E_alpha2: float | None = None

    def __post_init__(self):
        for name in ("c", "L", "M", "eps", "d0"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ParameterError(f"{name} must be positive and finite, got {v}")
        if self.tau_bar is not None and not self.tau_bar >= 0:
            raise ParameterError(f"tau_bar must be >= 0, got {self.tau_bar}")
        if self.theta is not None and not 0 < self.theta < 2:
            raise ParameterError(f"theta must lie in (0, 2), got {self.theta}")


@dataclass
class BoundsReport:
    kind: str
    feasible: bool
    T: float | None
    denominator: float
    alpha: float | None = None
    moments: dict = field(default_factory=dict)
    diagnostics: str | None = None
    inputs: dict = field(default_factory=dict)

    @property
    def T_ceil(self) -> int | None:
        return None if self.T is None else int(math.ceil(self.T))

    def to_dict(self):
        out = asdict(self)
        out["T_ceil"] = self.T_ceil
        return _jsonable(out)


def _log_ratio(inp):
    return math.log(inp.d0 / inp.eps)


def _report(kind, inp, denom, alpha=None, moments=None):
    if not denom > 0:
        return BoundsReport(kind, False, None, denom, alpha, moments or {},
                            f"denominator {denom:.6g} is not positive; no T guarantees eps-convergence",
                            asdict(inp))
    lr = _log_ratio(inp)
    diag = None
    if lr <= 0:
        diag = "x0 already satisfies the target; T = 0"
    return BoundsReport(kind, True, max(lr, 0.0) / denom, denom, alpha, moments or {}, diag, asdict(inp))


def bound_general(inp: BoundsInput) -> BoundsReport:
    """T = ln(d0 / eps) / [2 (c - L M eps**-1/2 E[tau alpha]) E[alpha] - M**2 E[alpha**2] / eps]."""
    if None in (inp.E_alpha, inp.E_tau_alpha, inp.E_alpha2):
        raise ParameterError("general bound needs E_alpha, E_tau_alpha and E_alpha2")
    denom = (2.0 * (inp.c - inp.L * inp.M * inp.E_tau_alpha / math.sqrt(inp.eps)) * inp.E_alpha
             - inp.M ** 2 * inp.E_alpha2 / inp.eps)
    return _report("general", inp, denom,
                   moments={"E_alpha": inp.E_alpha, "E_tau_alpha": inp.E_tau_alpha, "E_alpha2": inp.E_alpha2})


def alpha_choice_and_bound(inp: BoundsInput):
    """Constant step alpha = theta c eps / (M (M + 2 L sqrt(eps) tau_bar)) and its T.

    T = (M + 2 L sqrt(eps) tau_bar) / (theta (2 - theta) c**2 eps / M) ln(d0 / eps).
    """
    if inp.theta is None or inp.tau_bar is None:
        raise ParameterError("constant-step bound needs theta and tau_bar")
    B = inp.M + 2.0 * inp.L * math.sqrt(inp.eps) * inp.tau_bar
    alpha = inp.theta * inp.c * inp.eps / (inp.M * B)
    denom = inp.theta * (2.0 - inp.theta) * inp.c ** 2 * inp.eps / (inp.M * B)
    rep = _report("constant-alpha", inp, denom, alpha,
                  {"E_alpha": alpha, "E_tau_alpha": inp.tau_bar * alpha, "E_alpha2": alpha * alpha})
    return alpha, rep


def policy_moments(model: StalenessModel, policy: StepPolicy) -> dict:
    """E[alpha], E[alpha**2], E[tau alpha] and E[tau] under the model pmf.

    Sums run to the model's truncation index (tail mass below 1e-12).
    """
    n = model.support_limit() + 1
    p = model.pmf_array(n)
    a = policy.step_array(n)
    tau = np.arange(n)
    with np.errstate(invalid="ignore", over="ignore"):
        out = {"E_alpha": float(p @ a), "E_alpha2": float(p @ (a * a)),
               "E_tau_alpha": float(p @ (tau * a)), "E_tau": float(p @ tau), "support": int(n - 1)}
    return out


def bound_decaying(model: StalenessModel, policy: StepPolicy, inp: BoundsInput) -> BoundsReport:
    """Bound for a step size non-increasing in tau.

    T = ln(d0 / eps) / [2 c E[alpha] - M (M + 2 L sqrt(eps) tau_bar) E[alpha**2] / eps]
    with moments taken against the model pmf. tau_bar defaults to the model mean.
    """
    n = model.support_limit() + 1
    steps = policy.step_array(n)
    if not np.all(np.isfinite(steps)):
        raise ParameterError("policy step overflows on the model support")
    rises = np.nonzero(steps[1:] > steps[:-1] * (1 + 1e-12))[0]
    if rises.size:
        k = int(rises[0])
        raise ParameterError(
            f"policy is not non-increasing: alpha({k + 1}) = {steps[k + 1]:.6g} > alpha({k}) = {steps[k]:.6g}"
        )
    mom = policy_moments(model, policy)
    tau_bar = inp.tau_bar if inp.tau_bar is not None else mom["E_tau"]
    B = inp.M + 2.0 * inp.L * math.sqrt(inp.eps) * tau_bar
    denom = 2.0 * inp.c * mom["E_alpha"] - B * inp.M * mom["E_alpha2"] / inp.eps
    rep = _report("decaying-alpha", inp, denom, moments=mom)
    rep.inputs["tau_bar"] = tau_bar
    return rep


# --- statistical efficiency under asynchrony ---

def adaptive_policy(kind: str, m: int, alpha_c: float, hist, clip_mult=5.0, cutoff=150) -> StepPolicy:
    """Adaptive policy for m workers, clipped, cut off and normalised to alpha_c on `hist`.

    ``poisson-tune`` uses lam = m and K = alpha; ``cmp-zero`` uses CMP(m, 1)
    with C = 1; ``inverse-tau`` needs no staleness parameters.
    """
    from .steppolicy import InverseTau, clip_and_cutoff, normalize

    if kind == "poisson-tune":
        base = PoissonTune(float(m), alpha_c, alpha_c)
    elif kind == "cmp-zero":
        base = CmpZero(float(m), 1.0, 1.0, alpha_c)
    elif kind == "inverse-tau":
        base = InverseTau(alpha_c)
    else:
        raise ParameterError(f"no adaptive policy named {kind!r}")
    return normalize(clip_and_cutoff(base, clip_mult, cutoff, alpha_c=alpha_c), hist, alpha_c)


@dataclass
class SweepRow:
    workers: int
    policy: str
    median: float
    stddev: float
    reached: int
    repeats: int
    updates: list
    scale: float = 1.0

    def to_dict(self):
        return _jsonable(asdict(self))


def efficiency_sweep(problem: Problem, workers, alpha_c: float, threshold: float, steps: int,
                     repeats: int = 5, adaptive: str = "poisson-tune", delay=None, seed: int = 0,
                     stride: int = 10, pilot_steps: int = 5000, clip_mult: float = 5.0,
                     cutoff: int = 150):
    """Updates until the stride-sampled loss first reaches `threshold`, per m and policy.

    For each m a pilot run of `pilot_steps` updates with the constant step
    gives the staleness histogram that the adaptive policy is normalised on.
    Runs that never reach the threshold count as `steps + 1`.
    Returns one SweepRow per (m, policy): constant first, then adaptive.
    """
    from .engine import EventDelay, RunConfig, run
    from .steppolicy import Constant

    delay = delay or EventDelay()
    rows = []
    for m in workers:
        const = Constant(alpha_c)
        pilot = run(RunConfig("async-simulated", problem, const, pilot_steps, workers=m,
                              seed=seed, stride=pilot_steps, delay=delay))
        adapt = adaptive_policy(adaptive, m, alpha_c, pilot.histogram(), clip_mult, cutoff)
        for name, pol in (("constant", const), (adaptive, adapt)):
            counts = []
            for r in range(repeats):
                tr = run(RunConfig("async-simulated", problem, pol, steps, workers=m,
                                   seed=seed + 1 + r, stride=stride, delay=delay,
                                   loss_threshold=threshold, stop_at_threshold=True))
                counts.append(tr.updates_to_threshold or steps + 1)
            arr = np.asarray(counts, dtype=float)
            rows.append(SweepRow(m, name, float(np.median(arr)), float(arr.std(ddof=1)) if repeats > 1 else 0.0,
                                 int(np.sum(arr <= steps)), repeats, counts,
                                 getattr(pol, "scale", 1.0)))
    return rows
