import math
from dataclasses import dataclass, field

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stalesgd import steppolicy as sp
from stalesgd.distributions import CMP, Geometric, Poisson, StalenessHistogram
from stalesgd.errors import NormalizationError, ParameterError


@dataclass(frozen=True)
class _Table(sp.StepPolicy):
    """Fixed step table for exercising the wrappers."""

    values: tuple
    kind: str = field(default="table", init=False)

    @property
    def params(self):
        return {"values": list(self.values)}

    @property
    def base_alpha(self):
        return self.values[0]

    def log_shape_array(self, n):
        v = np.asarray(self.values + (self.values[-1],) * max(0, n - len(self.values)), dtype=float)
        return np.log(v[:n])


def test_cmp_zero_examples():
    pol = sp.CmpZero(lam=8, nu=1, C=1, alpha=0.01)
    assert pol.step(0) == pytest.approx(0.01, rel=1e-15)
    assert pol.step(2) == pytest.approx(3.125e-4, rel=1e-13)


def test_poisson_tune_example():
    pol = sp.PoissonTune(lam=1, K=0.01, alpha=0.01)
    c2 = 1 - 2 / math.e
    assert c2 == pytest.approx(0.26424, abs=1e-5)
    assert pol.step(2) == pytest.approx(c2 * 2 * 0.01, rel=1e-13)
    assert pol.step(2) == pytest.approx(5.2848e-3, abs=1e-7)


def test_poisson_tune_at_kappa_one_never_skips():
    # c = P[Pois >= tau] > 0 for every tau
    steps = sp.PoissonTune(lam=8, K=0.01, alpha=0.01).step_array(151)
    assert np.all(steps > 0)


def test_negative_factor_is_clamped_to_skip():
    pol = sp.PoissonTune(lam=4, K=0.05, alpha=0.01)   # kappa = 5
    steps = pol.step_array(40)
    assert steps[0] > 0
    assert np.any(steps == 0.0)
    assert np.all(steps >= 0)


def test_inverse_tau():
    pol = sp.InverseTau(0.1)
    assert pol.step(0) == pytest.approx(0.1)
    assert pol.step(1) == pytest.approx(0.1)
    assert pol.step(4) == pytest.approx(0.025)


def test_constant_is_flat():
    assert np.all(sp.Constant(0.02).step_array(1000) == 0.02)


def test_step_rejects_negative_staleness():
    with pytest.raises(ParameterError):
        sp.Constant(0.1).step(-1)


@pytest.mark.parametrize("bad", [
    lambda: sp.Constant(0), lambda: sp.Constant(math.nan), lambda: sp.CmpZero(0, 1, 1, 0.1),
    lambda: sp.CmpTune(1, 1, math.inf, 0.1), lambda: sp.PoissonTune(-1, 0.1, 0.1),
    lambda: sp.GeometricTuned(1.0, 0.5, 0.1), lambda: sp.GeometricTuned(0.5, 1.0, 0.1),
    lambda: sp.InverseTau(-0.1),
])
def test_invalid_parameters(bad):
    with pytest.raises(ParameterError):
        bad()


def test_derive_C_examples():
    assert sp.derive_C_for_momentum(0.2, 0.5) == pytest.approx(1.6)
    assert sp.derive_C_for_momentum(0.3, 0.0) == math.inf
    with pytest.raises(ParameterError):
        sp.derive_C_for_momentum(0.3, 1.0)
    with pytest.raises(ParameterError):
        sp.derive_C_for_momentum(0.0, 0.5)


@settings(max_examples=100, deadline=None)
@given(p=st.floats(0.01, 0.99), mu=st.just(0.0) | st.floats(1e-3, 0.99))
def test_derived_C_gives_target_weight_ratio(p, mu):
    # w(i) = p(i) alpha(i) decays geometrically with ratio mu*
    pol = sp.GeometricTuned(p, mu, 0.01)
    w = Geometric(p).pmf_array(20) * pol.step_array(20)
    assert w[0] == pytest.approx(0.01, rel=1e-12)
    if mu > 0:
        assert np.allclose(w[1:] / w[:-1], mu, rtol=1e-9)
    else:
        assert np.all(w[1:] == 0)


@pytest.mark.parametrize("lam", [1, 4, 8, 16, 32])
def test_poisson_tune_equals_cmp_tune_at_nu_one(lam):
    a = sp.PoissonTune(lam, 0.01, 0.01).step_array(151)
    b = sp.CmpTune(lam, 1.0, 0.01, 0.01).step_array(151)
    assert np.allclose(a, b, rtol=1e-10, atol=0)


@pytest.mark.parametrize("lam,nu", [(4, 2), (25, 0.5), (3, 1.5)])
def test_cmp_tune_factor_against_direct_sum(lam, nu):
    pol = sp.CmpTune(lam, nu, 0.004, 0.01)
    c = pol.factor_array(30)
    terms = [lam ** j / math.factorial(j) ** nu for j in range(30)]
    direct = [1 - 0.4 * math.exp(-lam) * math.fsum(terms[:t]) for t in range(30)]
    assert np.allclose(c, direct, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("pol", [
    sp.Constant(0.01), sp.InverseTau(0.01), sp.GeometricTuned(0.2, 0.5, 0.01),
    sp.PoissonTune(16, 0.01, 0.01),
])
def test_steps_finite_up_to_ten_thousand(pol):
    s = pol.step_array(10_001)
    assert np.all(np.isfinite(s)) and np.all(s >= 0)


def test_cmp_steps_finite_once_wrapped():
    pol = sp.clip_and_cutoff(sp.CmpZero(8, 1, 1, 0.01), 5, 150)
    s = pol.step_array(10_001)
    assert np.all(np.isfinite(s))
    assert np.all(s[151:] == 0) and s.max() <= 0.05


def test_normalize_examples():
    hist = StalenessHistogram({0: 50, 1: 30, 2: 20})
    w = sp.normalize(_Table((0.01, 0.02, 0.04)), hist, 0.01)
    assert w.scale == pytest.approx(0.01 / 0.019, rel=1e-12)
    assert w.scale == pytest.approx(0.52632, abs=1e-5)
    assert sp.normalize(sp.Constant(0.01), hist, 0.01).scale == pytest.approx(1.0, rel=1e-14)
    assert sp.normalize(_Table((0.05,)), StalenessHistogram({0: 1}), 0.01).scale == pytest.approx(0.2)


def test_normalize_errors():
    hist = StalenessHistogram({200: 5})
    with pytest.raises(NormalizationError):
        sp.normalize(sp.clip_and_cutoff(sp.Constant(0.01), 5, 150), hist, 0.01)
    with pytest.raises(ParameterError):
        sp.normalize(sp.Constant(0.01), hist, 0.0)


def test_clip_and_cutoff_examples():
    base = sp.PolicyWrapper(_Table((0.08, 0.03) + (0.01,) * 150), clip_mult=5, cutoff=150, alpha_c=0.01)
    s = base.step_array(153)
    assert s[0] == pytest.approx(0.05)
    assert s[1] == pytest.approx(0.03)
    assert s[150] == pytest.approx(0.01)
    assert s[151] == 0.0
    w = sp.clip_and_cutoff(sp.Constant(0.01))
    assert (w.clip_mult, w.cutoff) == (5, 150)


def test_wrappers_do_not_nest():
    w = sp.clip_and_cutoff(sp.Constant(0.01))
    with pytest.raises(ParameterError):
        sp.PolicyWrapper(w)


def test_clip_aware_normalize_hits_target_after_clip():
    hist = StalenessHistogram({k: 10 for k in range(0, 30)})
    pol = sp.clip_and_cutoff(sp.PoissonTune(16, 0.01, 0.01), 5, 150, alpha_c=0.01)
    w = sp.normalize(pol, hist, 0.01)
    assert sp.weighted_mean_step(w, hist) == pytest.approx(0.01, rel=1e-9)
    assert w.step_array(200).max() <= 0.05 + 1e-15


hist_strategy = st.dictionaries(st.integers(0, 60), st.integers(1, 500), min_size=1, max_size=25)


@settings(max_examples=80, deadline=None)
@given(counts=hist_strategy, lam=st.floats(1.0, 30.0), clip=st.sampled_from([None, 5.0, 20.0]),
       alpha_c=st.floats(1e-4, 0.1))
def test_normalize_meets_target_and_is_idempotent(counts, lam, clip, alpha_c):
    hist = StalenessHistogram(counts)
    pol = sp.PoissonTune(lam, 0.01, 0.01)
    if clip is not None:
        pol = sp.clip_and_cutoff(pol, clip, 150)
    w = sp.normalize(pol, hist, alpha_c)
    assert sp.weighted_mean_step(w, hist) == pytest.approx(alpha_c, rel=1e-9)
    again = sp.normalize(sp.PolicyWrapper(w.inner, w.scale, w.clip_mult, w.cutoff, w.alpha_c), hist, alpha_c)
    # the rescale of an already-normalised policy is 1
    assert again.scale / w.scale == pytest.approx(1.0, abs=1e-12)


def test_parse_policy_short_and_full_forms():
    m = CMP(8.0, 1.0)
    assert sp.parse_policy("cmp-zero:1,0.01", m) == sp.CmpZero(8.0, 1.0, 1.0, 0.01)
    assert sp.parse_policy("cmp-zero:8,1,1,0.01") == sp.CmpZero(8.0, 1.0, 1.0, 0.01)
    assert sp.parse_policy("poisson-tune:0.01,0.01", Poisson(4.0)) == sp.PoissonTune(4.0, 0.01, 0.01)
    assert sp.parse_policy("geom-tuned:0.5,0.01", Geometric(0.2)) == sp.GeometricTuned(0.2, 0.5, 0.01)
    assert sp.parse_policy("constant:0.1") == sp.Constant(0.1)
    for bad in ("cmp-zero:1", "nope:1", "constant:x"):
        with pytest.raises(ParameterError):
            sp.parse_policy(bad)


def test_json_round_trip_keeps_steps():
    hist = StalenessHistogram({k: 3 + k for k in range(20)})
    pol = sp.normalize(sp.clip_and_cutoff(sp.PoissonTune(16, 0.01, 0.01)), hist, 0.004)
    back = sp.policy_from_json(sp.policy_to_json(pol))
    assert np.array_equal(back.step_array(200), pol.step_array(200))
    raw = {"kind": "constant", "params": {"alpha": 0.1},
           "wrappers": {"normalize_to": 0.05, "clip_mult": None, "cutoff": None}}
    assert sp.policy_from_dict(raw, hist).step(3) == pytest.approx(0.05)
    with pytest.raises(ParameterError):
        sp.policy_from_dict(raw)
    with pytest.raises(ParameterError):
        sp.policy_from_json("{not json")
