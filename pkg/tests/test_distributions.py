import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stalesgd import distributions as dist, specialfn
from stalesgd.errors import InputError, ParameterError


def test_pmf_examples():
    assert dist.Geometric(0.12).pmf(0) == pytest.approx(0.12, abs=1e-15)
    assert dist.Uniform(3).pmf(5) == 0.0
    assert dist.Poisson(8).pmf(8) == pytest.approx(8 ** 8 * math.exp(-8) / math.factorial(8), rel=1e-13)
    assert dist.Poisson(8).pmf(8) == pytest.approx(0.1396, abs=5e-5)
    assert dist.pmf(dist.Uniform(3), 2) == pytest.approx(0.25)


@pytest.mark.parametrize("bad", [
    lambda: dist.Geometric(0.0), lambda: dist.Geometric(1.5), lambda: dist.Poisson(0.0),
    lambda: dist.CMP(-1.0, 1.0), lambda: dist.CMP(1.0, 0.0), lambda: dist.Uniform(-1),
    lambda: dist.Uniform(2.5),
])
def test_invalid_parameters_raise(bad):
    with pytest.raises(ParameterError):
        bad()


def test_negative_staleness_rejected():
    with pytest.raises(ParameterError):
        dist.Poisson(2.0).pmf(-1)


def test_mode_examples():
    assert dist.CMP(5, 2).mode() == 2
    assert dist.Poisson(16).mode() == 16 - 1 or dist.Poisson(16).mode() == 16


def test_poisson_integer_lambda_mode():
    # pmf(15) == pmf(16) for lam = 16; the floor formula gives 16
    assert dist.Poisson(16).mode() == 16
    assert dist.mode(dist.Geometric(0.3)) == 0
    assert dist.Uniform(5).mode() == 0


@pytest.mark.parametrize("lam", range(1, 41))
@pytest.mark.parametrize("nu", [0.25, 0.5, 1, 2, 4])
def test_cmp_mode_matches_argmax(lam, nu):
    model = dist.CMP(lam, nu)
    # unnormalised terms share the argmax and stay finite where Z would not
    top = int(math.floor(lam ** (1 / nu))) + 3
    logt = specialfn.cmp_log_terms(lam, nu, top)
    best = np.flatnonzero(logt >= logt.max() - 1e-12 * abs(logt.max()) - 1e-13)
    assert best[0] <= model.mode() <= best[-1]


def test_cmp_mode_ties_break_low():
    # lam**(1/nu) integer: pmf(k-1) == pmf(k)
    assert dist.CMP(4, 2).mode() == 1
    assert dist.CMP(9, 2).mode() == 2


def test_cmp_nu_one_is_poisson():
    for lam in (0.5, 4.0, 8.0, 33.3):
        a = dist.CMP(lam, 1.0).log_pmf_array(201)
        b = dist.Poisson(lam).log_pmf_array(201)
        assert np.allclose(np.exp(a), np.exp(b), rtol=1e-12, atol=0)


@pytest.mark.parametrize("model", [
    dist.Geometric(0.01), dist.Geometric(0.7), dist.Geometric(1.0), dist.Uniform(0), dist.Uniform(9),
    dist.Poisson(0.2), dist.Poisson(50.0), dist.CMP(4, 2), dist.CMP(25, 0.5), dist.CMP(0.5, 3),
])
def test_pmf_mass_at_truncation(model):
    lim = model.support_limit()
    assert lim <= dist.SUPPORT_CAP
    assert abs(model.pmf_array(lim + 1).sum() - 1.0) < 1e-9


def test_sampling_is_deterministic_and_matches_examples():
    assert np.all(dist.Uniform(0).sample(np.random.default_rng(1), 100) == 0)
    assert np.all(dist.Geometric(1.0).sample(np.random.default_rng(1), 100) == 0)
    a = dist.CMP(4, 2).sample(np.random.default_rng(3), 50)
    b = dist.CMP(4, 2).sample(np.random.default_rng(3), 50)
    assert np.array_equal(a, b)


def test_poisson_sample_mean():
    x = dist.sample(dist.Poisson(8), np.random.default_rng(0), 10 ** 6)
    assert 7.97 <= x.mean() <= 8.03


def test_cmp_sampler_matches_pmf():
    model = dist.CMP(6.0, 1.7)
    x = model.sample(np.random.default_rng(5), 200_000)
    freq = np.bincount(x, minlength=12)[:12] / x.size
    p = model.pmf_array(12)
    se = np.sqrt(p * (1 - p) / x.size)
    assert np.all(np.abs(freq - p) < 5 * se + 1e-12)


def test_histogram_basics_and_csv_round_trip(tmp_path):
    h = dist.StalenessHistogram({2: 3, 0: 1, 5: 0})
    assert h.counts == {0: 1, 2: 3}
    assert h.total == 4
    taus, f = h.frequencies()
    assert f.sum() == 1.0
    path = tmp_path / "h.csv"
    h.write_csv(path)
    assert path.read_text().splitlines()[0] == "tau,count"
    assert dist.StalenessHistogram.read_csv(path) == h


@pytest.mark.parametrize("text", ["", "tau,count\n", "t,c\n0,1\n", "tau,count\n1,2\n0,3\n",
                                  "tau,count\nx,1\n", "tau,count\n0,-1\n"])
def test_histogram_csv_rejects_bad_files(text):
    with pytest.raises(InputError):
        dist.StalenessHistogram.parse_csv(text)


def test_bhattacharyya_examples():
    n = 200
    geo = dist.Geometric(0.5)
    lim = geo.support_limit()
    counts = {i: c for i, c in enumerate(geo.pmf_array(lim + 1) * 2 ** 60)}
    h = dist.StalenessHistogram({i: int(round(c)) for i, c in counts.items()})
    assert dist.bhattacharyya(h, geo) == pytest.approx(0.0, abs=1e-9)
    assert dist.bhattacharyya(dist.StalenessHistogram({0: n}), dist.Uniform(1)) == pytest.approx(
        -math.log(math.sqrt(0.5)), abs=1e-12)
    assert dist.bhattacharyya(dist.StalenessHistogram({0: n}), dist.Uniform(1)) == pytest.approx(0.3466, abs=1e-4)
    assert dist.bhattacharyya(dist.StalenessHistogram({7: n}), dist.Uniform(3)) == math.inf


def test_infinite_distance_is_flagged_in_reports():
    r = dist.fit(dist.StalenessHistogram({0: 5}), "uniform")
    assert r.distance == 0.0
    rep = dist.FitReport("uniform", dist.Uniform(0), math.inf, {})
    d = rep.to_dict()
    assert d["distance"] is None and d["degenerate_overlap"] is True


@settings(max_examples=50, deadline=None)
@given(counts=st.dictionaries(st.integers(0, 60), st.integers(1, 1000), min_size=1, max_size=20),
       lam=st.floats(0.1, 40.0), nu=st.floats(0.5, 3.0))
def test_bhattacharyya_is_non_negative(counts, lam, nu):
    h = dist.StalenessHistogram(counts)
    assert dist.bhattacharyya(h, dist.CMP(lam, nu)) >= 0.0
    assert dist.bhattacharyya(h, dist.Geometric(0.3)) >= 0.0


def test_fit_geometric_recovers_generator():
    h = dist.StalenessHistogram.from_samples(dist.Geometric(0.12).sample(np.random.default_rng(0), 100_000))
    r = dist.fit(h, "geometric")
    assert 0.11 <= r.params["p"] <= 0.13 and r.distance < 0.01


def test_fit_cmp_recovers_nu():
    h = dist.StalenessHistogram.from_samples(dist.CMP(8.0, 1.0).sample(np.random.default_rng(1), 100_000))
    r = dist.fit(h, "cmp", workers=8)
    assert 0.9 <= r.params["nu"] <= 1.1
    assert r.params["lam"] == pytest.approx(8 ** r.params["nu"])


def test_fit_uniform_matches_brute_force_scan():
    h = dist.StalenessHistogram({3: 100})
    r = dist.fit(h, "uniform")
    scan = [dist.bhattacharyya(h, dist.Uniform(t)) for t in range(0, 3 + 6)]
    assert r.params["tau_hat"] == int(np.argmin(scan))
    assert r.distance == pytest.approx(min(scan), abs=1e-15)


def test_fit_grid_argmin_matches_scalar_scan():
    h = dist.StalenessHistogram({0: 5, 1: 9, 2: 7, 4: 2, 9: 1})
    r = dist.fit(h, "poisson")
    scan = [dist.bhattacharyya(h, dist.Poisson(k / 10)) for k in range(1, 181)]
    assert r.params["lam"] == pytest.approx((int(np.argmin(scan)) + 1) / 10)
    assert r.distance == pytest.approx(min(scan), rel=1e-12)


def test_fit_single_bin_geometric_hits_grid_max():
    assert dist.fit(dist.StalenessHistogram({0: 1000}), "geometric").params["p"] == 0.999


def test_fit_errors():
    h = dist.StalenessHistogram({1: 3})
    with pytest.raises(ParameterError):
        dist.fit(h, "cmp")
    with pytest.raises(ParameterError):
        dist.fit(h, "lognormal")
    with pytest.raises(InputError):
        dist.StalenessHistogram({})
    with pytest.raises(InputError):
        dist.StalenessHistogram.from_samples([])


def test_fit_report_json_fields():
    h = dist.StalenessHistogram({0: 3, 1: 2})
    d = dist.fit(h, "poisson").to_dict()
    assert set(d) >= {"family", "params", "distance", "grid"}


def test_parse_model_round_trip():
    for m in (dist.Geometric(0.3), dist.Uniform(4), dist.Poisson(2.5), dist.CMP(8.0, 1.0)):
        assert dist.parse_model(m.to_spec()) == m
    with pytest.raises(ParameterError):
        dist.parse_model("cmp:8")
    with pytest.raises(ParameterError):
        dist.parse_model("zipf:2")
