import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stalesgd.errors import InputError, ParameterError, UnsupportedError
from stalesgd.problems import (FiniteSumProblem, MlpProblem, QuadraticProblem, parse_problem,
                               problem_from_dict)


def test_quadratic_gradient_and_loss_examples():
    q = QuadraticProblem((1.0, 1.0), x_star=np.array([1.0, -2.0]))
    assert np.array_equal(q.grad(q.x_star, np.random.default_rng(0)), np.zeros(2))
    assert q.loss(q.x_star) == 0.0
    assert q.loss(q.x_star + np.array([3.0, 4.0])) == pytest.approx(12.5)


def test_quadratic_constants_examples():
    assert QuadraticProblem((1.0, 1.0)).constants(1.0)[:3] == (1, 1, 1)
    assert QuadraticProblem((1.0, 4.0)).constants(1.0)[:3] == (1, 4, 4)
    assert QuadraticProblem((1.0, 1.0), sigma=0.1).constants(1.0)[2] == pytest.approx(math.sqrt(1.02))
    assert QuadraticProblem((1.0, 1.0), sigma=0.1).constants(1.0)[2] == pytest.approx(1.00995, abs=1e-5)


def test_constants_unsupported_off_quadratics():
    with pytest.raises(UnsupportedError):
        FiniteSumProblem.synthetic(n=8, d=2).constants()


def test_quadratic_rejects_bad_spectrum_and_dimension():
    with pytest.raises(ParameterError):
        QuadraticProblem((1.0, 0.0))
    with pytest.raises(InputError):
        QuadraticProblem((1.0, 2.0)).loss(np.zeros(3))


def test_rotated_quadratic_is_spd_with_given_spectrum():
    q = QuadraticProblem((1.0, 3.0, 9.0), rotation_seed=4)
    assert np.allclose(q.A, q.A.T)
    assert np.allclose(np.linalg.eigvalsh(q.A), [1, 3, 9])


@settings(max_examples=60, deadline=None)
@given(x=arrays(float, 3, elements=st.floats(-100, 100).filter(lambda v: v == 0 or abs(v) > 1e-100)),
       seed=st.integers(0, 5))
def test_quadratic_loss_nonnegative_and_zero_only_at_optimum(x, seed):
    q = QuadraticProblem((0.5, 2.0, 7.0), rotation_seed=seed)
    f = q.loss(x)
    assert f >= 0
    if np.any(x != 0):
        assert f > 0


def test_quadratic_noise_is_unbiased():
    q = QuadraticProblem((1.0, 2.0), sigma=1.0)
    rng = np.random.default_rng(0)
    x = np.array([0.3, -0.2])
    g = np.mean([q.grad(x, rng) for _ in range(20000)], axis=0)
    assert np.allclose(g, q.full_grad(x), atol=0.03)


def test_minibatch_enumeration_n4_b2():
    p = FiniteSumProblem.synthetic(n=4, d=3, seed=2, batch=2)
    x = np.array([0.1, -0.4, 0.7])
    batches = list(itertools.combinations(range(4), 2))
    assert len(batches) == 6
    mean = np.mean([p.grad_on(x, np.array(b)) for b in batches], axis=0)
    assert np.max(np.abs(mean - p.full_grad(x))) < 1e-12


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 8), b=st.integers(1, 8), seed=st.integers(0, 100))
def test_minibatch_loss_and_gradient_unbiased_by_enumeration(n, b, seed):
    b = min(b, n)
    p = FiniteSumProblem.synthetic(n=n, d=3, seed=seed, batch=b)
    x = np.random.default_rng(seed).standard_normal(3)
    batches = [np.array(c) for c in itertools.combinations(range(n), b)]
    g = np.mean([p.grad_on(x, c) for c in batches], axis=0)
    r = p.features @ x - p.targets
    fb = np.mean([np.mean(r[c] ** 2) for c in batches])
    assert np.allclose(g, p.full_grad(x), rtol=1e-12, atol=1e-12)
    assert fb == pytest.approx(p.loss(x), rel=1e-12)


def test_finite_sum_optimum_has_zero_gradient():
    p = FiniteSumProblem.synthetic(n=64, d=8)
    assert np.max(np.abs(p.full_grad(p.x_star))) < 1e-12
    assert p.optimal_loss() <= p.loss(p.x0)


def test_finite_sum_batch_validation():
    with pytest.raises(ParameterError):
        FiniteSumProblem.synthetic(n=4, d=2, batch=5)
    with pytest.raises(ParameterError):
        FiniteSumProblem.synthetic(n=4, d=2).draw(np.random.default_rng(0), 0)
    idx = FiniteSumProblem.synthetic(n=10, d=2, batch=10).draw(np.random.default_rng(0))
    assert sorted(idx.tolist()) == list(range(10))


def test_mlp_probabilities_on_simplex():
    m = MlpProblem(hidden=8, n_samples=60)
    p = m.predict_proba(np.random.default_rng(1).standard_normal(m.dim))
    assert np.all(p >= 0) and np.allclose(p.sum(1), 1.0, atol=1e-9)


def test_mlp_uniform_output_loss_is_log_k():
    m = MlpProblem(hidden=4, n_samples=30, classes=3)
    assert m.loss(np.zeros(m.dim)) == pytest.approx(math.log(3), rel=1e-14)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 1000), hidden=st.integers(1, 8), classes=st.integers(2, 4))
def test_mlp_backprop_matches_central_differences(seed, hidden, classes):
    m = MlpProblem(hidden=hidden, n_samples=12, classes=classes, data_seed=seed)
    x = np.random.default_rng(seed).standard_normal(m.dim)
    idx = np.arange(5)
    g = m.grad_on(x, idx)
    fd = np.empty_like(x)
    for i in range(x.size):
        h = 1e-5 * max(1.0, abs(x[i]))
        e = np.zeros_like(x); e[i] = h
        fd[i] = (m._loss_grad(x + e, idx)[0] - m._loss_grad(x - e, idx)[0]) / (2 * h)
    assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-8)


def test_mlp_hidden_limit():
    with pytest.raises(ParameterError):
        MlpProblem(hidden=65)


def test_parse_problem_forms():
    q = parse_problem("quad-1d")
    assert q.dim == 1 and q.x0[0] == 1.0 and q.x_star[0] == 0.0
    q = parse_problem("quad:spectrum=1/2,sigma=0.1")
    assert q.spectrum == (1.0, 2.0) and q.sigma == 0.1
    f = parse_problem("finite-sum:n=64,d=8,seed=0,batch=8")
    assert (f.n, f.dim, f.batch) == (64, 8, 8)
    assert parse_problem("mlp:hidden=16", batch=4).batch == 4
    for bad in ("quad:spectrum=a", "cube", "quad:foo=1", "quad:d"):
        with pytest.raises(ParameterError):
            parse_problem(bad)


@pytest.mark.parametrize("text", ["quad:spectrum=1/2/3,sigma=0.5", "finite-sum:n=16,d=3,batch=4",
                                  "mlp:hidden=4,n=30"])
def test_problem_dict_round_trip(text):
    p = parse_problem(text)
    back = problem_from_dict(p.to_dict())
    x = np.random.default_rng(0).standard_normal(p.dim)
    assert back.loss(x) == p.loss(x)
    assert np.array_equal(back.x0, p.x0)


def test_raw_dataset_does_not_serialise():
    p = FiniteSumProblem(np.eye(3), np.ones(3))
    with pytest.raises(UnsupportedError):
        p.to_dict()
