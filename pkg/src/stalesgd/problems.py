"""Objectives with stochastic gradient oracles.

A problem separates *drawing* the randomness of one gradient (a noise vector
or a mini-batch of indices) from *evaluating* the gradient on that draw, so
engines can share or split draws between workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax

from .errors import InputError, ParameterError, UnsupportedError


class Problem:
    kind: str
    dim: int
    x0: np.ndarray
    x_star: np.ndarray | None = None

    batch: int | None = None
    n: int | None = None  # dataset size, None when not a finite sum

    def draw(self, rng: np.random.Generator, batch: int | None = None):
        """Randomness for one stochastic gradient."""
        raise NotImplementedError

    def grad_on(self, x, sample) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x, rng: np.random.Generator) -> np.ndarray:
        return self.grad_on(x, self.draw(rng))

    def full_grad(self, x) -> np.ndarray:
        raise NotImplementedError

    def loss(self, x) -> float:
        raise NotImplementedError

    def dist2(self, x) -> float | None:
        if self.x_star is None:
            return None
        r = np.asarray(x) - self.x_star
        return float(r @ r)

    def constants(self, radius: float | None = None):
        raise UnsupportedError(f"strong-convexity constants are only known for quadratics, not {self.kind}")

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise InputError(f"expected a vector of length {self.dim}, got shape {x.shape}")
        return x

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class QuadraticProblem(Problem):
    """f(x) = 1/2 (x - x*)' A (x - x*) with gradient noise N(0, sigma**2 I).

    A = U diag(spectrum) U' where U is the identity, or a random orthogonal
    matrix when `rotation_seed` is given.
    """

    spectrum: tuple
    sigma: float = 0.0
    x_star: np.ndarray | None = None
    x0: np.ndarray | None = None
    rotation_seed: int | None = None
    radius: float | None = None

    kind = "quadratic"

    def __post_init__(self):
        spec = np.asarray(self.spectrum, dtype=float).ravel()
        if spec.size == 0 or not np.all(spec > 0) or not np.all(np.isfinite(spec)):
            raise ParameterError(f"spectrum must be positive and finite, got {self.spectrum}")
        if not self.sigma >= 0:
            raise ParameterError(f"sigma must be >= 0, got {self.sigma}")
        d = spec.size
        object.__setattr__(self, "spectrum", tuple(spec.tolist()))
        xs = np.zeros(d) if self.x_star is None else np.asarray(self.x_star, dtype=float)
        x0 = np.ones(d) if self.x0 is None else np.asarray(self.x0, dtype=float)
        if xs.shape != (d,) or x0.shape != (d,):
            raise ParameterError("x_star and x0 must match the spectrum length")
        object.__setattr__(self, "x_star", xs)
        object.__setattr__(self, "x0", x0)
        if self.rotation_seed is None:
            A = np.diag(spec)
        else:
            q, r = np.linalg.qr(np.random.default_rng(self.rotation_seed).standard_normal((d, d)))
            q = q * np.sign(np.diag(r))
            A = (q * spec) @ q.T
            A = 0.5 * (A + A.T)
        object.__setattr__(self, "A", A)

    @property
    def dim(self):
        return len(self.spectrum)

    @property
    def diagonal(self) -> bool:
        return self.rotation_seed is None

    def draw(self, rng, batch=None):
        if self.sigma == 0:
            return None
        return self.sigma * rng.standard_normal(self.dim)

    def full_grad(self, x):
        x = self._check(x)
        r = x - self.x_star
        return np.asarray(self.spectrum) * r if self.diagonal else self.A @ r

    def grad_on(self, x, sample):
        g = self.full_grad(x)
        return g if sample is None else g + sample

    def loss(self, x):
        x = self._check(x)
        r = x - self.x_star
        return 0.5 * float(r @ (self.A @ r))

    def constants(self, radius: float | None = None):
        """(c, L, M, x*): extreme eigenvalues and the second-moment bound

        M = sqrt(L**2 R**2 + d sigma**2) over the ball of radius R around x*
        (R defaults to |x0 - x*|).
        """
        R = radius if radius is not None else self.radius
        if R is None:
            R = math.sqrt(self.dist2(self.x0))
        c, L = min(self.spectrum), max(self.spectrum)
        M = math.sqrt(L * L * R * R + self.dim * self.sigma ** 2)
        return c, L, M, self.x_star.copy()

    def to_dict(self):
        return {"kind": self.kind, "spectrum": list(self.spectrum), "sigma": self.sigma,
                "x_star": self.x_star.tolist(), "x0": self.x0.tolist(),
                "rotation_seed": self.rotation_seed, "radius": self.radius}


def _check_batch(batch, n):
    if batch is None:
        raise ParameterError("finite-sum problems need a batch size")
    if int(batch) != batch or not 1 <= batch <= n:
        raise ParameterError(f"batch size must be an integer in [1, {n}], got {batch}")
    return int(batch)


@dataclass(frozen=True, eq=False)
class FiniteSumProblem(Problem):
    """Least squares f(x) = mean_i (a_i' x - b_i)**2 over a fixed dataset."""

    features: np.ndarray
    targets: np.ndarray
    batch: int = 1
    x0: np.ndarray | None = None
    origin: dict | None = None  # generator parameters, for round-tripping

    kind = "finite-sum"

    def __post_init__(self):
        A = np.asarray(self.features, dtype=float)
        y = np.asarray(self.targets, dtype=float).ravel()
        if A.ndim != 2 or A.shape[0] != y.size or y.size == 0:
            raise ParameterError(f"features {A.shape} and targets {y.shape} do not match")
        object.__setattr__(self, "features", A)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "batch", _check_batch(self.batch, y.size))
        x0 = np.zeros(A.shape[1]) if self.x0 is None else np.asarray(self.x0, dtype=float)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "x_star", np.linalg.lstsq(A, y, rcond=None)[0])

    @classmethod
    def synthetic(cls, n=64, d=8, seed=0, noise=0.5, batch=1):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((n, d))
        y = A @ rng.standard_normal(d) + noise * rng.standard_normal(n)
        return cls(A, y, batch, origin={"n": n, "d": d, "seed": seed, "noise": noise})

    @property
    def n(self):
        return self.targets.size

    @property
    def dim(self):
        return self.features.shape[1]

    def with_batch(self, batch):
        return FiniteSumProblem(self.features, self.targets, batch, self.x0, self.origin)

    def draw(self, rng, batch=None):
        b = self.batch if batch is None else _check_batch(batch, self.n)
        return rng.choice(self.n, size=b, replace=False)

    def grad_on(self, x, idx):
        x = self._check(x)
        a = self.features[idx]
        return (2.0 / len(idx)) * (a.T @ (a @ x - self.targets[idx]))

    def full_grad(self, x):
        x = self._check(x)
        r = self.features @ x - self.targets
        return (2.0 / self.n) * (self.features.T @ r)

    def loss(self, x):
        x = self._check(x)
        r = self.features @ x - self.targets
        return float(r @ r) / self.n

    def optimal_loss(self) -> float:
        return self.loss(self.x_star)

    def to_dict(self):
        if self.origin is None:
            raise UnsupportedError("only generated finite-sum problems serialise; datasets are never shipped")
        return {"kind": self.kind, **self.origin, "batch": self.batch}


@dataclass(frozen=True, eq=False)
class MlpProblem(Problem):
    """One-hidden-layer tanh network with softmax cross-entropy.

    Data: `classes` Gaussian blobs in `inputs` dimensions. Parameters are one
    flat vector laid out as W1 (hidden x inputs), b1, W2 (classes x hidden), b2.
    """

    hidden: int = 16
    n_samples: int = 3000
    classes: int = 3
    inputs: int = 2
    data_seed: int = 0
    init_seed: int = 0
    batch: int = 1
    spread: float = 1.0

    kind = "mlp"

    def __post_init__(self):
        if not 1 <= self.hidden <= 64:
            raise ParameterError(f"hidden units must be in [1, 64], got {self.hidden}")
        if self.classes < 2 or self.inputs < 1 or self.n_samples < self.classes:
            raise ParameterError("need >= 2 classes, >= 1 input and at least one sample per class")
        rng = np.random.default_rng(self.data_seed)
        centers = 3.0 * rng.standard_normal((self.classes, self.inputs))
        labels = np.arange(self.n_samples) % self.classes
        X = centers[labels] + self.spread * rng.standard_normal((self.n_samples, self.inputs))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "batch", _check_batch(self.batch, self.n_samples))
        h, k, q = self.hidden, self.classes, self.inputs
        init = np.random.default_rng(self.init_seed)
        x0 = np.concatenate([
            init.standard_normal(h * q) / math.sqrt(q), np.zeros(h),
            init.standard_normal(k * h) / math.sqrt(h), np.zeros(k),
        ])
        object.__setattr__(self, "x0", x0)

    @property
    def n(self):
        return self.n_samples

    @property
    def dim(self):
        return self.hidden * (self.inputs + 1) + self.classes * (self.hidden + 1)

    def with_batch(self, batch):
        kw = {k: getattr(self, k) for k in ("hidden", "n_samples", "classes", "inputs",
                                           "data_seed", "init_seed", "spread")}
        return MlpProblem(batch=batch, **kw)

    def unpack(self, x):
        x = self._check(x)
        h, k, q = self.hidden, self.classes, self.inputs
        i = 0
        W1 = x[i:i + h * q].reshape(h, q); i += h * q
        b1 = x[i:i + h]; i += h
        W2 = x[i:i + k * h].reshape(k, h); i += k * h
        b2 = x[i:i + k]
        return W1, b1, W2, b2

    def log_probs(self, x, X=None):
        W1, b1, W2, b2 = self.unpack(x)
        X = self.X if X is None else X
        return log_softmax(np.tanh(X @ W1.T + b1) @ W2.T + b2, axis=1)

    def predict_proba(self, x, X=None):
        return np.exp(self.log_probs(x, X))

    def _loss_grad(self, x, idx):
        W1, b1, W2, b2 = self.unpack(x)
        X, y = self.X[idx], self.labels[idx]
        H = np.tanh(X @ W1.T + b1)
        logp = log_softmax(H @ W2.T + b2, axis=1)
        nb = len(y)
        loss = -float(logp[np.arange(nb), y].mean())
        dz = np.exp(logp)
        dz[np.arange(nb), y] -= 1.0
        dz /= nb
        gW2, gb2 = dz.T @ H, dz.sum(0)
        dh = (dz @ W2) * (1.0 - H * H)
        gW1, gb1 = dh.T @ X, dh.sum(0)
        return loss, np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])

    def draw(self, rng, batch=None):
        b = self.batch if batch is None else _check_batch(batch, self.n)
        return rng.choice(self.n, size=b, replace=False)

    def grad_on(self, x, idx):
        return self._loss_grad(x, idx)[1]

    def full_grad(self, x):
        return self._loss_grad(x, np.arange(self.n))[1]

    def loss(self, x):
        logp = self.log_probs(x)
        return -float(logp[np.arange(self.n), self.labels].mean())

    def to_dict(self):
        return {"kind": self.kind, "hidden": self.hidden, "n": self.n_samples,
                "classes": self.classes, "inputs": self.inputs, "data_seed": self.data_seed,
                "init_seed": self.init_seed, "batch": self.batch, "spread": self.spread}


def problem_from_dict(spec: dict) -> Problem:
    spec = dict(spec)
    kind = spec.pop("kind", None)
    try:
        if kind == "quadratic":
            return QuadraticProblem(tuple(spec.pop("spectrum")), **spec)
        if kind == "finite-sum":
            batch = spec.pop("batch", 1)
            return FiniteSumProblem.synthetic(batch=batch, **spec)
        if kind == "mlp":
            if "n" in spec:
                spec["n_samples"] = spec.pop("n")
            return MlpProblem(**spec)
    except TypeError as exc:
        raise ParameterError(f"bad {kind} problem spec: {exc}") from None
    raise ParameterError(f"unknown problem kind {kind!r}")


def parse_problem(text: str, batch: int | None = None, sigma: float | None = None) -> Problem:
    """Build a problem from a short name.

    ``quad-1d`` (A = 1, x0 = 1, x* = 0), ``quad:d=4,spectrum=1/2/3/4,sigma=0.1``,
    ``finite-sum:n=64,d=8,seed=0`` and ``mlp:hidden=16,n=3000,seed=0``.
    `batch` and `sigma` override the corresponding options.
    """
    name, _, rest = text.partition(":")
    opts = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, eq, val = item.partition("=")
        if not eq:
            raise ParameterError(f"problem option {item!r} is not key=value")
        opts[key.strip()] = val.strip()

    def num(key, default, cast=float):
        try:
            return cast(opts.pop(key)) if key in opts else default
        except ValueError:
            raise ParameterError(f"problem option {key}={opts[key]!r} is not a number") from None

    name = name.strip().lower()
    if name in ("quad-1d", "quad", "quadratic"):
        d = num("d", 1, int)
        if "spectrum" in opts:
            try:
                spec = tuple(float(v) for v in opts.pop("spectrum").split("/"))
            except ValueError:
                raise ParameterError("spectrum must be '/'-separated numbers") from None
        else:
            spec = (1.0,) * d
        sig = num("sigma", 0.0)
        prob = QuadraticProblem(spec, sigma if sigma is not None else sig,
                                x0=np.full(len(spec), num("x0", 1.0)),
                                rotation_seed=num("rotation_seed", None, int))
    elif name == "finite-sum":
        prob = FiniteSumProblem.synthetic(n=num("n", 64, int), d=num("d", 8, int),
                                          seed=num("seed", 0, int), noise=num("noise", 0.5),
                                          batch=batch or num("batch", 1, int))
    elif name == "mlp":
        prob = MlpProblem(hidden=num("hidden", 16, int), n_samples=num("n", 3000, int),
                          classes=num("classes", 3, int), data_seed=num("seed", 0, int),
                          init_seed=num("init_seed", 0, int), batch=batch or num("batch", 1, int))
    else:
        raise ParameterError(f"unknown problem {text!r}")
    if opts:
        raise ParameterError(f"unknown problem options {sorted(opts)} for {name}")
    return prob
