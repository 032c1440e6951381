"""SGD execution: sequential, synchronous, simulated and threaded asynchronous.

Staleness is counted as in a parameter server: the number of *applied*
updates between the read a gradient was computed on and its application.
Skipped updates (step 0) do not advance the clock.

Random streams are derived from the master seed with ``SeedSequence`` spawn
keys, so each worker's gradient draws are independent and reproducible:

* (0, w)  gradient draws of worker w (sequential/sync/model-delay use w = 0)
* (1,)    staleness draws from a delay model
* (2, w)  compute durations of worker w in the event-driven simulation
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import math
import queue
import threading
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .distributions import StalenessHistogram, StalenessModel
from .errors import EngineError, ParameterError, UnsupportedError
from .problems import Problem
from .steppolicy import StepPolicy

MODES = ("sequential", "sync", "async-simulated", "async-threaded")
_MODE_ALIASES = {"seq": "sequential", "sim": "async-simulated", "simulated": "async-simulated",
                 "async-sim": "async-simulated", "threaded": "async-threaded",
                 "async-thread": "async-threaded"}
DEFAULT_HISTORY = 512


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass(frozen=True)
class EventDelay:
    """m virtual workers with i.i.d. compute times and a serial applier.

    Compute time is exponential or gamma with the given mean; each apply
    occupies the server for `apply_time`. A worker reads the parameters as
    soon as its own update is applied, so staleness emerges from the order
    of completions (ties go to the lower worker id).
    """

    compute: str = "exponential"
    mean: float = 1.0
    shape: float = 1.0
    apply_time: float = 0.5

    def __post_init__(self):
        if self.compute not in ("exponential", "gamma"):
            raise ParameterError(f"compute distribution must be exponential or gamma, got {self.compute!r}")
        if not self.mean > 0 or not self.shape > 0 or not self.apply_time >= 0:
            raise ParameterError("event delay needs mean > 0, shape > 0 and apply_time >= 0")

    def duration(self, rng):
        if self.compute == "exponential":
            return rng.exponential(self.mean)
        return rng.gamma(self.shape, self.mean / self.shape)

    def to_dict(self):
        return {"kind": "event", "compute": self.compute, "mean": self.mean,
                "shape": self.shape, "apply_time": self.apply_time}


@dataclass
class RunConfig:
    mode: str
    problem: Problem
    policy: StepPolicy
    steps: int
    workers: int = 1
    seed: int = 0
    stride: int = 1
    delay: StalenessModel | EventDelay | None = None
    history: int = DEFAULT_HISTORY
    loss_threshold: float | None = None
    stop_at_threshold: bool = False
    record_path: bool = False
    timeout: float = 60.0  # threaded mode: max wait for any single submission

    def __post_init__(self):
        self.mode = _MODE_ALIASES.get(self.mode, self.mode)
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("steps", "workers", "stride", "history"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ParameterError(f"{name} must be an integer >= 1, got {v}")
        cutoff = getattr(self.policy, "cutoff", None)
        if cutoff is not None and self.history < cutoff + 1:
            raise ParameterError(f"history {self.history} must cover the cutoff {cutoff}")
        if self.mode == "async-simulated" and self.delay is None:
            raise ParameterError("async-simulated mode needs a delay source")
        if self.mode == "sync" and self.problem.n is None:
            raise UnsupportedError("sync mode needs a mini-batch (finite-sum or MLP) problem")

    @classmethod
    def from_dict(cls, spec: dict) -> "RunConfig":
        """Inverse of ``to_dict``: rebuild a config echoed in a run summary."""
        from .distributions import parse_model
        from .problems import problem_from_dict
        from .steppolicy import policy_from_dict

        spec = dict(spec)
        try:
            delay = spec.pop("delay")
            if delay is not None:
                kind = delay.get("kind")
                if kind == "model":
                    delay = parse_model(delay["model"])
                elif kind == "event":
                    delay = EventDelay(delay["compute"], delay["mean"], delay["shape"], delay["apply_time"])
                else:
                    raise ParameterError(f"unknown delay kind {kind!r}")
            problem = problem_from_dict(spec.pop("problem"))
            policy = policy_from_dict(spec.pop("policy"))
            return cls(spec.pop("mode"), problem, policy, delay=delay, **spec)
        except (KeyError, TypeError, AttributeError) as exc:
            raise ParameterError(f"run config is incomplete or malformed: {exc!r}") from None

    def to_dict(self) -> dict:
        delay = self.delay
        if isinstance(delay, StalenessModel):
            delay = {"kind": "model", "model": delay.to_spec()}
        elif isinstance(delay, EventDelay):
            delay = delay.to_dict()
        return {
            "mode": self.mode, "problem": self.problem.to_dict(), "policy": self.policy.to_dict(),
            "steps": self.steps, "workers": self.workers, "seed": self.seed, "stride": self.stride,
            "delay": delay, "history": self.history, "loss_threshold": self.loss_threshold,
            "stop_at_threshold": self.stop_at_threshold,
        }


@dataclass
class RunTrace:
    steps: np.ndarray
    taus: np.ndarray
    alphas: np.ndarray
    losses: np.ndarray  # nan off-stride
    dist2: np.ndarray  # nan off-stride or when x* is unknown
    final_x: np.ndarray
    mode: str
    config: dict = field(default_factory=dict)
    path: np.ndarray | None = None  # parameters after each record, row 0 = x0
    wall_time: float = 0.0
    clamped: int = 0
    checksum_checks: int = 0
    effective_batch: int | None = None
    updates_per_epoch: int | None = None
    loss_threshold: float | None = None
    updates_to_threshold: int | None = None
    stopped_early: bool = False

    def __len__(self):
        return len(self.steps)

    @property
    def skipped(self) -> int:
        return int(np.count_nonzero(self.alphas == 0))

    @property
    def applied(self) -> int:
        return len(self) - self.skipped

    def histogram(self) -> StalenessHistogram:
        return StalenessHistogram.from_samples(self.taus)

    @property
    def epochs_to_threshold(self) -> float | None:
        if self.updates_to_threshold is None or not self.updates_per_epoch:
            return None
        return self.updates_to_threshold / self.updates_per_epoch

    def final_loss(self) -> float:
        ok = ~np.isnan(self.losses)
        return float(self.losses[ok][-1]) if ok.any() else math.nan

    def final_dist2(self) -> float:
        ok = ~np.isnan(self.dist2)
        return float(self.dist2[ok][-1]) if ok.any() else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "tau", "alpha", "loss", "dist2"])
        for s, t, a, l, d in zip(self.steps, self.taus, self.alphas, self.losses, self.dist2):
            w.writerow([int(s), int(t), repr(float(a)),
                        "" if math.isnan(l) else repr(float(l)),
                        "" if math.isnan(d) else repr(float(d))])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    def summary(self) -> dict:
        out = {
            "mode": self.mode,
            "config": self.config,
            "records": len(self),
            "applied": self.applied,
            "skipped": self.skipped,
            "clamped": self.clamped,
            "staleness_histogram": self.histogram().to_dict() if len(self) else {},
            "mean_staleness": float(self.taus.mean()) if len(self) else None,
            "final_loss": _finite_or_none(self.final_loss()),
            "final_dist2": _finite_or_none(self.final_dist2()),
            "wall_time": self.wall_time,
        }
        if self.effective_batch is not None:
            out["effective_batch"] = self.effective_batch
        if self.mode == "async-threaded":
            out["checksum_checks"] = self.checksum_checks
        if self.loss_threshold is not None:
            out["loss_threshold"] = self.loss_threshold
            out["updates_to_threshold"] = self.updates_to_threshold
            out["epochs_to_threshold"] = self.epochs_to_threshold
            out["stopped_early"] = self.stopped_early
        return out

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def _finite_or_none(v):
    return v if math.isfinite(v) else None


class _Recorder:
    """Collects per-update records and evaluates loss/dist2 at the stride."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        T = cfg.steps
        self.taus = np.zeros(T, dtype=np.int64)
        self.alphas = np.zeros(T)
        self.losses = np.full(T, np.nan)
        self.dist2 = np.full(T, np.nan)
        self.n = 0
        self.hit = None
        self.path = None
        if cfg.record_path:
            self.path = np.empty((T + 1, cfg.problem.dim))
            self.path[0] = cfg.problem.x0
        self.known_opt = cfg.problem.x_star is not None

    def add(self, tau, alpha, x) -> bool:
        """Store one record; True when the run should stop."""
        k = self.n
        self.taus[k] = tau
        self.alphas[k] = alpha
        if self.path is not None:
            self.path[k + 1] = x
        self.n += 1
        last = self.n == self.cfg.steps
        if k % self.cfg.stride == 0 or last:
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"parameters diverged at update {k}")
            loss = self.cfg.problem.loss(x)
            self.losses[k] = loss
            if self.known_opt:
                self.dist2[k] = self.cfg.problem.dist2(x)
            thr = self.cfg.loss_threshold
            if thr is not None and self.hit is None and loss <= thr:
                self.hit = k + 1
                return self.cfg.stop_at_threshold
        return False

    def trace(self, x, t0, **extra) -> RunTrace:
        n = self.n
        prob = self.cfg.problem
        per_epoch = None
        if prob.n is not None:
            b = extra.get("effective_batch") or prob.batch
            per_epoch = math.ceil(prob.n / b)
        return RunTrace(
            steps=np.arange(n), taus=self.taus[:n].copy(), alphas=self.alphas[:n].copy(),
            losses=self.losses[:n].copy(), dist2=self.dist2[:n].copy(), final_x=np.array(x, copy=True),
            mode=self.cfg.mode, config=self.cfg.to_dict(),
            path=None if self.path is None else self.path[: n + 1].copy(),
            wall_time=time.perf_counter() - t0, updates_per_epoch=per_epoch,
            loss_threshold=self.cfg.loss_threshold, updates_to_threshold=self.hit,
            stopped_early=n < self.cfg.steps, **extra,
        )


class _StepTable:
    def __init__(self, policy: StepPolicy, size: int):
        self.policy = policy
        self.table = policy.step_array(size)
        if np.any(~np.isfinite(self.table)):
            bad = int(np.argmax(~np.isfinite(self.table)))
            raise ParameterError(f"policy step overflows at tau = {bad}; add a clip or a cutoff")

    def __call__(self, tau: int) -> float:
        if tau < len(self.table):
            return float(self.table[tau])
        s = self.policy.step(tau)
        if not math.isfinite(s):
            raise FloatingPointError(f"policy step overflows at tau = {tau}")
        return s


def _diverged(rec: _Recorder, x, t0, exc, **extra):
    return EngineError(f"run aborted after {rec.n} updates: {exc}", partial=rec.trace(x, t0, **extra))


def run_sequential(cfg: RunConfig) -> RunTrace:
    """x_{t+1} = x_t - alpha(0) grad F(x_t)."""
    _expect(cfg, "sequential")
    t0 = time.perf_counter()
    prob = cfg.problem
    rng = stream(cfg.seed, 0, 0)
    alpha = _StepTable(cfg.policy, 1)(0)
    x = prob.x0.copy()
    rec = _Recorder(cfg)
    try:
        for _ in range(cfg.steps):
            if alpha > 0:
                x = x - alpha * prob.grad(x, rng)
            else:
                prob.draw(rng)
            if rec.add(0, alpha, x):
                break
    except FloatingPointError as exc:
        raise _diverged(rec, x, t0, exc) from None
    return rec.trace(x, t0)


def run_sync(cfg: RunConfig) -> RunTrace:
    """Each update averages m worker gradients over disjoint slices of one batch draw.

    One draw of m*b indices without replacement is split into m batches of
    b, so the update equals a sequential step with batch m*b on the same draw.
    """
    _expect(cfg, "sync")
    t0 = time.perf_counter()
    prob = cfg.problem
    m, b = cfg.workers, prob.batch
    eff = m * b
    if eff > prob.n:
        raise ParameterError(f"m*b = {eff} exceeds the dataset size {prob.n}")
    rng = stream(cfg.seed, 0, 0)
    alpha = _StepTable(cfg.policy, 1)(0)
    x = prob.x0.copy()
    rec = _Recorder(cfg)
    try:
        for _ in range(cfg.steps):
            idx = prob.draw(rng, eff)
            if alpha > 0:
                g = sum(prob.grad_on(x, idx[w * b:(w + 1) * b]) for w in range(m)) / m
                x = x - alpha * g
            if rec.add(0, alpha, x):
                break
    except FloatingPointError as exc:
        raise _diverged(rec, x, t0, exc, effective_batch=eff) from None
    return rec.trace(x, t0, effective_batch=eff)


def run_async_simulated(cfg: RunConfig) -> RunTrace:
    """Deterministic asynchrony driven by a staleness model or an event queue."""
    _expect(cfg, "async-simulated")
    if isinstance(cfg.delay, EventDelay):
        return _run_event(cfg)
    return _run_model_delay(cfg)


def _run_model_delay(cfg: RunConfig) -> RunTrace:
    # tau drawn per update, clamped to the applied count and to the ring size
    t0 = time.perf_counter()
    prob = cfg.problem
    H = cfg.history
    steps = _StepTable(cfg.policy, H)
    grng, drng = stream(cfg.seed, 0, 0), stream(cfg.seed, 1)
    model = cfg.delay
    ring = np.empty((H, prob.dim))
    x = prob.x0.copy()
    ring[0] = x
    clock = 0
    clamped = 0
    rec = _Recorder(cfg)
    block = 4096
    draws = np.empty(0, dtype=np.int64)
    pos = 0
    try:
        for _ in range(cfg.steps):
            if pos == len(draws):
                draws = np.asarray(model.sample(drng, block), dtype=np.int64)
                pos = 0
            tau = int(draws[pos])
            pos += 1
            tau = min(tau, clock)
            if tau > H - 1:
                tau = H - 1
                clamped += 1
            alpha = steps(tau)
            g = prob.grad(ring[(clock - tau) % H], grng)
            if alpha > 0:
                x = x - alpha * g
                clock += 1
                ring[clock % H] = x
            if rec.add(tau, alpha, x):
                break
    except FloatingPointError as exc:
        raise _diverged(rec, x, t0, exc, clamped=clamped) from None
    return rec.trace(x, t0, clamped=clamped)


def _run_event(cfg: RunConfig) -> RunTrace:
    t0 = time.perf_counter()
    prob, ev, m = cfg.problem, cfg.delay, cfg.workers
    steps = _StepTable(cfg.policy, cfg.history)
    grngs = [stream(cfg.seed, 0, w) for w in range(m)]
    drngs = [stream(cfg.seed, 2, w) for w in range(m)]
    x = prob.x0.copy()
    clock = 0
    read = [0] * m
    pending = [prob.grad(x, grngs[w]) for w in range(m)]
    heap = [(ev.duration(drngs[w]), w) for w in range(m)]
    heapq.heapify(heap)
    server_free = 0.0
    rec = _Recorder(cfg)
    try:
        for _ in range(cfg.steps):
            ready, w = heapq.heappop(heap)
            done = max(ready, server_free) + ev.apply_time
            server_free = done
            tau = clock - read[w]
            alpha = steps(tau)
            if alpha > 0:
                x = x - alpha * pending[w]
                clock += 1
            # the worker receives the new parameters and starts over
            read[w] = clock
            pending[w] = prob.grad(x, grngs[w])
            heapq.heappush(heap, (done + ev.duration(drngs[w]), w))
            if rec.add(tau, alpha, x):
                break
    except FloatingPointError as exc:
        raise _diverged(rec, x, t0, exc) from None
    return rec.trace(x, t0)


def event_staleness(m: int, steps: int, seed: int = 0, delay: EventDelay | None = None) -> np.ndarray:
    """Staleness sequence of the event-driven simulation with every update applied."""
    delay = delay or EventDelay()
    drngs = [stream(seed, 2, w) for w in range(m)]
    heap = [(delay.duration(drngs[w]), w) for w in range(m)]
    heapq.heapify(heap)
    read = [0] * m
    out = np.empty(steps, dtype=np.int64)
    server_free = 0.0
    for k in range(steps):
        ready, w = heapq.heappop(heap)
        done = max(ready, server_free) + delay.apply_time
        server_free = done
        out[k] = k - read[w]
        read[w] = k + 1
        heapq.heappush(heap, (done + delay.duration(drngs[w]), w))
    return out


class _Snapshot:
    __slots__ = ("x", "clock", "crc")

    def __init__(self, x, clock):
        x = np.array(x, copy=True)
        x.flags.writeable = False
        self.x, self.clock, self.crc = x, clock, zlib.crc32(x.tobytes())

    def verify(self):
        return zlib.crc32(self.x.tobytes()) == self.crc


def run_async_threaded(cfg: RunConfig) -> RunTrace:
    """Real worker threads and one serialized applier.

    Worker w: wait for a snapshot (x, t) addressed to it, check its checksum,
    compute a gradient, submit (w, t, g). Applier: take submissions in
    arrival order, tau = t' - t, apply the step, publish the new snapshot to
    the submitting worker. Records carry the exact measured tau.
    """
    _expect(cfg, "async-threaded")
    t0 = time.perf_counter()
    prob, m = cfg.problem, cfg.workers
    steps = _StepTable(cfg.policy, cfg.history)
    submissions: queue.Queue = queue.Queue()
    inboxes = [queue.Queue(maxsize=1) for _ in range(m)]
    stop = threading.Event()
    checks = [0] * m

    def worker(w):
        rng = stream(cfg.seed, 0, w)
        try:
            while True:
                snap = inboxes[w].get()
                if snap is None or stop.is_set():
                    return
                if not snap.verify():
                    raise RuntimeError(f"worker {w} read a torn snapshot at clock {snap.clock}")
                checks[w] += 1
                g = prob.grad(snap.x, rng)
                submissions.put((w, snap.clock, g))
        except BaseException as exc:  # report any failure to the applier
            submissions.put((w, None, exc))

    threads = [threading.Thread(target=worker, args=(w,), daemon=True, name=f"sgd-worker-{w}")
               for w in range(m)]
    x = prob.x0.copy()
    clock = 0
    snap = _Snapshot(x, clock)
    rec = _Recorder(cfg)
    for th in threads:
        th.start()
    for w in range(m):
        inboxes[w].put(snap)
    try:
        for _ in range(cfg.steps):
            try:
                w, t_read, g = submissions.get(timeout=cfg.timeout)
            except queue.Empty:
                raise EngineError(f"no gradient arrived within {cfg.timeout}s") from None
            if t_read is None:
                raise EngineError(f"worker {w} failed: {g!r}")
            tau = clock - t_read
            alpha = steps(tau)
            if alpha > 0:
                x = x - alpha * g
                clock += 1
                snap = _Snapshot(x, clock)
            done = rec.add(tau, alpha, x)
            if done:
                break
            inboxes[w].put(snap)
    except (EngineError, FloatingPointError) as exc:
        _shutdown(stop, inboxes, threads)
        raise EngineError(f"threaded run aborted after {rec.n} updates: {exc}",
                          partial=rec.trace(x, t0, checksum_checks=sum(checks))) from None
    _shutdown(stop, inboxes, threads)
    return rec.trace(x, t0, checksum_checks=sum(checks))


def _shutdown(stop, inboxes, threads):
    stop.set()
    for box in inboxes:
        try:
            box.put_nowait(None)
        except queue.Full:
            pass
    for th in threads:
        th.join(timeout=5.0)


def _expect(cfg, mode):
    if cfg.mode != mode:
        raise ParameterError(f"config mode is {cfg.mode!r}, expected {mode!r}")


_RUNNERS = {
    "sequential": run_sequential,
    "sync": run_sync,
    "async-simulated": run_async_simulated,
    "async-threaded": run_async_threaded,
}


def run(cfg: RunConfig) -> RunTrace:
    return _RUNNERS[cfg.mode](cfg)
