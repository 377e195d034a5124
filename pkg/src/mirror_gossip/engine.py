"""
Synchronous simulator for aggregation in the mirror space.

Each iteration every device computes its local gradient at ``w_{i,t}``,
mixes mirror images with its neighbours through ``P(t)``, and steps in
the mirror space::

    h(w_{i,t+1}) = sum_j P(t)_ij h(w_{j,t}) - eta * grad f_i(w_{i,t})

The mirror states ``h(w_{i,t})`` are the canonical state; models are
recovered with ``h^{-1}``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import logging
import math
import os
import time
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import mirror
from .dataflow import (Dataset, LogisticLoss, QuadraticLoss, dirichlet_partition_indices,
                       load_csv, make_synthetic)
from .errors import (ConfigurationError, IntegrityError, MirrorRangeError, ProtocolError,
                     ShapeError)
from .mirror import MirrorMap
from .topology import GraphSchedule, generate_schedule, mixing_constants

log = logging.getLogger(__name__)

CSV_COLUMNS = ("t", "loss", "accuracy", "consensus_mirror", "consensus_primal", "lemma1_bound")
STRATEGIES = ("aims", "pairwise")
THREADS_ENV = "MIRROR_GOSSIP_THREADS"


@dataclass
class DeviceState:
    id: int
    w: np.ndarray
    shard: Optional[Dataset]
    loss: LogisticLoss | QuadraticLoss


@dataclass
class RunConfig:
    """Parameters of one simulated run.

    ``loss`` picks the problem family: ``"logistic"`` trains multinomial
    logistic regression on synthetic blobs (or ``data_path``) split across
    devices with Dirichlet(``alpha``) label skew; ``"quadratic"`` gives each
    device a random least-squares problem with its own target.
    """

    m: int = 4
    T: int = 100
    eta: float = 0.1
    p: float = 1.0
    density: float = 1.0
    B: int = 1
    seed: int = 0
    alpha: float = 10.0
    strategy: str = "aims"
    rescale: bool = False
    record_bounds: bool = True
    record_trace: bool = False
    loss: str = "logistic"
    classes: int = 2
    dim: int = 2
    per_class: int = 50
    separation: float = 3.0
    l2: float = 1e-4
    grad_clip: float = 1.0
    batch_size: Optional[int] = None
    init_scale: float = 0.0
    data_path: Optional[str] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("m", "T"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.B < 1:
            raise ConfigurationError(f"B must be >= 1, got {self.B}")
        for name in ("eta", "alpha", "grad_clip", "separation"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.density <= 1:
            raise ConfigurationError(f"density must lie in (0, 1], got {self.density}")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.loss not in ("logistic", "quadratic"):
            raise ConfigurationError(f"loss must be 'logistic' or 'quadratic', got {self.loss!r}")
        if self.l2 < 0:
            raise ConfigurationError(f"l2 must be >= 0, got {self.l2}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        MirrorMap(self.p)

    @property
    def mirror_map(self) -> MirrorMap:
        return MirrorMap(self.p) if self.strategy == "aims" else MirrorMap.identity()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Problem:
    """Per-device data and losses for a run."""

    losses: List[LogisticLoss | QuadraticLoss]
    shards: List[Optional[Dataset]]
    dataset: Optional[Dataset]
    partition: Optional[List[np.ndarray]]
    dim: int

    def global_loss(self, w) -> float:
        return sum(loss.value(shard, w) for loss, shard in zip(self.losses, self.shards))

    def accuracy(self, w) -> float:
        if self.dataset is None:
            return float("nan")
        return self.losses[0].accuracy(self.dataset, w)


def _seeds(seed: int) -> dict:
    names = ("data", "partition", "topology", "gossip", "devices")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return dict(zip(names, children))


def build_problem(config: RunConfig) -> Problem:
    seeds = _seeds(config.seed)
    if config.loss == "quadratic":
        rng = np.random.default_rng(seeds["data"])
        d = config.dim
        losses, shards = [], []
        for _ in range(config.m):
            A = np.eye(d) + rng.standard_normal((d, d)) / np.sqrt(4 * d)
            target = rng.standard_normal(d)
            losses.append(QuadraticLoss(A, A @ target, grad_clip=config.grad_clip))
            shards.append(None)
        return Problem(losses, shards, None, None, d)
    if config.data_path:
        data = load_csv(config.data_path)
    else:
        data_seed = int(seeds["data"].generate_state(1)[0])
        data = make_synthetic(config.classes, config.dim, config.per_class,
                              config.separation, seed=data_seed)
    part_seed = int(seeds["partition"].generate_state(1)[0])
    parts = dirichlet_partition_indices(data, config.m, config.alpha, seed=part_seed)
    shards = [data.subset(ix) for ix in parts]
    loss = LogisticLoss(data.classes, l2=config.l2, grad_clip=config.grad_clip)
    return Problem([loss] * config.m, shards, data, parts, loss.model_dim(data))


def build_schedule(config: RunConfig) -> GraphSchedule:
    topo_seed = int(_seeds(config.seed)["topology"].generate_state(1)[0])
    return generate_schedule(config.m, config.T, config.density, config.B, seed=topo_seed)


# --- protocol primitives -------------------------------------------------

def aggregate_row(weights, models: Sequence, mmap: MirrorMap) -> np.ndarray:
    """``h^{-1}(sum_j weights_j h(models_j))``: a weighted quasi-arithmetic mean."""
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0):
        raise ProtocolError("mixing weights must be nonnegative")
    if abs(weights.sum() - 1.0) > 1e-10:
        raise ProtocolError(f"mixing weights sum to {weights.sum()!r}, not 1")
    stacked = np.asarray([np.asarray(x, dtype=float) for x in models])
    if stacked.shape[0] != weights.shape[0]:
        raise ShapeError(f"{weights.shape[0]} weights for {stacked.shape[0]} models")
    return mirror.inverse(mmap, weights @ mirror.forward(mmap, stacked))


def gossip_round(states: Sequence[DeviceState], P, mmap: MirrorMap) -> List[np.ndarray]:
    """Intermediate averages ``y_{i,t}``, one :func:`aggregate_row` per device."""
    P = getattr(P, "entries", P)
    if P.shape != (len(states), len(states)):
        raise ShapeError(f"mixing matrix {P.shape} for {len(states)} devices")
    models = [s.w for s in states]
    return [aggregate_row(P[i], models, mmap) for i in range(len(states))]


def mirror_gradient_step(y, grad, eta: float, mmap: MirrorMap,
                         round_index: Optional[int] = None) -> np.ndarray:
    """``h^{-1}(h(y) - eta * grad)``."""
    y = np.asarray(y, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if y.shape != grad.shape:
        raise ShapeError(f"model shape {y.shape} vs gradient shape {grad.shape}")
    if eta <= 0:
        raise ConfigurationError(f"eta must be positive, got {eta}")
    try:
        z = mirror.forward(mmap, y) - eta * grad
        return mirror.inverse(mmap, z)
    except MirrorRangeError as exc:
        where = f" in round {round_index}" if round_index is not None else ""
        raise MirrorRangeError(f"mirror step overflow{where}: {exc}") from exc


def _mix(P: np.ndarray, Z: np.ndarray, rescale: bool) -> np.ndarray:
    if not rescale:
        return P @ Z
    scale = float(np.max(np.abs(Z)))
    if scale == 0.0:
        return P @ Z
    return (P @ (Z / scale)) * scale


# --- run ------------------------------------------------------------------

@dataclass
class Trace:
    """Mirror states, gradients and mixing matrices of every iteration."""

    mirror_states: np.ndarray   # (T+1, m, d)
    gradients: np.ndarray       # (T, m, d)
    matrices: np.ndarray        # (T, m, m)
    eta: float
    p: float


def _trace_digest(arrays: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_trace(trace: Trace, path) -> None:
    arrays = {"mirror_states": trace.mirror_states, "gradients": trace.gradients,
              "matrices": trace.matrices, "eta": np.array(trace.eta), "p": np.array(trace.p)}
    np.savez_compressed(path, digest=np.array(_trace_digest(arrays)), **arrays)


def load_trace(path) -> Trace:
    """Load a trace written by :func:`save_trace`, verifying its digest."""
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in ("mirror_states", "gradients", "matrices", "eta", "p")}
            digest = str(npz["digest"])
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile) as exc:
        raise IntegrityError(f"{path}: unreadable trace ({exc})") from exc
    if _trace_digest(arrays) != digest:
        raise IntegrityError(f"{path}: digest mismatch")
    Z, G, P = arrays["mirror_states"], arrays["gradients"], arrays["matrices"]
    if Z.ndim != 3 or G.shape != (Z.shape[0] - 1,) + Z.shape[1:] or P.shape != (G.shape[0], Z.shape[1], Z.shape[1]):
        raise IntegrityError(f"{path}: inconsistent array shapes")
    return Trace(Z, G, P, float(arrays["eta"]), float(arrays["p"]))


@dataclass
class RunMetrics:
    config: RunConfig
    t: np.ndarray
    loss: np.ndarray
    accuracy: np.ndarray
    consensus_mirror: np.ndarray
    consensus_primal: np.ndarray
    lemma1_bound: np.ndarray
    zeta: float
    repaired: tuple
    effective_density: float
    init_mirror_norms: float
    initial_mirror_mean: np.ndarray
    final_models: np.ndarray
    max_mean_drift: float = 0.0
    wall_time: float = 0.0
    trace: Optional[Trace] = field(default=None, repr=False)

    @property
    def min_loss(self) -> float:
        return float(np.min(self.loss))

    def iterations_to(self, threshold: float) -> int:
        """First ``t`` with ``F(w_bar_t) <= threshold``, or -1."""
        hits = np.flatnonzero(self.loss <= threshold)
        return int(self.t[hits[0]]) if hits.size else -1

    def csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(CSV_COLUMNS) + "\n")
        cols = (self.loss, self.accuracy, self.consensus_mirror,
                self.consensus_primal, self.lemma1_bound)
        for k, t in enumerate(self.t):
            buf.write(str(int(t)) + "," + ",".join(repr(float(c[k])) for c in cols) + "\n")
        return buf.getvalue()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text())

    def summary(self, threshold: Optional[float] = None) -> dict:
        acc = self.accuracy[np.isfinite(self.accuracy)]
        return {
            "config": self.config.as_dict(),
            "min_loss": self.min_loss,
            "final_loss": float(self.loss[-1]),
            "final_accuracy": float(acc[-1]) if acc.size else None,
            "threshold": threshold,
            "iterations_to_threshold": (self.iterations_to(threshold)
                                        if threshold is not None else None),
            "zeta": self.zeta,
            "repaired_rounds": [int(r) + 1 for r in self.repaired],
            "effective_density": self.effective_density,
            "max_mirror_mean_drift": self.max_mean_drift,
            "wall_time": self.wall_time,
        }


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {raw!r}")


class _GradientEvaluator:
    def __init__(self, problem: Problem, config: RunConfig, threads: int):
        self.problem = problem
        self.batch_size = config.batch_size
        self.pool = ThreadPoolExecutor(threads) if threads > 1 else None
        self.rngs = [np.random.default_rng(s)
                     for s in _seeds(config.seed)["devices"].spawn(config.m)]

    def _one(self, i: int, w: np.ndarray, batch) -> np.ndarray:
        shard = self.problem.shards[i]
        if batch is not None:
            shard = shard.subset(batch)
        return self.problem.losses[i].gradient(shard, w)

    def __call__(self, W: np.ndarray, devices=None) -> np.ndarray:
        devices = range(W.shape[0]) if devices is None else devices
        # batches are drawn sequentially so they do not depend on the pool size
        batches = {}
        for i in devices:
            shard = self.problem.shards[i]
            if self.batch_size is not None and shard is not None and len(shard) > self.batch_size:
                batches[i] = self.rngs[i].choice(len(shard), self.batch_size, replace=False)
            else:
                batches[i] = None
        if self.pool is None:
            rows = [self._one(i, W[i], batches[i]) for i in devices]
        else:
            rows = list(self.pool.map(lambda i: self._one(i, W[i], batches[i]), devices))
        return np.asarray(rows)

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def run(config: RunConfig, schedule: Optional[GraphSchedule] = None,
        problem: Optional[Problem] = None, init: Optional[np.ndarray] = None,
        threads: Optional[int] = None) -> RunMetrics:
    """
    Simulate ``config.T`` synchronous iterations and record metrics at
    every ``t = 0..T``.

    Models start at zero unless ``init`` (shape ``(m, d)``) is given or
    ``config.init_scale`` is positive. Loss and accuracy are evaluated at
    the mirror average ``w_bar_t = h^{-1}(mean_i h(w_{i,t}))``.

    Raises
    ------
    ConfigurationError
        Before iteration 0, for an inconsistent config or schedule.
    MirrorRangeError
        If a mirror state overflows; the message names the iteration.
    """
    started = time.perf_counter()
    if problem is None:
        problem = build_problem(config)
    if schedule is None:
        schedule = build_schedule(config)
    if schedule.m != config.m or schedule.T < config.T:
        raise ConfigurationError(
            f"schedule has m={schedule.m}, T={schedule.T}; run needs m={config.m}, T={config.T}")
    if config.strategy == "pairwise" and config.m < 2:
        raise ConfigurationError("pairwise gossip needs m >= 2")
    mmap = config.mirror_map
    m, d, T, eta = config.m, problem.dim, config.T, config.eta
    seeds = _seeds(config.seed)

    if init is not None:
        W0 = np.array(init, dtype=float).reshape(m, d)
    elif config.init_scale > 0:
        W0 = config.init_scale * np.random.default_rng(seeds["data"].spawn(1)[0]).standard_normal((m, d))
    else:
        W0 = np.zeros((m, d))
    try:
        Z = mirror.forward(mmap, W0)
    except MirrorRangeError as exc:
        raise MirrorRangeError(f"initial models, iteration 0: {exc}") from exc

    init_norms = float(np.sum(np.linalg.norm(Z, axis=1)))
    matrices = [mm.entries for mm in schedule.matrices[:T]]
    zeta = min(mm.zeta for mm in schedule.matrices[:T])
    consts = mixing_constants(m, zeta, schedule.B) if config.record_bounds else None

    n = T + 1
    rec = {k: np.empty(n) for k in CSV_COLUMNS[1:]}
    trace_Z = np.empty((n, m, d)) if config.record_trace else None
    trace_G = np.empty((T, m, d)) if config.record_trace else None

    from .analysis import lemma1_bound, TheoryConstants

    bound_consts = None
    if consts is not None and config.strategy == "aims":
        bound_consts = TheoryConstants(vartheta=consts.vartheta, kappa=consts.kappa, zeta=zeta,
                                       B=schedule.B, sigma=mmap.sigma, r=mmap.r,
                                       G_l=config.grad_clip, eta=eta, m=m, T=T)

    def record(t: int, Z: np.ndarray, W: np.ndarray) -> None:
        z_bar = Z.mean(axis=0)
        w_bar = mirror.inverse(mmap, z_bar)
        rec["loss"][t] = problem.global_loss(w_bar)
        rec["accuracy"][t] = problem.accuracy(w_bar)
        rec["consensus_mirror"][t] = np.max(np.linalg.norm(Z - z_bar, axis=1))
        rec["consensus_primal"][t] = np.max(np.linalg.norm(W - w_bar, axis=1))
        rec["lemma1_bound"][t] = (lemma1_bound(t, bound_consts, init_norms)
                                  if bound_consts is not None else math.nan)
        if trace_Z is not None:
            trace_Z[t] = Z

    grads = _GradientEvaluator(problem, config, threads if threads is not None else thread_count())
    gossip_rng = np.random.default_rng(seeds["gossip"])
    W = mirror.inverse(mmap, Z)
    record(0, Z, W)
    max_drift = 0.0
    try:
        for t in range(T):
            P = matrices[t]
            if config.strategy == "aims":
                G = grads(W)
                Zy = _mix(P, Z, config.rescale)
                drift = np.max(np.abs(Zy.mean(axis=0) - Z.mean(axis=0)))
                max_drift = max(max_drift, float(drift / max(1.0, np.max(np.abs(Z)))))
                with np.errstate(over="ignore", invalid="ignore"):
                    Z = Zy - eta * G
                if not np.all(np.isfinite(Z)):
                    raise MirrorRangeError(f"mirror state overflow at iteration {t + 1}")
                W = mirror.inverse(mmap, Z)
            else:
                G = np.zeros((m, d))
                W = pairwise_gossip_round(W, schedule.edge_sets[t], eta, grads, gossip_rng,
                                          grad_out=G)
                Z = W
            if trace_G is not None:
                trace_G[t] = G
            record(t + 1, Z, W)
    finally:
        grads.close()

    trace = None
    if config.record_trace:
        trace = Trace(trace_Z, trace_G, np.asarray(matrices), eta, mmap.p)
    return RunMetrics(
        config=config, t=np.arange(n), loss=rec["loss"], accuracy=rec["accuracy"],
        consensus_mirror=rec["consensus_mirror"], consensus_primal=rec["consensus_primal"],
        lemma1_bound=rec["lemma1_bound"], zeta=zeta, repaired=schedule.repaired,
        effective_density=schedule.effective_density, init_mirror_norms=init_norms,
        initial_mirror_mean=mirror.forward(mmap, W0).mean(axis=0), final_models=W,
        max_mean_drift=max_drift, wall_time=time.perf_counter() - started, trace=trace,
    )


def pairwise_gossip_round(W: np.ndarray, edges, eta: float, gradients, rng: np.random.Generator,
                          grad_out: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Simplified SwarmSGD-style baseline round.

    One edge of the round's graph is drawn uniformly; its endpoints take a
    single local gradient step each and then both adopt the average of the
    two updated models. All other devices idle. An empty edge set is a
    logged no-op. ``gradients(W, devices)`` returns the rows for
    ``devices``.
    """
    W = np.array(W, dtype=float)
    edges = sorted(edges)
    if not edges:
        log.debug("pairwise gossip: empty edge set, round skipped")
        return W
    i, j = edges[int(rng.integers(len(edges)))]
    G = gradients(W, [i, j])
    if grad_out is not None:
        grad_out[i], grad_out[j] = G[0], G[1]
    avg = 0.5 * ((W[i] - eta * G[0]) + (W[j] - eta * G[1]))
    W[i] = avg
    W[j] = avg
    return W


# --- unrolled-formula cross-check ------------------------------------------

@dataclass
class UnrolledCheck:
    ok: bool
    device_deviation: float
    mean_deviation: float
    tolerance: float

    def __bool__(self):
        return self.ok


def unrolled_state_check(trace: Trace, t: int, k: int) -> UnrolledCheck:
    """
    Recompute every mirror state at ``t + 1`` from the state at ``k``
    with the closed-form unrolling of the update

        z_{t+1} = P(t,k) z_k - eta * sum_{tau=k+1}^{t} P(t,tau) g_{tau-1} - eta g_t,

    where ``P(t,s) = P(t) P(t-1) ... P(s)``, and compare it (and its
    network mean) with the recorded trace. Passes iff the deviation is at
    most ``1e-8 * (1 + max |z|)``.
    """
    T = trace.gradients.shape[0]
    if not 0 <= k <= t < T:
        raise ConfigurationError(f"need 0 <= k <= t < T={T} (got k={k}, t={t})")
    Z, G, Ps, eta = trace.mirror_states, trace.gradients, trace.matrices, trace.eta
    m = Z.shape[1]

    def prod(hi: int, lo: int) -> np.ndarray:
        out = np.eye(m)
        for s in range(lo, hi + 1):
            out = Ps[s] @ out
        return out

    predicted = prod(t, k) @ Z[k] - eta * G[t]
    mean_pred = Z[k].mean(axis=0) - eta * G[t].mean(axis=0)
    for tau in range(k + 1, t + 1):
        predicted -= eta * (prod(t, tau) @ G[tau - 1])
        mean_pred -= eta * G[tau - 1].mean(axis=0)
    actual = Z[t + 1]
    tol = 1e-8 * (1.0 + float(np.max(np.abs(actual))))
    dev = float(np.max(np.abs(predicted - actual)))
    mdev = float(np.max(np.abs(mean_pred - actual.mean(axis=0))))
    return UnrolledCheck(dev <= tol and mdev <= tol, dev, mdev, tol)
