"""
Dynamic communication graphs and doubly stochastic mixing matrices.

Vertices are 0-based internally; the text format and user-facing round
indices of :func:`product_mixing_check` follow the 1-based convention.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import FrozenSet, List, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError

log = logging.getLogger(__name__)

Edge = Tuple[int, int]


def _norm_edge(i: int, j: int) -> Edge:
    if i == j:
        raise ConfigurationError(f"self-loop on vertex {i}")
    return (i, j) if i < j else (j, i)


def is_connected(m: int, edges) -> bool:
    """Union-find connectivity test on vertices ``0..m-1``."""
    parent = list(range(m))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    components = m
    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            components -= 1
    return components <= 1


@dataclass(frozen=True)
class MixingMatrix:
    entries: np.ndarray
    zeta: float

    @property
    def m(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class MixingConstants:
    vartheta: float
    kappa: float


@dataclass(frozen=True)
class GraphSchedule:
    """
    Per-round undirected edge sets with a ``B``-round connectivity window.

    ``edge_sets[t]`` is the graph used at engine iteration ``t`` (round
    ``t + 1`` in 1-based notation). ``repaired`` lists 0-based rounds that
    received an injected spanning tree.
    """

    m: int
    edge_sets: Tuple[FrozenSet[Edge], ...]
    B: int = 1
    density: float = 1.0
    seed: int = 0
    repaired: Tuple[int, ...] = field(default=())

    @property
    def T(self) -> int:
        return len(self.edge_sets)

    @cached_property
    def matrices(self) -> Tuple[MixingMatrix, ...]:
        return tuple(metropolis_weights(e, self.m) for e in self.edge_sets)

    @cached_property
    def zeta(self) -> float:
        """Run-wide minimum positive mixing entry."""
        return min(mm.zeta for mm in self.matrices)

    def windows(self):
        for start in range(0, self.T, self.B):
            yield start, min(start + self.B, self.T)

    def window_connected(self) -> bool:
        return all(
            is_connected(self.m, itertools.chain.from_iterable(self.edge_sets[a:b]))
            for a, b in self.windows()
        )

    @property
    def effective_density(self) -> float:
        n_pairs = self.m * (self.m - 1) / 2
        if n_pairs == 0:
            return 1.0
        return float(np.mean([len(e) for e in self.edge_sets]) / n_pairs)

    def save(self, path) -> None:
        """Write the line-oriented text format (1-based vertices)."""
        lines = [f"{self.m} {self.T} {self.B} {self.density!r} {self.seed}"]
        if self.repaired:
            lines.append("# repaired " + " ".join(str(t + 1) for t in self.repaired))
        for edges in self.edge_sets:
            lines.append(" ".join(f"{i + 1}-{j + 1}" for i, j in sorted(edges)))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "GraphSchedule":
        raw = Path(path).read_text().splitlines()
        if not raw:
            raise ConfigurationError(f"{path}: empty topology file")
        try:
            m_s, T_s, B_s, dens_s, seed_s = raw[0].split()
            m, T, B, density, seed = int(m_s), int(T_s), int(B_s), float(dens_s), int(seed_s)
        except ValueError as exc:
            raise ConfigurationError(f"{path}: bad header {raw[0]!r}") from exc
        repaired: List[int] = []
        rounds: List[FrozenSet[Edge]] = []
        for line in raw[1:]:
            if line.startswith("#"):
                tokens = line[1:].split()
                if tokens and tokens[0] == "repaired":
                    repaired.extend(int(t) - 1 for t in tokens[1:])
                continue
            edges = set()
            for tok in line.split():
                a, b = tok.split("-")
                i, j = int(a) - 1, int(b) - 1
                if not (0 <= i < m and 0 <= j < m):
                    raise ConfigurationError(f"{path}: edge {tok} outside 1..{m}")
                edges.add(_norm_edge(i, j))
            rounds.append(frozenset(edges))
        if len(rounds) != T:
            raise ConfigurationError(f"{path}: header says T={T}, found {len(rounds)} rounds")
        return cls(m, tuple(rounds), B=B, density=density, seed=seed, repaired=tuple(repaired))


def _random_spanning_tree(m: int, rng: np.random.Generator) -> set:
    order = rng.permutation(m)
    tree = set()
    for k in range(1, m):
        parent = order[rng.integers(0, k)]
        tree.add(_norm_edge(int(order[k]), int(parent)))
    return tree


def generate_schedule(m: int, T: int, density: float, B: int = 1, seed: int = 0,
                      repair: bool = True) -> GraphSchedule:
    """
    Sample ``round(density * m(m-1)/2)`` edges uniformly per round.

    Every aligned window of ``B`` rounds must have a connected union; a
    window that does not gets a random spanning tree merged into its last
    round. With ``repair=False`` a disconnected window is an error instead.
    A density that rounds to zero links leaves every sampled round empty,
    so each window then consists of its injected tree alone.
    """
    if m < 1 or T < 1 or B < 1:
        raise ConfigurationError(f"need m >= 1, T >= 1, B >= 1 (got m={m}, T={T}, B={B})")
    if not 0 < density <= 1:
        raise ConfigurationError(f"density must lie in (0, 1], got {density}")
    if m == 1:
        return GraphSchedule(1, (frozenset(),) * T, B=B, density=density, seed=seed)
    pairs = list(itertools.combinations(range(m), 2))
    n_edges = int(round(density * len(pairs)))
    if n_edges == 0 and not repair:
        raise ConfigurationError(
            f"density={density} gives zero links per round for m={m}; "
            "no schedule can be window-connected without repair"
        )
    rng = np.random.default_rng(seed)
    rounds = []
    for _ in range(T):
        chosen = rng.choice(len(pairs), size=n_edges, replace=False)
        rounds.append({pairs[k] for k in sorted(chosen)})
    repaired = []
    for start in range(0, T, B):
        stop = min(start + B, T)
        if is_connected(m, itertools.chain.from_iterable(rounds[start:stop])):
            continue
        if not repair:
            raise ConfigurationError(f"rounds {start + 1}..{stop} are not connected")
        rounds[stop - 1] |= _random_spanning_tree(m, rng)
        repaired.append(stop - 1)
    if repaired:
        log.info("injected spanning trees into %d of %d windows", len(repaired),
                 -(-T // B))
    return GraphSchedule(m, tuple(frozenset(r) for r in rounds), B=B,
                         density=density, seed=seed, repaired=tuple(repaired))


def metropolis_weights(edges, m: int) -> MixingMatrix:
    """
    Metropolis mixing matrix: ``P_ij = 1 / (1 + max(deg_i, deg_j))`` on
    edges, the remaining mass on the diagonal.
    """
    P = np.zeros((m, m))
    deg = np.zeros(m, dtype=int)
    edges = [_norm_edge(int(i), int(j)) for i, j in edges]
    for i, j in edges:
        deg[i] += 1
        deg[j] += 1
    for i, j in edges:
        w = 1.0 / (1.0 + max(deg[i], deg[j]))
        P[i, j] = P[j, i] = w
    np.fill_diagonal(P, 0.0)
    np.fill_diagonal(P, 1.0 - P.sum(axis=1))
    zeta = float(P[P > 0].min())
    return MixingMatrix(P, zeta)


def mixing_constants(m: int, zeta: float, B: int) -> MixingConstants:
    """Geometric mixing constants ``(1 - zeta/4m^2)^-2`` and ``(1 - zeta/4m^2)^(1/B)``."""
    if not 0 < zeta <= 1:
        raise ConfigurationError(f"zeta must lie in (0, 1], got {zeta}; kappa would be >= 1")
    if m < 1 or B < 1:
        raise ConfigurationError(f"need m >= 1 and B >= 1 (got m={m}, B={B})")
    base = 1.0 - zeta / (4.0 * m * m)
    return MixingConstants(vartheta=base ** -2.0, kappa=base ** (1.0 / B))


@dataclass(frozen=True)
class MixingReport:
    t: int
    tau: int
    deviation: float
    bound: float
    holds: bool


def product_matrix(matrices: Sequence[np.ndarray], t: int, tau: int) -> np.ndarray:
    """``P(t) P(t-1) ... P(tau)`` for 1-based rounds ``tau <= t``."""
    m = matrices[0].shape[0]
    out = np.eye(m)
    for s in range(tau, t + 1):
        out = matrices[s - 1] @ out
    return out


def product_mixing_check(schedule: GraphSchedule, t: int, tau: int,
                         zeta: float | None = None) -> MixingReport:
    """Compare ``max |P(t, tau)_ij - 1/m|`` against ``vartheta * kappa**(t - tau)``."""
    if not 1 <= tau <= t <= schedule.T:
        raise ConfigurationError(f"need 1 <= tau <= t <= T (got tau={tau}, t={t})")
    mats = [mm.entries for mm in schedule.matrices]
    if zeta is None:
        zeta = min(mm.zeta for mm in schedule.matrices[tau - 1:t])
    prod = product_matrix(mats, t, tau)
    deviation = float(np.max(np.abs(prod - 1.0 / schedule.m)))
    consts = mixing_constants(schedule.m, zeta, schedule.B)
    bound = consts.vartheta * consts.kappa ** (t - tau)
    return MixingReport(t, tau, deviation, bound, deviation <= bound)
