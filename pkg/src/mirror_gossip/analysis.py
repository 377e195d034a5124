"""
Closed-form convergence bounds and the inequalities behind them.

Every check here is an upper-bound assertion. A relative slack of 1e-9
is allowed only where exact equality would otherwise be reported as a
floating-point failure.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy import optimize

from . import mirror
from .errors import ConfigurationError, ConvergenceError, DomainError
from .mirror import MirrorMap
from .topology import mixing_constants


@dataclass(frozen=True)
class TheoryConstants:
    vartheta: float
    kappa: float
    zeta: float
    B: int
    sigma: float
    r: float
    G_l: float
    eta: float
    m: int
    T: int

    @classmethod
    def build(cls, *, m: int, zeta: float, B: int, mmap: MirrorMap, G_l: float,
              eta: float, T: int) -> "TheoryConstants":
        c = mixing_constants(m, zeta, B)
        return cls(c.vartheta, c.kappa, zeta, B, mmap.sigma, mmap.r, G_l, eta, m, T)

    @classmethod
    def from_run(cls, metrics) -> "TheoryConstants":
        cfg = metrics.config
        mmap = cfg.mirror_map
        return cls.build(m=cfg.m, zeta=metrics.zeta, B=cfg.B, mmap=mmap,
                         G_l=cfg.grad_clip, eta=cfg.eta, T=cfg.T)


def _consensus_core(t: int, c: TheoryConstants, init_mirror_norms: float) -> float:
    if c.kappa >= 1:
        raise ConfigurationError(f"kappa={c.kappa} >= 1: no geometric mixing")
    return (c.kappa ** (t - 1) * init_mirror_norms
            + c.m * c.eta * c.G_l / (1.0 - c.kappa)
            + 2.0 * c.eta * c.G_l)


def lemma1_bound(t: int, constants: TheoryConstants, init_mirror_norms: float) -> float:
    """
    Bound on ``||h(w_{i,t}) - h(w_bar_t)||``::

        vartheta * (kappa**(t-1) * S0 + m*eta*G/(1-kappa) + 2*eta*G)

    with ``S0 = sum_j ||h(w_{j,0})||``. At ``t = 0`` the expression is
    evaluated as written (``kappa**-1``), which only matters for nonzero
    initial models.
    """
    if t < 0:
        raise ConfigurationError(f"t must be >= 0, got {t}")
    return constants.vartheta * _consensus_core(t, constants, init_mirror_norms)


@dataclass(frozen=True)
class Theorem1Terms:
    consensus: float
    step: float
    init: float

    @property
    def total(self) -> float:
        return self.consensus + self.step + self.init


def theorem1_bound(constants: TheoryConstants, init_mirror_norms: float,
                   w_bar0, x_star, mmap: MirrorMap) -> Theorem1Terms:
    """
    Three-term bound on ``min_t F(w_bar_t) - F(x*)``.

    The first sum runs over ``t = 0..T-1`` exactly as printed, including
    the ``kappa**-1`` factor at ``t = 0``.
    """
    c = constants
    e = 1.0 / (c.r - 1.0)
    s = sum((c.vartheta / c.sigma * _consensus_core(t, c, init_mirror_norms)) ** e
            for t in range(c.T))
    consensus = 2.0 * c.m * c.G_l / c.T * s
    step = c.m * (c.r - 1.0) / c.r * (c.eta * c.G_l ** c.r / c.sigma) ** e
    init = c.m * mirror.bregman(mmap, x_star, w_bar0) / (c.eta * c.T)
    return Theorem1Terms(consensus, step, init)


def corollary_rates(m: int, T: int, r: float, eta="optimal") -> tuple[float, float]:
    """
    Order-of-magnitude loss rate with unit constants.

    With an explicit ``eta`` returns ``m*(eta*m)**(1/(r-1)) + m/(eta*T)``.
    With ``"optimal"`` returns ``(m**(r+1)/T)**(1/r)`` together with the
    step size ``(m * T**(r-1))**(-1/r)`` that balances the two terms; at
    that step size each term equals the optimal rate.
    """
    if m < 1 or T < 1 or r < 2:
        raise ConfigurationError(f"need m, T >= 1 and r >= 2 (got m={m}, T={T}, r={r})")
    if isinstance(eta, str):
        if eta != "optimal":
            raise ConfigurationError(f"eta must be a number or 'optimal', got {eta!r}")
        eta_star = (m * T ** (r - 1)) ** (-1.0 / r)
        return (m ** (r + 1) / T) ** (1.0 / r), eta_star
    if eta <= 0:
        raise ConfigurationError(f"eta must be positive, got {eta}")
    return m * (eta * m) ** (1.0 / (r - 1)) + m / (eta * T), float(eta)


@dataclass(frozen=True)
class SkewReport:
    lhs: float
    rhs: float
    uniform_mean_root: float
    epsilon: float
    holds: bool

    @property
    def excess(self) -> float:
        """``rhs / uniform_mean_root - 1``, i.e. ``epsilon / p``."""
        return self.rhs / self.uniform_mean_root - 1.0


def skew_correction_check(alphas, x, p: float) -> SkewReport:
    """
    Check ``(sum a_i x_i)**(1/p) <= (mean x)**(1/p) * (1 + m*max|a_i - 1/m| / p)``.

    Only the near-uniform regime ``max|a_i - 1/m| <= 1/m`` is admitted.
    """
    a = np.asarray(alphas, dtype=float)
    x = np.asarray(x, dtype=float)
    m = a.size
    if x.shape != a.shape:
        raise DomainError(f"{a.size} weights for {x.size} values")
    if np.any(x <= 0):
        raise DomainError("values must be positive")
    if np.any(a < 0) or abs(a.sum() - 1.0) > 1e-10:
        raise DomainError("weights must be nonnegative and sum to 1")
    dev = float(np.max(np.abs(a - 1.0 / m)))
    if dev > 1.0 / m + 1e-15:
        raise DomainError(f"max |alpha_i - 1/m| = {dev} exceeds 1/m; outside the near-uniform regime")
    if p < 1:
        raise DomainError(f"p must be >= 1, got {p}")
    eps = m * dev
    lhs = float(a @ x) ** (1.0 / p)
    base = float(np.mean(x)) ** (1.0 / p)
    rhs = base * (1.0 + eps / p)
    return SkewReport(lhs, rhs, base, eps, lhs <= rhs * (1 + 1e-12))


@dataclass(frozen=True)
class AmGmReport:
    lhs: float
    rhs: float
    holds: bool


def amgm_sides(m, eta, G_l, sigma, r, delta) -> tuple[float, float]:
    s = m * eta * G_l
    lhs = s * delta
    rhs = ((r - 1.0) * (s ** r / (sigma * r ** (r - 1.0) * m)) ** (1.0 / (r - 1.0))
           + m * sigma / r * delta ** r)
    return lhs, rhs


def weighted_amgm_check(m: float, eta: float, G_l: float, sigma: float, r: float,
                        delta: float) -> AmGmReport:
    """
    ``m*eta*G*delta <= (r-1)*((m*eta*G)**r / (sigma*r**(r-1)*m))**(1/(r-1))
    + m*sigma/r*delta**r`` where ``delta`` is the step between successive
    mirror averages.
    """
    if min(m, eta, G_l, sigma) <= 0 or r < 2 or delta < 0:
        raise DomainError("m, eta, G_l, sigma must be positive, r >= 2, delta >= 0")
    lhs, rhs = amgm_sides(m, eta, G_l, sigma, r, delta)
    return AmGmReport(lhs, rhs, lhs <= rhs * (1 + 1e-9))


def amgm_equality_delta(m, eta, G_l, sigma, r) -> float:
    """The ``delta`` at which both weighted AM-GM terms coincide (equality case)."""
    s = m * eta * G_l
    first = (s ** r / (sigma * r ** (r - 1.0) * m)) ** (1.0 / (r - 1.0))
    return (first * r / (m * sigma)) ** (1.0 / r)


def centralized_oracle(losses: Sequence, shards: Sequence, tolerance: float = 1e-6,
                       max_iter: int = 1_000_000, x0=None) -> tuple[np.ndarray, float]:
    """
    Minimize ``F(w) = sum_i f_i(w)`` to ``||grad F|| <= tolerance``.

    L-BFGS supplies a warm start; backtracking gradient descent then runs
    until the gradient-norm certificate holds. Quadratic problems are
    cross-checked against the normal equations.

    Raises
    ------
    ConvergenceError
        If ``max_iter`` descent steps do not reach the tolerance.
    """
    dim = losses[0].model_dim(shards[0])

    def F(w):
        return sum(l.value(s, w) for l, s in zip(losses, shards))

    def grad(w):
        return sum(l.raw_gradient(s, w) for l, s in zip(losses, shards))

    w = np.zeros(dim) if x0 is None else np.array(x0, dtype=float)
    res = optimize.minimize(lambda v: (F(v), grad(v)), w, jac=True, method="L-BFGS-B",
                            options={"maxiter": 20000, "gtol": tolerance * 1e-2, "ftol": 0.0})
    if np.all(np.isfinite(res.x)) and F(res.x) <= F(w):
        w = res.x
    f, g = F(w), grad(w)
    step = 1.0
    for _ in range(max_iter):
        if np.linalg.norm(g) <= tolerance:
            break
        gg = float(g @ g)
        while True:
            cand = w - step * g
            fc = F(cand)
            if fc <= f - 0.5 * step * gg or step < 1e-20:
                break
            step *= 0.5
        w, f, g = cand, fc, grad(cand)
        step *= 2.0
    else:
        raise ConvergenceError(f"gradient norm {np.linalg.norm(g):.3e} > {tolerance} "
                               f"after {max_iter} iterations")

    if all(hasattr(l, "A") for l in losses):
        H = sum(l.A.T @ l.A for l in losses)
        rhs = sum(l.A.T @ l.b for l in losses)
        closed = np.linalg.lstsq(H, rhs, rcond=None)[0]
        if np.max(np.abs(closed - w)) > 1e-6 * max(1.0, np.max(np.abs(closed))):
            raise ConvergenceError("descent solution disagrees with normal equations")
    return w, float(f)


# --- reports ----------------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)


@dataclass
class TheoryReport:
    constants: dict
    lemma1_bound: List[float]
    theorem1_bound: float
    empirical_gap: float
    checks: List[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def first_failure(self) -> Optional[Check]:
        return next((c for c in self.checks if not c.passed), None)

    def to_dict(self) -> dict:
        return {
            "constants": self.constants,
            "lemma1_bound": self.lemma1_bound,
            "theorem1_bound": self.theorem1_bound,
            "empirical_gap": self.empirical_gap,
            "passed": self.passed,
            "checks": [asdict(c) for c in self.checks],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), default=_jsonable, **kw)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def consensus_bound_check(metrics, constants: Optional[TheoryConstants] = None) -> Check:
    """Measured mirror consensus against the per-``t`` consensus bound, no slack."""
    c = constants or TheoryConstants.from_run(metrics)
    bounds = np.array([lemma1_bound(t, c, metrics.init_mirror_norms) for t in metrics.t])
    slack = bounds - metrics.consensus_mirror
    worst = int(np.argmin(slack))
    return Check("lemma1_consensus", bool(np.all(slack >= 0)), {
        "min_slack": float(slack[worst]), "t": int(metrics.t[worst]),
        "measured": float(metrics.consensus_mirror[worst]), "bound": float(bounds[worst]),
    })


def theory_report(metrics, x_star, F_star: float,
                  constants: Optional[TheoryConstants] = None) -> TheoryReport:
    """Evaluate both bounds on a recorded run and flag each inequality."""
    c = constants or TheoryConstants.from_run(metrics)
    mmap = metrics.config.mirror_map
    w_bar0 = mirror.inverse(mmap, metrics.initial_mirror_mean)
    terms = theorem1_bound(c, metrics.init_mirror_norms, w_bar0, x_star, mmap)
    gap = float(metrics.min_loss - F_star)
    lemma = [lemma1_bound(t, c, metrics.init_mirror_norms) for t in metrics.t]
    checks = [
        consensus_bound_check(metrics, c),
        Check("theorem1", gap <= terms.total, {
            "gap": gap, "bound": terms.total, "consensus_term": terms.consensus,
            "step_term": terms.step, "init_term": terms.init}),
    ]
    return TheoryReport(asdict(c), lemma, terms.total, gap, checks)


# --- randomized inequality suites ---------------------------------------------

def mixing_bound_suite(schedule, max_windows: int = 10, zeta: Optional[float] = None) -> Check:
    """
    Entrywise mixing bound at every window-aligned ``(t, tau)`` with lag
    ``0, B, ..., max_windows*B``. ``zeta`` defaults to the minimum over the
    matrices inside each product.
    """
    mats = [mm.entries for mm in schedule.matrices]
    zetas = [mm.zeta for mm in schedule.matrices]
    m, B, T = schedule.m, schedule.B, schedule.T
    checked, worst = 0, None
    for tau in range(1, T + 1, B):
        prod = np.eye(m)
        s = tau
        for k in range(max_windows + 1):
            t = tau + k * B
            if t > T:
                break
            while s <= t:
                prod = mats[s - 1] @ prod
                s += 1
            z = zeta if zeta is not None else min(zetas[tau - 1:t])
            c = mixing_constants(m, z, B)
            bound = c.vartheta * c.kappa ** (t - tau)
            dev = float(np.max(np.abs(prod - 1.0 / m)))
            checked += 1
            slack = bound - dev
            if worst is None or slack < worst["slack"]:
                worst = {"t": t, "tau": tau, "deviation": dev, "bound": bound, "slack": slack}
            if dev > bound:
                return Check("mixing_bound", False, {"checked": checked, "witness": worst})
    return Check("mixing_bound", True, {"checked": checked, "tightest": worst})


def amgm_sweep(draws: int = 10_000, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    for n in range(draws):
        m = int(rng.integers(1, 65))
        eta = 10 ** rng.uniform(-4, 1)
        G = 10 ** rng.uniform(-2, 1)
        sigma = 10 ** rng.uniform(-5, 0)
        r = rng.uniform(2, 16)
        delta = 10 ** rng.uniform(-6, 2)
        rep = weighted_amgm_check(m, eta, G, sigma, r, delta)
        if not rep.holds:
            return Check("claim1_amgm", False, {"draws": n + 1, "witness": {
                "m": m, "eta": eta, "G_l": G, "sigma": sigma, "r": r, "delta": delta,
                "lhs": rep.lhs, "rhs": rep.rhs}})
    return Check("claim1_amgm", True, {"draws": draws})


def skew_sweep(draws: int = 10_000, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    for n in range(draws):
        m = int(rng.integers(2, 33))
        p = rng.uniform(1, 15)
        x = 10 ** rng.uniform(-3, 3, size=m)
        # perturb uniform weights while staying inside max|a - 1/m| <= 1/m
        e = rng.uniform(-1, 1, size=m)
        e -= e.mean()
        scale = rng.uniform(0, 1) / (m * max(np.max(np.abs(e)), 1e-300))
        a = 1.0 / m + scale * e
        a = np.clip(a, 0, None)
        a /= a.sum()
        if np.max(np.abs(a - 1.0 / m)) > 1.0 / m:
            continue
        rep = skew_correction_check(a, x, p)
        if not rep.holds:
            return Check("skew_correction", False, {"draws": n + 1, "witness": {
                "alphas": a.tolist(), "x": x.tolist(), "p": p, "lhs": rep.lhs, "rhs": rep.rhs}})
    return Check("skew_correction", True, {"draws": draws})


def uniform_convexity_suite(powers: Sequence[float], samples: int = 10_000,
                            seed: int = 0) -> Check:
    for p in powers:
        cert = mirror.certify_uniform_convexity(MirrorMap(p), samples, seed)
        if not cert.ok:
            return Check("uniform_convexity", False, {"p": p, "witness": cert.witness})
    return Check("uniform_convexity", True, {"powers": list(powers), "samples": samples})
