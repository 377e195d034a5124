"""
Mirror maps for aggregation in the mirror space.

A mirror map ``h`` is the gradient of a separable potential

.. math::
    \\phi(x) = \\sum_k \\frac{|x_k|^{p+1}}{p+1},
    \\qquad h(x)_k = \\operatorname{sign}(x_k) |x_k|^p,

so that averaging ``h(x)`` and mapping back gives a weighted power mean.
``p = 1`` is the identity map and recovers plain linear averaging.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, MirrorRangeError


@dataclass(frozen=True)
class MirrorMap:
    """
    Coordinatewise signed power map with its uniform-convexity constants.

    Parameters
    ----------
    p : float
        Power of the map, ``p >= 1``. ``p = 1`` is the identity.
    sigma : float, optional
        Uniform convexity coefficient. Defaults to ``2**(1 - p)``.
    r : float, optional
        Uniform convexity degree. Defaults to ``p + 1``.
    """

    p: float = 1.0
    sigma: Optional[float] = None
    r: Optional[float] = None

    def __post_init__(self):
        if not np.isfinite(self.p) or self.p < 1:
            raise ConfigurationError(f"mirror power p must be >= 1, got {self.p}")
        if self.sigma is None:
            object.__setattr__(self, "sigma", 2.0 ** (1.0 - self.p))
        if self.r is None:
            object.__setattr__(self, "r", self.p + 1.0)
        if self.sigma <= 0:
            raise ConfigurationError(f"sigma must be positive, got {self.sigma}")
        if self.r < 2:
            raise ConfigurationError(f"r must be >= 2, got {self.r}")

    @classmethod
    def identity(cls) -> "MirrorMap":
        return cls(1.0)

    @classmethod
    def signed_power(cls, p: float, sigma: Optional[float] = None) -> "MirrorMap":
        return cls(float(p), sigma=sigma)

    @property
    def is_identity(self) -> bool:
        return self.p == 1.0

    @property
    def kind(self) -> str:
        return "Identity" if self.is_identity else f"SignedPower({self.p:g})"


def _check_finite(values: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        idx = np.argwhere(bad)[0]
        coord = tuple(int(i) for i in idx) if values.ndim > 1 else int(idx[0])
        raise MirrorRangeError(f"{what}: coordinate {coord} is not finite")


def forward(mmap: MirrorMap, x) -> np.ndarray:
    """Apply ``h``: ``sign(x) * |x|**p`` elementwise.

    Raises
    ------
    MirrorRangeError
        If ``|x_k|**p`` overflows; the message names the coordinate.
    """
    x = np.asarray(x, dtype=float)
    if mmap.is_identity:
        _check_finite(x, "mirror forward input")
        return x.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.sign(x) * np.abs(x) ** mmap.p
    bad = ~np.isfinite(out)
    if bad.any():
        idx = np.argwhere(bad)[0]
        coord = tuple(int(i) for i in idx) if out.ndim > 1 else int(idx[0])
        raise MirrorRangeError(
            f"|x|**p overflows at coordinate {coord} (p={mmap.p:g}, "
            f"x={x[tuple(idx)]!r}); p is too large for unscaled values"
        )
    return out


def inverse(mmap: MirrorMap, y) -> np.ndarray:
    """Apply ``h^{-1}``: ``sign(y) * |y|**(1/p)`` elementwise."""
    y = np.asarray(y, dtype=float)
    _check_finite(y, "mirror inverse input")
    if mmap.is_identity:
        return y.copy()
    return np.sign(y) * np.abs(y) ** (1.0 / mmap.p)


def potential_terms(mmap: MirrorMap, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore"):
        terms = np.abs(x) ** (mmap.p + 1.0) / (mmap.p + 1.0)
    if not np.all(np.isfinite(terms)):
        raise MirrorRangeError(f"potential overflows for p={mmap.p:g}")
    return terms


def potential(mmap: MirrorMap, x) -> float:
    """Separable potential ``sum_k |x_k|**(p+1) / (p+1)``; its gradient is ``h``."""
    return float(np.sum(potential_terms(mmap, x)))


def bregman(mmap: MirrorMap, x, y) -> float:
    """
    Bregman divergence ``phi(x) - phi(y) - <h(y), x - y>``.

    Evaluated per coordinate and clamped at zero there, since every
    one-dimensional term is nonnegative and cancellation can otherwise
    leave tiny negative residues.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    terms = potential_terms(mmap, x) - potential_terms(mmap, y) - forward(mmap, y) * (x - y)
    return float(np.sum(np.maximum(terms, 0.0)))


def lr_norm(v, r: float) -> float:
    """The l_r norm, the norm in which the separable potential is uniformly convex."""
    v = np.abs(np.asarray(v, dtype=float))
    scale = v.max(initial=0.0)
    if scale == 0.0:
        return 0.0
    return float(scale * np.sum((v / scale) ** r) ** (1.0 / r))


@dataclass
class ConvexityCertificate:
    """Outcome of :func:`certify_uniform_convexity`; truthy iff no pair violated."""

    ok: bool
    samples: int
    min_slack: float
    witness: Optional[dict] = field(default=None)

    def __bool__(self):
        return self.ok


_CERT_DIMS = (1, 2, 8)


def uniform_convexity_slack(mmap: MirrorMap, x, y) -> tuple[float, float]:
    """Return ``(D(x, y) - sigma/r * ||x - y||_r**r, scale)`` for one pair."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    div = bregman(mmap, x, y)
    rhs = mmap.sigma / mmap.r * lr_norm(x - y, mmap.r) ** mmap.r
    scale = max(1.0, potential(mmap, x) + potential(mmap, y)
                + abs(float(np.dot(forward(mmap, y), x - y))))
    return div - rhs, scale


def certify_uniform_convexity(mmap: MirrorMap, sample_count: int = 1000,
                              seed: int = 0) -> ConvexityCertificate:
    """
    Check ``D(x, y) >= sigma / r * ||x - y||**r`` on seeded random pairs.

    Pairs are uniform on ``[-10, 10]**d`` with ``d`` cycling through 1, 2
    and 8. The norm is the l_r norm (``r = p + 1``). A relative slack of
    1e-9 is granted only against false negatives at exact equality
    (``p = 1`` is tight everywhere).
    """
    if sample_count < 1:
        raise ConfigurationError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    min_slack = np.inf
    for n in range(sample_count):
        d = _CERT_DIMS[n % len(_CERT_DIMS)]
        x = rng.uniform(-10.0, 10.0, size=d)
        y = rng.uniform(-10.0, 10.0, size=d)
        slack, scale = uniform_convexity_slack(mmap, x, y)
        rel = slack / scale
        min_slack = min(min_slack, rel)
        if rel < -1e-9:
            return ConvexityCertificate(
                ok=False, samples=n + 1, min_slack=rel,
                witness={"x": x.tolist(), "y": y.tolist(), "slack": slack},
            )
    return ConvexityCertificate(ok=True, samples=sample_count, min_slack=float(min_slack))
