"""Problem model: the integral-equation instance and its operator analytics.

An instance is ``y = f + S[y]`` with ``S[g](t) = int K(t,s) g(s) mu(ds)``
over a probability measure ``mu`` on an axis-aligned box ``T``.  This
module computes the quantities the Monte-Carlo method is driven by:

* the envelope ``R(s) >= sup_t |K(t,s)|`` and the natural semi-distance
  ``d(t,s) = sup_x |K(t,x)-K(s,x)| / R(x)``,
* operator norms ``||S||``, ``||U||`` (``U`` has kernel ``K^2``),
* power norms ``r_m(L) = ||L^m||`` for ``m = 1..m_max`` together with a
  geometric-decay fit ``r_m <= C * m^Delta * beta^m``.

Deterministic integrals use composite midpoint quadrature with
``QUAD_NODES`` nodes per dimension; midpoint avoids endpoint evaluation so
merely-continuous kernels are safe.  Points are always arrays of shape
``(n, dim)`` and kernels/forcings are vectorized over a trailing
coordinate axis: ``kernel(t, s)`` with ``t, s`` of shape ``(..., dim)``
returns shape ``(...)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from .errors import ContractivityError
from .rng import TAG_DISTANCE, TAG_NORM_MC, substream

QUAD_NODES = 512         # nodes per dimension for deterministic integrals
DISTANCE_SAMPLE = 1000   # sample size for the custom-table distance


@dataclass(frozen=True)
class DomainSpec:
    """Axis-aligned box domain with a normalized measure.

    ``grid_points_per_dim`` sets the resolution of output grids and of the
    covariance grids used for confidence bands.
    """

    dim: int
    bounds: tuple[tuple[float, float], ...]
    grid_points_per_dim: int = 101

    def __post_init__(self):
        if self.dim < 1 or len(self.bounds) != self.dim:
            raise ValueError(f"bounds must have one (lo, hi) pair per dimension (dim={self.dim})")
        for lo, hi in self.bounds:
            if not lo < hi:
                raise ValueError(f"interval [{lo}, {hi}] must have lower < upper")
        if self.grid_points_per_dim < 1 or self.grid_points_per_dim ** self.dim < 2:
            raise ValueError("total grid size must be at least 2")

    @property
    def lows(self) -> np.ndarray:
        return np.array([b[0] for b in self.bounds])

    @property
    def highs(self) -> np.ndarray:
        return np.array([b[1] for b in self.bounds])

    @property
    def lengths(self) -> np.ndarray:
        return self.highs - self.lows

    @property
    def diameter(self) -> float:
        return float(np.sqrt(np.sum(self.lengths ** 2)))

    def grid(self, points_per_dim: Optional[int] = None) -> np.ndarray:
        """Full tensor output grid, shape (g^dim, dim), endpoints included."""
        g = points_per_dim or self.grid_points_per_dim
        axes = [np.linspace(lo, hi, g) for lo, hi in self.bounds]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True)
class MeasureSampler:
    """Sampler for the probability measure mu on the domain box.

    ``uniform-on-box`` is the normalized Lebesgue measure.  For
    ``product-inverse-cdf`` each coordinate is drawn by pushing a uniform
    variate through a monotone inverse CDF mapping [0,1] onto the
    coordinate range.  The same maps drive the deterministic quadrature,
    so MC draws and quadrature integrate the identical measure.
    """

    kind: str = "uniform-on-box"
    inverse_cdfs: Optional[tuple[Callable[[np.ndarray], np.ndarray], ...]] = None
    seed_stream_id: int = 0

    def __post_init__(self):
        if self.kind not in ("uniform-on-box", "product-inverse-cdf"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.kind == "product-inverse-cdf" and not self.inverse_cdfs:
            raise ValueError("product-inverse-cdf requires inverse_cdfs")

    def _map(self, u: np.ndarray, domain: DomainSpec) -> np.ndarray:
        if self.kind == "uniform-on-box":
            return domain.lows + u * domain.lengths
        cols = [np.asarray(self.inverse_cdfs[i](u[..., i])) for i in range(domain.dim)]
        return np.stack(cols, axis=-1)

    def sample(self, domain: DomainSpec, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n mu-distributed points, shape (n, dim)."""
        return self._map(rng.random((n, domain.dim)), domain)

    def quad_nodes(self, domain: DomainSpec, nodes_per_dim: int = QUAD_NODES) -> tuple[np.ndarray, float]:
        """Midpoint nodes (N, dim) and the common weight 1/N for integrating
        against mu (exact-in-structure via the inverse-transform map)."""
        mid = (np.arange(nodes_per_dim) + 0.5) / nodes_per_dim
        mesh = np.meshgrid(*([mid] * domain.dim), indexing="ij")
        u = np.stack([m.ravel() for m in mesh], axis=-1)
        return self._map(u, domain), 1.0 / u.shape[0]


@dataclass(frozen=True)
class Metric:
    """Declared form of the natural semi-distance d(t,s).

    kind "holder":    d = scale * |t-s|^exponent
    kind "log-power": d = scale * min(|log|t-s||^-exponent, 1)
    kind "custom-table": d estimated by sampling |K(t,x)-K(s,x)| / R(x)
    """

    kind: str
    exponent: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("holder", "log-power", "custom-table"):
            raise ValueError(f"unknown metric kind {self.kind!r}")


class Fit(NamedTuple):
    """Least-squares fit r_m <= C * m^delta * beta^m."""

    C: float
    delta: float
    beta: float


@dataclass
class ProblemSpec:
    """The equation being solved: domain, measure, kernel, forcing, and the
    analytic envelopes/metrics the error theory needs."""

    domain: DomainSpec
    mu: MeasureSampler
    kernel: Callable[[np.ndarray, np.ndarray], np.ndarray]
    forcing: Callable[[np.ndarray], np.ndarray]
    envelope_R: Callable[[np.ndarray], np.ndarray]
    metric: Metric
    kernel_dt: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    forcing_dt: Optional[Callable[[np.ndarray], np.ndarray]] = None
    envelope_Q: Optional[Callable[[np.ndarray], np.ndarray]] = None
    f_norm: Optional[float] = None
    # Closed-form power norms for registry kernels: analytic_norms(m, which)
    # with which in {"S", "U"}; None means "use quadrature or MC".
    analytic_norms: Optional[Callable[[int, str], float]] = None
    name: str = "custom"

    def __post_init__(self):
        if self.f_norm is None:
            grid = self.domain.grid(max(self.domain.grid_points_per_dim, 257) if self.domain.dim == 1 else None)
            self.f_norm = float(np.max(np.abs(np.asarray(self.forcing(grid), dtype=float))))
        if not np.isfinite(self.f_norm):
            raise ValueError("f_norm must be finite")


@dataclass(frozen=True)
class PowerNormTable:
    """Power norms r_m(S), r_m(U) for m = 1..m_max plus the decay fits.

    ``fit`` is the fit of r_m(U) (drives allocation and the variance
    theory); ``fit_s`` is the fit of r_m(S) (drives truncation).
    """

    m_max: int
    r_S: np.ndarray
    r_U: np.ndarray
    fit: Fit
    fit_s: Fit
    estimation_method: str


# ---------------------------------------------------------------------------
# quadrature helpers


def _norm_eval_points(spec: ProblemSpec, nodes: np.ndarray) -> np.ndarray:
    """Points over which operator-norm suprema are taken.

    In 1-D this is the quadrature node set plus the box endpoints: the
    nodes keep r_1 on the same path as the quadrature integral (and make
    the discrete power-norm sequence exactly submultiplicative), the
    endpoints catch suprema of monotone kernels.  Above 1-D the output
    grid is used.
    """
    if spec.domain.dim == 1:
        ends = np.array([[spec.domain.bounds[0][0]], [spec.domain.bounds[0][1]]])
        pts = np.concatenate([nodes, ends], axis=0)
        return np.unique(pts, axis=0)
    return spec.domain.grid()


def _check_finite(vals: np.ndarray, where: str, pts: np.ndarray) -> None:
    if np.all(np.isfinite(vals)):
        return
    bad = np.argwhere(~np.isfinite(vals))[0]
    raise ValueError(f"non-finite kernel value during {where} at node index {tuple(bad)}, "
                     f"point {pts[bad[-1] % len(pts)]}")


def _kernel_on(spec: ProblemSpec, which: str, t: np.ndarray, s: np.ndarray) -> np.ndarray:
    k = np.asarray(spec.kernel(t, s), dtype=float)
    if which == "U":
        k = k * k
    return k


def operator_norm(spec: ProblemSpec, which: str = "S") -> float:
    """Sup-norm of the integral operator: sup_t int |K(t,s)| mu(ds)
    (kernel K^2 for which="U"), by composite midpoint quadrature."""
    if which not in ("S", "U"):
        raise ValueError("which must be 'S' or 'U'")
    nodes, w = spec.mu.quad_nodes(spec.domain)
    eval_pts = _norm_eval_points(spec, nodes)
    best = 0.0
    chunk = max(1, int(2e6) // max(1, nodes.shape[0]))
    for i in range(0, eval_pts.shape[0], chunk):
        tb = eval_pts[i:i + chunk]
        vals = _kernel_on(spec, which, tb[:, None, :], nodes[None, :, :])
        _check_finite(vals, f"operator_norm({which})", nodes)
        best = max(best, float(np.max(np.abs(vals).sum(axis=1) * w)))
    return best


def _power_norms_quadrature(spec: ProblemSpec, m_max: int, which: str) -> np.ndarray:
    """r_m via matrix powers of the discretized kernel on the quad grid.

    With nodes x_k and weight w, G_1[i,l] = K(t_i, x_l) on the norm-eval
    grid and G_{m+1} = G_m @ (w * K(x, x)); then
    r_m = max_i sum_l |G_m[i,l]| * w, the sup-row-sum of the iterated
    kernel.  The absolute value sits outside the chain, so this is the
    true operator norm of S^m, not a product bound.
    """
    nodes, w = spec.mu.quad_nodes(spec.domain)
    eval_pts = _norm_eval_points(spec, nodes)
    Mq = _kernel_on(spec, which, nodes[:, None, :], nodes[None, :, :])
    _check_finite(Mq, f"power_norms({which})", nodes)
    G = _kernel_on(spec, which, eval_pts[:, None, :], nodes[None, :, :])
    _check_finite(G, f"power_norms({which})", eval_pts)
    P = w * Mq
    out = np.empty(m_max)
    for m in range(m_max):
        out[m] = float(np.max(np.abs(G).sum(axis=1) * w))
        if m + 1 < m_max:
            G = G @ P
    return out


def _power_norms_mc(spec: ProblemSpec, m_max: int, which: str, n: int = 4096) -> np.ndarray:
    """MC upper estimate: the entrywise-absolute chain product dominates
    the absolute iterated kernel, so its dependent-trial average over a
    grid of t upper-estimates r_m (up to MC noise)."""
    rng = substream(spec.mu.seed_stream_id, TAG_NORM_MC)
    grid = spec.domain.grid()
    out = np.empty(m_max)
    for m in range(1, m_max + 1):
        xs = spec.mu.sample(spec.domain, n * m, rng).reshape(n, m, spec.domain.dim)
        chain = np.ones(n)
        for i in range(m - 1):
            chain *= np.abs(_kernel_on(spec, which, xs[:, i, :], xs[:, i + 1, :]))
        first = np.abs(_kernel_on(spec, which, grid[:, None, :], xs[None, :, 0, :]))
        out[m - 1] = float(np.max(first @ chain) / n)
    return out


def _fit_decay(r: np.ndarray, m_lo: int = 2) -> Fit:
    """Log-linear least squares of r_m against C * m^delta * beta^m over
    m in [m_lo, m_max]; m=1 is excluded as routinely off-trend."""
    m = np.arange(1, len(r) + 1)
    sel = m >= min(m_lo, len(r))
    ms, rs = m[sel], r[sel]
    if np.any(rs <= 0):
        raise ValueError("power norms must be positive to fit a decay law")
    y = np.log(rs)
    if len(ms) >= 3:
        X = np.stack([np.ones_like(ms, dtype=float), np.log(ms), ms.astype(float)], axis=1)
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        logc, delta, logbeta = coef
    else:
        X = np.stack([np.ones_like(ms, dtype=float), ms.astype(float)], axis=1)
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        logc, logbeta = coef
        delta = 0.0
    return Fit(C=float(np.exp(logc)), delta=float(delta), beta=float(np.exp(logbeta)))


def power_norms(spec: ProblemSpec, m_max: int = 12, method: str = "quadrature") -> PowerNormTable:
    """Power-norm table r_1..r_{m_max} for S and U with decay fits.

    Raises ContractivityError when the fitted decay rate of r_m(U) is
    >= 1: the spectral-radius hypothesis the whole method rests on fails.
    """
    if m_max < 2:
        raise ValueError("m_max must be >= 2")
    if method == "analytic":
        if spec.analytic_norms is None:
            raise ValueError("spec has no analytic norm registry; use method='quadrature'")
        r_S = np.array([spec.analytic_norms(m, "S") for m in range(1, m_max + 1)])
        r_U = np.array([spec.analytic_norms(m, "U") for m in range(1, m_max + 1)])
    elif method == "quadrature":
        if spec.domain.dim != 1 and m_max > 1:
            raise ValueError("quadrature power norms need dim=1; use method='mc'")
        if m_max > 12:
            raise ValueError("quadrature power norms are desk-scale: m_max <= 12")
        r_S = _power_norms_quadrature(spec, m_max, "S")
        r_U = _power_norms_quadrature(spec, m_max, "U")
    elif method == "mc":
        r_S = _power_norms_mc(spec, m_max, "S")
        r_U = _power_norms_mc(spec, m_max, "U")
    else:
        raise ValueError(f"unknown method {method!r}")

    fit_u = _fit_decay(r_U)
    fit_s = _fit_decay(r_S)
    if fit_u.beta >= 1.0:
        raise ContractivityError(
            f"fitted decay rate of r_m(U) is {fit_u.beta:.6f} >= 1; spectral radius not certified < 1")
    return PowerNormTable(m_max=m_max, r_S=r_S, r_U=r_U, fit=fit_u, fit_s=fit_s,
                          estimation_method=method)


def natural_distance(spec: ProblemSpec, t, s) -> float:
    """Natural semi-distance d(t,s) between two parameter points."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    s = np.atleast_1d(np.asarray(s, dtype=float))
    r = float(np.sqrt(np.sum((t - s) ** 2)))
    kind = spec.metric.kind
    if kind == "holder":
        return spec.metric.scale * r ** spec.metric.exponent
    if kind == "log-power":
        if r == 0.0:
            return 0.0
        logr = abs(np.log(r))
        if logr == 0.0:
            return spec.metric.scale
        return spec.metric.scale * min(logr ** (-spec.metric.exponent), 1.0)
    # custom-table: sampled sup of kernel increments over the envelope
    rng = substream(spec.mu.seed_stream_id, TAG_DISTANCE)
    xs = spec.mu.sample(spec.domain, DISTANCE_SAMPLE, rng)
    kt = np.asarray(spec.kernel(t[None, :], xs), dtype=float)
    ks = np.asarray(spec.kernel(s[None, :], xs), dtype=float)
    R = np.asarray(spec.envelope_R(xs), dtype=float)
    good = R > 0
    if not np.any(good):
        return 0.0
    return float(np.max(np.abs(kt[good] - ks[good]) / R[good]))
