"""Monte-Carlo engines built on the dependent-trial principle.

One set of random tuples is drawn per Neumann term and reused across
every parameter point t, so each estimate is a continuous random field
in t and uniform-norm error analysis applies.  Draws come from per-term
counter-based substreams and are consumed in fixed block order, making
every estimate bit-reproducible for a given seed and independent of the
evaluation grid.

Per-term first and second moments are accumulated with merged
(Welford-style) block co-moments, so plug-in covariance estimation never
materializes the tuples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .allocation import BudgetAllocation, counts_from_weights
from .errors import BudgetError, ContractivityError, UnsupportedDerivative
from .neumann import TruncationPlan, _as_points
from .problem import DomainSpec, MeasureSampler, PowerNormTable, ProblemSpec, operator_norm
from .rng import TAG_DERIVATIVE, TAG_GEOMETRIC, TAG_INTEGRAL, TAG_SOLVE, substream

BLOCK_REPLICATES = 16384
_FD_STEP = 1e-5  # central-difference step for a missing forcing derivative


@dataclass
class TermMoments:
    """Streaming first/second moments of one term's per-tuple value field."""

    m: int
    theta: float
    count: int = 0
    mean: Optional[np.ndarray] = None
    m2_diag: Optional[np.ndarray] = None
    m2_full: Optional[np.ndarray] = None

    def merge_block(self, vals: np.ndarray, full: bool) -> None:
        """Fold one (grid, block) slab of per-tuple values into the running
        moments; merge order is the caller's block order."""
        nb = vals.shape[1]
        mean_b = vals.mean(axis=1)
        centered = vals - mean_b[:, None]
        diag_b = np.einsum("gi,gi->g", centered, centered)
        full_b = centered @ centered.T if full else None
        if self.count == 0:
            self.count, self.mean, self.m2_diag, self.m2_full = nb, mean_b, diag_b, full_b
            return
        na, n = self.count, self.count + nb
        delta = mean_b - self.mean
        scale = na * nb / n
        self.mean = self.mean + delta * (nb / n)
        self.m2_diag = self.m2_diag + diag_b + delta * delta * scale
        if full:
            self.m2_full = self.m2_full + full_b + np.outer(delta, delta) * scale
        self.count = n

    def var_of_mean(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(self.mean)
        return self.m2_diag / ((self.count - 1) * self.count)


@dataclass
class EstimateTable:
    """Solver output: estimates on a grid with plug-in variances.

    ``per_term[i]`` holds the i-th term's dependent-trial average; in mode
    "solution" the reconstruction ``values = f + sum_i per_term[i]`` holds
    exactly.  ``n_used`` counts elapsed scalar draws.
    """

    t_grid: np.ndarray
    values: np.ndarray
    pointwise_var: np.ndarray
    per_term: np.ndarray
    per_term_var: np.ndarray
    n_used: int
    seed: int
    mode: str
    moments: Optional[list[TermMoments]] = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class CovarianceModel:
    """Plug-in covariance of the normalized limiting field on the grid."""

    t_grid: np.ndarray
    Z_hat: np.ndarray
    sigma_plus_sq: float
    source: str = "plug-in-mc"


# ---------------------------------------------------------------------------
# tensorized integrand


def tensor_integrand(spec: ProblemSpec, t, xs) -> float:
    """Telescoping product K(t,x1) K(x1,x2) ... K(x_{m-1},x_m) f(x_m),
    evaluated left-to-right in fixed order."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    out = float(spec.kernel(t, xs[0]))
    for i in range(xs.shape[0] - 1):
        out *= float(spec.kernel(xs[i], xs[i + 1]))
    return out * float(spec.forcing(xs[-1]))


def _chain_tail(spec: ProblemSpec, xs: np.ndarray) -> np.ndarray:
    """K(x1,x2)...K(x_{m-1},x_m) f(x_m) for a batch xs of shape (n, m, dim)."""
    c = np.ones(xs.shape[0])
    for i in range(xs.shape[1] - 1):
        c = c * np.asarray(spec.kernel(xs[:, i, :], xs[:, i + 1, :]), dtype=float)
    return c * np.asarray(spec.forcing(xs[:, -1, :]), dtype=float)


def _check_block(vals: np.ndarray, grid: np.ndarray, xs: np.ndarray) -> None:
    if np.all(np.isfinite(vals)):
        return
    g_idx, r_idx = np.argwhere(~np.isfinite(vals))[0]
    raise ValueError(f"non-finite integrand at t={grid[g_idx]}, x={xs[r_idx]}")


def _run_term(count: int, m: int, dim: int, grid: np.ndarray,
              rng: np.random.Generator, mu: MeasureSampler, domain: DomainSpec,
              value_fn: Callable[[np.ndarray], np.ndarray],
              theta: float, collect_cov: bool) -> TermMoments:
    """Dependent-trial average of one term: ``count`` replicates of
    m-tuples, the same tuples reused for every grid point."""
    tm = TermMoments(m=m, theta=theta)
    done = 0
    while done < count:
        nb = min(BLOCK_REPLICATES, count - done)
        xs = mu.sample(domain, nb * m, rng).reshape(nb, m, dim)
        vals = value_fn(xs)
        _check_block(vals, grid, xs)
        tm.merge_block(vals, full=collect_cov)
        done += nb
    return tm


class _SolveTermValues:
    def __init__(self, spec: ProblemSpec, grid: np.ndarray):
        self.spec, self.grid = spec, grid

    def __call__(self, xs: np.ndarray) -> np.ndarray:
        first = np.asarray(self.spec.kernel(self.grid[:, None, :], xs[None, :, 0, :]), dtype=float)
        return first * _chain_tail(self.spec, xs)[None, :]


class _DerivativeTermValues:
    """First factor dK/dt at the pilot coordinate, then the plain chain."""

    def __init__(self, spec: ProblemSpec, grid: np.ndarray):
        self.spec, self.grid = spec, grid

    def __call__(self, xs: np.ndarray) -> np.ndarray:
        first = np.asarray(self.spec.kernel_dt(self.grid[:, None, :], xs[None, :, 0, :]), dtype=float)
        if xs.shape[1] == 1:
            tail = np.asarray(self.spec.forcing(xs[:, 0, :]), dtype=float)
        else:
            tail = _chain_tail(self.spec, xs)
        return first * tail[None, :]


# ---------------------------------------------------------------------------
# estimators


def estimate_parametric_integral(g, nu: MeasureSampler, x_domain: DomainSpec,
                                 t_grid, n: int, seed: int,
                                 collect_covariance: bool = False) -> EstimateTable:
    """Dependent-trial estimate of I(t) = int g(t,x) nu(dx): one stream of
    n draws, reused for every t."""
    if n < 2:
        raise ValueError("need n >= 2 draws")
    grid = np.asarray(t_grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    rng = substream(seed, TAG_INTEGRAL)
    tm = TermMoments(m=1, theta=1.0)
    done = 0
    while done < n:
        nb = min(BLOCK_REPLICATES, n - done)
        xs = nu.sample(x_domain, nb, rng)
        vals = np.asarray(g(grid[:, None, :], xs[None, :, :]), dtype=float)
        _check_block(vals, grid, xs)
        tm.merge_block(vals, full=collect_covariance)
        done += nb
    values = tm.mean.copy()
    var = tm.var_of_mean()
    return EstimateTable(
        t_grid=grid, values=values, pointwise_var=var,
        per_term=values[None, :].copy(), per_term_var=var[None, :].copy(),
        n_used=n * x_domain.dim, seed=seed, mode="integral",
        moments=[tm] if collect_covariance else None,
    )


def solve_fredholm_mc(spec: ProblemSpec, plan: TruncationPlan, alloc: BudgetAllocation,
                      t_grid, seed: int, collect_covariance: bool = False) -> EstimateTable:
    """Truncated-Neumann Monte-Carlo solution estimate on the grid.

    Term m gets alloc.counts[m-1] fresh i.i.d. m-tuples from the substream
    keyed by (seed, m); the same tuples serve every grid point.
    """
    if alloc.N != plan.N:
        raise ValueError(f"allocation is for N={alloc.N} but truncation plan has N={plan.N}")
    grid = _as_points(spec, t_grid)
    value_fn = _SolveTermValues(spec, grid)
    moments = []
    for m in range(1, plan.N + 1):
        rng = substream(seed, TAG_SOLVE, m)
        moments.append(_run_term(int(alloc.counts[m - 1]), m, spec.domain.dim, grid,
                                 rng, spec.mu, spec.domain, value_fn,
                                 float(alloc.theta[m - 1]), collect_covariance))
    per_term = np.stack([tm.mean for tm in moments])
    per_term_var = np.stack([tm.var_of_mean() for tm in moments])
    return EstimateTable(
        t_grid=grid,
        values=np.asarray(spec.forcing(grid), dtype=float) + per_term.sum(axis=0),
        pointwise_var=per_term_var.sum(axis=0),
        per_term=per_term, per_term_var=per_term_var,
        n_used=alloc.cost_B * spec.domain.dim, seed=seed, mode="solution",
        moments=moments if collect_covariance else None,
    )


def estimate_covariance(spec: ProblemSpec, alloc: BudgetAllocation, t_grid,
                        samples: Sequence[TermMoments]) -> CovarianceModel:
    """Plug-in covariance of the sqrt(n)-normalized error field:
    Z_hat = sum_m cov_m / theta(m) with cov_m the per-tuple sample
    covariance of term m across the grid."""
    grid = _as_points(spec, t_grid)
    Z = np.zeros((grid.shape[0], grid.shape[0]))
    for tm in samples:
        if tm.count < 2:
            raise BudgetError(f"term with tuple length {tm.m} has {tm.count} replicate(s), "
                              "too few for a covariance estimate; raise the budget or epsilon")
        if tm.m2_full is None:
            raise ValueError("samples were collected without covariance accumulation")
        Z += tm.m2_full / (tm.count - 1) / tm.theta
    Z = (Z + Z.T) / 2.0
    d = np.diag(Z).copy()
    d[(d < 0) & (d > -1e-12)] = 0.0
    if np.any(d < 0):
        raise ValueError("covariance diagonal significantly negative; accumulation bug")
    np.fill_diagonal(Z, d)
    return CovarianceModel(t_grid=grid, Z_hat=Z, sigma_plus_sq=float(d.max()),
                           source="plug-in-mc")


def _forcing_derivative(spec: ProblemSpec):
    if spec.forcing_dt is not None:
        return spec.forcing_dt
    f = spec.forcing

    def fd(x):
        x = np.asarray(x, dtype=float)
        h = np.zeros_like(x)
        h[..., 0] = _FD_STEP
        return (np.asarray(f(x + h)) - np.asarray(f(x - h))) / (2 * _FD_STEP)

    return fd


def derivative_solve(spec: ProblemSpec, plan: TruncationPlan, alloc: BudgetAllocation,
                     t_grid, seed: int, collect_covariance: bool = False) -> EstimateTable:
    """Estimate Y = y' via the differentiated equation Y = f' + V[y] with
    V = dK/dt.

    Term j draws a pilot point plus a (j-1)-tuple and estimates
    V[S^(j-1) f]; terms j = 1..N+1 are used so the deterministic bias is
    bounded by ||V|| * epsilon (the dropped part is V applied to the
    y-series tail beyond N).  Counts are re-derived for N+1 terms from the
    allocation's power norms at the same total budget.
    """
    if spec.domain.dim != 1:
        raise UnsupportedDerivative("derivative solve supports 1-D domains only")
    if spec.kernel_dt is None:
        raise UnsupportedDerivative("problem has no kernel t-derivative (kernel_dt)")
    if alloc.N != plan.N:
        raise ValueError(f"allocation is for N={alloc.N} but truncation plan has N={plan.N}")
    grid = _as_points(spec, t_grid)
    n_terms = plan.N + 1
    r_u = np.asarray(alloc.r_u, dtype=float)
    while len(r_u) < n_terms:  # extrapolate the geometric tail if m_max was tight
        r_u = np.append(r_u, r_u[-1] * (r_u[-1] / r_u[-2]))
    theta, counts, _ = counts_from_weights(r_u, n_terms, alloc.n_total)
    value_fn = _DerivativeTermValues(spec, grid)
    moments = []
    for j in range(1, n_terms + 1):
        rng = substream(seed, TAG_DERIVATIVE, j)
        moments.append(_run_term(int(counts[j - 1]), j, 1, grid, rng, spec.mu, spec.domain,
                                 value_fn, float(theta[j - 1]), collect_covariance))
    per_term = np.stack([tm.mean for tm in moments])
    per_term_var = np.stack([tm.var_of_mean() for tm in moments])
    fprime = np.asarray(_forcing_derivative(spec)(grid), dtype=float)
    cost = int(np.sum(np.arange(1, n_terms + 1) * counts))
    return EstimateTable(
        t_grid=grid, values=fprime + per_term.sum(axis=0),
        pointwise_var=per_term_var.sum(axis=0),
        per_term=per_term, per_term_var=per_term_var,
        n_used=cost, seed=seed, mode="derivative",
        moments=moments if collect_covariance else None,
    )


def solve_geometric(spec: ProblemSpec, lam: float, M: int, budget: int, t_grid,
                    seed: int, pnt: Optional[PowerNormTable] = None) -> EstimateTable:
    """Geometric-randomization estimate of the damped solution
    y_lam = f + sum_m lam^m S^m[f].

    Draws M geometric term depths tau_j (P(tau=m) = (1-lam) lam^m); each
    depth is estimated by a dependent-trial average over n_j tuples, and
    the double average is rescaled by 1/(1-lam).  The outer randomization
    noise decays like 1/M, which is what caps this method at the slower
    n^(-1/4) uniform rate.
    """
    if not 0.0 < lam < 1.0:
        raise ValueError("lam must lie in (0, 1)")
    if M < 2:
        raise ValueError("M must be >= 2")
    radius = pnt.fit_s.beta if pnt is not None else operator_norm(spec, "S")
    if lam * max(radius, 0.0) >= 1.0:
        raise ContractivityError(f"lam * spectral proxy = {lam * radius:.4f} >= 1; damped series may diverge")
    grid = _as_points(spec, t_grid)
    dim = spec.domain.dim
    e_tau = lam / (1.0 - lam)
    n_j = max(1, int(round(budget / (M * e_tau))))
    rng_tau = substream(seed, TAG_GEOMETRIC, 0)
    taus = rng_tau.geometric(1.0 - lam, size=M) - 1
    realized = int(n_j * np.sum(taus)) * dim
    if realized > 2 * budget * dim:
        raise BudgetError(f"realized draw cost {realized} exceeds twice the budget "
                          f"{budget * dim}; heavy-tailed depth draw, re-seed or raise budget")
    f_grid = np.asarray(spec.forcing(grid), dtype=float)
    value_fn = _SolveTermValues(spec, grid)
    per_term = np.empty((M, grid.shape[0]))
    for j, tau in enumerate(taus):
        if tau == 0:
            per_term[j] = f_grid  # S^0[f] = f, known exactly
            continue
        rng = substream(seed, TAG_GEOMETRIC, 1 + j)
        tm = _run_term(n_j, int(tau), dim, grid, rng, spec.mu, spec.domain,
                       value_fn, 1.0, collect_cov=False)
        per_term[j] = tm.mean
    scale = 1.0 / (1.0 - lam)
    values = per_term.mean(axis=0) * scale
    var = per_term.var(axis=0, ddof=1) / M * scale ** 2
    return EstimateTable(
        t_grid=grid, values=values, pointwise_var=var,
        per_term=per_term, per_term_var=np.zeros_like(per_term),
        n_used=realized, seed=seed, mode="geometric",
    )
