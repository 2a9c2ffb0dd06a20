"""Uniform-norm confidence bands.

Two routes:

* **gauss-sim** (asymptotic): the sqrt(n)-normalized uniform error
  converges in law to the supremum of a centered Gaussian field whose
  covariance we estimate by plug-in.  The band half-width is the
  empirical (1-delta) quantile of simulated field suprema, divided by
  sqrt(n).

* **nonasymptotic-psi**: valid at every n.  From a moment profile
  psi(p) >= sup_t |field(t)|_p and a metric dominating the field's
  increment norms, a chaining majorant

      Zbar = sigma_psi + 9 * int_0^sigma_psi v*(log 2 N(T,d,x)) dx

  is computed (v* is the profile's infimal transform, N the covering
  number), and the tail P(sup > u) is bounded by the best moment-Markov
  bound inf_p (psibar(p) * Zbar / u)^p; the band inverts that tail at
  the target miss probability.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .allocation import BudgetAllocation
from .errors import BandTooWide, NotPSD
from .estimator import CovarianceModel
from .problem import DomainSpec, Metric, ProblemSpec
from .rng import TAG_GAUSS_SIM, substream

C0_BAR = 1.77638        # normalizing constant of the CLT moment profile
SIM_BATCH = 4096
_W_CONVEXITY_TOL = -1e-9


@dataclass(frozen=True)
class PsiFunction:
    """Tabulated moment profile p -> psi(p) on a log-spaced grid.

    Membership in the admissible class requires psi > 0 and
    w(p) = p log psi(p) convex; both are checked at construction.
    Outside the support psi is +infinity by convention.
    """

    p: np.ndarray
    values: np.ndarray
    kind: str
    support: tuple[float, float]

    def __post_init__(self):
        p, v = np.asarray(self.p, dtype=float), np.asarray(self.values, dtype=float)
        if len(p) < 2 or len(p) != len(v):
            raise ValueError("tabulation needs matching p/value arrays of length >= 2")
        if np.any(np.diff(p) <= 0):
            raise ValueError("p grid must be strictly increasing")
        if np.any(v <= 0) or not np.all(np.isfinite(v)):
            raise ValueError("psi must be positive and finite on its tabulation")
        w = p * np.log(v)
        slopes = np.diff(w) / np.diff(p)
        if np.any(np.diff(slopes) < _W_CONVEXITY_TOL):
            raise ValueError("p * log psi(p) is not convex on the tabulation")

    def __call__(self, q) -> np.ndarray:
        """Interpolated psi (linear in log-log; exact on power laws)."""
        q = np.asarray(q, dtype=float)
        if np.any(q < self.p[0] - 1e-12) or np.any(q > self.p[-1] * (1 + 1e-12)):
            raise ValueError(f"p={q} outside tabulated range [{self.p[0]}, {self.p[-1]}]")
        return np.exp(np.interp(np.log(q), np.log(self.p), np.log(self.values)))

    @property
    def p_max(self) -> float:
        return float(self.p[-1])


@dataclass(frozen=True)
class ConfidenceBand:
    """Uniform-norm band: sup_t |estimate - target| <= u_delta / sqrt(n)
    with probability (at least / asymptotically) 1 - delta."""

    delta: float
    u_delta: float
    half_width: Optional[float]
    method: str  # "gauss-sim" | "nonasymptotic-psi"
    n_sim: int = 0
    covariance: Optional[CovarianceModel] = None
    z_bar: Optional[float] = None

    def to_dict(self, n: Optional[int] = None, kappa_fit: Optional[float] = None,
                C_fit: Optional[float] = None) -> dict:
        out = {
            "delta": float(self.delta),
            "u_delta": float(self.u_delta),
            "method": self.method,
            "n": int(n) if n is not None else None,
            "half_width": float(self.half_width) if self.half_width is not None else None,
            "sigma_plus_sq": float(self.covariance.sigma_plus_sq) if self.covariance else None,
        }
        if kappa_fit is not None:
            out["kappa_fit"] = float(kappa_fit)
            out["C_fit"] = float(C_fit)
        return out


def default_p_grid(a: float = 2.0, b: float = 512.0, n: int = 96) -> np.ndarray:
    return np.geomspace(a, b, n)


def natural_psi_from_R(spec: ProblemSpec, p_grid: Optional[np.ndarray] = None,
                       envelope: str = "R") -> PsiFunction:
    """Moment profile of the envelope: psi(p) = (int R(x)^p mu(dx))^(1/p).

    Evaluated by 2048-node quadrature with max-rescaling so large p never
    overflows; p values whose moment integral is not finite are dropped
    (support truncates at the last finite p).
    """
    p_grid = default_p_grid() if p_grid is None else np.asarray(p_grid, dtype=float)
    env = spec.envelope_R if envelope == "R" else spec.envelope_Q
    if env is None:
        raise ValueError(f"problem has no envelope {envelope!r}")
    nodes, w = spec.mu.quad_nodes(spec.domain, 2048 if spec.domain.dim == 1 else 64)
    R = np.abs(np.asarray(env(nodes), dtype=float))
    rmax = float(R.max())
    if not np.isfinite(rmax) or rmax <= 0:
        raise ValueError("envelope must be positive somewhere and finite at quadrature nodes")
    ratios = R / rmax
    vals = rmax * np.mean(ratios[None, :] ** p_grid[:, None], axis=1) ** (1.0 / p_grid)
    finite = np.isfinite(vals)
    if not finite.all():
        last = int(np.argmin(finite))
        if last < 2:
            raise ValueError("moment integral diverges on the whole p grid")
        p_grid, vals = p_grid[:last], vals[:last]
    return PsiFunction(p=p_grid, values=vals, kind="natural-from-R",
                       support=(float(p_grid[0]), float(p_grid[-1])))


def psi_bar(psi: PsiFunction) -> PsiFunction:
    """CLT-uniform profile psibar(p) = p * psi(p) / (C0 * log p): the
    profile of n^(-1/2) sums stays below it for every n.  Support starts
    at e so log p is safely positive."""
    lo = max(psi.p[0], np.e * (1 + 1e-9))
    if lo >= psi.p_max:
        raise ValueError("profile support too short to form the CLT version")
    p = np.geomspace(lo, psi.p_max, max(64, len(psi.p)))
    vals = p * psi(p) / (C0_BAR * np.log(p))
    return PsiFunction(p=p, values=vals, kind="clt-bar", support=(float(lo), psi.support[1]))


# ---------------------------------------------------------------------------
# infimal transform and metric entropy


def _v_objective(psi: PsiFunction, x: float, y: np.ndarray) -> np.ndarray:
    return x * y + np.log(psi(1.0 / y))


def v_star(psi: PsiFunction, x: float) -> float:
    """Infimal transform v*(x) = inf_{y in (0,1)} (x y + log psi(1/y)),
    with y ranging over the closure of the support image [1/p_max, 1/a].
    Coarse log-grid scan followed by golden-section refinement."""
    if x < 0:
        raise ValueError("x must be >= 0")
    y_lo, y_hi = 1.0 / psi.p_max, 1.0 / psi.p[0]
    ys = np.geomspace(y_lo, y_hi, 512)
    obj = _v_objective(psi, x, ys)
    i = int(np.argmin(obj))
    a, b = ys[max(i - 1, 0)], ys[min(i + 1, len(ys) - 1)]
    gr = (math.sqrt(5.0) - 1.0) / 2.0
    c, d = b - gr * (b - a), a + gr * (b - a)
    fc = float(_v_objective(psi, x, np.array([c]))[0])
    fd = float(_v_objective(psi, x, np.array([d]))[0])
    while b - a > 1e-10:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - gr * (b - a)
            fc = float(_v_objective(psi, x, np.array([c]))[0])
        else:
            a, c, fc = c, d, fd
            d = a + gr * (b - a)
            fd = float(_v_objective(psi, x, np.array([d]))[0])
    return float(min(obj[i], fc, fd))


def entropy_H(domain: DomainSpec, metric: Metric, eps: float) -> float:
    """Metric entropy H = log N(T, d, eps) for the declared metric, via
    the exact per-axis box covering ceil(L / (2 r)) with r the Euclidean
    radius of an eps-ball."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if metric.kind == "custom-table":
        raise ValueError("entropy for custom-table metrics is not defined; declare holder/log-power")
    if metric.kind == "holder":
        if metric.scale == 0.0:
            return 0.0
        log_r = np.log(eps / metric.scale) / metric.exponent
    else:  # log-power: d = scale * min(|log r|^-gamma, 1)
        if eps >= metric.scale:
            return 0.0
        log_r = -((metric.scale / eps) ** (1.0 / metric.exponent))
    h = 0.0
    for length in domain.lengths:
        log_ratio = np.log(length / 2.0) - log_r
        if log_ratio > 40.0:  # covering count astronomically large; ceil is irrelevant
            h += float(log_ratio)
        elif log_ratio > -700.0:
            h += float(np.log(np.ceil(np.exp(log_ratio) - 1e-12))) if np.exp(log_ratio) > 1.0 else 0.0
    return h


# ---------------------------------------------------------------------------
# gauss-sim band


def _factor_with_jitter(Z: np.ndarray) -> np.ndarray:
    """Cholesky factor of Z plus an escalating ridge: 1e-12 * trace,
    growing tenfold up to 1e-6 * trace."""
    trace = float(np.trace(Z))
    ridge = 1e-12 * trace
    eye = np.eye(Z.shape[0])
    while ridge <= 1e-6 * trace * (1 + 1e-12):
        try:
            return np.linalg.cholesky(Z + ridge * eye)
        except np.linalg.LinAlgError:
            ridge *= 10.0
    raise NotPSD("covariance not factorizable within the jitter budget")


def simulate_sup_quantile(cov: CovarianceModel, delta: float, n_sim: int, seed: int,
                          n: Optional[int] = None,
                          return_sims: bool = False):
    """Empirical (1-delta) quantile of sup_t |X(t)| for the centered
    Gaussian field with the plug-in covariance; band half-width is
    u_delta / sqrt(n).  Simulation runs in fixed-size batches with
    per-batch substreams and a deterministic merge."""
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if delta <= 0.05 and n_sim < 10_000:
        raise ValueError("need n_sim >= 1e4 for delta <= 0.05")
    Z = cov.Z_hat
    if float(np.trace(Z)) <= 0.0:
        sups = np.zeros(n_sim)
    else:
        L = _factor_with_jitter(Z)
        chunks = []
        for b in range(0, n_sim, SIM_BATCH):
            rng = substream(seed, TAG_GAUSS_SIM, b // SIM_BATCH)
            e = rng.standard_normal((min(SIM_BATCH, n_sim - b), Z.shape[0]))
            chunks.append(np.max(np.abs(e @ L.T), axis=1))
        sups = np.concatenate(chunks)
    u = float(np.quantile(sups, 1.0 - delta))
    band = ConfidenceBand(delta=delta, u_delta=u,
                          half_width=u / math.sqrt(n) if n else None,
                          method="gauss-sim", n_sim=n_sim, covariance=cov)
    return (band, sups) if return_sims else band


def tail_shape_report(cov: CovarianceModel, u_grid: Sequence[float], sims: np.ndarray) -> tuple[float, float]:
    """Report-only fit of the sup-tail shape C * u^(kappa-1) * exp(-u^2 / 2 sigma+^2)
    by regressing log P(u) + u^2/(2 sigma+^2) on log u over the upper
    decile of the simulated suprema.  Never used for calibration."""
    sims = np.asarray(sims, dtype=float)
    lo = float(np.quantile(sims, 0.9))
    us = np.array([u for u in np.asarray(u_grid, dtype=float) if u >= lo])
    counts = np.array([(sims > u).sum() for u in us])
    keep = counts >= 50
    if keep.sum() < 3:
        raise ValueError("fewer than 50 exceedances at the largest thresholds; widen u_grid "
                         "toward the bulk or simulate more paths")
    us, counts = us[keep], counts[keep]
    phat = counts / len(sims)
    y = np.log(phat) + us ** 2 / (2.0 * cov.sigma_plus_sq)
    X = np.stack([np.ones_like(us), np.log(us)], axis=1)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return float(coef[1] + 1.0), float(np.exp(coef[0]))


# ---------------------------------------------------------------------------
# non-asymptotic band


def _metric_at_radius(metric: Metric, r: float) -> float:
    """Metric scale x at Euclidean ball radius r (inverse of the radius
    map used by entropy_H)."""
    if metric.kind == "holder":
        return metric.scale * r ** metric.exponent
    if r >= 1.0:
        return metric.scale
    return metric.scale * min(abs(np.log(r)) ** (-metric.exponent), 1.0)


def _piece_integral(psib: PsiFunction, domain: DomainSpec, metric: Metric,
                    a: float, b: float) -> float:
    """(b - a) * integrand at the geometric midpoint; exact when the
    covering count is constant on (a, b)."""
    h = entropy_H(domain, metric, float(np.sqrt(a * b)))
    if h <= 0.0:
        return 0.0
    return v_star(psib, float(np.log(2.0) + h)) * (b - a)


_COARSE_COUNT = 64  # per-axis covering counts handled by exact piecewise integration


def _chaining_majorant(psib: PsiFunction, domain: DomainSpec, metric: Metric,
                       sigma_psi: float, nodes: int) -> float:
    """sigma + 9 * int_0^sigma v*(log 2N(T,d,x)) dx.

    The integrand is a step function of x: it changes only where a
    per-axis covering count does.  The coarse region (counts up to
    _COARSE_COUNT) is integrated exactly piece-by-piece over those
    breakpoints; the fine tail, where individual steps are relatively
    tiny, uses log-spaced composite midpoint with ``nodes`` cells.
    Scales below sigma * 1e-14 are negligible and dropped; single-ball
    scales contribute nothing.
    """
    if metric.kind == "holder" and metric.scale == 0.0:
        return sigma_psi
    x_min = sigma_psi * 1e-14
    r_c = float(np.max(domain.lengths)) / (2.0 * _COARSE_COUNT)
    x_c = min(max(_metric_at_radius(metric, r_c), x_min), sigma_psi)
    cuts = {x_c, sigma_psi}
    for length in domain.lengths:
        for k in range(1, _COARSE_COUNT + 1):
            x = _metric_at_radius(metric, length / (2.0 * k))
            if x_c < x < sigma_psi:
                cuts.add(float(x))
    edges = np.array(sorted(cuts))
    total = sum(_piece_integral(psib, domain, metric, a, b)
                for a, b in zip(edges[:-1], edges[1:]))
    if x_c > x_min:
        fine = np.geomspace(x_min, x_c, nodes + 1)
        total += sum(_piece_integral(psib, domain, metric, a, b)
                     for a, b in zip(fine[:-1], fine[1:]))
    return sigma_psi + 9.0 * total


def _log_tail(psib: PsiFunction, z_bar: float, u: float) -> float:
    """log of the moment-Markov tail inf_p (psibar(p) Zbar / u)^p over the
    tabulated profile support."""
    logs = psib.p * (np.log(psib.values) + np.log(z_bar) - np.log(u))
    return float(np.min(logs))


def nonasymptotic_band(psi: PsiFunction, domain: DomainSpec, metric: Metric,
                       sigma_psi: float, delta: float, n: int) -> ConfidenceBand:
    """Non-asymptotic uniform band from a moment profile and a metric.

    ``psi`` is the single-draw profile of the normalized error field and
    ``sigma_psi`` its uniform profile norm; the CLT-uniform profile
    psibar is formed internally.  u(delta) is the smallest u >= 2 Zbar
    with tail(u) <= delta.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    psib = psi_bar(psi)
    z = _chaining_majorant(psib, domain, metric, sigma_psi, nodes=256)
    z_fine = _chaining_majorant(psib, domain, metric, sigma_psi, nodes=2560)
    if not np.isfinite(z_fine) or abs(z_fine - z) > 0.01 * abs(z_fine):
        raise ValueError("entropy integral did not stabilize under 10x grid refinement; "
                         "the metric/profile pair is outside the band's hypotheses")
    z_bar = z_fine
    log_delta = math.log(delta)
    lo, hi = 2.0 * z_bar, 1e3 * z_bar
    if _log_tail(psib, z_bar, lo) <= log_delta:
        u = lo
    elif _log_tail(psib, z_bar, hi) > log_delta:
        raise BandTooWide(f"tail stays above delta={delta} up to u = 1e3 * Zbar (Zbar={z_bar:.4g})")
    else:
        for _ in range(200):
            mid = math.sqrt(lo * hi)
            if _log_tail(psib, z_bar, mid) <= log_delta:
                hi = mid
            else:
                lo = mid
            if hi - lo <= 1e-12 * hi:
                break
        u = hi
    return ConfidenceBand(delta=delta, u_delta=float(u),
                          half_width=float(u) / math.sqrt(n),
                          method="nonasymptotic-psi", z_bar=float(z_bar))


# ---------------------------------------------------------------------------
# profile builders for the two estimation pipelines


def solution_psi(spec: ProblemSpec, alloc: BudgetAllocation,
                 p_grid: Optional[np.ndarray] = None) -> tuple[PsiFunction, float]:
    """Single-draw moment profile of the normalized solution error field:

        psi_sol(p) = 2 ||f|| sum_m theta(m)^(-1/2) psi_R(p)^m,

    term m's centered integrand has p-norm <= 2 ||f|| psi_R(p)^m and is
    amplified by theta(m)^(-1/2) under the sqrt(n) normalization.  The
    uniform profile norm of the field is then <= 1.  Falls back to the
    envelope 2 ||f|| (sum theta^(-1/2)) max(1, psi_R)^N if the sum's
    convexity check trips.
    """
    psi_r = natural_psi_from_R(spec, p_grid)
    weights = 1.0 / np.sqrt(np.asarray(alloc.theta, dtype=float))
    powers = np.stack([psi_r.values ** m for m in range(1, alloc.N + 1)])
    vals = 2.0 * spec.f_norm * (weights[:, None] * powers).sum(axis=0)
    try:
        psi = PsiFunction(p=psi_r.p, values=vals, kind="solution-profile", support=psi_r.support)
    except ValueError:
        env = 2.0 * spec.f_norm * weights.sum() * np.maximum(psi_r.values, 1.0) ** alloc.N
        psi = PsiFunction(p=psi_r.p, values=env, kind="solution-profile-envelope",
                          support=psi_r.support)
    return psi, 1.0


def integral_psi(spec: ProblemSpec, p_grid: Optional[np.ndarray] = None) -> tuple[PsiFunction, float]:
    """Profile for the parametric-integral field: the centered integrand
    is dominated by twice the envelope Q, so psi = 2 psi_Q and the field
    has uniform profile norm <= 1."""
    psi_q = natural_psi_from_R(spec, p_grid, envelope="Q")
    return PsiFunction(p=psi_q.p, values=2.0 * psi_q.values, kind="integral-profile",
                       support=psi_q.support), 1.0


def export_band_json(path, bands: Sequence[tuple[ConfidenceBand, dict]]) -> None:
    """Write one band (or several) with its extras to JSON."""
    payload = [b.to_dict(**extras) for b, extras in bands]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload[0] if len(payload) == 1 else payload, fh, indent=2)
        fh.write("\n")
