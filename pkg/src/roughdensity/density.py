"""Monte-Carlo density estimation, tail-form checks, and the small-noise
program: rate-function minimization and the vanishing-noise sweep.

All Monte Carlo flows through counter-based per-path streams, so results
are identical for any chunking/worker layout; reductions run in fixed
chunk order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .diagnostics import kappa
from .fields import VectorFieldSystem, ellipticity_scan, NonEllipticError
from .kernels import CovKernel, TimeGrid
from .lift import lift_ensemble
from .malliavin import MalliavinMatrix, deterministic_malliavin_matrix
from .paths import CMElement, cholesky_factor, sample
from .rde import SkeletonPropagator, solve_batch, solve_skeleton

CHUNK_PATHS = 16384


class NoiseFloorError(RuntimeError):
    """Density at the target fell below the trust floor."""


class TargetUnreachableError(RuntimeError):
    """Constraint residual not met at the maximum penalty weight."""


# ---------------------------------------------------------------------------
# Monte-Carlo reductions over chunked ensembles
# ---------------------------------------------------------------------------

def _chunk_ranges(n_paths: int, chunk: int | None = None):
    chunk = CHUNK_PATHS if chunk is None else chunk
    return [(off, min(chunk, n_paths - off))
            for off in range(0, n_paths, chunk)]


def monte_carlo_reduce(kernel: CovKernel, grid: TimeGrid,
                       vf: VectorFieldSystem, z0, eps_list, n_paths: int,
                       seed: int, collect: str = "terminal",
                       t_node=None, workers: int = 1) -> list[np.ndarray]:
    """Sample, lift and solve in fixed chunks; returns one array per eps.

    ``collect`` is ``"terminal"`` (state at ``t_node``, default the
    horizon) or ``"running_sup"`` (sup of |Z - z0| over nodes up to
    ``t_node``).  The same driver realization feeds every eps.
    """
    idx = grid.n_steps if t_node is None else grid.index_of(float(t_node))
    chol = cholesky_factor(kernel, grid)
    z0_arr = np.atleast_1d(np.asarray(z0, dtype=float))

    def run_chunk(off_size):
        off, size = off_size
        ens = sample(kernel, grid, d=vf.d, n_paths=size, seed=seed,
                     path_offset=off, chol=chol)
        l1, l2 = lift_ensemble(ens.data)
        outs = []
        for eps in eps_list:
            batch = solve_batch(l1, l2, grid, vf, z0, eps=eps,
                                with_jacobian=False)
            if collect == "terminal":
                outs.append(batch.Z[:, idx, :].copy())
            elif collect == "running_sup":
                dev = np.linalg.norm(batch.Z[:, : idx + 1, :] - z0_arr,
                                     axis=2)
                outs.append(dev.max(axis=1))
            else:
                raise ValueError(f"unknown collector {collect!r}")
        return outs

    ranges = _chunk_ranges(n_paths)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_chunk, ranges))
    else:
        results = [run_chunk(r) for r in ranges]
    return [np.concatenate([r[i] for r in results], axis=0)
            for i in range(len(eps_list))]


# ---------------------------------------------------------------------------
# Kernel density estimation
# ---------------------------------------------------------------------------

def silverman_bandwidth(samples: np.ndarray) -> np.ndarray:
    """Per-dimension Silverman rule 0.9 min(std, iqr/1.34) n^(-1/(dim+4))."""
    samples = np.atleast_2d(samples.T).T
    n, dim = samples.shape
    sd = samples.std(axis=0, ddof=1)
    q75, q25 = np.percentile(samples, [75, 25], axis=0)
    a = np.minimum(sd, (q75 - q25) / 1.34)
    a = np.where(a > 0, a, np.maximum(sd, 1e-12))
    return 0.9 * a * n ** (-1.0 / (dim + 4))


def kde_evaluate(samples: np.ndarray, points: np.ndarray,
                 bandwidth: np.ndarray, chunk: int = 8192):
    """Gaussian-product KDE with pointwise standard errors.

    Returns (p_hat, se) over ``points`` (m, dim); accumulation is chunked
    over paths in fixed order.
    """
    samples = np.atleast_2d(samples.T).T
    points = np.atleast_2d(points.T).T
    n, dim = samples.shape
    h = np.asarray(bandwidth, dtype=float)
    norm = 1.0 / (np.prod(h) * (2 * math.pi) ** (dim / 2))
    s1 = np.zeros(points.shape[0])
    s2 = np.zeros(points.shape[0])
    for off in range(0, n, chunk):
        blk = samples[off: off + chunk]
        u = (points[:, None, :] - blk[None, :, :]) / h
        w = norm * np.exp(-0.5 * np.einsum("mpd,mpd->mp", u, u))
        s1 += w.sum(axis=1)
        s2 += (w * w).sum(axis=1)
    p = s1 / n
    var = np.maximum(s2 / n - p * p, 0.0)
    return p, np.sqrt(var / n)


@dataclass
class DensityEstimate:
    y_grid: np.ndarray
    p: np.ndarray
    se: np.ndarray
    bandwidth: np.ndarray
    n_paths: int
    t: float
    normalization: float
    samples: np.ndarray = field(repr=False, default=None)

    def evaluate_at(self, points):
        if self.samples is None:
            raise ValueError("estimate was built without retained samples")
        return kde_evaluate(self.samples, np.asarray(points, dtype=float),
                            self.bandwidth)

    def to_json(self):
        return {"t": self.t, "n_paths": self.n_paths,
                "bandwidth": np.atleast_1d(self.bandwidth).tolist(),
                "normalization": self.normalization}


def estimate_density(kernel: CovKernel, vf: VectorFieldSystem, z0, t: float,
                     eps: float, n_paths: int, seed: int,
                     y_grid: np.ndarray | None = None,
                     bandwidth: np.ndarray | None = None,
                     grid: TimeGrid | None = None, workers: int = 1,
                     keep_samples: bool = True) -> DensityEstimate:
    """Gaussian-kernel density estimate of the flow state at time t."""
    if bandwidth is not None and np.any(np.asarray(bandwidth) <= 0):
        raise ValueError("bandwidth must be positive")
    if grid is None:
        grid = TimeGrid.regular(256, horizon=kernel.horizon)
    (terminal,) = monte_carlo_reduce(kernel, grid, vf, z0, [eps], n_paths,
                                     seed, collect="terminal", t_node=t,
                                     workers=workers)
    h = silverman_bandwidth(terminal) if bandwidth is None \
        else np.broadcast_to(np.asarray(bandwidth, dtype=float),
                             (terminal.shape[1],)).copy()
    if y_grid is None:
        if vf.n != 1:
            raise ValueError("default y-grid exists only in dimension 1")
        mean, sd = terminal[:, 0].mean(), terminal[:, 0].std()
        y_grid = np.linspace(mean - 6 * sd, mean + 6 * sd, 512)
    y_arr = np.asarray(y_grid, dtype=float)
    p, se = kde_evaluate(terminal, y_arr, h)
    if y_arr.ndim == 1:
        normalization = float(np.trapezoid(p, y_arr))
    else:
        normalization = float("nan")
    return DensityEstimate(y_grid=y_arr, p=p, se=se, bandwidth=h,
                           n_paths=n_paths, t=float(t),
                           normalization=normalization,
                           samples=terminal if keep_samples else None)


# ---------------------------------------------------------------------------
# Tail-form regressions
# ---------------------------------------------------------------------------

@dataclass
class TailFit:
    slope: float
    intercept: float
    r2: float
    c2_hat: float
    n_window: int
    passed: bool

    def to_json(self):
        return {"slope": self.slope, "intercept": self.intercept,
                "r2": self.r2, "c2_hat": self.c2_hat,
                "n_window": self.n_window, "pass": self.passed}


def _fit_line(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 0.0
    return float(slope), float(intercept), r2


def tail_fit(est: DensityEstimate, z0, rho: float,
             kappa_t: float) -> TailFit:
    """Regress -log p_hat(y) on |y - z0|^(1 + 1/rho) / kappa_t^2 over the
    reliable window p_hat > 10 se; PASS iff slope > 0 and r^2 >= 0.9."""
    y = np.atleast_2d(est.y_grid.T).T
    z0_arr = np.atleast_1d(np.asarray(z0, dtype=float))
    dist = np.linalg.norm(y - z0_arr, axis=1)
    ok = (est.p > 10 * est.se) & (est.p > 0)
    if ok.sum() < 3:
        raise NoiseFloorError("reliable window is empty")
    u = dist[ok] ** (1.0 + 1.0 / rho) / kappa_t ** 2
    slope, intercept, r2 = _fit_line(u, -np.log(est.p[ok]))
    passed = bool(slope > 0 and r2 >= 0.9)
    c2 = 1.0 / slope if slope > 0 else float("inf")
    return TailFit(slope=slope, intercept=intercept, r2=r2, c2_hat=c2,
                   n_window=int(ok.sum()), passed=passed)


@dataclass
class TailProbabilityReport:
    levels: np.ndarray
    exceedance: np.ndarray
    se: np.ndarray
    fit: TailFit | None

    def to_json(self):
        return {"levels": self.levels.tolist(),
                "exceedance": self.exceedance.tolist(),
                "se": self.se.tolist(),
                "fit": None if self.fit is None else self.fit.to_json()}


def tail_probability_check(kernel: CovKernel, vf: VectorFieldSystem, z0,
                           tau: float, eps: float, n_paths: int, seed: int,
                           levels, grid: TimeGrid | None = None,
                           workers: int = 1) -> TailProbabilityReport:
    """Empirical exceedance of the running sup |Z - z0| against levels,
    fitted on the transformed axis level^(1 + 1/rho) / kappa_tau^2; levels
    at or below the sample median are excluded from the fit window."""
    if grid is None:
        grid = TimeGrid.regular(256, horizon=kernel.horizon)
    (sups,) = monte_carlo_reduce(kernel, grid, vf, z0, [eps], n_paths, seed,
                                 collect="running_sup", t_node=tau,
                                 workers=workers)
    levels = np.asarray(levels, dtype=float)
    p_hat = np.array([(sups >= lv).mean() for lv in levels])
    se = np.sqrt(np.maximum(p_hat * (1 - p_hat), 0.0) / n_paths)
    med = np.median(sups)
    ok = (levels > med) & (p_hat > 10 * se) & (p_hat > 0)
    kap = kappa(kernel, 0.0, float(tau), grid)
    fit = None
    if ok.sum() >= 3:
        u = levels[ok] ** (1.0 + 1.0 / kernel.rho) / (eps ** 2 * kap ** 2)
        slope, intercept, r2 = _fit_line(u, -np.log(p_hat[ok]))
        fit = TailFit(slope=slope, intercept=intercept, r2=r2,
                      c2_hat=1.0 / slope if slope > 0 else float("inf"),
                      n_window=int(ok.sum()),
                      passed=bool(slope > 0 and r2 >= 0.9))
    return TailProbabilityReport(levels=levels, exceedance=p_hat, se=se,
                                 fit=fit)


# ---------------------------------------------------------------------------
# Rate function (penalized minimal Cameron-Martin energy)
# ---------------------------------------------------------------------------

@dataclass
class RateFunctionResult:
    y: np.ndarray
    d2: float
    h_opt: CMElement
    residual: float
    penalty_trace: list
    det_gamma: float
    gamma: MalliavinMatrix
    start_index: int

    @property
    def accepted(self) -> bool:
        return self.residual <= self.penalty_trace[-1]["tol"] \
            and self.det_gamma > 0

    def to_json(self):
        return {"y": np.atleast_1d(self.y).tolist(), "d2": self.d2,
                "residual": self.residual, "det_gamma": self.det_gamma,
                "penalty_trace": self.penalty_trace,
                "start_index": self.start_index,
                "h_nodes": self.h_opt.nodes.tolist(),
                "h_coeffs": self.h_opt.coeffs.tolist()}


def rate_function(y, kernel: CovKernel, vf: VectorFieldSystem, z0,
                  grid: TimeGrid | None = None, m_nodes: int = 16,
                  penalty_schedule=(1e2, 1e3, 1e4, 1e5), tol: float = 1e-6,
                  n_starts: int = 5, seed: int = 0, refine_factor: int = 8,
                  max_penalty: float = 1e10,
                  elliptic_gate: bool = True) -> RateFunctionResult:
    """Minimize (1/2)|h|^2 subject to the skeleton reaching y, by quadratic
    penalty with quasi-Newton descent and central finite differences.

    The penalty weight follows ``penalty_schedule`` and keeps escalating
    (x10, up to ``max_penalty``) until the constraint residual meets
    ``tol``; ``n_starts`` seeded starts run the whole schedule and the best
    feasible minimizer wins (ties: lowest start index).
    """
    if elliptic_gate:
        lam = vf.elliptic_lambda
        if lam is None:
            lam = ellipticity_scan(vf)
        if lam <= 0:
            raise NonEllipticError(
                f"{vf.name}: ellipticity certificate failed (lambda <= 0)")
    if grid is None:
        grid = TimeGrid.regular(64, horizon=kernel.horizon)
    y_arr = np.atleast_1d(np.asarray(y, dtype=float))
    if y_arr.shape != (vf.n,):
        raise ValueError("target dimension mismatch")
    m, d = m_nodes, vf.d
    nodes = grid.horizon * np.arange(1, m + 1) / m
    gram = np.atleast_2d(kernel.eval(nodes[:, None], nodes[None, :]))
    prop = SkeletonPropagator(kernel, vf, grid, nodes,
                              refine_factor=refine_factor)

    def energy(theta):
        c = theta.reshape(m, d)
        return 0.5 * float(np.einsum("ic,ij,jc->", c, gram, c))

    def energy_grad(theta):
        c = theta.reshape(m, d)
        return (gram @ c).ravel()

    def residual_sq(theta):
        phi1 = prop.terminal(theta.reshape(1, m, d), z0)[0]
        return float(np.sum((phi1 - y_arr) ** 2))

    def residual_sq_grad(theta):
        # batched central differences, step 1e-5 (1 + |coef|)
        steps = 1e-5 * (1.0 + np.abs(theta))
        pert = np.concatenate([theta + np.diag(steps),
                               theta - np.diag(steps)], axis=0)
        phi = prop.terminal(pert.reshape(-1, m, d), z0)
        vals = np.sum((phi - y_arr) ** 2, axis=1)
        return (vals[: m * d] - vals[m * d:]) / (2 * steps)

    rng = np.random.Generator(np.random.Philox(key=seed))
    start_points = 0.1 * rng.standard_normal((n_starts, m * d))
    schedule = list(penalty_schedule)
    while schedule[-1] < max_penalty:
        schedule.append(schedule[-1] * 10.0)

    best = None
    for s_idx in range(n_starts):
        theta = start_points[s_idx].copy()
        trace = []
        for mu in schedule:
            res = minimize(
                lambda th: energy(th) + mu * residual_sq(th),
                theta, jac=lambda th: energy_grad(th)
                + mu * residual_sq_grad(th),
                method="BFGS",
                options={"gtol": 1e-9 * max(mu, 1.0), "maxiter": 200})
            theta = res.x
            resid = math.sqrt(residual_sq(theta))
            trace.append({"mu": mu, "value": energy(theta),
                          "residual": resid, "tol": tol})
            if resid <= tol:
                break
        cand = (energy(theta), s_idx, theta, resid, trace)
        if resid <= tol and (best is None or
                             (cand[0], cand[1]) < (best[0], best[1])):
            best = cand

    if best is None:
        raise TargetUnreachableError(
            f"constraint residual not met at max penalty {schedule[-1]:g}: "
            "target may be unreachable at this budget")
    value, s_idx, theta, resid, trace = best
    h_opt = CMElement(kernel, nodes, theta.reshape(m, d))
    gamma = deterministic_malliavin_matrix(h_opt, vf, z0, kernel, grid,
                                           refine_factor=refine_factor)
    return RateFunctionResult(y=y_arr, d2=value, h_opt=h_opt, residual=resid,
                              penalty_trace=trace, det_gamma=gamma.det,
                              gamma=gamma, start_index=s_idx)


# ---------------------------------------------------------------------------
# Vanishing-noise sweep
# ---------------------------------------------------------------------------

@dataclass
class VaradhanSweep:
    y: np.ndarray
    eps_list: list
    log_density: list
    scaled: list            # eps^2 log p_hat
    trusted: list
    extrapolated: float
    d2: float
    gap: float

    def to_json(self):
        return {"y": np.atleast_1d(self.y).tolist(),
                "eps": list(self.eps_list),
                "log_density": self.log_density,
                "eps2_log_density": self.scaled,
                "trusted": self.trusted,
                "extrapolated": self.extrapolated,
                "d2": self.d2, "gap": self.gap}


def _extrapolate_eps(eps: np.ndarray, vals: np.ndarray) -> float:
    """Fit eps^2 log p = L + a eps^2 + b eps^2 log eps on three points and
    return L (the prefactor of a non-degenerate density contributes
    exactly the eps^2 and eps^2 log eps terms)."""
    a = np.column_stack([np.ones(3), eps ** 2, eps ** 2 * np.log(eps)])
    coef = np.linalg.solve(a, vals)
    return float(coef[0])


def varadhan_sweep(y, kernel: CovKernel, vf: VectorFieldSystem, z0,
                   eps_list, n_paths: int, seed: int,
                   rate: RateFunctionResult | None = None,
                   d2: float | None = None,
                   grid: TimeGrid | None = None, t: float = 1.0,
                   bandwidth=None, floor: float = 50.0,
                   workers: int = 1) -> VaradhanSweep:
    """eps^2 log p_eps(y) along an eps list, with the shared driver
    realization, the trust floor n p_hat bandwidth >= ``floor``, and
    three-point extrapolation to eps = 0 on the trusted tail."""
    if rate is None and d2 is None:
        raise ValueError("pass a RateFunctionResult or a d2 value")
    d2_val = d2 if d2 is not None else rate.d2
    if grid is None:
        grid = TimeGrid.regular(256, horizon=kernel.horizon)
    y_arr = np.atleast_2d(np.asarray(y, dtype=float))
    eps_arr = list(eps_list)
    terminals = monte_carlo_reduce(kernel, grid, vf, z0, eps_arr, n_paths,
                                   seed, collect="terminal", t_node=t,
                                   workers=workers)
    log_p, scaled, trusted = [], [], []
    for eps, term in zip(eps_arr, terminals):
        h = silverman_bandwidth(term) if bandwidth is None \
            else np.broadcast_to(np.asarray(bandwidth, dtype=float),
                                 (term.shape[1],)).copy()
        p, se = kde_evaluate(term, y_arr, h)
        p_val = float(p[0])
        ok = n_paths * p_val * float(np.prod(h)) >= floor
        log_p.append(math.log(p_val) if p_val > 0 else float("-inf"))
        scaled.append(eps * eps * log_p[-1])
        trusted.append(bool(ok))
    usable = [i for i, ok in enumerate(trusted) if ok]
    if len(usable) < 3:
        raise NoiseFloorError(
            "density below the noise floor for too many eps values; "
            "increase n_paths or raise the eps floor")
    last3 = usable[-3:]
    limit = _extrapolate_eps(np.array([eps_arr[i] for i in last3]),
                             np.array([scaled[i] for i in last3]))
    return VaradhanSweep(y=np.atleast_1d(np.asarray(y, dtype=float)),
                         eps_list=eps_arr, log_density=log_p, scaled=scaled,
                         trusted=trusted, extrapolated=limit, d2=d2_val,
                         gap=limit - (-d2_val))


# ---------------------------------------------------------------------------
# First variation of the skeleton
# ---------------------------------------------------------------------------

def first_variation_samples(h: CMElement, kernel: CovKernel,
                            vf: VectorFieldSystem, z0, grid: TimeGrid,
                            n_paths: int, seed: int,
                            skeleton=None) -> np.ndarray:
    """Samples of the Gaussian first variation
    G_1(h) = J_1(h) sum_i J_{u_i}(h)^{-1} V(Phi_{u_i}(h)) dX_i,
    shape (n_paths, n); mean 0 and covariance the deterministic matrix."""
    flow = skeleton if skeleton is not None else solve_skeleton(
        h, vf, z0, grid)
    w = np.einsum("ab,sbc,scd->sad", flow.J[-1], flow.Jinv[:-1],
                  vf.v(flow.phi[:-1]))
    out = np.empty((n_paths, vf.n))
    chol = cholesky_factor(kernel, grid)
    for off, size in _chunk_ranges(n_paths):
        ens = sample(kernel, grid, d=vf.d, n_paths=size, seed=seed,
                     path_offset=off, chol=chol)
        dx = np.diff(ens.data, axis=2).transpose(0, 2, 1)   # (P, N, d)
        out[off: off + size] = np.einsum("sad,psd->pa", w, dx)
    return out
