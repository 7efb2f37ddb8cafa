"""Scalar diagnostics of a covariance kernel on a grid.

Everything here reduces to the matrix of per-cell rectangular increments
``M[i, j] = E[dX_i dX_j]``: mixed variations, the kappa/eta coefficients,
sign scans over quadruples of grid nodes, and conditional-variance
estimates for the non-determinism index.

Variation suprema are taken over dissections that are sub-grids of the
given grid: the inner axis keeps the finest dissection (optimal for inner
exponent 1 by the triangle inequality) while the outer axis is maximised
exactly by dynamic programming.  For inner exponent 1 this equals the full
supremum over sub-grid dissections, so values are certified lower bounds of
the continuum supremum and monotone under grid refinement; callers wanting
a convergence signal get the half-resolution value alongside.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .kernels import CovKernel, TimeGrid


class DegenerateKernelError(RuntimeError):
    """Gram matrix of grid increments stayed singular after jitter."""


def cell_rect_matrix(kernel: CovKernel, grid: TimeGrid) -> np.ndarray:
    """Rectangular increments over all pairs of grid cells."""
    g = kernel.gram(grid.nodes)
    return g[1:, 1:] - g[1:, :-1] - g[:-1, 1:] + g[:-1, :-1]


def _span_indices(grid: TimeGrid, a: float, b: float) -> tuple[int, int]:
    ia, ib = grid.index_of(a), grid.index_of(b)
    if ib < ia:
        raise ValueError("interval endpoints out of order")
    return ia, ib


def _outer_dp(block: np.ndarray, gamma: float, rho: float) -> float:
    """Maximise (sum_J A(J)^(rho/gamma))^(1/rho) over dissections of the
    outer (column) axis, with A(J) = sum_i |sum_{j in J} block[i, j]|^gamma
    the finest-inner value on outer interval J."""
    n_out = block.shape[1]
    cs = np.zeros((block.shape[0], n_out + 1))
    np.cumsum(block, axis=1, out=cs[:, 1:])
    expo = rho / gamma
    best = np.zeros(n_out + 1)
    for b in range(1, n_out + 1):
        a_vals = (np.abs(cs[:, b:b + 1] - cs[:, :b]) ** gamma).sum(axis=0)
        best[b] = np.max(best[:b] + a_vals ** expo)
    return float(best[n_out] ** (1.0 / rho))


def mixed_variation(kernel: CovKernel, rect, gamma: float, rho: float,
                    grid: TimeGrid, cells: np.ndarray | None = None) -> float:
    """Mixed (gamma, rho)-variation over ``rect = (s, t, u, v)``, the
    supremum over sub-grid dissections (exact for gamma = 1, a certified
    lower bound otherwise); inner gamma-sum along [s, t], outer rho-sum
    along [u, v]."""
    if gamma < 1 or rho < 1:
        raise ValueError("variation exponents must be >= 1")
    s, t, u, v = rect
    ia, ib = _span_indices(grid, s, t)
    ja, jb = _span_indices(grid, u, v)
    if ia == ib or ja == jb:
        return 0.0
    m = cell_rect_matrix(kernel, grid) if cells is None else cells
    return _outer_dp(m[ia:ib, ja:jb], gamma, rho)


def mixed_variation_refinement(kernel: CovKernel, rect, gamma: float,
                               rho: float, grid: TimeGrid) -> tuple[float, float]:
    """Finest-grid variation plus the half-resolution value (convergence
    signal for the lower-bound approximation)."""
    fine = mixed_variation(kernel, rect, gamma, rho, grid)
    nodes = grid.nodes
    keep = np.union1d(nodes[::2], [nodes[0], nodes[-1]])
    s, t, u, v = rect
    keep = np.union1d(keep, [s, t, u, v])
    half = mixed_variation(kernel, rect, gamma, rho, TimeGrid(nodes=keep))
    return fine, half


def two_d_rho_variation(kernel: CovKernel, rect, rho: float,
                        grid: TimeGrid) -> float:
    """2D rho-variation, the gamma = rho diagonal of the mixed variation."""
    return mixed_variation(kernel, rect, rho, rho, grid)


def kappa(kernel: CovKernel, s: float, t: float, grid: TimeGrid,
          cells: np.ndarray | None = None) -> float:
    """kappa_{s,t} = sqrt(V_{1,rho}(R; [s,t]^2)) with the kernel's rho."""
    return float(np.sqrt(mixed_variation(kernel, (s, t, s, t), 1.0, kernel.rho,
                                         grid, cells=cells)))


def eta(kernel: CovKernel, t: float, grid: TimeGrid,
        cells: np.ndarray | None = None) -> float:
    """Self-similarity parameter eta_t = kappa_t^2 / sigma_t^2."""
    sig2 = kernel.sigma_sq0(t)
    if sig2 <= 0:
        raise ZeroDivisionError(f"sigma_t^2 = 0 at t = {t}: degenerate time")
    return kappa(kernel, 0.0, t, grid, cells=cells) ** 2 / sig2


def q_embedding(rho: float) -> float:
    """Variation exponent q = 1 / (1/(2 rho) + 1/2) < 2 of the
    Cameron-Martin embedding."""
    return 1.0 / (0.5 / rho + 0.5)


# ---------------------------------------------------------------------------
# Hypothesis scans
# ---------------------------------------------------------------------------

@dataclass
class SignScan:
    passed: bool
    worst: float
    witness: tuple[float, float, float, float] | None

    def to_json(self):
        return {"pass": self.passed, "worst": self.worst,
                "witness": list(self.witness) if self.witness else None}


@dataclass
class HolderFit:
    passed: bool
    exponent: float
    constant: float

    def to_json(self):
        return {"pass": self.passed, "exponent": self.exponent,
                "constant": self.constant}


@dataclass
class HypothesisReport:
    kernel: str
    kernel_spec: dict
    n_steps: int
    negative_correlation: SignScan
    diagonal_dominance: SignScan
    c_X_estimate: float
    alpha_estimate: float
    holder_controlled: HolderFit
    valid_horizon: float | None = None
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return (self.negative_correlation.passed
                and self.diagonal_dominance.passed
                and np.isfinite(self.c_X_estimate) and self.c_X_estimate > 0
                and self.holder_controlled.passed)

    def to_json(self):
        return {
            "kernel": self.kernel,
            "kernel_spec": self.kernel_spec,
            "n_steps": self.n_steps,
            "negative_correlation": self.negative_correlation.to_json(),
            "diagonal_dominance": self.diagonal_dominance.to_json(),
            "c_X_estimate": self.c_X_estimate,
            "alpha_estimate": self.alpha_estimate,
            "holder_controlled": self.holder_controlled.to_json(),
            "valid_horizon": self.valid_horizon,
            "pass": self.passed,
            "details": self.details,
        }


def _scan_negative_correlation(g: np.ndarray):
    """Max of E[dX_{t1 t2} dX_{t3 t4}] over node quadruples t1<t2<=t3<t4.

    For a fixed increment [t1, t2] the value is D[t4] - D[t3] with
    D = G[t2] - G[t1], so each (t1, t2) row reduces to a running-minimum
    scan.
    """
    m = g.shape[0]
    idx = np.arange(m)
    worst = -np.inf
    for i1 in range(m - 2):
        d = g[i1 + 1:, :] - g[i1, :]          # rows i2 = i1+1 .. m-1
        i2s = idx[i1 + 1:]
        masked = np.where(idx[None, :] >= i2s[:, None], d, np.inf)
        premin = np.minimum.accumulate(masked, axis=1)
        cand = d[:, 1:] - premin[:, :-1]      # candidate at i4 = column+1
        valid = idx[None, 1:] > i2s[:, None]  # need i4 > i3 >= i2
        cand = np.where(valid, cand, -np.inf)
        block = cand.max(initial=-np.inf)
        if block > worst:
            worst = block
    return worst


def _witness_negative_correlation(g: np.ndarray, worst: float, nodes):
    m = g.shape[0]
    for i1 in range(m - 2):
        for i2 in range(i1 + 1, m - 1):
            d = g[i2, :] - g[i1, :]
            block = d[None, i2 + 1:] - d[i2:-1, None]
            block = np.where(np.arange(i2 + 1, m)[None, :]
                             > np.arange(i2, m - 1)[:, None], block, -np.inf)
            hits = np.argwhere(block == worst)
            if hits.size:
                i3, i4 = hits[0]
                return (nodes[i1], nodes[i2], nodes[i2 + i3], nodes[i2 + 1 + i4])
    return None


def _scan_diagonal_dominance(g: np.ndarray):
    """Min of E[dX_{t2 t3} dX_{t1 t4}] over nested quadruples
    t1<=t2<t3<=t4; the value is D[t4] - D[t1] with D = G[t3] - G[t2]."""
    m = g.shape[0]
    worst = np.inf
    for i2 in range(m - 1):
        d = g[i2 + 1:, :] - g[i2, :]          # rows i3 = i2+1 .. m-1
        i3s = np.arange(i2 + 1, m)
        masked = np.where(np.arange(m)[None, :] >= i3s[:, None], d, np.inf)
        sufmin = masked.min(axis=1)           # min over i4 >= i3, per row
        prefmax = d[:, :i2 + 1].max(axis=1)   # max over i1 <= i2, per row
        block = (sufmin - prefmax).min()
        if block < worst:
            worst = block
    return worst


def _witness_diagonal_dominance(g: np.ndarray, worst: float, nodes):
    m = g.shape[0]
    for i1 in range(m - 1):
        for i2 in range(i1, m - 1):
            # block over inner intervals (i3, i4) with i2 < i3 <= i4
            d4 = g[i2 + 1:, :] - g[i2, :]     # rows i3
            block = d4[:, i2 + 1:]            # columns i4 = i2+1 .. m-1
            block = block - (g[i2 + 1:, i1] - g[i2, i1])[:, None]
            block = np.where(np.arange(i2 + 1, m)[None, :]
                             >= np.arange(i2 + 1, m)[:, None], block, np.inf)
            hits = np.argwhere(block == worst)
            if hits.size:
                i3, i4 = hits[0]
                return (nodes[i1], nodes[i2], nodes[i2 + 1 + i3],
                        nodes[i2 + 1 + i4])
    return None


def _solve_psd(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Cholesky solve with escalating jitter; raises DegenerateKernelError."""
    base = np.trace(mat) / mat.shape[0]
    jitter = 0.0
    for _ in range(6):
        try:
            cf = linalg.cho_factor(mat + jitter * np.eye(mat.shape[0]),
                                   lower=True)
            return linalg.cho_solve(cf, rhs)
        except linalg.LinAlgError:
            jitter = 1e-12 * base if jitter == 0.0 else jitter * 10
            if jitter > 1e-7 * base:
                break
    raise DegenerateKernelError("increment Gram matrix singular after jitter")


def conditional_variance(kernel: CovKernel, grid: TimeGrid, ia: int, ib: int,
                         cells: np.ndarray | None = None) -> float:
    """Var(dX_{t_ia, t_ib} | grid increments outside [t_ia, t_ib]), the
    Gaussian projection residual (an upper bound on the continuous-time
    conditional variance)."""
    m = cell_rect_matrix(kernel, grid) if cells is None else cells
    n = m.shape[0]
    outside = np.r_[0:ia, ib:n]
    y_var = float(m[ia:ib, ia:ib].sum())
    if outside.size == 0:
        return y_var
    cov_yb = m[ia:ib, :][:, outside].sum(axis=0)
    sigma_b = m[np.ix_(outside, outside)]
    sol = _solve_psd(sigma_b, cov_yb)
    return float(y_var - cov_yb @ sol)


def _fit_window(grid: TimeGrid) -> tuple[float, float, bool]:
    lo, hi = 4 * grid.mesh, grid.horizon / 4
    if lo <= hi:
        return lo, hi, False
    return grid.mesh, grid.horizon / 2, True


def _loglog_slope(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    return float(slope), float(np.exp(intercept))


def stationary_valid_horizon(kernel: CovKernel, grid: TimeGrid,
                             tol: float = 1e-10) -> float:
    """Largest grid time T' such that the variogram F(x) = sigma^2(0, x) is
    non-decreasing and concave on [0, T'] (equivalently the stationary
    covariance K is decreasing and convex there)."""
    x = grid.nodes
    F = np.array([kernel.sigma_sq(0.0, xi) for xi in x])
    scale = max(abs(F[-1]), 1e-30)
    d1 = np.diff(F)
    d2 = np.diff(d1)
    ok1 = d1 >= -tol * scale
    ok2 = d2 <= tol * scale
    t_valid = x[1]
    for i in range(1, x.size):
        if not ok1[i - 1] or (i >= 2 and not ok2[i - 2]):
            break
        t_valid = x[i]
    return float(t_valid)


def check_hypotheses(kernel: CovKernel, grid: TimeGrid,
                     tol: float = 1e-10) -> HypothesisReport:
    """Grid scan of the sign hypotheses, the non-determinism index, and the
    Hölder-controlled variation fit.

    Sign violations below ``tol * sigma_T^2`` count as round-off.  The
    conditional variance is taken against the grid increments outside each
    sub-interval; alpha is the log-log slope over lengths in
    [4*mesh, T/4] and c_X the minimum of condVar / length^alpha there.
    """
    if grid.n_steps < 4:
        raise ValueError("hypothesis scan needs at least 4 grid steps")
    nodes = grid.nodes
    g = kernel.gram(nodes)
    cells = g[1:, 1:] - g[1:, :-1] - g[:-1, 1:] + g[:-1, :-1]
    scale = max(kernel.sigma_sq0(grid.horizon), 1e-30)

    worst_nc = _scan_negative_correlation(g)
    nc = SignScan(passed=bool(worst_nc <= tol * scale), worst=float(worst_nc),
                  witness=_witness_negative_correlation(g, worst_nc, nodes))

    worst_dd = _scan_diagonal_dominance(g)
    dd = SignScan(passed=bool(worst_dd >= -tol * scale), worst=float(worst_dd),
                  witness=_witness_diagonal_dominance(g, worst_dd, nodes))

    lo, hi, fallback = _fit_window(grid)
    n = grid.n_steps

    def collect(lo, hi):
        out = [(ib - ia, ia, ib) for ia in range(n)
               for ib in range(ia + 1, n + 1)
               if lo <= nodes[ib] - nodes[ia] <= hi]
        return out

    spans = collect(lo, hi)
    if len({w for w, _, _ in spans}) < 2:
        lo, hi, fallback = grid.mesh, grid.horizon / 2, True
        spans = collect(lo, hi)
    pairs = [(ia, ib) for _, ia, ib in spans]
    lengths = np.asarray([nodes[ib] - nodes[ia] for ia, ib in pairs])
    cond_vars = [conditional_variance(kernel, grid, ia, ib, cells=cells)
                 for ia, ib in pairs]
    cond_vars = np.maximum(np.asarray(cond_vars), 1e-14 * scale)
    alpha_hat, _ = _loglog_slope(lengths, cond_vars)
    c_x = float(np.min(cond_vars / lengths ** alpha_hat))

    # Hölder-controlled fit of V_{1,rho}([s,t]^2) on the same window.
    v_vals = np.empty(len(pairs))
    for k, (ia, ib) in enumerate(pairs):
        v_vals[k] = _outer_dp(cells[ia:ib, ia:ib], 1.0, kernel.rho)
    h_exp, _ = _loglog_slope(lengths, np.maximum(v_vals, 1e-300))
    h_const = float(np.max(v_vals / lengths ** h_exp))
    holder = HolderFit(passed=bool(h_exp >= 1.0 / kernel.rho - 0.1),
                       exponent=h_exp, constant=h_const)

    valid_horizon = None
    if kernel.family in ("stationary", "sum_fbm", "fourier", "fou"):
        valid_horizon = stationary_valid_horizon(kernel, grid, tol)

    try:
        spec = kernel.to_spec()
    except ValueError:
        spec = {"family": kernel.family}
    return HypothesisReport(
        kernel=kernel.label,
        kernel_spec=spec,
        n_steps=grid.n_steps,
        negative_correlation=nc,
        diagonal_dominance=dd,
        c_X_estimate=c_x,
        alpha_estimate=alpha_hat,
        holder_controlled=holder,
        valid_horizon=valid_horizon,
        details={
            "fit_window": [lo, hi],
            "window_fallback": fallback,
            "n_fit_intervals": len(pairs),
            "sign_tolerance": tol * scale,
            "q_embedding": q_embedding(kernel.rho),
        },
    )
