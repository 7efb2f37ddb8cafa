"""Flow solvers: the rough differential equation with its Jacobian pair,
and the smooth skeleton ODE driven by Cameron-Martin elements.

The RDE stepper is a one-step second-order Taylor update consuming level-2
data, with time adjoined as a smooth zeroth component (weights dt^2/2 and
dt dx/2 for the drift blocks).  The inverse Jacobian propagates through its
own linear update and is re-inverted from J every ``reinvert_every`` steps
to stop drift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .fields import VectorFieldSystem
from .kernels import TimeGrid
from .lift import RoughPath2
from .paths import CMElement


class BlowUpError(RuntimeError):
    """State escaped the guard radius; carries the last valid step."""

    def __init__(self, msg: str, last_valid_step: int):
        super().__init__(msg)
        self.last_valid_step = last_valid_step


@dataclass
class FlowState:
    """Solution, Jacobian and inverse Jacobian of one driver realization."""

    grid: TimeGrid
    Z: np.ndarray                 # (N+1, n)
    J: np.ndarray | None          # (N+1, n, n)
    Jinv: np.ndarray | None
    z0: np.ndarray
    eps: float


@dataclass
class BatchFlow:
    grid: TimeGrid
    Z: np.ndarray                 # (P, N+1, n)
    J: np.ndarray | None
    Jinv: np.ndarray | None
    z0: np.ndarray
    eps: float

    @property
    def n_paths(self) -> int:
        return self.Z.shape[0]

    def flow(self, p: int) -> FlowState:
        return FlowState(grid=self.grid, Z=self.Z[p],
                         J=None if self.J is None else self.J[p],
                         Jinv=None if self.Jinv is None else self.Jinv[p],
                         z0=self.z0, eps=self.eps)


def _as_state(z0, n: int) -> np.ndarray:
    z = np.atleast_1d(np.asarray(z0, dtype=float))
    if z.shape != (n,):
        raise ValueError(f"initial state must have dimension {n}")
    return z


def solve_batch(level1: np.ndarray, level2: np.ndarray, grid: TimeGrid,
                vf: VectorFieldSystem, z0, eps: float = 1.0,
                with_jacobian: bool = True, reinvert_every: int = 64,
                guard: float = 1e8) -> BatchFlow:
    """Second-order one-step scheme over an ensemble of lifted drivers.

    ``level1``: (P, N, d) increments, ``level2``: (P, N, d, d) iterated
    integrals; the driver enters scaled by ``eps``.
    """
    P, N, d = level1.shape
    if d != vf.d or level2.shape != (P, N, d, d) or N != grid.n_steps:
        raise ValueError("driver dimensions inconsistent with field/grid")
    n = vf.n
    z0 = _as_state(z0, n)
    dts = grid.dts

    if eps * np.abs(level1).max(initial=0.0) >= 1.0:
        raise ValueError("per-step increment norm >= 1: grid too coarse "
                         "for the step-map contraction")

    Z = np.empty((P, N + 1, n))
    Z[:, 0, :] = z0
    z = np.broadcast_to(z0, (P, n)).copy()
    if with_jacobian:
        J = np.empty((P, N + 1, n, n))
        K = np.empty_like(J)
        J[:, 0] = K[:, 0] = np.eye(n)
        j = np.broadcast_to(np.eye(n), (P, n, n)).copy()
        k = j.copy()
    else:
        J = K = None

    for i in range(N):
        dt = dts[i]
        x1 = eps * level1[:, i]                    # (P, d)
        x2 = (eps * eps) * level2[:, i]            # (P, d, d)
        v0 = vf.v0(z)
        v = vf.v(z)
        dv0 = vf.dv0(z)
        dv = vf.dv(z)

        dz = v0 * dt
        dz += np.einsum("pad,pd->pa", v, x1)
        dz += np.einsum("pabk,pbj,pjk->pa", dv, v, x2)
        dz += 0.5 * dt * dt * np.einsum("pab,pb->pa", dv0, v0)
        dz += 0.5 * dt * (np.einsum("pabj,pb,pj->pa", dv, v0, x1)
                          + np.einsum("pab,pbj,pj->pa", dv0, v, x1))

        if with_jacobian:
            d2v0 = vf.d2v0(z)
            d2v = vf.d2v(z)
            # level-2 blocks of the linearized (J) and inverse (K) equations
            a_jk = (np.einsum("pacek,pej->pacjk", d2v, v)
                    + np.einsum("paek,pecj->pacjk", dv, dv))
            b_jk = (np.einsum("pcej,pebk->pcbjk", dv, dv)
                    - np.einsum("pcbek,pej->pcbjk", d2v, v))
            a_00 = (np.einsum("pace,pe->pac", d2v0, v0)
                    + np.einsum("pae,pec->pac", dv0, dv0))
            b_00 = (np.einsum("pae,pec->pac", dv0, dv0)
                    - np.einsum("pace,pe->pac", d2v0, v0))
            a_x = (np.einsum("pacek,pe->pack", d2v, v0)
                   + np.einsum("paek,pec->pack", dv, dv0)
                   + np.einsum("pace,pek->pack", d2v0, v)
                   + np.einsum("pae,peck->pack", dv0, dv))
            b_x = (np.einsum("pae,peck->pack", dv0, dv)
                   - np.einsum("pacek,pe->pack", d2v, v0)
                   + np.einsum("paek,pec->pack", dv, dv0)
                   - np.einsum("pace,pek->pack", d2v0, v))

            dj = dt * np.einsum("pac,pcb->pab", dv0, j)
            dj += np.einsum("pacj,pcb,pj->pab", dv, j, x1)
            dj += np.einsum("pacjk,pcb,pjk->pab", a_jk, j, x2)
            dj += 0.5 * dt * dt * np.einsum("pac,pcb->pab", a_00, j)
            dj += 0.5 * dt * np.einsum("pack,pcb,pk->pab", a_x, j, x1)

            dk = -dt * np.einsum("pac,pcb->pab", k, dv0)
            dk -= np.einsum("pac,pcbj,pj->pab", k, dv, x1)
            dk += np.einsum("pac,pcbjk,pjk->pab", k, b_jk, x2)
            dk += 0.5 * dt * dt * np.einsum("pac,pcb->pab", k, b_00)
            dk += 0.5 * dt * np.einsum("pac,pcbk,pk->pab", k, b_x, x1)

            j = j + dj
            k = k + dk
            # Newton correction K <- K (2I - J K): one cheap defect-squaring
            # step per node, plus a full re-inversion on the window.
            jk = np.einsum("pab,pbc->pac", j, k)
            k = 2.0 * k - np.einsum("pab,pbc->pac", k, jk)
            if (i + 1) % reinvert_every == 0:
                k = np.linalg.inv(j)
            J[:, i + 1] = j
            K[:, i + 1] = k

        z = z + dz
        if not np.all(np.isfinite(z)) or np.abs(z).max() > guard:
            raise BlowUpError(
                f"state escaped |Z| <= {guard:g} at step {i + 1} "
                "(step too coarse or field unbounded)", last_valid_step=i)
        Z[:, i + 1] = z

    return BatchFlow(grid=grid, Z=Z, J=J, Jinv=K, z0=z0, eps=eps)


def solve(rp: RoughPath2, vf: VectorFieldSystem, z0, eps: float = 1.0,
          with_jacobian: bool = True, reinvert_every: int = 64,
          guard: float = 1e8) -> FlowState:
    """Solve along a single lifted driver."""
    batch = solve_batch(rp.step1[None], rp.step2[None], rp.grid, vf, z0,
                        eps=eps, with_jacobian=with_jacobian,
                        reinvert_every=reinvert_every, guard=guard)
    return batch.flow(0)


# ---------------------------------------------------------------------------
# Skeleton ODE driven by Cameron-Martin elements
# ---------------------------------------------------------------------------

@dataclass
class SkeletonFlow:
    grid: TimeGrid
    phi: np.ndarray               # (N+1, n)
    J: np.ndarray                 # (N+1, n, n)
    Jinv: np.ndarray
    z0: np.ndarray


class SkeletonPropagator:
    """Batched terminal map of the skeleton ODE for elements on fixed nodes.

    Traces are cubic-interpolated on an 8x (configurable) refined grid and
    integrated by RK4; the trace is linear in the coefficients, so the
    spline-derivative response of each node basis function is precomputed
    once and reused for every objective/gradient evaluation.
    """

    def __init__(self, kernel, vf: VectorFieldSystem, grid: TimeGrid,
                 h_nodes: np.ndarray, refine_factor: int = 8,
                 guard: float = 1e8):
        self.kernel = kernel
        self.vf = vf
        self.grid = grid
        self.h_nodes = np.asarray(h_nodes, dtype=float)
        self.guard = guard
        # basis traces R(s_m, t) on the grid
        self.basis = kernel.eval(self.h_nodes[:, None], grid.nodes[None, :])
        self.basis = np.atleast_2d(self.basis)
        fine = grid.refine(refine_factor)
        self.fine_nodes = fine.nodes
        self.refine_factor = refine_factor
        spline = CubicSpline(grid.nodes, self.basis.T, axis=0)
        stage_times = np.empty(2 * fine.n_steps + 1)
        stage_times[::2] = fine.nodes
        stage_times[1::2] = 0.5 * (fine.nodes[:-1] + fine.nodes[1:])
        self.basis_dot = spline(stage_times, 1).T     # (m, 2*M+1)

    def _hdot_table(self, coeffs: np.ndarray) -> np.ndarray:
        # coeffs (B, m, d) -> stage derivative values (B, Q, d)
        return np.einsum("bmd,mq->bqd", coeffs, self.basis_dot)

    def propagate(self, coeffs: np.ndarray, z0,
                  with_jacobian: bool = False):
        """RK4 the skeleton (and optionally its Jacobian) for a coefficient
        batch (B, m, d); returns phi at base nodes (B, N+1, n) and, when
        requested, J (B, N+1, n, n)."""
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.ndim == 2:
            coeffs = coeffs[:, :, None]
        B = coeffs.shape[0]
        vf = self.vf
        z0 = _as_state(z0, vf.n)
        hdot = self._hdot_table(coeffs)
        steps = np.diff(self.fine_nodes)
        M = steps.size
        f = self.refine_factor
        n_base = (M // f) + 1

        phi_out = np.empty((B, n_base, vf.n))
        phi = np.broadcast_to(z0, (B, vf.n)).copy()
        phi_out[:, 0] = phi
        if with_jacobian:
            j_out = np.empty((B, n_base, vf.n, vf.n))
            j = np.broadcast_to(np.eye(vf.n), (B, vf.n, vf.n)).copy()
            j_out[:, 0] = j

        def rhs(state, hd):
            return vf.v0(state) + np.einsum("bad,bd->ba", vf.v(state), hd)

        def jac_rhs(state, jmat, hd):
            a = vf.dv0(state) + np.einsum("badj,bj->bad", vf.dv(state), hd)
            return np.einsum("bac,bce->bae", a, jmat)

        for i in range(M):
            h = steps[i]
            hd0, hdm, hd1 = hdot[:, 2 * i], hdot[:, 2 * i + 1], hdot[:, 2 * i + 2]
            k1 = rhs(phi, hd0)
            k2 = rhs(phi + 0.5 * h * k1, hdm)
            k3 = rhs(phi + 0.5 * h * k2, hdm)
            k4 = rhs(phi + h * k3, hd1)
            if with_jacobian:
                m1 = jac_rhs(phi, j, hd0)
                m2 = jac_rhs(phi + 0.5 * h * k1, j + 0.5 * h * m1, hdm)
                m3 = jac_rhs(phi + 0.5 * h * k2, j + 0.5 * h * m2, hdm)
                m4 = jac_rhs(phi + h * k3, j + h * m3, hd1)
                j = j + (h / 6.0) * (m1 + 2 * m2 + 2 * m3 + m4)
            phi = phi + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if np.abs(phi).max() > self.guard:
                raise BlowUpError("skeleton escaped the guard radius",
                                  last_valid_step=i)
            if (i + 1) % f == 0:
                phi_out[:, (i + 1) // f] = phi
                if with_jacobian:
                    j_out[:, (i + 1) // f] = j

        if with_jacobian:
            return phi_out, j_out
        return phi_out

    def terminal(self, coeffs: np.ndarray, z0) -> np.ndarray:
        """Phi_T for a coefficient batch, shape (B, n)."""
        return self.propagate(coeffs, z0)[:, -1]


def solve_skeleton(h: CMElement, vf: VectorFieldSystem, z0, grid: TimeGrid,
                   refine_factor: int = 8) -> SkeletonFlow:
    """Skeleton flow and its Jacobian for one Cameron-Martin element."""
    prop = SkeletonPropagator(h.kernel, vf, grid, h.nodes,
                              refine_factor=refine_factor)
    coeffs = h.coeffs[None]
    phi, jac = prop.propagate(coeffs, z0, with_jacobian=True)
    jinv = np.linalg.inv(jac[0])
    return SkeletonFlow(grid=grid, phi=phi[0], J=jac[0], Jinv=jinv,
                        z0=_as_state(z0, vf.n))
