"""Additive-error nonlinearity measure: verification, synthesis, gains.

Synthesis follows the linearized matrix-inequality route: the storage and
approximation-model variables enter through the congruence-transformed
blocks (X, Y^{-1}, K~, L, M~, N), the bound enters linearly on both supply
channels, and the optimal linear model is recovered afterwards by factoring
I - XY.  Verification and the plain gain use the square-matricial route over
the structured basis, with the bound handled by a Schur block so it stays a
single semidefinite program.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import cvxpy as cp
import numpy as np

from .certify import BackendOptions, Certificate, ConicProgram, PolyExpr
from .dataio import OperationSet, PolySystem
from .lifting import (extended_ring, restricted_multipliers, ring_polys,
                      structured_basis, var_selection, z_selection)
from .membership import CoefficientSuperset
from .poly import Polynomial


class RecoveryFailed(RuntimeError):
    pass


@dataclass
class LinearModel:
    """LTI surrogate x+ = A x + B u, y = C x + D u."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    def simulate(self, U: np.ndarray) -> np.ndarray:
        x = np.zeros(self.n_states)
        out = []
        for u in np.atleast_2d(U):
            out.append(self.C @ x + self.D @ u)
            x = self.A @ x + self.B @ u
        return np.array(out)


# ---------------------------------------------------------------------------
# Variable recovery (inverse congruence transformation)
# ---------------------------------------------------------------------------

def factor_identity_minus_xy(X: np.ndarray, Y: np.ndarray,
                             cond_gate: float = 1e10) -> Tuple[np.ndarray, np.ndarray]:
    """Balanced square factorization I - XY = U V' via the SVD."""
    M = np.eye(X.shape[0]) - X @ Y
    W, s, Qt = np.linalg.svd(M)
    if s.min() <= 0 or s.max() / s.min() > cond_gate:
        raise RecoveryFailed("I - XY is numerically singular")
    r = np.sqrt(s)
    return W * r, Qt.T * r


def recover_linear_model(X: np.ndarray, Yinv: np.ndarray, Kt: np.ndarray,
                         L: np.ndarray, Mt: np.ndarray, N: np.ndarray,
                         cond_gate: float = 1e10):
    """Invert the synthesis transformation to the model matrices.

    Y = (Y^{-1})^{-1}, K = K~ Y, M = M~ Y, then with I - XY = U V':
    A = U^{-1} K V^{-T}, B = U^{-1} L, C = M V^{-T}, D = N.
    Returns (model, U, V); residual of the forward map is checked by tests.
    """
    if np.linalg.cond(Yinv) > cond_gate:
        raise RecoveryFailed("Y^{-1} is numerically singular")
    Y = np.linalg.inv(Yinv)
    K = Kt @ Y
    M = Mt @ Y
    U, V = factor_identity_minus_xy(X, Y, cond_gate)
    Uin = np.linalg.inv(U)
    Vin_t = np.linalg.inv(V).T
    model = LinearModel(Uin @ K @ Vin_t, Uin @ L, M @ Vin_t, N)
    return model, U, V


def forward_transform(model: LinearModel, X: np.ndarray, Y: np.ndarray,
                      U: np.ndarray, V: np.ndarray):
    """K, L, M, N from a model and a factorization (for round-trip checks)."""
    K = U @ model.A @ V.T
    L = U @ model.B
    M = model.C @ V.T
    N = model.D
    return K, L, M, N


def complete_storage(X: np.ndarray, Yinv: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Full storage matrix [[X, U], [U', U'(X - Y^{-1})^{-1} U]] from the parts."""
    inner = np.linalg.inv(X - Yinv)
    Xhat = U.T @ inner @ U
    return np.block([[X, U], [U.T, Xhat]])


# ---------------------------------------------------------------------------
# Synthesis (matrix-inequality route)
# ---------------------------------------------------------------------------

@dataclass
class NlmCertificate:
    """Certified bound with every ingredient needed for independent rechecks."""

    phi: float
    X: Optional[np.ndarray]
    Yinv: Optional[np.ndarray]
    Kt: Optional[np.ndarray]
    L: Optional[np.ndarray]
    Mt: Optional[np.ndarray]
    N: Optional[np.ndarray]
    tau_sigma: Optional[np.ndarray]
    model: Optional[LinearModel]
    U: Optional[np.ndarray]
    V: Optional[np.ndarray]
    certificate: Optional[Certificate]
    multipliers: List[Optional[Polynomial]] = field(default_factory=list)
    H: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def verified(self) -> bool:
        return self.certificate is not None and self.certificate.verified

    @property
    def unbounded(self) -> bool:
        return not np.isfinite(self.phi)

    def storage_matrix(self) -> np.ndarray:
        if self.U is None:
            raise RecoveryFailed("no factorization available")
        return complete_storage(self.X, self.Yinv, self.U)

    def transformed_storage(self) -> np.ndarray:
        return np.block([[self.Yinv, self.Yinv], [self.Yinv, self.X]])


def _omega_rows(system: PolySystem, H: np.ndarray, T_u: np.ndarray,
                Kt, L, Mt, N, Yinv, X, zero_model: bool):
    n_x, n_z = system.n_x, system.n_z
    n_y = H.shape[0]
    if zero_model:
        row1 = [np.zeros((n_x, 2 * n_x)), np.zeros((n_x, n_z)), Yinv]
        row2 = [np.zeros((n_x, 2 * n_x)), np.zeros((n_x, n_z)), X]
        row3 = [np.zeros((n_y, 2 * n_x)), H, np.zeros((n_y, n_x))]
    else:
        row1 = [np.zeros((n_x, 2 * n_x)), np.zeros((n_x, n_z)), Yinv]
        row2 = [cp.hstack([Kt, np.zeros((n_x, n_x))]), L @ T_u, X]
        row3 = [cp.hstack([-Mt, np.zeros((n_y, n_x))]), H - N @ T_u,
                np.zeros((n_y, n_x))]
    return cp.bmat([row1, row2, row3])


def _theorem_program(superset: CoefficientSuperset, system: PolySystem,
                     H: np.ndarray, operation_set: OperationSet,
                     eps_strict: float, phi_floor: float,
                     zero_model: bool, phi_fixed: Optional[float] = None):
    """The linearized synthesis inequality; phi is a variable unless fixed."""
    n_x, n_z, n_u = system.n_x, system.n_z, system.n_u
    n_y = H.shape[0]
    T_x, T_u = system.selectors()
    prog = ConicProgram("ae_nlm_synthesis")
    Yinv = prog.symmetric("Yinv", n_x)
    X = prog.symmetric("X", n_x)
    if phi_fixed is None:
        Phi = prog.scalar("Phi", nonneg=True, floor=phi_floor)
    else:
        Phi = float(phi_fixed)
    taus = [prog.scalar(f"tauS{i}", nonneg=True) for i in range(superset.n_blocks)]
    taux = prog.scalar("taux", nonneg=True)
    mult = restricted_multipliers(prog, operation_set, system.z, system.variables)
    if zero_model:
        Kt = L = Mt = N = None
    else:
        Kt = prog.matrix("Kt", (n_x, n_x))
        L = prog.matrix("L", (n_x, n_u))
        Mt = prog.matrix("Mt", (n_y, n_x))
        N = prog.matrix("N", (n_y, n_u))

    Rxi = np.hstack([np.eye(2 * n_x), np.zeros((2 * n_x, n_z + n_x))])
    Ru = np.hstack([np.zeros((n_u, 2 * n_x)), T_u, np.zeros((n_u, n_x))])
    Rzf = np.hstack([np.zeros((n_z + n_x, 2 * n_x)), np.eye(n_z + n_x)])
    Rz = np.hstack([np.zeros((n_z, 2 * n_x)), np.eye(n_z), np.zeros((n_z, n_x))])
    Rfin = np.hstack([np.eye(n_x), np.eye(n_x), -T_x, np.zeros((n_x, n_x))])

    YXY = cp.bmat([[Yinv, Yinv], [Yinv, X]])
    phi_uu = cp.multiply(Phi, Ru.T @ Ru) if phi_fixed is None else Phi * (Ru.T @ Ru)
    top = Rxi.T @ YXY @ Rxi + phi_uu \
        + Rz.T @ mult.psum @ Rz + cp.multiply(taux, Rfin.T @ Rfin)
    for tau, B in zip(taus, superset.blocks):
        top = top + cp.multiply(tau, Rzf.T @ B @ Rzf)
    Om = _omega_rows(system, H, T_u, Kt, L, Mt, N, Yinv, X, zero_model)
    BR = cp.bmat([[YXY, np.zeros((2 * n_x, n_y))],
                  [np.zeros((n_y, 2 * n_x)), Phi * np.eye(n_y)]])
    prog.add_psd(cp.bmat([[top, Om.T], [Om, BR]]), "dissipation")
    prog.add_psd(YXY - eps_strict * np.eye(2 * n_x), "transformed_storage_pd")
    prog._strict_shifts["transformed_storage_pd"] = eps_strict
    if phi_fixed is None:
        prog.minimize(Phi)
    return prog, mult


def _theorem_extract(superset, system, H, zero_model, cert, mult, phi):
    n_x, n_u = system.n_x, system.n_u
    n_y = H.shape[0]
    vals = cert.values
    tau_sigma = np.array([float(vals[f"tauS{i}"]) for i in range(superset.n_blocks)])
    mpolys = [None if t is None else t.value_poly() for t in mult.polys]
    if zero_model:
        Ktv = np.zeros((n_x, n_x))
        Lv = np.zeros((n_x, n_u))
        Mtv = np.zeros((n_y, n_x))
        Nv = np.zeros((n_y, n_u))
    else:
        Ktv, Lv, Mtv, Nv = vals["Kt"], vals["L"], vals["Mt"], vals["N"]
    try:
        model, U, V = recover_linear_model(vals["X"], vals["Yinv"], Ktv, Lv, Mtv, Nv)
    except RecoveryFailed:
        if zero_model:
            model = LinearModel(np.zeros((n_x, n_x)), np.zeros((n_x, n_u)),
                                np.zeros((n_y, n_x)), np.zeros((n_y, n_u)))
            U = V = None
        else:
            raise
    return NlmCertificate(phi, vals["X"], vals["Yinv"], Ktv, Lv, Mtv, Nv,
                          tau_sigma, model, U, V, cert, mpolys, H)


def synthesize_ae_nlm(superset: CoefficientSuperset, system: PolySystem,
                      H: np.ndarray, operation_set: OperationSet,
                      options: Optional[BackendOptions] = None,
                      eps_strict: float = 1e-7,
                      phi_floor: float = 1e-9,
                      phi_cap: float = 1e4,
                      zero_model: bool = False,
                      refine_steps: int = 8,
                      refine_window: float = 0.02) -> NlmCertificate:
    """Minimal certified additive-error bound plus the optimal linear model.

    After the minimization a short bisection of verified fixed-bound
    feasibility probes polishes the value; interior-point endgames on this
    problem class routinely stall a few 1e-4 above the optimum while the
    feasibility version converges cleanly.  Infeasibility is reported as an
    unbounded measure (phi = inf) rather than raised.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    prog, mult = _theorem_program(superset, system, H, operation_set,
                                  eps_strict, phi_floor, zero_model)
    cert = prog.solve(options)
    if cert.status in ("Infeasible", "Unbounded", "NumericalFailure") or \
            (cert.objective is not None and cert.objective > phi_cap):
        return NlmCertificate(np.inf, None, None, None, None, None, None, None,
                              None, None, None, cert, [], H,
                              {"reason": cert.status})
    phi = float(cert.objective)
    best = (phi, cert, mult)
    if refine_steps > 0:
        lo, hi = phi * (1.0 - refine_window), phi
        for _ in range(refine_steps):
            mid = 0.5 * (lo + hi)
            p2, m2 = _theorem_program(superset, system, H, operation_set,
                                      eps_strict, phi_floor, zero_model,
                                      phi_fixed=mid)
            c2 = p2.solve(options)
            if c2.verified:
                hi = mid
                best = (mid, c2, m2)
            else:
                lo = mid
    phi, cert, mult = best
    return _theorem_extract(superset, system, H, zero_model, cert, mult, phi)


def l2_gain_bound(superset: CoefficientSuperset, system: PolySystem,
                  H: np.ndarray, operation_set: OperationSet,
                  options: Optional[BackendOptions] = None,
                  phi_floor: float = 1e-9,
                  phi_cap: float = 1e4) -> NlmCertificate:
    """Certified l2-gain of the chosen output channel over the superset.

    This is the additive-error problem with the surrogate model pinned to
    zero; since no model variables remain, the dissipation condition is
    posed over the full structured square-matricial basis (quadratic
    storage, representable multipliers) with the bound in a Schur block.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n_x, n_z = system.n_x, system.n_z
    n_y = H.shape[0]
    ring, coords, maps = structured_basis(system)
    xs, us, _, zs, ws = ring_polys(ring, system)
    prog = ConicProgram("l2_gain")
    P = prog.symmetric("P", n_x, strict_eps=1e-7)
    Phi = prog.scalar("Phi", nonneg=True, floor=phi_floor)
    taus = [prog.scalar(f"tauS{i}", nonneg=True) for i in range(superset.n_blocks)]
    mult = restricted_multipliers(prog, operation_set, system.z, system.variables)

    psi = PolyExpr(ring.variables)
    psi.add_quadratic_form(xs, P)
    for j in range(len(us)):
        psi.add_poly(us[j] * us[j], Phi)
    zw = zs + ws
    for tau, B in zip(taus, superset.blocks):
        q = Polynomial.zero(ring.variables)
        for i in range(len(zw)):
            for j in range(len(zw)):
                if B[i, j] != 0.0:
                    q = q + (zw[i] * zw[j]) * B[i, j]
        psi.add_poly(q, tau)
    # multiplier products over z as a polynomial contribution
    for i in range(n_z):
        for j in range(n_z):
            psi.add_poly(zs[i] * zs[j], mult.psum[i, j])

    G = prog.gram_matching(psi, coords, "psi_gram")
    wsel = np.zeros((n_x, maps["dim"]))
    wsel[:, maps["w_offset"]:maps["w_offset"] + n_x] = np.eye(n_x)
    zsel = z_selection(system, maps)
    Re = H @ zsel
    big = cp.bmat([
        [G, (P @ wsel).T, Re.T],
        [P @ wsel, P, np.zeros((n_x, n_y))],
        [Re, np.zeros((n_y, n_x)), Phi * np.eye(n_y)],
    ])
    prog.add_psd(big, "dissipation")
    prog.minimize(Phi)
    cert = prog.solve(options)
    if cert.status in ("Infeasible", "Unbounded", "NumericalFailure") or \
            (cert.objective is not None and cert.objective > phi_cap):
        return NlmCertificate(np.inf, None, None, None, None, None, None, None,
                              None, None, None, cert, [], H, {"reason": cert.status})
    vals = cert.values
    n_u, n_yH = system.n_u, H.shape[0]
    model = LinearModel(np.zeros((n_x, n_x)), np.zeros((n_x, system.n_u)),
                        np.zeros((n_yH, n_x)), np.zeros((n_yH, system.n_u)))
    out = NlmCertificate(float(cert.objective), vals["P"], None, None, None,
                         None, None,
                         np.array([float(vals[f"tauS{i}"]) for i in range(superset.n_blocks)]),
                         model, None, None, cert,
                         [None if t is None else t.value_poly() for t in mult.polys], H)
    out.meta["storage"] = vals["P"]
    return out


# ---------------------------------------------------------------------------
# Verification (square-matricial route, fixed bound and model)
# ---------------------------------------------------------------------------

@dataclass
class VerificationResult:
    feasible: bool
    certificate: Certificate
    storage: Optional[np.ndarray]
    tau_sigma: Optional[np.ndarray]
    multipliers: List[Optional[Polynomial]]
    phi: float
    model: LinearModel
    H: np.ndarray

    def psi_value(self, x: np.ndarray, xpsi: np.ndarray, u: np.ndarray,
                  F: np.ndarray, system: PolySystem,
                  operation_set: OperationSet,
                  superset: CoefficientSuperset) -> float:
        """Re-evaluate the certified polynomial at a point, from the formula."""
        z = system.z_eval(x, u)
        w = F @ z
        xx = np.concatenate([x, xpsi])
        xn = np.concatenate([w, self.model.A @ xpsi + self.model.B @ u])
        e = self.H @ z - self.model.C @ xpsi - self.model.D @ u
        val = xx @ self.storage @ xx - xn @ self.storage @ xn
        val += self.phi * float(u @ u) - float(e @ e) / self.phi
        zw = np.concatenate([z, w])
        for tau, B in zip(self.tau_sigma, superset.blocks):
            val += tau * float(zw @ B @ zw)
        point = np.concatenate([x, u])
        for t, p in zip(self.multipliers, operation_set.constraints):
            if t is not None:
                val += t(point) * p(point)
        return val


def verify_ae_nlm(superset: CoefficientSuperset, system: PolySystem,
                  H: np.ndarray, operation_set: OperationSet,
                  phi: float, model: LinearModel,
                  options: Optional[BackendOptions] = None,
                  eps_strict: float = 1e-8) -> VerificationResult:
    """Check that phi upper-bounds the additive-error measure for a given model.

    The dissipation polynomial (fixed phi, fixed model) is required to be a
    sum of squares over the structured basis; the storage and multipliers are
    the only variables, so this is a single feasibility program.
    """
    if phi <= 0:
        raise ValueError("phi must be positive")
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n_x = system.n_x
    n_psi = model.n_states
    ring, coords, maps = structured_basis(system, with_psi=n_psi)
    xs, us, psis, zs, ws = ring_polys(ring, system)
    prog = ConicProgram("ae_nlm_verify")
    Xc = prog.symmetric("Xcal", n_x + n_psi, strict_eps=eps_strict)
    taus = [prog.scalar(f"tauS{i}", nonneg=True) for i in range(superset.n_blocks)]
    mult = restricted_multipliers(prog, operation_set, system.z, system.variables)

    psi_expr = PolyExpr(ring.variables)
    state_coords = xs + psis
    psi_expr.add_quadratic_form(state_coords, Xc)
    # successor coordinates: [F z; A xpsi + B u]
    succ = list(ws)
    for r in range(n_psi):
        p = Polynomial.zero(ring.variables)
        for c in range(n_psi):
            if model.A[r, c] != 0.0:
                p = p + psis[c] * model.A[r, c]
        for c in range(len(us)):
            if model.B[r, c] != 0.0:
                p = p + us[c] * model.B[r, c]
        succ.append(p)
    psi_expr.add_quadratic_form(succ, cp.multiply(-1.0, Xc))
    for u in us:
        psi_expr.add_poly(u * u, phi)
    # error rows e = H z - C xpsi - D u (numeric polynomials)
    errs = []
    for r in range(H.shape[0]):
        p = Polynomial.zero(ring.variables)
        for c in range(system.n_z):
            if H[r, c] != 0.0:
                p = p + zs[c] * H[r, c]
        for c in range(n_psi):
            if model.C[r, c] != 0.0:
                p = p - psis[c] * model.C[r, c]
        for c in range(len(us)):
            if model.D[r, c] != 0.0:
                p = p - us[c] * model.D[r, c]
        errs.append(p)
    for p in errs:
        psi_expr.add_poly(p * p, -1.0 / phi)
    zw = zs + ws
    for tau, B in zip(taus, superset.blocks):
        q = Polynomial.zero(ring.variables)
        for i in range(len(zw)):
            for j in range(len(zw)):
                if B[i, j] != 0.0:
                    q = q + (zw[i] * zw[j]) * B[i, j]
        psi_expr.add_poly(q, tau)
    for i in range(system.n_z):
        for j in range(system.n_z):
            psi_expr.add_poly(zs[i] * zs[j], mult.psum[i, j])

    prog.add_sos(psi_expr, basis=coords, name="psi")
    cert = prog.solve(options)
    feasible = cert.verified
    vals = cert.values if feasible else {}
    return VerificationResult(
        feasible, cert,
        vals.get("Xcal"),
        None if not feasible else np.array([float(vals[f"tauS{i}"]) for i in range(superset.n_blocks)]),
        [] if not feasible else [None if t is None else t.value_poly() for t in mult.polys],
        phi, model, H)


# ---------------------------------------------------------------------------
# Best static linearization (for systems with unbounded gain)
# ---------------------------------------------------------------------------

def best_linearization(superset: CoefficientSuperset, system: PolySystem,
                       operation_set: OperationSet,
                       options: Optional[BackendOptions] = None):
    """Static (A, B) minimizing the worst normalized one-step error over the set.

    Solves the Schur-complement form so A, B enter linearly; gamma^2 is the
    scalar decision variable.  Returns (A, B, gamma, certificate).
    """
    n_x, n_z, n_u = system.n_x, system.n_z, system.n_u
    T_x, T_u = system.selectors()
    prog = ConicProgram("best_linearization")
    s = prog.scalar("gamma2", nonneg=True)
    A = prog.matrix("A", (n_x, n_x))
    B = prog.matrix("B", (n_x, n_u))
    taus = [prog.scalar(f"tauS{i}", nonneg=True) for i in range(superset.n_blocks)]
    mult = restricted_multipliers(prog, operation_set, system.z, system.variables)
    # coordinates [w (n_x); z (n_z)]
    dim = n_x + n_z
    Rw = np.hstack([np.eye(n_x), np.zeros((n_x, n_z))])
    Rz = np.hstack([np.zeros((n_z, n_x)), np.eye(n_z)])
    Txu = np.vstack([T_x, T_u])
    top = cp.multiply(s, (Txu @ Rz).T @ (Txu @ Rz)) + Rz.T @ mult.psum @ Rz
    Rzf = np.vstack([Rz, Rw])
    for tau, Bq in zip(taus, superset.blocks):
        top = top + cp.multiply(tau, Rzf.T @ Bq @ Rzf)
    err_row = cp.hstack([np.eye(n_x), -(A @ T_x + B @ T_u)])
    big = cp.bmat([[top, err_row.T], [err_row, np.eye(n_x)]])
    prog.add_psd(big, "error_bound")
    prog.minimize(s)
    cert = prog.solve(options)
    if not cert.verified:
        return None, None, np.inf, cert
    return cert.values["A"], cert.values["B"], math.sqrt(max(cert.objective, 0.0)), cert
