"""Hard integral-quadratic-constraint synthesis and preset parameterizations.

The general program minimizes a weighted objective over the multiplier
parameter vector subject to the transformed-storage condition and the big
linearized inequality; the middle matrix M = [[M1(g), M2], [M2', M3(g)]]
enters through M1 directly, M2 through cross rows, and M3 through its
negated inverse in the Schur block, all affine in g.  Structural zeros and
fixed values on the filter variables are applied by variable elimination.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import cvxpy as cp
import numpy as np

from .certify import BackendOptions, Certificate, ConicProgram
from .dataio import OperationSet, PolySystem
from .lifting import restricted_multipliers
from .membership import CoefficientSuperset
from .nlm import LinearModel, RecoveryFailed, recover_linear_model


class MaskConflict(ValueError):
    pass


def _affine(const: np.ndarray, coeffs: Sequence[np.ndarray], gamma) -> object:
    out = const
    for k, Mk in enumerate(coeffs):
        out = out + cp.multiply(gamma[k], Mk)
    return out


def _affine_value(const: np.ndarray, coeffs: Sequence[np.ndarray],
                  gamma: np.ndarray) -> np.ndarray:
    out = np.array(const, dtype=float)
    for k, Mk in enumerate(coeffs):
        out = out + gamma[k] * Mk
    return out


@dataclass
class IqcSpec:
    """Parametrization of the middle matrix, the fixed filter rows, and masks.

    m3_fn returns the matrix itself (for empirical validation and the
    negativity check) while neg_m3_inv_* hold its negated inverse as an
    affine map, which is what the program needs; user specs must supply the
    affine inverse explicitly, no symbolic inversion is attempted.  Masks
    hold np.nan for free entries and numbers for fixed ones.
    """

    name: str
    n_p1: int
    n_p2: int
    n_gamma: int
    du1: np.ndarray
    dy1: np.ndarray
    m1_const: np.ndarray
    m1_coeffs: List[np.ndarray]
    m2: Optional[np.ndarray]
    m3_fn: Optional[object]
    neg_m3_inv_const: Optional[np.ndarray]
    neg_m3_inv_coeffs: List[np.ndarray]
    L_mask: np.ndarray
    N_mask: np.ndarray
    weight: np.ndarray
    gamma_floor: float = 1e-9
    p2_sign: float = 1.0
    p2_offset: Optional[np.ndarray] = None   # extra n_p2 x n_z row on p2
    linf_C: Optional[np.ndarray] = None      # adds the peak-bound block

    def m1(self, gamma) -> object:
        return _affine(self.m1_const, self.m1_coeffs, gamma)

    def neg_m3_inv(self, gamma) -> object:
        return _affine(self.neg_m3_inv_const, self.neg_m3_inv_coeffs, gamma)

    def m3_value(self, gamma: np.ndarray) -> Optional[np.ndarray]:
        if self.m3_fn is None:
            return None
        return np.atleast_2d(self.m3_fn(np.atleast_1d(gamma)))

    def m_value(self, gamma: np.ndarray) -> np.ndarray:
        M1 = _affine_value(self.m1_const, self.m1_coeffs, np.atleast_1d(gamma))
        M2 = self.m2 if self.m2 is not None else np.zeros((self.n_p1, self.n_p2))
        M3 = self.m3_value(gamma)
        if M3 is None:
            M3 = np.zeros((self.n_p2, self.n_p2))
        return np.block([[M1, M2], [M2.T, M3]])

    def check_dims(self, n_x: int, n_u: int, n_y: int):
        if self.du1.shape != (self.n_p1, n_u) or self.dy1.shape != (self.n_p1, n_y):
            raise MaskConflict("D_u1 / D_y1 dimensions inconsistent with the spec")
        if self.L_mask.shape != (n_x, n_u + n_y):
            raise MaskConflict("L mask shape mismatch")
        if self.N_mask.shape != (self.n_p2, n_u + n_y):
            raise MaskConflict("N mask shape mismatch")


def preset(kind: str, n_u: int, n_y: int, n_x: int,
           H_p: Optional[np.ndarray] = None,
           linf_C: Optional[np.ndarray] = None) -> IqcSpec:
    """Fixed parameterizations of the published nonlinearity-measure variants."""
    free = np.full((n_x, n_u + n_y), np.nan)

    def nmask(n_p2, left_fixed=None, right_fixed=None):
        m = np.full((n_p2, n_u + n_y), np.nan)
        if left_fixed is not None:
            m[:, :n_u] = left_fixed
        if right_fixed is not None:
            m[:, n_u:] = right_fixed
        return m

    def inv_m3(n):
        return lambda g: -(1.0 / g[0]) * np.eye(n)

    Iu, Iy = np.eye(n_u), np.eye(n_y)
    if kind == "AE":
        L = free.copy(); L[:, n_u:] = 0.0
        return IqcSpec("AE", n_u, n_y, 1, Iu, np.zeros((n_u, n_y)),
                       np.zeros((n_u, n_u)), [Iu], None,
                       inv_m3(n_y), np.zeros((n_y, n_y)), [Iy],
                       L, nmask(n_y, right_fixed=Iy), np.ones(1))
    if kind == "IMOE":
        L = free.copy(); L[:, n_u:] = 0.0
        return IqcSpec("IMOE", n_y, n_y, 1, np.zeros((n_y, n_u)), Iy,
                       np.zeros((n_y, n_y)), [Iy], None,
                       inv_m3(n_y), np.zeros((n_y, n_y)), [Iy],
                       L, nmask(n_y, right_fixed=-Iy), np.ones(1))
    if kind == "MIE":
        L = free.copy(); L[:, :n_u] = 0.0
        return IqcSpec("MIE", n_u, n_u, 1, Iu, np.zeros((n_u, n_y)),
                       np.zeros((n_u, n_u)), [Iu], None,
                       inv_m3(n_u), np.zeros((n_u, n_u)), [Iu],
                       L, nmask(n_u, left_fixed=-Iu), np.ones(1))
    if kind == "FE":
        L = free.copy(); L[:, :n_u] = 0.0
        return IqcSpec("FE", n_y, n_u, 1, np.zeros((n_y, n_u)), Iy,
                       np.zeros((n_y, n_y)), [Iy], None,
                       inv_m3(n_u), np.zeros((n_u, n_u)), [Iu],
                       L, nmask(n_u, left_fixed=-Iu), np.ones(1))
    if kind in ("AE_l2linf", "IMOE_l2linf"):
        if linf_C is None:
            raise ValueError("peak-bound presets need the static output matrix C")
        L = free.copy(); L[:, n_u:] = 0.0
        if kind == "AE_l2linf":
            du1, dy1, np1 = Iu, np.zeros((n_u, n_y)), n_u
            m1c = [np.eye(n_u)]
        else:
            du1, dy1, np1 = np.zeros((n_y, n_u)), Iy, n_y
            m1c = [np.eye(n_y)]
        return IqcSpec(kind, np1, n_y, 1, du1, dy1,
                       np.zeros((np1, np1)), m1c, None,
                       None, None, [],
                       L, nmask(n_y, left_fixed=np.zeros((n_y, n_u)),
                                right_fixed=np.zeros((n_y, n_y))),
                       np.ones(1), linf_C=np.atleast_2d(linf_C))
    if kind == "FILTER_DESIGN":
        if H_p is None:
            raise ValueError("filter design needs the target row matrix H_p")
        H_p = np.atleast_2d(H_p)
        n_p = H_p.shape[0]
        return IqcSpec("FILTER_DESIGN", n_u, n_p, 1, Iu, np.zeros((n_u, n_y)),
                       np.zeros((n_u, n_u)), [Iu], None,
                       inv_m3(n_p), np.zeros((n_p, n_p)), [np.eye(n_p)],
                       free.copy(), np.full((n_p, n_u + n_y), np.nan),
                       np.ones(1), p2_sign=-1.0, p2_offset=H_p)
    raise ValueError(f"unknown preset {kind!r}")


def _masked_matrix(prog: ConicProgram, mask: np.ndarray, name: str):
    """cvxpy matrix with nan entries free and the rest fixed (eliminated)."""
    rows = []
    for i in range(mask.shape[0]):
        row = []
        for j in range(mask.shape[1]):
            if np.isnan(mask[i, j]):
                row.append(prog.scalar(f"{name}_{i}_{j}"))
            else:
                row.append(float(mask[i, j]))
        rows.append(row)
    return cp.bmat([[cp.reshape(e, (1, 1), order="F") if hasattr(e, "value") else np.array([[e]])
                     for e in row] for row in rows])


@dataclass
class IqcFilter:
    """Recovered filter; p1 = D_u1 u + D_y1 y, p2 per the stored convention."""

    A: np.ndarray
    Bu: np.ndarray
    By: np.ndarray
    C: np.ndarray
    Du2: np.ndarray
    Dy2: np.ndarray
    spec: IqcSpec

    def ae_model(self) -> LinearModel:
        """Interpret an AE-family filter as the linear surrogate model."""
        if self.spec.name not in ("AE", "AE_l2linf"):
            raise ValueError("only AE-family filters define a surrogate model")
        if self.spec.name == "AE":
            # p2 = C xpsi + Du2 u + y  =>  G(u) has output -C xpsi - Du2 u
            return LinearModel(self.A, self.Bu, -self.C, -self.Du2)
        return LinearModel(self.A, self.Bu, self.C, self.Du2)


@dataclass
class IqcCertificate:
    gamma: Optional[np.ndarray]
    value: float
    filter: Optional[IqcFilter]
    spec: IqcSpec
    X: Optional[np.ndarray]
    Yinv: Optional[np.ndarray]
    tau_sigma: Optional[np.ndarray]
    certificate: Optional[Certificate]
    meta: dict = field(default_factory=dict)

    @property
    def verified(self) -> bool:
        return self.certificate is not None and self.certificate.verified

    @property
    def unbounded(self) -> bool:
        return not np.isfinite(self.value)


@dataclass
class SectorExtension:
    """Sector-bounded extra dynamics hook used by the sector module.

    regressor entries [z; f] drive the superset blocks, multipliers live
    over [z; zbar], and one nonnegative scalar per nonlinearity weighs the
    sector form (f_i - H1i [z; zbar])(f_i - H2i [z; zbar]).
    """

    n_f: int
    zbar: List  # monomials over (x, u)
    H1z: np.ndarray
    H1zb: np.ndarray
    H2z: np.ndarray
    H2zb: np.ndarray


def _iqc_program(superset: CoefficientSuperset, system: PolySystem,
                 H: np.ndarray, operation_set: OperationSet, spec: IqcSpec,
                 eps_strict: float, sector: Optional[SectorExtension],
                 gamma_fixed: Optional[np.ndarray] = None):
    n_x, n_z, n_u = system.n_x, system.n_z, system.n_u
    n_y = H.shape[0]
    spec.check_dims(n_x, n_u, n_y)
    n_f = sector.n_f if sector is not None else 0
    n_zb = len(sector.zbar) if sector is not None else 0
    if superset.n_z != n_z + n_f:
        raise ValueError("superset regressor dimension does not match z (+ sector f)")
    T_x, T_u = system.selectors()
    TuH = np.vstack([T_u, H])

    prog = ConicProgram("iqc_synthesis")
    Yinv = prog.symmetric("Yinv", n_x)
    X = prog.symmetric("X", n_x)
    if gamma_fixed is None:
        gamma = prog.free("gamma", spec.n_gamma)
        for k in range(spec.n_gamma):
            prog.add_ineq(gamma[k] >= spec.gamma_floor, f"gamma_floor_{k}")
    else:
        gamma = np.asarray(gamma_fixed, dtype=float)
    taus = [prog.scalar(f"tauS{i}", nonneg=True) for i in range(superset.n_blocks)]
    taux = prog.scalar("taux", nonneg=True)
    Kt = prog.matrix("Kt", (n_x, n_x))
    Lm = _masked_matrix(prog, spec.L_mask, "L")
    Mt = prog.matrix("Mt", (spec.n_p2, n_x))
    Nm = _masked_matrix(prog, spec.N_mask, "N")

    if sector is None:
        mult = restricted_multipliers(prog, operation_set, system.z, system.variables)
        n_mult = n_z
    else:
        mult = restricted_multipliers(prog, operation_set,
                                      list(system.z) + list(sector.zbar),
                                      system.variables)
        n_mult = n_z + n_zb

    # coordinates [xi(2n_x) | z | w | f | zbar]
    dim = 2 * n_x + n_z + n_x + n_f + n_zb
    def sel(start, n):
        M = np.zeros((n, dim))
        M[:, start:start + n] = np.eye(n)
        return M
    Rxi = sel(0, 2 * n_x)
    Rz = sel(2 * n_x, n_z)
    Rw = sel(2 * n_x + n_z, n_x)
    Rf = sel(2 * n_x + n_z + n_x, n_f)
    Rzb = sel(2 * n_x + n_z + n_x + n_f, n_zb)

    YXY = cp.bmat([[Yinv, Yinv], [Yinv, X]])
    Rp1 = (spec.du1 @ T_u + spec.dy1 @ H) @ Rz
    top = Rxi.T @ YXY @ Rxi + Rp1.T @ spec.m1(gamma) @ Rp1
    Rreg = np.vstack([Rz, Rf, Rw])
    for tau, B in zip(taus, superset.blocks):
        top = top + cp.multiply(tau, Rreg.T @ B @ Rreg)
    Rmult = np.vstack([Rz, Rzb])
    top = top + Rmult.T @ mult.psum @ Rmult
    Rfin = np.hstack([np.eye(n_x), np.eye(n_x)]) @ Rxi - T_x @ Rz
    top = top + cp.multiply(taux, Rfin.T @ Rfin)
    sector_taus = []
    if sector is not None:
        V = np.array([[1.0, -0.5, -0.5], [-0.5, 0.0, 0.5], [-0.5, 0.5, 0.0]])
        for i in range(n_f):
            tf = prog.scalar(f"tau_f{i}", nonneg=True)
            sector_taus.append(tf)
            Rsec = np.vstack([Rf[i:i + 1],
                              sector.H1z[i:i + 1] @ Rz + sector.H1zb[i:i + 1] @ Rzb,
                              sector.H2z[i:i + 1] @ Rz + sector.H2zb[i:i + 1] @ Rzb])
            top = top + cp.multiply(tf, Rsec.T @ V @ Rsec)

    # state-update and p2 rows of the transformed inequality
    def hpad(blocks, rows):
        tail = n_f + n_zb
        if tail:
            blocks = blocks + [np.zeros((rows, tail))]
        return cp.hstack(blocks)

    row_xplus = hpad([np.zeros((n_x, 2 * n_x + n_z)), Yinv], n_x)
    row_psi = hpad([Kt, np.zeros((n_x, n_x)), Lm @ TuH, X], n_x)
    p2_z = spec.p2_sign * (Nm @ TuH)
    if spec.p2_offset is not None:
        p2_z = spec.p2_offset + p2_z
    row_p2 = hpad([spec.p2_sign * Mt, np.zeros((spec.n_p2, n_x)), p2_z,
                   np.zeros((spec.n_p2, n_x))], spec.n_p2)
    if spec.m2 is not None and np.any(spec.m2):
        cross = row_p2.T @ spec.m2.T @ Rp1
        top = top + cross + cross.T
    if spec.neg_m3_inv_const is not None:
        Om1 = cp.vstack([row_xplus, row_psi, row_p2])
        BR = cp.bmat([
            [YXY, np.zeros((2 * n_x, spec.n_p2))],
            [np.zeros((spec.n_p2, 2 * n_x)), spec.neg_m3_inv(gamma)],
        ])
    else:
        Om1 = cp.vstack([row_xplus, row_psi])
        BR = YXY
    prog.add_psd(cp.bmat([[top, Om1.T], [Om1, BR]]), "hard_iqc")
    prog.add_psd(YXY - eps_strict * np.eye(2 * n_x), "transformed_storage_pd")
    if spec.linf_C is not None:
        C = spec.linf_C
        rowC = cp.hstack([C - Mt, C])
        gI = (cp.multiply(gamma[0], np.eye(C.shape[0])) if gamma_fixed is None
              else gamma[0] * np.eye(C.shape[0]))
        peak = cp.bmat([[YXY, rowC.T], [rowC, gI]])
        prog.add_psd(peak, "peak_bound")
    if gamma_fixed is None:
        prog.minimize(spec.weight @ gamma)
    return prog, n_f


def synthesize_iqc(superset: CoefficientSuperset, system: PolySystem,
                   H: np.ndarray, operation_set: OperationSet, spec: IqcSpec,
                   options: Optional[BackendOptions] = None,
                   eps_strict: float = 1e-7,
                   value_cap: float = 1e4,
                   sector: Optional[SectorExtension] = None,
                   refine_steps: int = 8,
                   refine_window: float = 0.02) -> IqcCertificate:
    """Minimize weight' gamma subject to the hard-IQC certification inequality.

    For scalar gamma a short bisection of verified fixed-gamma feasibility
    probes polishes the minimizer (same endgame-stall workaround as the
    additive-error synthesis).
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n_u = system.n_u
    prog, n_f = _iqc_program(superset, system, H, operation_set, spec,
                             eps_strict, sector)
    cert = prog.solve(options)
    if cert.status in ("Infeasible", "Unbounded", "NumericalFailure") or \
            (cert.objective is not None and cert.objective > value_cap):
        return IqcCertificate(None, np.inf, None, spec, None, None, None, cert,
                              {"reason": cert.status})
    if spec.n_gamma == 1 and refine_steps > 0:
        g0 = float(np.atleast_1d(cert.values["gamma"])[0])
        lo, hi = g0 * (1.0 - refine_window), g0
        best = cert
        for _ in range(refine_steps):
            mid = 0.5 * (lo + hi)
            if mid < spec.gamma_floor:
                break
            p2, _ = _iqc_program(superset, system, H, operation_set, spec,
                                 eps_strict, sector, gamma_fixed=np.array([mid]))
            c2 = p2.solve(options)
            if c2.verified:
                hi = mid
                c2.values["gamma"] = np.array([mid])
                best = Certificate(c2.status, float(spec.weight @ np.array([mid])),
                                   c2.values, c2.residuals, c2.solver_status,
                                   c2.backend, c2.wall_time)
            else:
                lo = mid
        cert = best
    vals = cert.values
    gam = np.atleast_1d(np.asarray(vals["gamma"], dtype=float))
    # M3 negativity on the returned gamma
    M3 = spec.m3_value(gam)
    if M3 is not None and np.linalg.eigvalsh(M3).max() >= 0:
        return IqcCertificate(None, np.inf, None, spec, None, None, None,
                              cert, {"reason": "M3 not negative definite"})
    Lv = np.full(spec.L_mask.shape, 0.0)
    for i in range(spec.L_mask.shape[0]):
        for j in range(spec.L_mask.shape[1]):
            Lv[i, j] = (float(vals[f"L_{i}_{j}"]) if np.isnan(spec.L_mask[i, j])
                        else spec.L_mask[i, j])
    Nv = np.full(spec.N_mask.shape, 0.0)
    for i in range(spec.N_mask.shape[0]):
        for j in range(spec.N_mask.shape[1]):
            Nv[i, j] = (float(vals[f"N_{i}_{j}"]) if np.isnan(spec.N_mask[i, j])
                        else spec.N_mask[i, j])
    try:
        model, U, V = recover_linear_model(vals["X"], vals["Yinv"], vals["Kt"],
                                           Lv, vals["Mt"], Nv)
    except RecoveryFailed:
        return IqcCertificate(gam, float(cert.objective), None, spec,
                              vals["X"], vals["Yinv"], None, cert,
                              {"reason": "recovery failed"})
    filt = IqcFilter(model.A, model.B[:, :n_u], model.B[:, n_u:],
                     model.C, model.D[:, :n_u], model.D[:, n_u:], spec)
    tau_sigma = np.array([float(vals[f"tauS{i}"]) for i in range(superset.n_blocks)])
    return IqcCertificate(gam, float(cert.objective), filt, spec,
                          vals["X"], vals["Yinv"], tau_sigma, cert,
                          {"U": U, "V": V,
                           "sector_taus": [float(vals[f"tau_f{i}"])
                                           for i in range(n_f)] if n_f else []})


# ---------------------------------------------------------------------------
# Empirical validation
# ---------------------------------------------------------------------------

def filter_response(system: PolySystem, H: np.ndarray, filt: IqcFilter,
                    signal, horizon: int,
                    operation_set: Optional[OperationSet] = None,
                    f_extra=None):
    """Simulate the plant/filter interconnection; returns (p1, p2, u, y) streams.

    Trajectories leaving the operation set return None (discarded by the
    callers).  `f_extra` supplies non-polynomial dynamics terms for the
    sector-extended systems.
    """
    spec = filt.spec
    x = np.zeros(system.n_x)
    xpsi = np.zeros(filt.A.shape[0])
    P1, P2, Us, Ys = [], [], [], []
    for t in range(horizon):
        u = np.atleast_1d(signal(t)).astype(float)
        if operation_set is not None and not operation_set.contains(x, u):
            return None
        z = system.z_eval(x, u)
        y = H @ z
        p1 = spec.du1 @ u + spec.dy1 @ y
        p2 = spec.p2_sign * (filt.C @ xpsi + filt.Du2 @ u + filt.Dy2 @ y)
        if spec.p2_offset is not None:
            p2 = spec.p2_offset @ z + p2
        P1.append(p1); P2.append(p2); Us.append(u); Ys.append(y)
        xn = system.F @ z if f_extra is None else system.F @ z + f_extra(x, u)
        xpsi = filt.A @ xpsi + filt.Bu @ u + filt.By @ y
        x = xn
    return np.array(P1), np.array(P2), np.array(Us), np.array(Ys)


def verify_hard_iqc_empirical(system: PolySystem, H: np.ndarray,
                              filt: IqcFilter, gamma: np.ndarray,
                              pool: Sequence, horizon: int,
                              operation_set: Optional[OperationSet] = None,
                              tol: float = 1e-6,
                              f_extra=None) -> Tuple[bool, float, int]:
    """Check every partial sum of r' M r on simulated admissible inputs.

    Returns (all_nonnegative, worst relative partial sum, discarded count).
    """
    spec = filt.spec
    M = spec.m_value(np.atleast_1d(gamma))
    worst = np.inf
    discarded = 0
    scale = 1.0 + np.linalg.norm(M, 2)
    for sig in pool:
        out = filter_response(system, H, filt, sig, horizon, operation_set,
                              f_extra=f_extra)
        if out is None:
            discarded += 1
            continue
        P1, P2, _, _ = out
        acc = 0.0
        for t in range(len(P1)):
            r = np.concatenate([P1[t], P2[t]])
            acc += float(r @ M @ r)
            worst = min(worst, acc / scale)
    if discarded == len(pool):
        raise ValueError("no admissible input in the pool")
    return worst >= -tol, worst, discarded


def verify_peak_bound_empirical(system: PolySystem, H: np.ndarray,
                                filt: IqcFilter, gamma: float,
                                pool: Sequence, horizon: int,
                                operation_set: Optional[OperationSet] = None,
                                tol: float = 1e-6) -> Tuple[bool, float]:
    """max_t ||e(t)|| <= gamma ||u||_{l2,0..t-1} for the peak-bound presets."""
    C = filt.spec.linf_C
    ok = True
    worst = 0.0
    for sig in pool:
        x = np.zeros(system.n_x)
        xpsi = np.zeros(filt.A.shape[0])
        energy = 0.0
        for t in range(horizon):
            u = np.atleast_1d(sig(t)).astype(float)
            if operation_set is not None and not operation_set.contains(x, u):
                break
            e = C @ x - filt.C @ xpsi
            lhs = np.linalg.norm(e)
            rhs = gamma * np.sqrt(energy)
            if lhs > rhs + tol * (1 + rhs):
                ok = False
                worst = max(worst, lhs - rhs)
            energy += float(u @ u)
            xpsi = filt.A @ xpsi + filt.Bu @ u
            x = system.f_eval(x, u)
    return ok, worst
