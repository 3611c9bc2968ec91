"""Non-polynomial extensions: sector-bounded basis functions and Taylor envelopes.

Known non-polynomial basis functions with unknown coefficients ride along in
an augmented regressor [z; f]; their values are confined by polynomial
sector bounds so the certification inequalities stay semidefinite
representable.  When even the basis functions are unknown, a Taylor
expansion with bounded highest-order derivatives provides the sector and a
separate set-membership for the expansion coefficients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import cvxpy as cp
import numpy as np

from .certify import BackendOptions, Certificate, ConicProgram
from .dataio import OperationSet, PolySystem, SampleSet
from .iqc import IqcCertificate, IqcSpec, SectorExtension, synthesize_iqc
from .membership import CoefficientSuperset, dualize, pointwise_core
from .poly import Monomial, Polynomial, kernel_basis, monomial_basis, pair_product_table


class SectorViolated(RuntimeError):
    pass


@dataclass
class SectorBound:
    """Per nonlinearity i: (H1i [z; zbar] - f_i)(H2i [z; zbar] - f_i) <= 0 on P."""

    H1z: np.ndarray
    H1zb: np.ndarray
    H2z: np.ndarray
    H2zb: np.ndarray
    zbar: List[Monomial]

    def __post_init__(self):
        self.H1z = np.atleast_2d(np.asarray(self.H1z, dtype=float))
        self.H1zb = np.atleast_2d(np.asarray(self.H1zb, dtype=float))
        self.H2z = np.atleast_2d(np.asarray(self.H2z, dtype=float))
        self.H2zb = np.atleast_2d(np.asarray(self.H2zb, dtype=float))

    @property
    def n_f(self) -> int:
        return self.H1z.shape[0]

    def validate(self, system: PolySystem, f_eval: Callable,
                 operation_set: OperationSet, grid: int = 21,
                 tol: float = 1e-9) -> float:
        """Worst sector-product value over an operation-set grid (<= tol passes)."""
        worst = -np.inf
        pts = _grid_points(system, operation_set, grid)
        for x, u in pts:
            z = system.z_eval(x, u)
            zb = np.array([m.eval(np.concatenate([x, u])) for m in self.zbar])
            fv = np.atleast_1d(f_eval(x, u))
            for i in range(self.n_f):
                h1 = float(self.H1z[i] @ z + self.H1zb[i] @ zb)
                h2 = float(self.H2z[i] @ z + self.H2zb[i] @ zb)
                worst = max(worst, (h1 - fv[i]) * (h2 - fv[i]))
        return worst


def _grid_points(system: PolySystem, operation_set: OperationSet, grid: int):
    """Rectangular grid over a bounding box of the operation set, filtered."""
    lo, hi = _bounding_box(system, operation_set)
    axes = [np.linspace(lo[k], hi[k], grid) for k in range(len(lo))]
    n_x = system.n_x
    pts = []
    mesh = np.meshgrid(*axes, indexing="ij")
    flat = np.stack([m.ravel() for m in mesh], axis=1)
    for v in flat:
        x, u = v[:n_x], v[n_x:]
        if operation_set.contains(x, u):
            pts.append((x, u))
    return pts


def _bounding_box(system: PolySystem, operation_set: OperationSet,
                  fallback: float = 3.0):
    """Per-variable bounds extracted from v^2 <= c style constraints."""
    nv = system.n_x + system.n_u
    lo = np.full(nv, -fallback)
    hi = np.full(nv, fallback)
    for p in operation_set.constraints:
        terms = dict(p.terms)
        const = terms.pop(tuple([0] * nv), 0.0)
        if len(terms) == 1:
            (exps, coeff), = terms.items()
            if sum(exps) == 2 and max(exps) == 2 and coeff > 0 and const < 0:
                k = exps.index(2)
                b = math.sqrt(-const / coeff)
                lo[k], hi[k] = max(lo[k], -b), min(hi[k], b)
    return lo, hi


def augmented_superset(samples: SampleSet, system: PolySystem,
                       f_eval: Callable, n_f: int,
                       kind: str = "pointwise",
                       options: Optional[BackendOptions] = None):
    """Superset over [F, F_f] using the stacked regressor [z; f].

    Reuses the plain membership builders with z replaced by the augmented
    regressor evaluation; the returned blocks have side n_z + n_f + n_x.
    """
    from . import membership

    def reg_eval(x, u):
        return np.concatenate([system.z_eval(x, u), np.atleast_1d(f_eval(x, u))])

    n_reg = system.n_z + n_f
    if kind == "pointwise":
        blocks = membership.dual_blocks(samples, reg_eval, n_reg)
        block, info = pointwise_core([b.matrix for b in blocks], n_reg,
                                     samples.X.shape[1], options=options)
        return CoefficientSuperset([block], n_reg, samples.X.shape[1],
                                   kind="pointwise", meta=info)
    if kind == "cumulative":
        return membership.superset_cumulative(samples, reg_eval, n_reg)
    raise ValueError(f"unknown superset kind {kind!r}")


def synthesize_nlm_sector(superset: CoefficientSuperset, system: PolySystem,
                          H: np.ndarray, operation_set: OperationSet,
                          sector: SectorBound, spec: IqcSpec,
                          options: Optional[BackendOptions] = None,
                          f_eval: Optional[Callable] = None,
                          validate_grid: int = 0) -> IqcCertificate:
    """Sector-extended synthesis: plain program plus one weighted sector form
    per nonlinearity and multipliers over the enlarged monomial vector."""
    if validate_grid and f_eval is not None:
        worst = sector.validate(system, f_eval, operation_set, validate_grid)
        if worst > 1e-9:
            raise SectorViolated(f"sector product positive on the grid ({worst:.3e})")
    ext = SectorExtension(sector.n_f, sector.zbar, sector.H1z, sector.H1zb,
                          sector.H2z, sector.H2zb)
    return synthesize_iqc(superset, system, H, operation_set, spec,
                          options=options, sector=ext)


# ---------------------------------------------------------------------------
# Taylor envelopes
# ---------------------------------------------------------------------------

@dataclass
class TaylorEnvelope:
    """Truncated expansion data: point, order, highest-derivative bounds.

    W_n maps the regressor z onto the shifted expansion monomials, one row
    per retained multi-index (|alpha| = 1..n when the expansion point is an
    equilibrium, else 0..n); W_{n+1}^alpha are the remainder rows.
    """

    point: np.ndarray
    order: int
    bounds: dict  # multi-index tuple (|alpha| = n+1) -> derivative bound
    z: List[Monomial]
    variables: Tuple[str, ...]
    include_constant: bool = False

    def __post_init__(self):
        self.point = np.atleast_1d(np.asarray(self.point, dtype=float))
        for a, b in self.bounds.items():
            if sum(a) != self.order + 1:
                raise ValueError("bound multi-indices must have |alpha| = n+1")
            if b < 0:
                raise ValueError("derivative bounds must be nonnegative")

    @property
    def kappa(self) -> int:
        return sum(1 for b in self.bounds.values() if b != 0.0)

    def expansion_indices(self) -> List[Tuple[int, ...]]:
        nv = len(self.point)
        lo = 0 if self.include_constant else 1
        return [m.exps for m in monomial_basis([f"v{k}" for k in range(nv)], self.order, lo)]

    def _shifted_row(self, alpha: Tuple[int, ...]) -> np.ndarray:
        """(v - a)^alpha expanded over z by the binomial theorem."""
        nv = len(self.point)
        index = {m.exps: k for k, m in enumerate(self.z)}
        row = np.zeros(len(self.z))
        ranges = [range(a + 1) for a in alpha]
        import itertools
        for ks in itertools.product(*ranges):
            coeff = 1.0
            for a, k, pt in zip(alpha, ks, self.point):
                coeff *= math.comb(a, k) * ((-pt) ** (a - k))
            key = tuple(ks)
            if coeff == 0.0:
                continue
            if key not in index:
                raise ValueError(f"z is missing monomial with exponents {key}")
            row[index[key]] += coeff
        return row

    def W_n(self) -> np.ndarray:
        return np.vstack([self._shifted_row(a) for a in self.expansion_indices()])

    def remainder_rows(self) -> List[Tuple[Tuple[int, ...], float, np.ndarray]]:
        """(alpha, weight kappa_i M^2 / alpha!^2, W_{n+1}^alpha) per bound."""
        out = []
        for a, M in sorted(self.bounds.items()):
            fact = 1.0
            for ai in a:
                fact *= math.factorial(ai)
            w = self.kappa * (M ** 2) / (fact ** 2)
            out.append((a, w, self._shifted_row(a)))
        return out

    def remainder_bound_sq(self, v: np.ndarray, z_val: np.ndarray) -> float:
        return sum(w * float(row @ z_val) ** 2 for _, w, row in self.remainder_rows())


def taylor_sector_bound(envelope: TaylorEnvelope):
    """W_n, the remainder rows, and the diagonal weights of the sector form."""
    Wn = envelope.W_n()
    rows = envelope.remainder_rows()
    weights = np.array([w for _, w, _ in rows])
    Wn1 = np.vstack([r for _, _, r in rows]) if rows else np.zeros((0, len(envelope.z)))
    return Wn, Wn1, weights


def taylor_membership(xs: Sequence[np.ndarray], fs: Sequence[float],
                      envelope: TaylorEnvelope,
                      options: Optional[BackendOptions] = None) -> CoefficientSuperset:
    """Set-membership for one row of Taylor coefficients from noise-free data.

    Each sample gives (f_j - (W_n z_j)' A)^2 <= remainder budget, a quadratic
    inequality in A; the pointwise ellipsoid machinery then produces one
    dualized block over [I; A'].
    """
    Wn, Wn1, weights = taylor_sector_bound(envelope)
    n_A = Wn.shape[0]
    if len(xs) < n_A:
        from .membership import UnboundedSigma
        raise UnboundedSigma("fewer samples than Taylor coefficients")
    duals = []
    for xj, fj in zip(xs, fs):
        v = np.atleast_1d(np.asarray(xj, dtype=float))
        z = np.array([m.eval(v) for m in envelope.z])
        wz = (Wn @ z).reshape(-1, 1)
        r2 = float(weights @ (Wn1 @ z) ** 2) if len(weights) else 0.0
        D = np.block([[wz @ wz.T, -wz * fj],
                      [-fj * wz.T, np.array([[fj * fj - r2]])]])
        duals.append(D)
    block, info = pointwise_core(duals, n_A, 1, options=options)
    return CoefficientSuperset([block], n_A, 1, kind="taylor", meta=info)


def certify_stability_taylor(sigma_A: CoefficientSuperset,
                             envelope: TaylorEnvelope, alpha: float,
                             options: Optional[BackendOptions] = None,
                             eps_strict: float = 1e-7):
    """Quadratic-Lyapunov decrease over the Taylor envelope on x^2 <= alpha^2.

    Scalar-state setting.  Coordinates are [f; A W_n z; z]; the decrease,
    the region multiplier, the remainder sector and the coefficient
    membership enter exactly as in the assembled inequality, strictness via
    an identity shift.  Returns (feasible, certificate, values).
    """
    z = envelope.z
    n_z = len(z)
    Wn, Wn1, weights = taylor_sector_bound(envelope)
    if Wn1.shape[0] != 1:
        raise ValueError("the scalar-state certificate expects one remainder row")
    dim = 1 + 1 + n_z
    Rf = np.zeros((1, dim)); Rf[0, 0] = 1.0
    Ra = np.zeros((1, dim)); Ra[0, 1] = 1.0
    Rz = np.zeros((n_z, dim)); Rz[:, 2:] = np.eye(n_z)
    index = {m.exps: k for k, m in enumerate(z)}
    if (1,) not in index:
        raise ValueError("z must contain the state monomial x")
    Tx = np.zeros((1, n_z)); Tx[0, index[(1,)]] = 1.0

    prog = ConicProgram("taylor_stability")
    Xv = prog.scalar("X", nonneg=True, floor=eps_strict)
    tt = prog.scalar("tau_remainder", nonneg=True)
    tf = prog.scalar("tau_membership", nonneg=True)
    # region multiplier: t(x) * (x^2 - alpha^2) = z' P(tau) z, t SOS
    region = Polynomial({(2,): 1.0, (0,): -alpha ** 2}, envelope.variables)
    from .lifting import restricted_multipliers
    mult = restricted_multipliers(prog, OperationSet([region]), z,
                                  envelope.variables)

    T = cp.multiply(Xv, (Tx @ Rz).T @ (Tx @ Rz)) - cp.multiply(Xv, Rf.T @ Rf)
    T = T + Rz.T @ mult.psum @ Rz
    R1 = Rf - Ra
    R2 = Wn1 @ Rz
    T = T + cp.multiply(tt, R1.T @ R1) - cp.multiply(tt * float(weights[0]), R2.T @ R2)
    Rmem = np.vstack([Wn @ Rz, Ra])
    T = T + cp.multiply(tf, Rmem.T @ sigma_A.blocks[0] @ Rmem)
    prog.add_psd(T - eps_strict * np.eye(dim), "decrease")
    cert = prog.solve(options)
    vals = cert.values if cert.verified else {}
    return cert.verified, cert, vals
