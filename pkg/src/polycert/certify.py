"""Generic conic-program assembly, SOS lowering, and independent verification.

Programs are modelled with cvxpy expressions but solved through a narrow
backend contract (linear objective, affine PSD constraints, nonnegative
scalars).  Solver output is never trusted: every constraint residual is
recomputed here from the returned variable values, and only a clean
recomputation yields the Verified status.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import cvxpy as cp
import numpy as np

from .poly import (Monomial, NotRepresentable, Polynomial, newton_half_basis,
                   pair_product_table)


class VerificationFailed(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Affine-coefficient polynomials
# ---------------------------------------------------------------------------

class PolyExpr:
    """Polynomial whose coefficients are affine cvxpy expressions (or floats).

    Products only ever multiply float polynomials together; program variables
    enter linearly, so everything built from these stays solver-affine.
    """

    def __init__(self, variables: Sequence[str]):
        self.variables = tuple(variables)
        self.terms: Dict[Tuple[int, ...], object] = {}

    def copy(self) -> "PolyExpr":
        out = PolyExpr(self.variables)
        out.terms = dict(self.terms)
        return out

    @classmethod
    def from_polynomial(cls, p: Polynomial) -> "PolyExpr":
        out = cls(p.variables)
        out.terms = dict(p.terms)
        return out

    def add_term(self, exps: Tuple[int, ...], coeff):
        cur = self.terms.get(exps)
        self.terms[exps] = coeff if cur is None else cur + coeff

    def add_poly(self, p: Polynomial, scale=1.0):
        """self += scale * p where scale may be a cvxpy scalar."""
        for t, c in p.terms.items():
            self.add_term(t, scale * c)

    def add_quadratic_form(self, coords: Sequence[Polynomial], weight,
                           weight_shape: Optional[int] = None):
        """self += coords' W coords with W a cvxpy matrix (or ndarray)."""
        n = len(coords)
        is_numeric = isinstance(weight, np.ndarray)
        for i in range(n):
            for j in range(n):
                w = weight[i, j]
                if is_numeric and w == 0.0:
                    continue
                self.add_poly(coords[i] * coords[j], w)

    def __iadd__(self, other: "PolyExpr") -> "PolyExpr":
        for t, c in other.terms.items():
            self.add_term(t, c)
        return self

    def scaled(self, s) -> "PolyExpr":
        out = PolyExpr(self.variables)
        out.terms = {t: s * c for t, c in self.terms.items()}
        return out

    def value_poly(self) -> Polynomial:
        """Numeric snapshot after a solve (cvxpy coefficients -> floats)."""
        terms = {}
        for t, c in self.terms.items():
            terms[t] = float(c.value) if hasattr(c, "value") else float(c)
        return Polynomial(terms, self.variables)


# ---------------------------------------------------------------------------
# Backend contract
# ---------------------------------------------------------------------------

_LOGDET_BACKENDS = {"CLARABEL", "SCS"}


@dataclass
class BackendOptions:
    """Preference-ordered solver list; the first that returns a status wins."""

    backends: Tuple[str, ...] = ("CLARABEL", "SCS")
    tol: float = 1e-8
    scs_eps: float = 1e-7
    max_iters: int = 200_000
    verbose: bool = False

    def supports_logdet(self) -> bool:
        return any(b.upper() in _LOGDET_BACKENDS for b in self.backends)

    def solve(self, prob: cp.Problem) -> str:
        """Solve with fallback; returns the final cvxpy status string."""
        last = "solver_error"
        for name in self.backends:
            try:
                if name.upper() == "SCS":
                    prob.solve(solver=cp.SCS, eps=self.scs_eps,
                               max_iters=self.max_iters, verbose=self.verbose)
                elif name.upper() == "CLARABEL":
                    prob.solve(solver=cp.CLARABEL, verbose=self.verbose,
                               tol_gap_abs=self.tol, tol_gap_rel=self.tol,
                               tol_feas=self.tol)
                else:
                    prob.solve(solver=getattr(cp, name.upper()), verbose=self.verbose)
            except (cp.error.SolverError, cp.error.DCPError):
                last = "solver_error"
                continue
            last = prob.status
            if prob.status in ("optimal", "infeasible", "unbounded"):
                return last
            # inaccurate statuses: keep the values but try the next backend
            if prob.status == "optimal_inaccurate":
                return last
        return last


# ---------------------------------------------------------------------------
# Program and certificate
# ---------------------------------------------------------------------------

@dataclass
class Certificate:
    """Solution bundle; residuals here are recomputed, never the backend's."""

    status: str
    objective: Optional[float]
    values: Dict[str, np.ndarray]
    residuals: Dict[str, float]
    solver_status: str
    backend: str
    wall_time: float

    @property
    def verified(self) -> bool:
        return self.status == "Verified"


class ConicProgram:
    """Affine PSD constraints + linear objective over named variables."""

    def __init__(self, name: str = "program"):
        self.name = name
        self.variables: Dict[str, cp.Variable] = {}
        self.constraints: List[Tuple[str, str, object]] = []  # (name, kind, expr)
        self._cvx_constraints: List = []
        self.objective = None
        self._strict_shifts: Dict[str, float] = {}

    # -- variables -----------------------------------------------------
    def scalar(self, name: str, nonneg: bool = False, floor: Optional[float] = None):
        v = cp.Variable(nonneg=nonneg, name=name)
        self.variables[name] = v
        if floor is not None:
            self.add_ineq(v >= floor, f"{name}_floor")
        return v

    def symmetric(self, name: str, n: int, strict_eps: Optional[float] = None):
        v = cp.Variable((n, n), symmetric=True, name=name)
        self.variables[name] = v
        if strict_eps is not None:
            self.add_psd(v - strict_eps * np.eye(n), f"{name}_pd")
            self._strict_shifts[f"{name}_pd"] = strict_eps
        return v

    def matrix(self, name: str, shape: Tuple[int, int]):
        v = cp.Variable(shape, name=name)
        self.variables[name] = v
        return v

    def free(self, name: str, n: int):
        v = cp.Variable(n, name=name)
        self.variables[name] = v
        return v

    # -- constraints -----------------------------------------------------
    def add_psd(self, expr, name: str):
        self.constraints.append((name, "psd", expr))
        self._cvx_constraints.append(expr >> 0)

    def add_eq(self, lhs, rhs, name: str):
        self.constraints.append((name, "eq", lhs - rhs))
        self._cvx_constraints.append(lhs == rhs)

    def add_ineq(self, constraint, name: str):
        # scalar inequality, already a cvxpy constraint
        self.constraints.append((name, "ineq", constraint.args[1] - constraint.args[0]))
        self._cvx_constraints.append(constraint)

    def minimize(self, expr):
        self.objective = expr

    # -- SOS lowering -----------------------------------------------------
    def gram_matching(self, expr: PolyExpr, coords: Sequence[Polynomial],
                      name: str) -> cp.Variable:
        """Free symmetric G with coords' G coords == expr (coefficientwise).

        Returns G for embedding in larger PSD blocks.  The equality rows are
        the full square-matricial freedom: any kernel shift of G is feasible,
        which is exactly the slack SOS solvers exploit.
        """
        n = len(coords)
        G = cp.Variable((n, n), symmetric=True, name=name)
        self.variables[name] = G
        prod_coefs: Dict[Tuple[int, ...], List[Tuple[Tuple[int, int], float]]] = {}
        for i in range(n):
            for j in range(i, n):
                prod = coords[i] * coords[j]
                w = 1.0 if i == j else 2.0
                for t, v in prod.terms.items():
                    prod_coefs.setdefault(t, []).append(((i, j), w * v))
        matched = set()
        for t, coeff in expr.terms.items():
            if t not in prod_coefs:
                if hasattr(coeff, "value") or abs(coeff) > 0:
                    raise NotRepresentable(Monomial(t))
                continue
            matched.add(t)
        rows = 0
        for t, pairs in prod_coefs.items():
            lhs = sum(w * G[i, j] for (i, j), w in pairs)
            rhs = expr.terms.get(t, 0.0)
            self.add_eq(lhs, rhs, f"{name}_match_{rows}")
            rows += 1
        return G

    def add_sos(self, expr: PolyExpr, basis: Optional[Sequence[Polynomial]] = None,
                name: str = "sos") -> Tuple[cp.Variable, List[Polynomial]]:
        """Constrain expr to be a sum of squares over the given basis.

        Without an explicit basis, the Newton-polytope-reduced half-degree
        monomial basis of the symbolic support is used.
        """
        if basis is None:
            support = [Monomial(t) for t in expr.terms]
            monos = newton_half_basis(support, expr.variables)
            basis = [Polynomial.from_monomial(m, expr.variables) for m in monos]
        basis = list(basis)
        if not basis:
            raise NotRepresentable(Monomial((0,) * len(expr.variables)))
        G = self.gram_matching(expr, basis, name)
        self.add_psd(G, f"{name}_psd")
        return G, basis

    def sos_multiplier(self, variables: Sequence[str], gram_degree: int,
                       name: str) -> Tuple[PolyExpr, cp.Variable, List[Monomial]]:
        """SOS polynomial b' G b over the full monomial basis of gram_degree.

        Returns the polynomial as a PolyExpr whose coefficients are affine in
        the PSD Gram G, for use as an S-procedure multiplier.
        """
        from .poly import monomial_basis
        basis = monomial_basis(variables, gram_degree)
        n = len(basis)
        G = cp.Variable((n, n), PSD=True, name=name)
        self.variables[name] = G
        out = PolyExpr(variables)
        for i in range(n):
            for j in range(n):
                out.add_term((basis[i] * basis[j]).exps, G[i, j])
        return out, G, basis

    # -- solve & verify -----------------------------------------------------
    def solve(self, options: Optional[BackendOptions] = None,
              residual_tol: float = 1e-6) -> Certificate:
        options = options or BackendOptions()
        prob = cp.Problem(cp.Minimize(self.objective if self.objective is not None else 0),
                          self._cvx_constraints)
        t0 = time.perf_counter()
        status = "solver_error"
        backend = ""
        last_bad: Optional[Certificate] = None
        for nm in options.backends:
            single = BackendOptions(backends=(nm,), tol=options.tol,
                                    scs_eps=options.scs_eps,
                                    max_iters=options.max_iters,
                                    verbose=options.verbose)
            status = single.solve(prob)
            backend = nm
            if status in ("optimal", "optimal_inaccurate"):
                values = self._collect_values()
                residuals = self.residuals(values)
                if _residuals_ok(self.constraints, residuals, residual_tol):
                    return Certificate("Verified",
                                       None if self.objective is None else float(prob.value),
                                       values, residuals, status, backend,
                                       time.perf_counter() - t0)
                # claimed optimal but our recheck fails: try the next backend
                last_bad = Certificate("VerificationFailed",
                                       None if prob.value is None else float(prob.value),
                                       values, residuals, status, backend,
                                       time.perf_counter() - t0)
            elif status in ("infeasible", "infeasible_inaccurate"):
                return Certificate("Infeasible", None, {}, {}, status, backend,
                                   time.perf_counter() - t0)
            elif status in ("unbounded", "unbounded_inaccurate"):
                return Certificate("Unbounded", None, {}, {}, status, backend,
                                   time.perf_counter() - t0)
        if last_bad is not None:
            return last_bad
        return Certificate("NumericalFailure", None, {}, {}, status, backend,
                           time.perf_counter() - t0)

    def _collect_values(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, v in self.variables.items():
            out[name] = None if v.value is None else np.array(v.value)
        return out

    def residuals(self, values: Dict[str, np.ndarray]) -> Dict[str, float]:
        """Recompute every constraint residual at the given variable values.

        PSD constraints report the smallest eigenvalue (>= 0 is feasible),
        equalities the negative largest absolute violation, inequalities the
        scalar slack.  Values are pushed into the variables so the stored
        cvxpy expressions evaluate with our arithmetic, not the solver's.
        """
        saved = {name: v.value for name, v in self.variables.items()}
        try:
            for name, v in self.variables.items():
                if name in values and values[name] is not None:
                    val = np.asarray(values[name], dtype=float)
                    if val.ndim == 2 and (v.attributes.get("symmetric")
                                          or v.attributes.get("PSD")):
                        val = 0.5 * (val + val.T)
                    # bypass attribute validation: the whole point is to
                    # evaluate the constraints at exactly these numbers
                    v._value = val
            out = {}
            for name, kind, expr in self.constraints:
                val = expr.value
                if val is None:
                    out[name] = -np.inf
                elif kind == "psd":
                    M = np.atleast_2d(val)
                    scale = 1.0 + np.linalg.norm(M, 2)
                    out[name] = float(np.linalg.eigvalsh(0.5 * (M + M.T)).min() / scale)
                elif kind == "eq":
                    arr = np.atleast_1d(val)
                    scale = 1.0 + float(np.abs(arr).max())
                    out[name] = -float(np.abs(arr).max() / scale)
                else:
                    out[name] = float(np.min(val))
            return out
        finally:
            for name, v in self.variables.items():
                v._value = saved[name]

    # -- export -----------------------------------------------------
    def dump(self, path: str, solver: str = "CLARABEL"):
        """Write the canonicalized conic data (c, A triplets, cones) to a file."""
        import scipy.sparse as sp

        prob = cp.Problem(cp.Minimize(self.objective if self.objective is not None else 0),
                          self._cvx_constraints)
        data, _, _ = prob.get_problem_data(getattr(cp, solver.upper()))
        A = sp.coo_matrix(data["A"])
        with open(path, "w") as fh:
            fh.write(f"# polycert conic dump: min c'x s.t. b - A x in K\n")
            fh.write(f"nvars {data['c'].shape[0]}\n")
            fh.write("c " + " ".join(f"{v:.17g}" for v in np.asarray(data["c"]).ravel()) + "\n")
            fh.write("b " + " ".join(f"{v:.17g}" for v in np.asarray(data["b"]).ravel()) + "\n")
            fh.write(f"A {A.shape[0]} {A.shape[1]} {A.nnz}\n")
            for r, c_, v in zip(A.row, A.col, A.data):
                fh.write(f"{r} {c_} {v:.17g}\n")
            dims = data["dims"]
            fh.write(f"cones zero={dims.zero} nonneg={dims.nonneg} psd={list(dims.psd)} "
                     f"exp={dims.exp} soc={list(dims.soc)}\n")


def _residuals_ok(constraints, residuals: Dict[str, float], tol: float) -> bool:
    for name, kind, _ in constraints:
        r = residuals.get(name, -np.inf)
        if kind in ("psd", "ineq") and r < -tol:
            return False
        if kind == "eq" and r < -tol:
            return False
    return True
