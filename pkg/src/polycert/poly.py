"""Sparse multivariate polynomial algebra, monomial bases, and Gram machinery.

Everything downstream (supersets, SOS lowering, LMI assembly) manipulates
polynomials through this module.  Coefficients are 64-bit floats; exponent
bookkeeping is exact integer arithmetic.  Monomials are ordered graded-lex
so every derived object is deterministic across runs.
"""
from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
import scipy.linalg


class NotRepresentable(ValueError):
    """A monomial cannot be written as a product of two basis entries.

    Carries the offending monomial and, when cheap to compute, a minimal
    set of monomials whose addition to the basis would fix it.  Enlarging
    the basis changes downstream dimensions, so it is left to the caller.
    """

    def __init__(self, monomial: "Monomial", suggestions: Tuple["Monomial", ...] = ()):
        self.monomial = monomial
        self.suggestions = suggestions
        msg = f"monomial {monomial} is not a product of two basis entries"
        if suggestions:
            msg += f" (adding one of {list(suggestions)} would fix this)"
        super().__init__(msg)


@dataclass(frozen=True)
class Monomial:
    """Exponent vector over an ambient (implicit) ordered variable list."""

    exps: Tuple[int, ...]

    def __post_init__(self):
        if any(e < 0 for e in self.exps):
            raise ValueError("negative exponent")

    @property
    def degree(self) -> int:
        return sum(self.exps)

    def __mul__(self, other: "Monomial") -> "Monomial":
        return Monomial(tuple(a + b for a, b in zip(self.exps, other.exps)))

    def eval(self, point: np.ndarray) -> float:
        out = 1.0
        for p, e in zip(point, self.exps):
            if e:
                out *= p ** e
        return out

    def sort_key(self) -> Tuple:
        # graded lexicographic
        return (self.degree, tuple(-e for e in self.exps))

    def __str__(self) -> str:
        return "*".join(f"v{i}^{e}" for i, e in enumerate(self.exps) if e) or "1"


def monomial_basis(variables: Sequence[str], max_degree: int, min_degree: int = 0) -> List[Monomial]:
    """All monomials with min_degree <= total degree <= max_degree, graded-lex."""
    if max_degree < 0:
        raise ValueError("max_degree must be >= 0")
    n = len(variables)
    out = []
    for d in range(min_degree, max_degree + 1):
        for c in itertools.combinations_with_replacement(range(n), d):
            e = [0] * n
            for i in c:
                e[i] += 1
            out.append(Monomial(tuple(e)))
    out.sort(key=Monomial.sort_key)
    return out


_TERM_RE = re.compile(r"(?=[^\s])\s*([+-]?)\s*([^+-]+)")
_FACTOR_RE = re.compile(r"([a-zA-Z][a-zA-Z0-9]*)(?:\^(\d+))?$")


class Polynomial:
    """Sparse polynomial: map exponent-tuple -> float over an ordered variable list."""

    __slots__ = ("terms", "variables")

    def __init__(self, terms: Dict[Tuple[int, ...], float], variables: Sequence[str]):
        self.variables = tuple(variables)
        self.terms = {t: float(c) for t, c in terms.items() if c != 0.0}

    # -- construction -----------------------------------------------------
    @classmethod
    def zero(cls, variables: Sequence[str]) -> "Polynomial":
        return cls({}, variables)

    @classmethod
    def constant(cls, c: float, variables: Sequence[str]) -> "Polynomial":
        return cls({(0,) * len(variables): c}, variables)

    @classmethod
    def from_monomial(cls, m: Monomial, variables: Sequence[str], coeff: float = 1.0) -> "Polynomial":
        return cls({m.exps: coeff}, variables)

    @classmethod
    def variable(cls, name: str, variables: Sequence[str]) -> "Polynomial":
        idx = list(variables).index(name)
        e = [0] * len(variables)
        e[idx] = 1
        return cls({tuple(e): 1.0}, variables)

    @classmethod
    def parse(cls, text: str, variables: Sequence[str]) -> "Polynomial":
        """Parse `-0.3*x1 + 0.2*x2^2 + 0.2*x1*x2` style expressions."""
        variables = tuple(variables)
        var_index = {v: i for i, v in enumerate(variables)}
        terms: Dict[Tuple[int, ...], float] = {}
        text = text.strip()
        if not text:
            return cls.zero(variables)
        for sign, body in _TERM_RE.findall(text):
            body = body.strip()
            if not body:
                raise ValueError(f"empty term in {text!r}")
            coeff = -1.0 if sign == "-" else 1.0
            exps = [0] * len(variables)
            for factor in body.split("*"):
                factor = factor.strip()
                if not factor:
                    raise ValueError(f"dangling '*' in {text!r}")
                m = _FACTOR_RE.match(factor)
                if m and m.group(1) in var_index:
                    exps[var_index[m.group(1)]] += int(m.group(2) or 1)
                else:
                    try:
                        coeff *= float(factor)
                    except ValueError:
                        raise ValueError(f"unknown factor {factor!r} in {text!r}") from None
            key = tuple(exps)
            terms[key] = terms.get(key, 0.0) + coeff
        return cls(terms, variables)

    # -- queries -----------------------------------------------------------
    @property
    def degree(self) -> int:
        return max((sum(t) for t in self.terms), default=0)

    def coefficient(self, m: Monomial) -> float:
        return self.terms.get(m.exps, 0.0)

    def monomials(self) -> List[Monomial]:
        return sorted((Monomial(t) for t in self.terms), key=Monomial.sort_key)

    def __call__(self, point: Sequence[float]) -> float:
        point = np.asarray(point, dtype=float)
        if point.shape != (len(self.variables),):
            raise ValueError(
                f"point has dimension {point.shape}, expected {len(self.variables)}")
        out = 0.0
        for t, c in self.terms.items():
            term = c
            for p, e in zip(point, t):
                if e:
                    term *= p ** e
            out += term
        return out

    # -- arithmetic ----------------------------------------------------
    def _check(self, other: "Polynomial"):
        if self.variables != other.variables:
            raise ValueError("variable lists differ")

    def __add__(self, other: "Polynomial") -> "Polynomial":
        self._check(other)
        terms = dict(self.terms)
        for t, c in other.terms.items():
            terms[t] = terms.get(t, 0.0) + c
        return Polynomial(terms, self.variables)

    def __sub__(self, other: "Polynomial") -> "Polynomial":
        return self + (other * -1.0)

    def __mul__(self, other) -> "Polynomial":
        if isinstance(other, (int, float)):
            return Polynomial({t: c * other for t, c in self.terms.items()}, self.variables)
        self._check(other)
        terms: Dict[Tuple[int, ...], float] = {}
        for ta, ca in self.terms.items():
            for tb, cb in other.terms.items():
                key = tuple(a + b for a, b in zip(ta, tb))
                terms[key] = terms.get(key, 0.0) + ca * cb
        return Polynomial(terms, self.variables)

    __rmul__ = __mul__

    def __neg__(self) -> "Polynomial":
        return self * -1.0

    def differentiate(self, var: str) -> "Polynomial":
        idx = list(self.variables).index(var)
        terms = {}
        for t, c in self.terms.items():
            if t[idx] == 0:
                continue
            nt = list(t)
            nt[idx] -= 1
            terms[tuple(nt)] = terms.get(tuple(nt), 0.0) + c * t[idx]
        return Polynomial(terms, self.variables)

    def lift(self, new_variables: Sequence[str]) -> "Polynomial":
        """Re-express over a superset variable list (old names must appear)."""
        new_variables = tuple(new_variables)
        pos = [new_variables.index(v) for v in self.variables]
        terms = {}
        for t, c in self.terms.items():
            e = [0] * len(new_variables)
            for p, ei in zip(pos, t):
                e[p] = ei
            terms[tuple(e)] = terms.get(tuple(e), 0.0) + c
        return Polynomial(terms, new_variables)

    def __str__(self) -> str:
        if not self.terms:
            return "0"
        bits = []
        for t in sorted(self.terms, key=lambda t: Monomial(t).sort_key()):
            c = self.terms[t]
            factors = [f"{self.variables[i]}" + (f"^{e}" if e > 1 else "")
                       for i, e in enumerate(t) if e]
            body = "*".join(factors) if factors else "1"
            bits.append(f"{c:+g}*{body}")
        return " ".join(bits)

    def __repr__(self) -> str:
        return f"Polynomial({self})"


class PolyMatrix:
    """Matrix with Polynomial entries sharing one variable list."""

    def __init__(self, entries: Sequence[Sequence[Polynomial]]):
        self.entries = [list(row) for row in entries]
        self.shape = (len(self.entries), len(self.entries[0]) if self.entries else 0)
        vs = {p.variables for row in self.entries for p in row}
        if len(vs) > 1:
            raise ValueError("entries do not share one variable list")
        self.variables = next(iter(vs)) if vs else ()

    def __call__(self, point: Sequence[float]) -> np.ndarray:
        return np.array([[p(point) for p in row] for row in self.entries])


# ---------------------------------------------------------------------------
# Gram (square matricial) machinery
# ---------------------------------------------------------------------------

def pair_product_table(basis: Sequence[Monomial]) -> Dict[Tuple[int, ...], List[Tuple[int, int]]]:
    """Map product-monomial exponents -> list of (i, j) basis pairs, i <= j."""
    table: Dict[Tuple[int, ...], List[Tuple[int, int]]] = {}
    for i in range(len(basis)):
        for j in range(i, len(basis)):
            key = (basis[i] * basis[j]).exps
            table.setdefault(key, []).append((i, j))
    return table


def _sym_pair(i: int, j: int, n: int) -> np.ndarray:
    # z' M z = z_i z_j for both i == j and i != j
    M = np.zeros((n, n))
    M[i, j] += 0.5
    M[j, i] += 0.5
    return M


def kernel_basis(basis: Sequence[Monomial]) -> List[np.ndarray]:
    """Span of {L = L': basis' L basis == 0} for a monomial basis.

    One generator per extra pair in each product-collision group; exact
    integer combinatorics, no floating rank decisions.
    """
    n = len(basis)
    out = []
    for pairs in pair_product_table(basis).values():
        for a, b in zip(pairs, pairs[1:]):
            out.append(_sym_pair(*a, n) - _sym_pair(*b, n))
    return out


def kernel_basis_poly(coords: Sequence[Polynomial], rcond: float = 1e-10) -> List[np.ndarray]:
    """Kernel of a general polynomial coordinate vector (numeric nullspace)."""
    n = len(coords)
    pairs = [(i, j) for i in range(n) for j in range(i, n)]
    mono_index: Dict[Tuple[int, ...], int] = {}
    cols = []
    for i, j in pairs:
        prod = coords[i] * coords[j]
        cols.append(prod.terms)
        for t in prod.terms:
            mono_index.setdefault(t, len(mono_index))
    A = np.zeros((len(mono_index), len(pairs)))
    for c, terms in enumerate(cols):
        for t, v in terms.items():
            A[mono_index[t], c] = v
    ns = scipy.linalg.null_space(A, rcond=rcond)
    out = []
    for k in range(ns.shape[1]):
        M = np.zeros((n, n))
        for c, (i, j) in enumerate(pairs):
            M += ns[c, k] * _sym_pair(i, j, n)
        out.append(M)
    return out


@dataclass
class GramForm:
    """One square matricial representation plus the full kernel freedom."""

    basis: List[Monomial]
    Q0: np.ndarray
    kernel: List[np.ndarray]

    def reconstruct(self) -> Polynomial:
        nvars = len(self.basis[0].exps)
        terms: Dict[Tuple[int, ...], float] = {}
        n = len(self.basis)
        for i in range(n):
            for j in range(n):
                key = (self.basis[i] * self.basis[j]).exps
                terms[key] = terms.get(key, 0.0) + self.Q0[i, j]
        return Polynomial(terms, tuple(f"v{i}" for i in range(nvars)))


def _suggest_factors(m: Monomial, basis: Sequence[Monomial]) -> Tuple[Monomial, ...]:
    """Monomials b' with m = b * b' for some existing basis entry b."""
    out = []
    for b in basis:
        if all(e <= f for e, f in zip(b.exps, m.exps)):
            out.append(Monomial(tuple(f - e for e, f in zip(b.exps, m.exps))))
    return tuple(dict.fromkeys(out))[:4]


def gram_decompose(p: Polynomial, basis: Sequence[Monomial]) -> GramForm:
    """Q0 with basis' Q0 basis == p, plus the complete kernel basis."""
    table = pair_product_table(basis)
    n = len(basis)
    Q0 = np.zeros((n, n))
    for t, c in p.terms.items():
        if t not in table:
            raise NotRepresentable(Monomial(t), _suggest_factors(Monomial(t), basis))
        i, j = table[t][0]
        Q0 += c * _sym_pair(i, j, n)
    return GramForm(list(basis), Q0, kernel_basis(basis))


def quadratic_decomposition_map(z_mult: Sequence[Monomial], p_constraint: Polynomial,
                                z: Sequence[Monomial]):
    """Base maps Q_j with z' Q_j z == z_mult[j] * p_constraint, plus z's kernel.

    The returned pair (list of Q_j, kernel list) makes tau |-> sum_j tau_j Q_j
    linear; adding any kernel combination leaves the represented polynomial
    unchanged, which is the extra freedom the assembled programs exploit.
    """
    qs = []
    for m in z_mult:
        prod = Polynomial.from_monomial(m, p_constraint.variables) * p_constraint
        form = gram_decompose(prod, z)
        qs.append(form.Q0)
    return qs, kernel_basis(z)


def newton_half_basis(p_support: Iterable[Monomial], variables: Sequence[str]) -> List[Monomial]:
    """Half-degree monomial basis reduced to the support's Newton polytope.

    A monomial m can appear in an SOS decomposition of p only if 2m lies in
    the convex hull of p's support (Reznick).  Membership is checked by a
    small LP; on LP failure the degree-filtered basis is kept (sound, just
    larger).
    """
    from scipy.optimize import linprog

    support = [np.array(m.exps, dtype=float) for m in p_support]
    if not support:
        return []
    degs = [int(s.sum()) for s in support]
    lo, hi = min(degs), max(degs)
    cands = monomial_basis(variables, hi // 2 + hi % 2, (lo + 1) // 2)
    pts = np.array(support)
    out = []
    for m in cands:
        target = 2 * np.array(m.exps, dtype=float)
        # exists lambda >= 0, sum = 1, pts' lambda = target
        A_eq = np.vstack([pts.T, np.ones(len(support))])
        b_eq = np.concatenate([target, [1.0]])
        try:
            res = linprog(np.zeros(len(support)), A_eq=A_eq, b_eq=b_eq,
                          bounds=[(0, None)] * len(support), method="highs")
            ok = res.status == 0
        except Exception:
            ok = True
        if ok:
            out.append(m)
    return out
