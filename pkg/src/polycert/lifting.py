"""Shared structure for the certification LMIs.

Houses the multiplier machinery (S-procedure polynomials restricted to the
class whose products stay representable over the regressor monomials), the
extended variable ring with the unknown-coefficient entries, and the lifted
coordinate vectors the matrix inequalities are written over.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import cvxpy as cp
import numpy as np

from .certify import ConicProgram, PolyExpr
from .dataio import OperationSet, PolySystem
from .poly import (Monomial, Polynomial, gram_decompose, kernel_basis,
                   monomial_basis, pair_product_table)


@dataclass
class ExtendedRing:
    """Variable ring (states, inputs, filter states, vec(F) entries)."""

    states: Tuple[str, ...]
    inputs: Tuple[str, ...]
    psi_states: Tuple[str, ...]
    coeff_names: Tuple[str, ...]

    @property
    def variables(self) -> Tuple[str, ...]:
        return self.states + self.inputs + self.psi_states + self.coeff_names

    def lift(self, p: Polynomial) -> Polynomial:
        return p.lift(self.variables)


def extended_ring(system: PolySystem, n_psi: int = 0,
                  coeff_rows: Optional[int] = None,
                  coeff_cols: Optional[int] = None,
                  coeff_prefix: str = "F") -> ExtendedRing:
    rows = system.n_x if coeff_rows is None else coeff_rows
    cols = system.n_z if coeff_cols is None else coeff_cols
    names = tuple(f"{coeff_prefix}{r+1}_{c+1}" for r in range(rows) for c in range(cols))
    psis = tuple(f"xpsi{k+1}" for k in range(n_psi))
    return ExtendedRing(tuple(system.states), tuple(system.inputs), psis, names)


def ring_polys(ring: ExtendedRing, system: PolySystem,
               regressor: Optional[Sequence[Polynomial]] = None):
    """Coordinate polynomials over the ring: x, u, xpsi, z entries, Fz rows.

    `regressor` overrides the z entries (used for augmented [z; f] stacks);
    entries must already live over (states + inputs).
    """
    rv = ring.variables
    xs = [Polynomial.variable(s, rv) for s in ring.states]
    us = [Polynomial.variable(s, rv) for s in ring.inputs]
    psis = [Polynomial.variable(s, rv) for s in ring.psi_states]
    if regressor is None:
        zs = [Polynomial.from_monomial(m, system.variables).lift(rv) for m in system.z]
    else:
        zs = [p.lift(rv) for p in regressor]
    rows = len(ring.coeff_names) // len(zs)
    ws = []
    for r in range(rows):
        w = Polynomial.zero(rv)
        for c, zp in enumerate(zs):
            w = w + Polynomial.variable(ring.coeff_names[r * len(zs) + c], rv) * zp
        ws.append(w)
    return xs, us, psis, zs, ws


# ---------------------------------------------------------------------------
# S-procedure multipliers over a regressor monomial vector
# ---------------------------------------------------------------------------

@dataclass
class MultiplierSet:
    """Per-constraint SOS multipliers with z-representable products.

    `psum` is the matrix expression sum_i P_i(tau_i) + kernel freedom over
    the regressor vector; `polys` the multiplier polynomials themselves
    (affine coefficients), aligned with the operation-set constraints;
    entries are None where no admissible multiplier monomial exists.
    """

    psum: object
    polys: List[Optional[PolyExpr]]
    kernel_dim: int


def restricted_multipliers(program: ConicProgram, operation_set: OperationSet,
                           z: Sequence[Monomial], variables: Sequence[str],
                           name: str = "mult",
                           extra_gram_degree: int = 0) -> MultiplierSet:
    """Build sum_i P_i(tau_i) over z with z_i tau_i in SOS[x,u].

    Each multiplier is parametrized by a PSD Gram over the full monomial
    basis of degree ceil((deg(z'z) - deg p_i)/2) + extra; coefficients whose
    product with p_i leaves the span of pairwise z-products are pinned to
    zero, which realizes the representable-monomial default.  The returned
    matrix includes a free combination of the z kernel, the square-matricial
    freedom the assembled conditions are entitled to.
    """
    deg_zz = 2 * max(m.degree for m in z)
    table = pair_product_table(z)
    n_z = len(z)
    psum = None
    polys: List[Optional[PolyExpr]] = []
    for ci, p in enumerate(operation_set.constraints):
        half = max(0, int(np.ceil((deg_zz - p.degree) / 2))) + extra_gram_degree
        # keep only Gram rows whose squared monomial yields a representable
        # product; a PSD Gram forces those rows to zero anyway, and dropping
        # them up front removes a degenerate face from the program
        candidates = monomial_basis(variables, half)
        basis = []
        for b in candidates:
            sq = Polynomial.from_monomial(b * b, variables) * p
            if all(pt in table for pt in sq.terms):
                basis.append(b)
        if not basis:
            polys.append(None)
            continue
        nb = len(basis)
        G = cp.Variable((nb, nb), PSD=True, name=f"{name}{ci}_gram")
        program.variables[f"{name}{ci}_gram"] = G
        t = PolyExpr(tuple(variables))
        for i in range(nb):
            for j in range(nb):
                t.add_term((basis[i] * basis[j]).exps, G[i, j])
        kept = PolyExpr(tuple(variables))
        usable = False
        for exps, coeff in t.terms.items():
            prod = Polynomial.from_monomial(Monomial(exps), variables) * p
            if all(pt in table for pt in prod.terms):
                kept.add_term(exps, coeff)
                Q = gram_decompose(prod, z).Q0
                term = cp.multiply(coeff, Q) if hasattr(coeff, "value") else coeff * Q
                psum = term if psum is None else psum + term
                usable = True
            else:
                program.add_eq(coeff, 0.0, f"{name}{ci}_pin_{exps}")
        polys.append(kept if usable else None)
    kernel = kernel_basis(z)
    if psum is None:
        psum = np.zeros((n_z, n_z))
    if kernel:
        ak = program.free(f"{name}_kernel", len(kernel))
        for k, K in enumerate(kernel):
            psum = psum + cp.multiply(ak[k], K)
    return MultiplierSet(psum, polys, len(kernel))


def multiplier_value_polys(mult: MultiplierSet) -> List[Optional[Polynomial]]:
    """Numeric multiplier polynomials after a solve."""
    return [None if t is None else t.value_poly() for t in mult.polys]


# ---------------------------------------------------------------------------
# Lifted coordinate selections
# ---------------------------------------------------------------------------

def selection(rows: Sequence[int], width: int) -> np.ndarray:
    M = np.zeros((len(rows), width))
    for r, c in enumerate(rows):
        M[r, c] = 1.0
    return M


def stack_selections(*mats: np.ndarray) -> np.ndarray:
    return np.vstack(mats)


def structured_basis(system: PolySystem, with_psi: int = 0,
                     regressor: Optional[Sequence[Polynomial]] = None,
                     coeff_rows: Optional[int] = None) -> Tuple[ExtendedRing, List[Polynomial], dict]:
    """Gram basis for the dissipation certificates over the extended ring.

    Entries: all (x,u) monomials of degree 1..max z-degree (the full
    half-degree slice), the filter states, and the rows of F z -- the widest
    square-matricial basis the data structure supports.  Returns the ring,
    the coordinate polynomials, and index maps for embedding selections.
    """
    if regressor is None:
        regressor_polys = [Polynomial.from_monomial(m, system.variables) for m in system.z]
    else:
        regressor_polys = list(regressor)
    dz = max(p.degree for p in regressor_polys)
    ring = extended_ring(system, n_psi=with_psi, coeff_rows=coeff_rows,
                         coeff_cols=len(regressor_polys))
    xs, us, psis, zs, ws = ring_polys(ring, system, regressor_polys)
    xu_vars = tuple(system.states) + tuple(system.inputs)
    monos = monomial_basis(xu_vars, dz, 1)
    mono_polys = [Polynomial.from_monomial(m, xu_vars).lift(ring.variables) for m in monos]
    coords = mono_polys + psis + ws
    index = {}
    for k, m in enumerate(monos):
        index[m.exps] = k
    maps = {
        "monomials": monos,
        "mono_index": index,
        "n_mono": len(monos),
        "psi_offset": len(monos),
        "w_offset": len(monos) + len(psis),
        "dim": len(coords),
    }
    return ring, coords, maps


def z_selection(system: PolySystem, maps: dict) -> np.ndarray:
    """Rows selecting the z entries inside the structured basis."""
    sel = np.zeros((system.n_z, maps["dim"]))
    for l, m in enumerate(system.z):
        sel[l, maps["mono_index"][m.exps]] = 1.0
    return sel


def var_selection(system: PolySystem, maps: dict, names: Sequence[str]) -> np.ndarray:
    """Rows selecting degree-one variables (states or inputs) in the basis."""
    variables = system.variables
    sel = np.zeros((len(names), maps["dim"]))
    for r, nm in enumerate(names):
        e = [0] * len(variables)
        e[variables.index(nm)] = 1
        sel[r, maps["mono_index"][tuple(e)]] = 1.0
    return sel
