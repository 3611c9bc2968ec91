"""Data-consistent coefficient supersets: pointwise, cumulative, window.

All three produce quadratic-matrix-inequality blocks in the [I; F] ordering,
so membership of a coefficient matrix F is `[I; F]' B [I; F] <= 0` for every
block B.  Blocks are normalized to unit spectral norm at construction; a
positive rescaling leaves the described set unchanged and keeps downstream
LMIs well conditioned.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .certify import BackendOptions, ConicProgram
from .dataio import SampleSet


class UnboundedSigma(RuntimeError):
    pass


class DualizationFailed(RuntimeError):
    pass


class RankDeficient(RuntimeError):
    def __init__(self, defect: int):
        self.defect = defect
        super().__init__(f"regressor matrix is rank deficient by {defect}")


class NotAnEllipsoid(RuntimeError):
    pass


def dualize(P: np.ndarray, k: int, cond_gate: float = 1e12) -> np.ndarray:
    """[[-Q1, Q2], [Q2', -Q3]] with Q = P^{-1} split at row/column k.

    Maps a quadratic matrix inequality between its [F'; I] and [I; F]
    orderings; applying it twice returns the original matrix.
    """
    if np.linalg.cond(P) > cond_gate:
        raise DualizationFailed(f"condition number exceeds {cond_gate:g}")
    Q = np.linalg.inv(P)
    R = 0.5 * (Q + Q.T)
    R[:k, :k] *= -1.0
    R[k:, k:] *= -1.0
    return R


@dataclass
class DualBlock:
    """One Delta_i of the dual characterization, with sample provenance."""

    matrix: np.ndarray
    provenance: Tuple[int, ...]


def dual_blocks(samples: SampleSet, z_eval, n_z: int,
                cond_gate: float = 1e12) -> List[DualBlock]:
    """Per-sample Delta_i blocks over [F'; I] built from the inverted noise bounds."""
    if samples.noise is None:
        raise ValueError("samples carry no noise model")
    inv = samples.noise.inverse_blocks(cond_gate)
    n_x = samples.X.shape[1]
    out = []
    for i in range(len(samples)):
        z = np.asarray(z_eval(samples.X[i], samples.U[i]), dtype=float).reshape(-1, 1)
        xp = samples.Xp[i].reshape(-1, 1)
        d1, d2, d3 = inv[i]
        M = np.block([[np.array([[-d1]]), d2], [d2.T, -d3]])
        B = np.block([[-z.T, xp.T], [np.zeros((n_x, n_z)), np.eye(n_x)]])
        out.append(DualBlock(B.T @ M @ B, (i,)))
    return out


@dataclass
class CoefficientSuperset:
    """List of [I; F]-ordered blocks describing all data-consistent F."""

    blocks: List[np.ndarray]
    n_z: int
    n_x: int
    kind: str = "explicit"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        normed = []
        for B in self.blocks:
            B = np.asarray(B, dtype=float)
            if B.shape != (self.n_z + self.n_x, self.n_z + self.n_x):
                raise ValueError("block dimension mismatch")
            s = np.linalg.norm(B, 2)
            if s <= 0:
                raise ValueError("zero block")
            normed.append(0.5 * (B + B.T) / s)
        self.blocks = normed

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def contains(self, F: np.ndarray, tol: float = 1e-7) -> Tuple[bool, float]:
        """Membership test with the worst relative residual eigenvalue."""
        F = np.atleast_2d(F)
        if F.shape != (self.n_x, self.n_z):
            raise ValueError("F dimension mismatch")
        IF = np.vstack([np.eye(self.n_z), F])
        worst = -np.inf
        for B in self.blocks:
            ev = float(np.linalg.eigvalsh(IF.T @ B @ IF).max())
            worst = max(worst, ev / (1.0 + np.linalg.norm(B, 2)))
        return worst <= tol, worst

    def boundedness_margin(self) -> float:
        """min over blocks of the smallest eigenvalue of the F-quadratic part."""
        return min(float(np.linalg.eigvalsh(B[self.n_z:, self.n_z:]).min())
                   for B in self.blocks)

    @classmethod
    def singleton(cls, F: np.ndarray) -> "CoefficientSuperset":
        F = np.atleast_2d(np.asarray(F, dtype=float))
        n_x, n_z = F.shape
        B = np.block([[F.T @ F, -F.T], [-F, np.eye(n_x)]])
        return cls([B], n_z, n_x, kind="singleton")

    @classmethod
    def frobenius_ball(cls, F0: np.ndarray, radius: float) -> "CoefficientSuperset":
        """All F with (F - F0)'(F - F0) <= r^2 I (equals the Frobenius ball for n_x = 1)."""
        F0 = np.atleast_2d(np.asarray(F0, dtype=float))
        n_x, n_z = F0.shape
        B = np.block([[F0.T @ F0 - radius ** 2 * np.eye(n_z), -F0.T],
                      [-F0, np.eye(n_x)]])
        return cls([B], n_z, n_x, kind="ball")

    # -- serialization ------------------------------------------------------
    def save(self, path: str):
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            fh.write(f"polycert-superset {self.kind} {self.n_z} {self.n_x} {self.n_blocks}\n")
            for B in self.blocks:
                for row in B:
                    fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "CoefficientSuperset":
        with open(path) as fh:
            head = fh.readline().split()
            if head[0] != "polycert-superset":
                raise ValueError("not a superset file")
            kind, n_z, n_x, n_blocks = head[1], int(head[2]), int(head[3]), int(head[4])
            dim = n_z + n_x
            blocks = []
            for _ in range(n_blocks):
                rows = [list(map(float, fh.readline().split())) for _ in range(dim)]
                blocks.append(np.array(rows))
        return cls(blocks, n_z, n_x, kind=kind)


# ---------------------------------------------------------------------------
# Pointwise (ellipsoidal outer approximation) superset
# ---------------------------------------------------------------------------

def pointwise_core(dual: Sequence[np.ndarray], k: int, l: int,
                   objective: str = "min_diameter",
                   options: Optional[BackendOptions] = None,
                   kappa_min: float = 1e-8):
    """Ellipsoidal outer approximation of the dual-block intersection.

    Solves for D1 (k x k), D2 (k x l), per-block multipliers alpha >= 0 and
    kappa with the Schur-form LMI, normalization D3 = D2' D1^{-1} D2 - I
    folded in, maximizing kappa (min_diameter) or log det D1 (min_volume).
    Returns the dualized single block in [I; F] ordering plus solve info.
    """
    import cvxpy as cp

    options = options or BackendOptions()
    dual = [np.asarray(D, dtype=float) for D in dual]
    dual = [D / np.linalg.norm(D, 2) for D in dual if np.linalg.norm(D, 2) > 1e-300]
    S = len(dual)
    if S == 0:
        raise ValueError("no informative dual blocks")
    D1 = cp.Variable((k, k), symmetric=True)
    D2 = cp.Variable((k, l))
    al = cp.Variable(S, nonneg=True)
    big = cp.bmat([[D1, D2, np.zeros((k, k))],
                   [D2.T, -np.eye(l), D2.T],
                   [np.zeros((k, k)), D2, -D1]])
    lift = np.hstack([np.eye(k + l), np.zeros((k + l, k))])
    acc = 0
    for i, D in enumerate(dual):
        acc = acc + al[i] * (lift.T @ D @ lift)
    if objective == "min_diameter":
        kap = cp.Variable()
        cons = [big - acc << 0, D1 >> kap * np.eye(k), kap >= kappa_min]
        prob = cp.Problem(cp.Maximize(kap), cons)
    elif objective == "min_volume":
        if not options.supports_logdet():
            raise ValueError("backend does not support log-det objectives")
        cons = [big - acc << 0]
        prob = cp.Problem(cp.Maximize(cp.log_det(D1)), cons)
    else:
        raise ValueError(f"unknown objective {objective!r}")
    status = options.solve(prob)
    if status not in ("optimal", "optimal_inaccurate"):
        raise UnboundedSigma(
            f"ellipsoid SDP terminated with {status}; the data does not bound the set")
    if objective == "min_diameter" and kap.value is not None and kap.value <= kappa_min * 1.01:
        raise UnboundedSigma("kappa at its floor; the data does not bound the set")
    D1v = 0.5 * (D1.value + D1.value.T)
    D2v = D2.value
    D3v = D2v.T @ np.linalg.solve(D1v, D2v) - np.eye(l)
    Dp = np.block([[D1v, D2v], [D2v.T, D3v]])
    block = dualize(Dp, k, cond_gate=1e14)
    info = {"status": status,
            "alpha": np.asarray(al.value).ravel(),
            "kappa": float(kap.value) if objective == "min_diameter" else None}
    return block, info


def superset_pointwise(samples: SampleSet, z_eval, n_z: int,
                       objective: str = "min_diameter",
                       options: Optional[BackendOptions] = None):
    blocks = dual_blocks(samples, z_eval, n_z)
    n_x = samples.X.shape[1]
    block, info = pointwise_core([b.matrix for b in blocks], n_z, n_x,
                                 objective, options)
    sup = CoefficientSuperset([block], n_z, n_x, kind="pointwise",
                              meta={"S": len(samples), **info})
    return sup, info


# ---------------------------------------------------------------------------
# Cumulative and window supersets
# ---------------------------------------------------------------------------

def _cumulative_block(samples: SampleSet, z_eval, n_z: int,
                      idx: Sequence[int], cond_gate: float = 1e12) -> np.ndarray:
    inv = samples.noise.inverse_blocks(cond_gate)
    n_x = samples.X.shape[1]
    Z = np.column_stack([np.asarray(z_eval(samples.X[i], samples.U[i]), dtype=float)
                         for i in idx])
    XP = np.column_stack([samples.Xp[i] for i in idx])
    D1t = -np.diag([inv[i][0] for i in idx])
    D2t = np.vstack([inv[i][1] for i in idx])
    D3t = -sum(inv[i][2] for i in idx)
    D1c = Z @ D1t @ Z.T
    ev = np.linalg.eigvalsh(D1c)
    if ev.min() <= 0 or ev.min() < 1e-14 * ev.max():
        defect = int((ev < 1e-14 * ev.max()).sum())
        raise RankDeficient(defect)
    D2c = -Z @ (D1t @ XP.T + D2t)
    D3c = XP @ D1t @ XP.T + XP @ D2t + D2t.T @ XP.T + D3t
    Dc = np.block([[D1c, D2c], [D2c.T, D3c]])
    return dualize(Dc, n_z, cond_gate)


def superset_cumulative(samples: SampleSet, z_eval, n_z: int) -> CoefficientSuperset:
    if samples.noise is None:
        raise ValueError("samples carry no noise model")
    block = _cumulative_block(samples, z_eval, n_z, range(len(samples)))
    return CoefficientSuperset([block], n_z, samples.X.shape[1],
                               kind="cumulative", meta={"S": len(samples)})


def superset_window(samples: SampleSet, z_eval, n_z: int, L: int,
                    skip_failed: bool = True) -> CoefficientSuperset:
    """One dualized block per window i..i+L (L+1 samples), i = 0..S-L-1.

    Windows whose matrices fail the rank or conditioning gates are skipped
    with a record in meta (error instead when skip_failed is false); an
    error is always raised when every window fails.
    """
    S = len(samples)
    if L < 1 or L >= S:
        raise ValueError("window length must satisfy 1 <= L < S")
    blocks, failed = [], []
    for i in range(S - L):
        try:
            blocks.append(_cumulative_block(samples, z_eval, n_z, range(i, i + L + 1)))
        except (RankDeficient, DualizationFailed) as e:
            if not skip_failed:
                raise type(e)(f"window {i}: {e}") from e
            failed.append(i)
    if not blocks:
        raise DualizationFailed("all windows failed")
    return CoefficientSuperset(blocks, n_z, samples.X.shape[1], kind="window",
                               meta={"S": S, "L": L, "failed_windows": failed})


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def extremal_radius(superset: CoefficientSuperset) -> Tuple[float, np.ndarray]:
    """Upper bound on sup ||F - F_center||_Fr over a single-block superset.

    Completing the square in `A + B F + F'B' + F'C F <= 0` gives the center
    F_c = -C^{-1} B' and the shifted inequality (F-F_c)' C (F-F_c) <= R with
    R = B C^{-1} B' - A.  The Frobenius radius is bounded by the square root
    of (sum of the n_x largest eigenvalues of R) / lambda_min(C), tight when
    C is a multiple of the identity.
    """
    if superset.n_blocks != 1:
        raise ValueError("extremal_radius needs a single-block superset")
    B = superset.blocks[0]
    k = superset.n_z
    A, Bm, C = B[:k, :k], B[:k, k:], B[k:, k:]
    evC = np.linalg.eigvalsh(C)
    if evC.min() <= 0:
        raise NotAnEllipsoid("the F-quadratic part is not positive definite")
    Fc = -np.linalg.solve(C, Bm.T)
    R = Bm @ np.linalg.solve(C, Bm.T) - A
    evR = np.linalg.eigvalsh(R)
    if evR.min() < -1e-9 * max(1.0, evR.max()):
        raise NotAnEllipsoid("the completed-square residual is indefinite")
    top = np.clip(np.sort(evR)[::-1][: superset.n_x], 0.0, None)
    return float(np.sqrt(top.sum() / evC.min())), Fc


# ---------------------------------------------------------------------------
# Monte Carlo consistency experiment
# ---------------------------------------------------------------------------

def consistency_experiment(system, operation_set, signal_cfg, x0,
                           noise_kind: str, noise_eps: float,
                           S_grid: Sequence[int], kinds: Sequence[str],
                           trials: int, seed: int,
                           window_L: int = 10,
                           options: Optional[BackendOptions] = None) -> List[dict]:
    """Per (kind, S): radius statistics and the membership rate of the true F."""
    from .dataio import signal_from_config, simulate

    rows = []
    rng = np.random.default_rng(seed)
    trial_seeds = rng.integers(0, 1 << 31, size=trials)
    for S in S_grid:
        per_kind = {k: {"radii": [], "member": 0, "built": 0} for k in kinds}
        for ts in trial_seeds:
            sig = signal_from_config(signal_cfg)
            _, samples = simulate(system, x0, sig, S, noise_kind, noise_eps,
                                  seed=int(ts), operation_set=operation_set)
            for kind in kinds:
                try:
                    if kind == "pointwise":
                        sup, _ = superset_pointwise(samples, system.z_eval,
                                                    system.n_z, options=options)
                    elif kind == "cumulative":
                        sup = superset_cumulative(samples, system.z_eval, system.n_z)
                    elif kind == "window":
                        sup = superset_window(samples, system.z_eval, system.n_z,
                                              L=min(window_L, S - 1))
                    else:
                        raise ValueError(f"unknown superset kind {kind!r}")
                except (UnboundedSigma, RankDeficient, DualizationFailed):
                    continue
                per_kind[kind]["built"] += 1
                ok, _ = sup.contains(system.F)
                per_kind[kind]["member"] += int(ok)
                try:
                    if sup.n_blocks == 1:
                        r, _ = extremal_radius(sup)
                    else:
                        r = min(extremal_radius(CoefficientSuperset(
                            [b], sup.n_z, sup.n_x))[0] for b in sup.blocks)
                    per_kind[kind]["radii"].append(r)
                except NotAnEllipsoid:
                    pass
        for kind in kinds:
            d = per_kind[kind]
            radii = np.array(d["radii"]) if d["radii"] else np.array([np.nan])
            rows.append({"kind": kind, "S": S, "trials": trials,
                         "built": d["built"],
                         "membership_rate": d["member"] / max(d["built"], 1),
                         "radius_mean": float(np.nanmean(radii)),
                         "radius_max": float(np.nanmax(radii))})
    return rows
