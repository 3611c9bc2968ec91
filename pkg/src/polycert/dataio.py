"""Ground-truth simulation, sample-set handling, noise bounds, empirical oracles.

The sample model is x+_i = f(x_i, u_i) + d_i with d_i drawn inside the
declared quadratic bound, states propagated through the perturbed value, so
recorded triples satisfy the bound exactly and the true coefficients are
always consistent with the data.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .poly import Monomial, Polynomial, monomial_basis


class IllConditionedNoise(ValueError):
    pass


# ---------------------------------------------------------------------------
# Systems and operation sets
# ---------------------------------------------------------------------------

@dataclass
class PolySystem:
    """x+ = F z(x,u), y = H z(x,u) with known monomial vector z."""

    F: np.ndarray
    H: np.ndarray
    z: List[Monomial]
    states: Tuple[str, ...]
    inputs: Tuple[str, ...]

    def __post_init__(self):
        self.F = np.atleast_2d(np.asarray(self.F, dtype=float))
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        if self.F.shape[1] != len(self.z) or self.H.shape[1] != len(self.z):
            raise ValueError("F/H column count must match len(z)")
        nv = len(self.states) + len(self.inputs)
        if any(len(m.exps) != nv for m in self.z):
            raise ValueError("z exponent length must equal n_x + n_u")
        # x = 0 must be an equilibrium: constant column of F is zero
        for k, m in enumerate(self.z):
            if m.degree == 0 and np.any(self.F[:, k] != 0.0):
                raise ValueError("f(0,0) != 0: constant monomial column of F is nonzero")

    @property
    def n_x(self) -> int:
        return self.F.shape[0]

    @property
    def n_u(self) -> int:
        return len(self.inputs)

    @property
    def n_y(self) -> int:
        return self.H.shape[0]

    @property
    def n_z(self) -> int:
        return len(self.z)

    @property
    def variables(self) -> Tuple[str, ...]:
        return tuple(self.states) + tuple(self.inputs)

    def z_eval(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        v = np.concatenate([np.atleast_1d(x), np.atleast_1d(u)])
        return np.array([m.eval(v) for m in self.z])

    def f_eval(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.F @ self.z_eval(x, u)

    def h_eval(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.H @ self.z_eval(x, u)

    def selectors(self) -> Tuple[np.ndarray, np.ndarray]:
        """T_x, T_u with x = T_x z and u = T_u z; error if z misses an entry."""
        nv = len(self.variables)
        T_x = np.zeros((self.n_x, self.n_z))
        T_u = np.zeros((self.n_u, self.n_z))
        index = {m.exps: k for k, m in enumerate(self.z)}
        for i in range(self.n_x):
            e = [0] * nv
            e[i] = 1
            if tuple(e) not in index:
                raise ValueError(f"z must contain state monomial {self.states[i]}")
            T_x[i, index[tuple(e)]] = 1.0
        for j in range(self.n_u):
            e = [0] * nv
            e[len(self.states) + j] = 1
            if tuple(e) not in index:
                raise ValueError(f"z must contain input monomial {self.inputs[j]}")
            T_u[j, index[tuple(e)]] = 1.0
        return T_x, T_u

    @classmethod
    def from_strings(cls, f_rows: Sequence[str], h_rows: Sequence[str],
                     z_monomials: Sequence[str], states: Sequence[str],
                     inputs: Sequence[str]) -> "PolySystem":
        variables = tuple(states) + tuple(inputs)
        z = []
        for s in z_monomials:
            p = Polynomial.parse(s, variables)
            if len(p.terms) != 1 or abs(next(iter(p.terms.values())) - 1.0) > 0:
                raise ValueError(f"z entry {s!r} must be a plain monomial")
            z.append(Monomial(next(iter(p.terms.keys()))))
        index = {m.exps: k for k, m in enumerate(z)}

        def rows_to_matrix(rows):
            M = np.zeros((len(rows), len(z)))
            for i, s in enumerate(rows):
                p = Polynomial.parse(s, variables)
                for t, c in p.terms.items():
                    if t not in index:
                        raise ValueError(f"monomial {Monomial(t)} of row {s!r} not in z")
                    M[i, index[t]] = c
            return M

        return cls(rows_to_matrix(f_rows), rows_to_matrix(h_rows), z,
                   tuple(states), tuple(inputs))


@dataclass
class OperationSet:
    """Semialgebraic operating region {(x,u): p_i(x,u) <= 0}."""

    constraints: List[Polynomial]

    def __post_init__(self):
        for p in self.constraints:
            nv = len(p.variables)
            if p(np.zeros(nv)) > 0:
                raise ValueError(f"origin violates constraint {p}")

    def contains(self, x: np.ndarray, u: np.ndarray, tol: float = 1e-9) -> bool:
        v = np.concatenate([np.atleast_1d(x), np.atleast_1d(u)])
        return all(p(v) <= tol for p in self.constraints)

    @classmethod
    def from_strings(cls, exprs: Sequence[str], states: Sequence[str],
                     inputs: Sequence[str]) -> "OperationSet":
        variables = tuple(states) + tuple(inputs)
        return cls([Polynomial.parse(s, variables) for s in exprs])


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------

@dataclass
class NoiseModel:
    """Per-sample quadratic bounds [1; d]' Theta_i [1; d] <= 0.

    Theta_i = [[t1_i, t2_i], [t2_i', t3_i]] with t3_i positive definite and
    Theta_i invertible (checked on use).  kind is one of amplitude / snr /
    explicit; eps records the generating parameter for reproducibility.
    """

    kind: str
    eps: float
    t1: List[float]
    t2: List[np.ndarray]
    t3: List[np.ndarray]
    degenerate: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.t1)

    def block(self, i: int) -> np.ndarray:
        t2 = np.atleast_2d(self.t2[i])
        return np.block([[np.array([[self.t1[i]]]), t2], [t2.T, self.t3[i]]])

    def inverse_blocks(self, cond_gate: float = 1e12):
        """(D1_i scalar, D2_i 1 x n_x, D3_i) blocks of Theta_i^{-1}."""
        out = []
        for i in range(len(self)):
            B = self.block(i)
            if np.linalg.cond(B) > cond_gate:
                raise IllConditionedNoise(f"noise bound {i} condition number exceeds {cond_gate:g}")
            Q = np.linalg.inv(B)
            out.append((Q[0, 0], Q[0:1, 1:], Q[1:, 1:]))
        return out


def noise_bounds(kind: str, eps: float, samples: Optional["SampleSet"] = None,
                 n_x: Optional[int] = None, count: Optional[int] = None) -> NoiseModel:
    """amplitude: d'd <= eps^2; snr: d'd <= eps^2 x_i'x_i (needs samples)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if kind == "amplitude":
        if count is None or n_x is None:
            if samples is None:
                raise ValueError("amplitude bound needs n_x and count (or samples)")
            n_x, count = samples.X.shape[1], len(samples)
        t1 = [-eps ** 2] * count
        return NoiseModel(kind, eps, t1, [np.zeros((1, n_x))] * count,
                          [np.eye(n_x)] * count)
    if kind == "snr":
        if samples is None:
            raise ValueError("snr bound needs samples for the measured states")
        n_x = samples.X.shape[1]
        t1, degenerate = [], []
        for i, x in enumerate(samples.X):
            v = -eps ** 2 * float(x @ x)
            if v == 0.0:
                degenerate.append(i)
            t1.append(v)
        return NoiseModel(kind, eps, t1, [np.zeros((1, n_x))] * len(t1),
                          [np.eye(n_x)] * len(t1), degenerate)
    raise ValueError(f"unknown noise kind {kind!r}")


def _draw_in_bound(rng: np.random.Generator, t1: float, t2: np.ndarray,
                   t3: np.ndarray) -> np.ndarray:
    """Volume-uniform draw from {d: t1 + 2 t2 d + d' t3 d <= 0}, rejection-checked."""
    n = t3.shape[0]
    c = -np.linalg.solve(t3, t2.reshape(-1))
    rho2 = float(t2.reshape(-1) @ np.linalg.solve(t3, t2.reshape(-1)) - t1)
    if rho2 <= 0:
        return c
    L = np.linalg.cholesky(np.linalg.inv(t3))
    for _ in range(1000):
        v = rng.normal(size=n)
        v /= max(np.linalg.norm(v), 1e-300)
        r = rng.random() ** (1.0 / n)
        d = c + np.sqrt(rho2) * (L @ v) * r
        if t1 + 2 * float(t2 @ d) + float(d @ t3 @ d) <= 0:
            return d
    return c


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------

@dataclass
class SampleSet:
    """Measured triples (x+_i, x_i, u_i) with the attached noise bound."""

    X: np.ndarray
    U: np.ndarray
    Xp: np.ndarray
    noise: Optional[NoiseModel] = None
    seed: Optional[int] = None
    input_desc: str = ""
    outside_operation_set: bool = False

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.U = np.atleast_2d(np.asarray(self.U, dtype=float))
        self.Xp = np.atleast_2d(np.asarray(self.Xp, dtype=float))
        if not (len(self.X) == len(self.U) == len(self.Xp)):
            raise ValueError("inconsistent sample counts")
        if self.X.shape[1] != self.Xp.shape[1]:
            raise ValueError("state dimension mismatch")

    def __len__(self) -> int:
        return len(self.X)

    def prefix(self, S: int) -> "SampleSet":
        noise = None
        if self.noise is not None:
            noise = NoiseModel(self.noise.kind, self.noise.eps,
                               self.noise.t1[:S], self.noise.t2[:S], self.noise.t3[:S],
                               [i for i in self.noise.degenerate if i < S])
        return SampleSet(self.X[:S], self.U[:S], self.Xp[:S], noise,
                         self.seed, self.input_desc, self.outside_operation_set)

    def save_csv(self, path: str):
        n_x, n_u = self.X.shape[1], self.U.shape[1]
        header = (["t"] + [f"x{i+1}" for i in range(n_x)]
                  + [f"u{j+1}" for j in range(n_u)]
                  + [f"xplus{i+1}" for i in range(n_x)])
        tmp = path + ".tmp"
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t in range(len(self)):
                w.writerow([t] + [f"{v:.17g}" for v in self.X[t]]
                           + [f"{v:.17g}" for v in self.U[t]]
                           + [f"{v:.17g}" for v in self.Xp[t]])
        os.replace(tmp, path)
        side = {"seed": self.seed, "input": self.input_desc,
                "outside_operation_set": bool(self.outside_operation_set)}
        if self.noise is not None:
            side["noise"] = {"kind": self.noise.kind, "eps": float(self.noise.eps)}
        tmp = path + ".yaml.tmp"
        with open(tmp, "w") as fh:
            yaml.safe_dump(side, fh)
        os.replace(tmp, path + ".yaml")

    @classmethod
    def load_csv(cls, path: str) -> "SampleSet":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        n_x = sum(1 for h in header if h.startswith("x") and not h.startswith("xplus"))
        n_u = sum(1 for h in header if h.startswith("u"))
        data = np.array([[float(v) for v in row] for row in body])
        X = data[:, 1:1 + n_x]
        U = data[:, 1 + n_x:1 + n_x + n_u]
        Xp = data[:, 1 + n_x + n_u:1 + 2 * n_x + n_u]
        ss = cls(X, U, Xp)
        side_path = path + ".yaml"
        if os.path.exists(side_path):
            with open(side_path) as fh:
                side = yaml.safe_load(fh) or {}
            ss.seed = side.get("seed")
            ss.input_desc = side.get("input", "")
            ss.outside_operation_set = bool(side.get("outside_operation_set", False))
            noise = side.get("noise")
            if noise:
                ss.noise = noise_bounds(noise["kind"], noise["eps"], samples=ss,
                                        n_x=n_x, count=len(ss))
        return ss


# ---------------------------------------------------------------------------
# Input signals
# ---------------------------------------------------------------------------

@dataclass
class SineChirp:
    """u(t) = amplitude * sin(quad * t^2 + lin * t)."""
    amplitude: float
    quad: float
    lin: float

    def __call__(self, t: int) -> float:
        return self.amplitude * np.sin(self.quad * t * t + self.lin * t)

    def describe(self) -> str:
        return f"sine_chirp(a={self.amplitude}, b={self.quad}, c={self.lin})"


@dataclass
class Constant:
    value: float

    def __call__(self, t: int) -> float:
        return self.value

    def describe(self) -> str:
        return f"constant({self.value})"


@dataclass
class Prbs:
    """Pseudo-random binary signal +-amplitude, holding each level `period` steps."""
    amplitude: float
    period: int = 1
    seed: int = 0

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)
        self._levels = {}

    def __call__(self, t: int) -> float:
        k = t // self.period
        if k not in self._levels:
            self._levels[k] = self.amplitude * (1.0 if self._rng.random() < 0.5 else -1.0)
        return self._levels[k]

    def describe(self) -> str:
        return f"prbs(a={self.amplitude}, period={self.period}, seed={self.seed})"


@dataclass
class SumSignal:
    parts: List

    def __call__(self, t: int) -> float:
        return sum(p(t) for p in self.parts)

    def describe(self) -> str:
        return "sum(" + ", ".join(p.describe() for p in self.parts) + ")"


def signal_from_config(cfg) -> object:
    if isinstance(cfg, (int, float)):
        return Constant(float(cfg))
    kind = cfg["kind"]
    if kind == "sine_chirp":
        return SineChirp(cfg["amplitude"], cfg["quad"], cfg["lin"])
    if kind == "constant":
        return Constant(cfg["value"])
    if kind == "prbs":
        return Prbs(cfg["amplitude"], cfg.get("period", 1), cfg.get("seed", 0))
    if kind == "sum":
        return SumSignal([signal_from_config(c) for c in cfg["parts"]])
    raise ValueError(f"unknown signal kind {kind!r}")


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def simulate(system: PolySystem, x0: Sequence[float], signal, horizon: int,
             noise_kind: Optional[str] = None, noise_eps: float = 0.0,
             seed: Optional[int] = None,
             operation_set: Optional[OperationSet] = None) -> Tuple[np.ndarray, SampleSet]:
    """Iterate the dynamics, recording (x+, x, u) triples.

    With noise, each step draws d_i inside its quadratic bound (seeded,
    rejection-checked) and the trajectory continues from the perturbed state,
    so the recorded data is exactly one noisy trajectory.  Leaving the
    operation set only sets a warning flag; the data stays valid.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x0, dtype=float).copy()
    X, U, Xp = [], [], []
    outside = False
    for t in range(horizon):
        u = np.atleast_1d(signal(t)).astype(float)
        if operation_set is not None and not operation_set.contains(x, u):
            outside = True
        xn = system.f_eval(x, u)
        if noise_kind is not None and noise_eps > 0:
            if noise_kind == "amplitude":
                t1, t2, t3 = -noise_eps ** 2, np.zeros((1, system.n_x)), np.eye(system.n_x)
            elif noise_kind == "snr":
                t1, t2, t3 = -noise_eps ** 2 * float(x @ x), np.zeros((1, system.n_x)), np.eye(system.n_x)
            else:
                raise ValueError(f"unknown noise kind {noise_kind!r}")
            d = _draw_in_bound(rng, t1, t2, t3)
            xn = xn + d
        X.append(x.copy())
        U.append(u.copy())
        Xp.append(xn.copy())
        x = xn
    traj = np.vstack(X + [x])
    ss = SampleSet(np.array(X), np.array(U), np.array(Xp), None, seed,
                   getattr(signal, "describe", lambda: "custom")(), outside)
    if noise_kind is not None and noise_eps > 0:
        ss.noise = noise_bounds(noise_kind, noise_eps, samples=ss,
                                n_x=system.n_x, count=len(ss))
        # every draw must satisfy its recorded bound
        for i in range(len(ss)):
            d = ss.Xp[i] - system.f_eval(ss.X[i], ss.U[i])
            slack = -(ss.noise.t1[i] + float(d @ d))
            if slack < -1e-12 * max(1.0, abs(ss.noise.t1[i])):
                raise AssertionError("generated noise violates its bound")
    return traj, ss


# ---------------------------------------------------------------------------
# Empirical gain search
# ---------------------------------------------------------------------------

def default_signal_pool(amplitude: float, count: int, seed: int = 0) -> List:
    """Chirps, constants, and PRBS covering slow to fast excitation."""
    rng = np.random.default_rng(seed)
    pool: List = [Constant(amplitude), Constant(-amplitude)]
    while len(pool) < count:
        kind = rng.integers(0, 3)
        a = amplitude * (0.3 + 0.7 * rng.random())
        if kind == 0:
            pool.append(SineChirp(a, 0.01 * rng.random(), 2 * np.pi * rng.random()))
        elif kind == 1:
            pool.append(Prbs(a, period=int(rng.integers(1, 12)), seed=int(rng.integers(1 << 30))))
        else:
            pool.append(Constant(a * (1 if rng.random() < 0.5 else -1)))
    return pool[:count]


def empirical_gain_lower_bound(system: PolySystem, pool: Sequence, horizon: int,
                               channel: str = "output",
                               linear_model=None,
                               operation_set: Optional[OperationSet] = None) -> float:
    """max over the pool and truncation times of ||out||_2 / ||in||_2.

    Valid lower bound on the true gain of the chosen channel; inputs whose
    trajectory leaves the operation set are discarded.
    """
    best = 0.0
    admissible = 0
    for sig in pool:
        x = np.zeros(system.n_x)
        xg = None if linear_model is None else np.zeros(linear_model.A.shape[0])
        nu, nout = 0.0, 0.0
        ok = True
        for t in range(horizon):
            u = np.atleast_1d(sig(t)).astype(float)
            if operation_set is not None and not operation_set.contains(x, u):
                ok = False
                break
            y = system.h_eval(x, u) if channel == "output" else x.copy()
            if linear_model is not None:
                yg = linear_model.C @ xg + linear_model.D @ u
                out = y - yg
                xg = linear_model.A @ xg + linear_model.B @ u
            else:
                out = y
            nu += float(u @ u)
            nout += float(out @ out)
            if nu > 0:
                best = max(best, np.sqrt(nout / nu))
            x = system.f_eval(x, u)
        if ok:
            admissible += 1
    if admissible == 0:
        raise ValueError("no admissible input in the pool")
    return best
