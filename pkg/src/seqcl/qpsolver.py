"""Projection of a gradient onto ``{z : G z >= gamma}``.

Solves ``min_z 0.5 * ||g - z||^2  s.t.  G z >= gamma`` through its dual

    min_v 0.5 v^T (G G^T) v + v^T (G g - gamma)   s.t. v >= 0,

and recovers ``z = g + G^T v``.  The dual has one variable per constraint
(one per past step), so it is tiny and box constrained.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAX_ITER = 100_000
TOL = 1e-8


@dataclass
class QPInstance:
    g: np.ndarray
    G: np.ndarray
    gamma: float = 0.0

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=np.float64).reshape(-1)
        self.G = np.asarray(self.G, dtype=np.float64)
        if self.G.ndim == 1:
            self.G = self.G.reshape(1, -1)
        if self.G.size == 0:
            self.G = np.zeros((0, self.g.size))
        if self.G.shape[1] != self.g.size:
            raise ValueError(f"G has {self.G.shape[1]} columns but g has {self.g.size} entries")
        self.gamma = float(self.gamma)
        if not (np.all(np.isfinite(self.g)) and np.all(np.isfinite(self.G)) and np.isfinite(self.gamma)):
            raise ValueError("QP instance contains non-finite entries")

    def objective(self, z: np.ndarray) -> float:
        d = self.g - z
        return 0.5 * float(d @ d)


@dataclass
class QPSolution:
    z: np.ndarray
    v: np.ndarray
    status: str  # "optimal" | "fallback"
    iterations: int = 0
    kkt_residual: float = 0.0
    notes: list[str] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "optimal"


def _residuals(inst: QPInstance, z: np.ndarray, v: np.ndarray) -> tuple[float, float, float, float]:
    slack = inst.G @ z - inst.gamma if inst.G.shape[0] else np.zeros(0)
    scale = max(1.0, np.abs(inst.g).max(initial=0.0), np.abs(z).max(initial=0.0), abs(inst.gamma),
                np.abs(slack).max(initial=0.0))
    vscale = max(1.0, np.abs(v).max(initial=0.0))
    primal = max(0.0, float((-slack).max(initial=0.0))) / scale
    dual = max(0.0, float((-v).max(initial=0.0))) / vscale
    stat = float(np.abs(z - inst.g - inst.G.T @ v).max(initial=0.0)) / (scale * vscale)
    comp = float(np.abs(v * slack).max(initial=0.0)) / (scale * vscale)
    return primal, dual, stat, comp


def verify_kkt(inst: QPInstance, sol: QPSolution) -> float:
    """Largest relative KKT violation: primal, dual, stationarity, complementarity."""
    return max(_residuals(inst, sol.z, sol.v))


def _polish(Q: np.ndarray, c: np.ndarray, max_rounds: int = 100) -> np.ndarray | None:
    """Exact dual solution by a Lawson-Hanson style active-set sweep; ``None`` if it stalls.

    The dual has at most a handful of variables, so each round is one tiny
    least-squares solve.  Used to finish off the projected-gradient iterate.
    """
    m = c.size
    v = np.zeros(m)
    P = np.zeros(m, dtype=bool)
    wtol = 1e-14 * max(1.0, float(np.abs(c).max()), float(np.abs(Q).max()))
    for _ in range(max_rounds):
        w = -(Q @ v + c)
        cand = np.where(P, -np.inf, w)
        if P.all() or cand.max() <= wtol:
            return v
        P[int(cand.argmax())] = True
        for _ in range(m + 1):
            s = np.zeros(m)
            idx = np.flatnonzero(P)
            s[idx] = np.linalg.lstsq(Q[np.ix_(idx, idx)], -c[idx], rcond=None)[0]
            if np.all(s[idx] > 0):
                v = s
                break
            neg = idx[s[idx] <= 0]
            alpha = float(np.min(v[neg] / (v[neg] - s[neg])))
            v = v + alpha * (s - v)
            P &= v > 0
            v[~P] = 0.0
            if not P.any():
                break
        else:
            return None
    return None


def _infeasible(Qs: np.ndarray, gamma: float, tol: float = 1e-9) -> bool:
    """Farkas check: some u >= 0, sum(u) = 1 with G^T u = 0 rules out G z >= gamma > 0.

    Solved as the penalized problem min |G^T u|^2 / 2 + (1^T u - 1)^2 / 2 over u >= 0
    (rows already scaled to unit norm, so ``tol`` is an absolute cosine-level threshold).
    """
    if gamma <= 0:
        return False  # z = 0 is feasible
    m = Qs.shape[0]
    u = _polish(Qs + np.ones((m, m)), -np.ones(m))
    if u is None or u.sum() <= 0:
        return False
    return float(np.sqrt(max(u @ Qs @ u, 0.0))) <= tol * u.sum()


def solve(inst: QPInstance, max_iter: int = MAX_ITER, tol: float = TOL) -> QPSolution:
    """Dual projected gradient with exact line search, in Jacobi-scaled dual variables.

    Every few iterations an active-set polish is tried; whichever of the
    polished point and the plain iterate has the smaller KKT residual is kept.
    """
    g, G, gamma = inst.g, inst.G, inst.gamma
    m = G.shape[0]
    v_full = np.zeros(m)
    if m == 0:
        return QPSolution(g.copy(), v_full, "optimal")

    norms = np.linalg.norm(G, axis=1)
    degenerate = norms == 0
    if np.any(degenerate & (gamma > 0)):
        # a zero row cannot reach a positive margin: infeasible
        sol = QPSolution(g.copy(), v_full, "fallback", notes=["zero constraint row with positive margin"])
        sol.kkt_residual = verify_kkt(inst, sol)
        return sol
    keep = ~degenerate
    Gk = G[keep]
    c = Gk @ g - gamma
    if np.all(c >= 0):
        sol = QPSolution(g.copy(), v_full, "optimal")
        sol.kkt_residual = verify_kkt(inst, sol)
        return sol

    Q = Gk @ Gk.T
    # u = d * v turns diag(Q) into ones; the orthant v >= 0 is unchanged
    d = np.sqrt(np.diag(Q))
    Qs = Q / np.outer(d, d)
    cs = c / d
    if _infeasible(Qs, gamma):
        sol = QPSolution(g.copy(), v_full, "fallback", notes=["constraints cannot all reach the margin"])
        sol.kkt_residual = verify_kkt(inst, sol)
        return sol
    lip = max(float(np.linalg.eigvalsh(Qs).max()), 1e-300)
    u = np.zeros(Gk.shape[0])
    best_v, best_res = u.copy(), np.inf

    def consider(v):
        nonlocal best_v, best_res
        v_full[keep] = v
        res = max(_residuals(inst, g + G.T @ v_full, v_full))
        if res < best_res:
            best_res, best_v = res, v.copy()

    it = 0
    for it in range(1, max_iter + 1):
        grad = Qs @ u + cs
        step_dir = np.maximum(u - grad / lip, 0.0) - u
        curv = float(step_dir @ Qs @ step_dir)
        slope = float(grad @ step_dir)
        if curv > 0:
            step = min(1.0, max(0.0, -slope / curv))
        else:
            step = 1.0 if slope < 0 else 0.0
        u = np.maximum(u + step * step_dir, 0.0)
        if it % 5 == 1 or step == 0.0:
            polished = _polish(Qs, cs)
            if polished is not None:
                consider(polished / d)
            consider(u / d)
            if best_res < tol:
                break
    v_full[keep] = best_v
    z = g + G.T @ v_full
    status = "optimal" if best_res < tol else "fallback"
    sol = QPSolution(z, v_full.copy(), status, iterations=it, kkt_residual=best_res)
    if status == "fallback":
        log.warning("QP solver stopped after %d iterations with KKT residual %.3g", it, best_res)
    return sol


# -- debug dumps ------------------------------------------------------------

def _fmt(values) -> str:
    return " ".join(repr(float(x)) for x in np.ravel(values))


def write_dump(path, inst: QPInstance, sol: QPSolution | None = None) -> None:
    lines = ["# seqcl qp dump v1", f"gamma {inst.gamma!r}", f"g {_fmt(inst.g)}",
             f"G {inst.G.shape[0]} {inst.G.shape[1]}"]
    lines += [_fmt(row) for row in inst.G]
    if sol is not None:
        lines += [f"z {_fmt(sol.z)}", f"v {_fmt(sol.v)}", f"status {sol.status}",
                  f"iterations {int(sol.iterations)}", f"kkt_residual {float(sol.kkt_residual)!r}"]
    Path(path).write_text("\n".join(lines) + "\n")


def read_dump(path) -> tuple[QPInstance, QPSolution | None]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# seqcl qp dump"):
        raise ValueError(f"{path}: not a qp dump")
    fields: dict[str, str] = {}
    rows: list[list[float]] = []
    i = 1
    while i < len(lines):
        key, _, rest = lines[i].partition(" ")
        if key == "G":
            m, n = (int(x) for x in rest.split())
            rows = [[float(x) for x in lines[i + 1 + r].split()] for r in range(m)]
            G = np.array(rows).reshape(m, n)
            i += m + 1
            continue
        fields[key] = rest
        i += 1
    parse = lambda s: np.array([float(x) for x in s.split()])  # noqa: E731
    inst = QPInstance(parse(fields["g"]), G, float(fields["gamma"]))
    sol = None
    if "z" in fields:
        sol = QPSolution(parse(fields["z"]), parse(fields.get("v", "")), fields.get("status", "optimal"),
                         int(fields.get("iterations", 0)), float(fields.get("kkt_residual", 0.0)))
    return inst, sol
