"""State estimation and distributed averaging.

Three pieces cooperate here:

* a Kalman filter whose gain/covariance schedule is data independent, so it is
  precomputed once for the whole run:
      K[t] = S[t-1] (S[t-1] + W)^-1,   S[t] = (I - K[t]) S[t-1];
* asynchronous pairwise gossip: the two communicating agents replace their
  running averages by the pair mean and every agent adds its own state
  estimate increment, which preserves the network mean exactly;
* the expected mixing matrix V of that process together with its second
  eigenvalue, which drives the closed-form estimation error envelope used by
  the controller's confidence machinery.

The error envelope at time t is

    eps_t = lam^t sqrt(N) zeta_max
            + L1 * sum_{k=1..t} lam^{t-k} sqrt(d(k) + d(k-1) + 2 N u_max^2)
            + L2 * sqrt(d(t)),            d(t) = N^2 s v / (v + t s),

with lam the second eigenvalue of V (the three terms add; a multiplicative
variant of the first two terms is available for sensitivity checks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import Graph


class EstimationError(Exception):
    pass


@dataclass
class KalmanSchedule:
    """Precomputed gains K[1..T] and covariances S[0..T] (all N x N)."""

    gains: np.ndarray        # (T, N, N)
    covariances: np.ndarray  # (T+1, N, N)

    @property
    def horizon(self) -> int:
        return self.gains.shape[0]

    def gain(self, t: int) -> np.ndarray:
        """Gain used to produce the estimate at step t (1-based)."""
        if t < 1 or t > self.horizon:
            raise EstimationError(f"Kalman gain requested at t={t}, schedule covers 1..{self.horizon}")
        return self.gains[t - 1]


def kalman_schedule(sigma0: np.ndarray, w: np.ndarray, horizon: int) -> KalmanSchedule:
    """Run the gain/covariance recursion for ``horizon`` steps.

    Both matrices must be symmetric positive semidefinite and their sum
    invertible at every step.
    """
    s = np.atleast_2d(np.asarray(sigma0, dtype=float))
    wm = np.atleast_2d(np.asarray(w, dtype=float))
    n = s.shape[0]
    if s.shape != (n, n) or wm.shape != (n, n):
        raise EstimationError("sigma0 and w must be square matrices of equal size")
    if not np.allclose(s, s.T, atol=1e-10) or not np.allclose(wm, wm.T, atol=1e-10):
        raise EstimationError("sigma0 and w must be symmetric")
    gains = np.empty((horizon, n, n))
    covs = np.empty((horizon + 1, n, n))
    covs[0] = s
    eye = np.eye(n)
    for t in range(1, horizon + 1):
        prev = covs[t - 1]
        try:
            k = np.linalg.solve((prev + wm).T, prev.T).T
        except np.linalg.LinAlgError as exc:
            raise EstimationError(f"singular covariance update at step {t}") from exc
        gains[t - 1] = k
        covs[t] = (eye - k) @ prev
        covs[t] = 0.5 * (covs[t] + covs[t].T)  # keep symmetry against roundoff
    return KalmanSchedule(gains, covs)


def kalman_update(xhat_prev: np.ndarray, u_prev: np.ndarray, y_noisy: np.ndarray,
                  gain: np.ndarray, a_diag: np.ndarray, b_diag: np.ndarray) -> np.ndarray:
    """One filter step: prediction plus gain times the measurement innovation.

    Rows index agents, columns the workspace dimensions; ``a_diag`` and
    ``b_diag`` are the diagonal dynamics coefficients.
    """
    xhat_prev = np.asarray(xhat_prev, dtype=float)
    u_prev = np.asarray(u_prev, dtype=float)
    y_noisy = np.asarray(y_noisy, dtype=float)
    if xhat_prev.shape != u_prev.shape or xhat_prev.shape != y_noisy.shape:
        raise EstimationError("estimate, input and measurement shapes disagree")
    pred = a_diag[:, None] * xhat_prev + b_diag[:, None] * u_prev
    return pred + gain @ (y_noisy - pred)


# --- gossip -----------------------------------------------------------------


def build_gossip_probabilities(graph: Graph) -> np.ndarray:
    """Neighbour-uniform contact probabilities: P[i, l] = 1/deg(i) on edges."""
    n = graph.n
    p = np.zeros((n, n))
    for i in range(n):
        nbrs = graph.neighbors(i)
        if not nbrs:
            raise EstimationError(f"agent {i} has no neighbours")
        for l in nbrs:
            p[i, l] = 1.0 / len(nbrs)
    return p


@dataclass
class GossipMatrix:
    """Expected mixing matrix with its second eigenvalue and contact matrix."""

    v: np.ndarray
    lambda2: float
    p: np.ndarray


def jacobi_eigenvalues(matrix: np.ndarray, tol: float = 1e-10, max_sweeps: int = 64) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Deterministic row-major sweep order; returns eigenvalues sorted in
    descending order.
    """
    a = np.array(matrix, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T, atol=1e-9):
        raise EstimationError("Jacobi eigensolver needs a symmetric matrix")
    for _ in range(max_sweeps):
        off = math.sqrt(max(0.0, (a * a).sum() - (np.diag(a) ** 2).sum()))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < tol / (n * n):
                    continue
                theta = 0.5 * (a[q, q] - a[p, p]) / apq
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
    else:
        raise EstimationError("Jacobi iteration did not converge")
    return np.sort(np.diag(a))[::-1]


def expected_gossip_matrix(p: np.ndarray, graph: Graph | None = None,
                           tol: float = 1e-10) -> GossipMatrix:
    """Expected update map of the pairwise-averaging process driven by ``p``.

    One ordered contact (i, l) fires per step, i uniform and l ~ P[i, :];
    the map averages the halved pair difference:

        V = I - (1/(4N)) * sum_{i,l} P[i,l] (e_i - e_l)(e_i - e_l)^T.

    For two agents this gives V = [[3/4, 1/4], [1/4, 3/4]] with second
    eigenvalue exactly 1/2.  Doubly stochastic by construction; the second
    eigenvalue magnitude must be below one, otherwise the contact structure
    does not mix (disconnected graph).
    """
    p = np.asarray(p, dtype=float)
    n = p.shape[0]
    if p.shape != (n, n):
        raise EstimationError("P must be square")
    if np.any(p < -tol):
        raise EstimationError("P must be non-negative")
    if not np.allclose(p.sum(axis=1), 1.0, atol=1e-9):
        raise EstimationError("rows of P must sum to one")
    if graph is not None:
        adjacency = graph.adjacency()
        if np.any((p > tol) & (adjacency == 0)):
            raise EstimationError("P assigns probability to a non-edge")
    v = np.eye(n)
    for i in range(n):
        for l in range(n):
            if p[i, l] == 0.0 or i == l:
                continue
            e = np.zeros(n)
            e[i], e[l] = 1.0, -1.0
            v -= (p[i, l] / (4.0 * n)) * np.outer(e, e)
    ones = np.ones(n)
    if not (np.allclose(v @ ones, ones, atol=tol) and np.allclose(ones @ v, ones, atol=tol)):
        raise EstimationError("expected gossip matrix is not doubly stochastic")
    eigs = jacobi_eigenvalues(v, tol=tol)
    lambda2 = float(np.sort(np.abs(eigs))[-2])
    if lambda2 >= 1.0 - 1e-9:
        raise EstimationError("second eigenvalue is 1: contact graph does not mix")
    return GossipMatrix(v=v, lambda2=lambda2, p=p)


def gossip_pair_update(zeta: np.ndarray, i: int, l: int, xhat_now: np.ndarray,
                       xhat_prev: np.ndarray, graph: Graph | None = None) -> np.ndarray:
    """One asynchronous exchange: rows ``i`` and ``l`` average, everyone adds
    its own estimate increment.  Row k of ``zeta`` is agent k's running
    average estimate; ``xhat_now``/``xhat_prev`` hold each agent's own-state
    estimate (row k is agent k's value).
    """
    if i == l:
        raise EstimationError("an agent cannot gossip with itself")
    if graph is not None and l not in graph.neighbors(i):
        raise EstimationError(f"agents {i} and {l} are not neighbours")
    zeta = np.asarray(zeta, dtype=float)
    delta = np.asarray(xhat_now, dtype=float) - np.asarray(xhat_prev, dtype=float)
    out = zeta + delta
    pair_mean = 0.5 * (zeta[i] + zeta[l])
    out[i] = pair_mean + delta[i]
    out[l] = pair_mean + delta[l]
    return out


# --- error envelope ----------------------------------------------------------


@dataclass(frozen=True)
class ErrorBoundParams:
    """Inputs of the estimation error envelope.

    ``lam`` is the second eigenvalue of the expected gossip matrix; ``l1`` and
    ``l2`` are Lipschitz constants of the averaging pipeline; ``zeta_max``
    bounds the initial spread of the running averages, ``s_max`` the initial
    squared estimate error, ``v_max`` the per-coordinate noise variance and
    ``u_max`` the input magnitude.
    """

    lam: float
    l1: float
    l2: float
    zeta_max: float
    s_max: float
    v_max: float
    u_max: float
    n_agents: int

    def __post_init__(self):
        if not (0.0 <= self.lam < 1.0):
            raise EstimationError("lambda must lie in [0, 1)")
        for name in ("l1", "l2", "zeta_max", "s_max", "v_max", "u_max"):
            if getattr(self, name) < 0:
                raise EstimationError(f"{name} must be non-negative")
        if self.n_agents < 1:
            raise EstimationError("need at least one agent")


def delta_max(t: int, n_agents: int, s_max: float, v_max: float) -> float:
    """Worst-case squared estimation error envelope N^2 s v / (v + t s)."""
    if s_max <= 0 or v_max <= 0:
        raise EstimationError("s_max and v_max must be positive")
    return n_agents * n_agents * s_max * v_max / (v_max + t * s_max)


def error_bound(t: int, params: ErrorBoundParams, reading: str = "additive") -> float:
    """Estimation error envelope eps_t at time step t.

    ``reading`` selects how the spread term and the accumulation sum combine:
    ``additive`` (default) adds them, ``multiplicative`` multiplies them (a
    variant kept for sensitivity analysis of the formula's grouping).
    """
    if reading not in ("additive", "multiplicative"):
        raise EstimationError(f"unknown reading {reading!r}")
    n = params.n_agents
    lam = params.lam
    spread = (lam ** t) * math.sqrt(n) * params.zeta_max
    acc = 0.0
    for k in range(1, t + 1):
        rad = (delta_max(k, n, params.s_max, params.v_max)
               + delta_max(k - 1, n, params.s_max, params.v_max)
               + 2.0 * n * params.u_max ** 2)
        acc += (lam ** (t - k)) * math.sqrt(rad)
    tail = params.l2 * math.sqrt(delta_max(t, n, params.s_max, params.v_max))
    if reading == "additive":
        return spread + params.l1 * acc + tail
    return spread * params.l1 * acc + tail


def error_bound_schedule(horizon: int, params: ErrorBoundParams,
                         reading: str = "additive") -> np.ndarray:
    """Vector of eps_t for t = 0..horizon (inclusive)."""
    n = params.n_agents
    lam = params.lam
    d = np.array([delta_max(t, n, params.s_max, params.v_max) for t in range(horizon + 1)])
    rad = np.sqrt(d[1:] + d[:-1] + 2.0 * n * params.u_max ** 2)
    out = np.empty(horizon + 1)
    acc = 0.0
    for t in range(horizon + 1):
        if t > 0:
            acc = lam * acc + rad[t - 1]
        spread = (lam ** t) * math.sqrt(n) * params.zeta_max
        tail = params.l2 * math.sqrt(d[t])
        if reading == "additive":
            out[t] = spread + params.l1 * acc + tail
        else:
            out[t] = spread * params.l1 * acc + tail
    return out
