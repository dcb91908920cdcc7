"""Entropic optimal transport between token sequences.

The solver works on the dual potentials in the log domain, so it stays
stable down to very small regularization (``epsilon`` ~ 1e-3 with costs in
[0, 2]). Marginals are uniform over the valid tokens of each side.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .sequences import TokenSequence

DEFAULT_EPSILON = 0.1
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 500
# anneal epsilon from the cost spread when spread / epsilon exceeds this
SCALING_RATIO = 100.0


@dataclass(frozen=True, eq=False)
class CostMatrix:
    """Ground costs between the valid tokens of two sequences.

    ``row_index``/``col_index`` map each row/column back to the token
    position inside the originating sequence.
    """

    values: np.ndarray
    row_index: np.ndarray | None = None
    col_index: np.ndarray | None = None

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or 0 in values.shape:
            raise ValueError(f"cost matrix must be a nonempty 2-D array, got shape {values.shape}")
        object.__setattr__(self, "values", values)
        if self.row_index is None:
            object.__setattr__(self, "row_index", np.arange(values.shape[0]))
        if self.col_index is None:
            object.__setattr__(self, "col_index", np.arange(values.shape[1]))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def T(self) -> CostMatrix:
        return CostMatrix(self.values.T.copy(), self.col_index, self.row_index)


@dataclass(frozen=True, eq=False)
class TransportPlan:
    values: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray

    def marginal_violation(self) -> float:
        """L-infinity distance between the plan's sums and its target marginals."""
        return float(
            max(
                np.abs(self.values.sum(axis=1) - self.row_marginal).max(),
                np.abs(self.values.sum(axis=0) - self.col_marginal).max(),
            )
        )


@dataclass(frozen=True, eq=False)
class SinkhornResult:
    plan: TransportPlan
    transport_cost: float
    entropy_term: float
    objective: float
    iterations: int
    converged: bool
    epsilon: float
    marginal_error: float


def _xlogx_sum(z: np.ndarray) -> float:
    pos = z > 0
    return float(np.sum(z[pos] * np.log(z[pos])))


def cosine_cost(a: TokenSequence, b: TokenSequence) -> CostMatrix:
    """Cosine distance ``1 - cos(u_i, v_j)`` between valid tokens of ``a`` and ``b``."""
    if a.dim != b.dim:
        raise ValueError(f"embedding dims differ: {a.dim} vs {b.dim}")
    rows = np.flatnonzero(a.mask)
    cols = np.flatnonzero(b.mask)
    u = a.embeddings[rows]
    v = b.embeddings[cols]
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    for name, norms, idx in (("a", nu, rows), ("b", nv, cols)):
        bad = np.flatnonzero(norms <= 0.0)
        if bad.size:
            raise ValueError(f"zero-norm valid token in sequence {name} at index {int(idx[bad[0]])}")
    cos = (u @ v.T) / np.outer(nu, nv)
    values = np.clip(1.0 - cos, 0.0, 2.0)
    return CostMatrix(values, rows, cols)


def _lse_rows(x: np.ndarray) -> np.ndarray:
    mx = x.max(axis=1)
    return mx + np.log(np.exp(x - mx[:, None]).sum(axis=1))


def _newton_polish(
    C: np.ndarray, epsilon: float, f: np.ndarray, g: np.ndarray, a: np.ndarray, b: np.ndarray,
    tol: float, max_steps: int,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Damped Newton steps on the dual potentials until both marginals are within ``tol``.

    The last column potential is pinned to remove the constant-shift
    degeneracy; each step is halved until the marginal error decreases.
    """
    n, m = C.shape

    def residual(f, g):
        P = np.exp((f[:, None] + g[None, :] - C) / epsilon)
        r, c = P.sum(axis=1), P.sum(axis=0)
        return P, r, c, max(np.abs(r - a).max(), np.abs(c - b).max())

    P, r, c, err = residual(f, g)
    steps = 0
    while err >= tol and steps < max_steps:
        steps += 1
        J = np.block([[np.diag(r), P], [P.T, np.diag(c)]])[: n + m - 1, : n + m - 1]
        rhs = epsilon * np.concatenate([a - r, b - c])[: n + m - 1]
        try:
            delta = np.linalg.solve(J, rhs)
        except np.linalg.LinAlgError:
            break
        df, dg = delta[:n], np.append(delta[n:], 0.0)
        t = 1.0
        while t > 1e-4:
            cand = residual(f + t * df, g + t * dg)
            if cand[3] < err:
                f, g = f + t * df, g + t * dg
                P, r, c, err = cand
                break
            t *= 0.5
        else:
            break
    return f, g, steps


def sinkhorn_solve(
    cost: CostMatrix,
    epsilon: float = DEFAULT_EPSILON,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    polish: bool = False,
) -> SinkhornResult:
    """Solve entropic OT with uniform marginals by log-domain Sinkhorn.

    Each sweep updates the row potential then the column potential, so
    column sums are exact after every sweep and convergence is judged on the
    L-infinity error of the row sums. For small ``epsilon`` the potentials
    are warm-started by annealing epsilon down from a coarser value; the
    sweeps of every stage count towards ``max_iter``.

    Args:
        cost: ground cost matrix.
        epsilon: entropic regularization weight, > 0.
        max_iter: maximum number of full sweeps.
        tol: stop once the marginal violation falls below this value.
        polish: if the sweeps run out before ``tol`` is met, finish with up
            to 50 Newton steps on the dual potentials.

    Returns:
        The result; ``converged`` is False when ``max_iter`` ran out first.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    C = cost.values
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix contains non-finite values")
    n, m = C.shape
    a = np.full(n, 1.0 / n)
    b = np.full(m, 1.0 / m)
    log_a = np.log(a)
    log_b = np.log(b)
    # Warm-start through a geometric epsilon schedule when the cost range is
    # large relative to epsilon; plain sweeps converge sublinearly there.
    spread = float(C.max() - C.min())
    eps_k = spread if spread > SCALING_RATIO * epsilon else epsilon
    f = np.zeros(n)
    g = np.zeros(m)
    it = 0
    converged = False
    P = np.full_like(C, 1.0 / (n * m))
    while True:
        final = eps_k <= epsilon
        stage_tol = tol if final else max(tol, 1e-3 * eps_k)
        Ce = C / eps_k
        while it < max_iter:
            it += 1
            f = eps_k * (log_a - _lse_rows(g[None, :] / eps_k - Ce))
            g = eps_k * (log_b - _lse_rows((f[:, None] / eps_k - Ce).T))
            P = np.exp((f[:, None] + g[None, :]) / eps_k - Ce)
            err = float(np.abs(P.sum(axis=1) - a).max())
            if err < stage_tol:
                converged = final
                break
        if final or it >= max_iter:
            break
        eps_k = max(epsilon, eps_k * 0.5)
    if polish and not converged and eps_k <= epsilon:
        f, g, steps = _newton_polish(C, epsilon, f, g, a, b, tol, 50)
        it += steps
        P = np.exp((f[:, None] + g[None, :] - C) / epsilon)
        converged = TransportPlan(P, a, b).marginal_violation() < tol
    plan = TransportPlan(P, a, b)
    transport = float(np.sum(P * C))
    entropy = epsilon * _xlogx_sum(P)
    return SinkhornResult(
        plan=plan,
        transport_cost=transport,
        entropy_term=entropy,
        objective=transport + entropy,
        iterations=it,
        converged=converged,
        epsilon=float(epsilon),
        marginal_error=plan.marginal_violation(),
    )


def ot_objective(result: SinkhornResult | np.ndarray, cost: CostMatrix, epsilon: float | None = None) -> float:
    """Evaluate ``sum Z*C + epsilon * sum Z log Z`` with ``0 log 0 = 0``.

    ``result`` may be a solver result or a bare plan matrix; ``epsilon``
    defaults to the result's own regularization weight.
    """
    if isinstance(result, SinkhornResult):
        Z = result.plan.values
        eps = result.epsilon if epsilon is None else epsilon
    else:
        Z = np.asarray(result, dtype=float)
        if epsilon is None:
            raise ValueError("epsilon is required when passing a bare plan")
        eps = epsilon
    if Z.shape != cost.values.shape:
        raise ValueError(f"plan shape {Z.shape} does not match cost shape {cost.values.shape}")
    return float(np.sum(Z * cost.values)) + eps * _xlogx_sum(Z)


def cosine_cost_grad(u: np.ndarray, v: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``sum_ij weights_ij * (1 - cos(u_i, v_j))`` w.r.t. ``u`` and ``v``."""
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    uh = u / nu[:, None]
    vh = v / nv[:, None]
    cos = uh @ vh.T
    # d cos_ij / d u_i = (vh_j - cos_ij uh_i) / |u_i|
    grad_u = -((weights @ vh) - (weights * cos).sum(axis=1)[:, None] * uh) / nu[:, None]
    grad_v = -((weights.T @ uh) - (weights * cos).sum(axis=0)[:, None] * vh) / nv[:, None]
    return grad_u, grad_v


def ot_grad(a: TokenSequence, b: TokenSequence, result: SinkhornResult) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the entropic OT objective w.r.t. both sequences' embeddings.

    At the entropic optimum the derivative of the objective w.r.t. each cost
    entry is the plan entry, so the plan is held fixed and chained through
    the cosine distance. Rows of masked tokens are zero.
    """
    if not result.converged:
        raise ValueError("cannot differentiate an unconverged Sinkhorn result")
    Z = result.plan.values
    rows = np.flatnonzero(a.mask)
    cols = np.flatnonzero(b.mask)
    if Z.shape != (rows.size, cols.size):
        raise ValueError(f"plan shape {Z.shape} does not match valid tokens ({rows.size}, {cols.size})")
    gu, gv = cosine_cost_grad(a.embeddings[rows], b.embeddings[cols], Z)
    grad_a = np.zeros_like(a.embeddings)
    grad_b = np.zeros_like(b.embeddings)
    grad_a[rows] = gu
    grad_b[cols] = gv
    return grad_a, grad_b


def sinkhorn_loss(
    a: TokenSequence,
    b: TokenSequence,
    epsilon: float = DEFAULT_EPSILON,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> tuple[SinkhornResult, CostMatrix]:
    """Cosine cost followed by a Sinkhorn solve; convenience for training code."""
    cost = cosine_cost(a, b)
    return sinkhorn_solve(cost, epsilon, max_iter, tol), cost


def exact_ot_bruteforce(cost: CostMatrix | np.ndarray) -> float:
    """Exact unregularized OT value for square uniform problems up to 8x8.

    With uniform marginals the optimum sits on a permutation matrix scaled
    by 1/n, so enumerating permutations is exact.
    """
    C = cost.values if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=float)
    n, m = C.shape
    if n != m:
        raise ValueError(f"brute force needs a square cost matrix, got {n}x{m}")
    if n > 8:
        raise ValueError(f"brute force limited to n <= 8, got {n}")
    rows = np.arange(n)
    best = min(C[rows, list(p)].sum() for p in itertools.permutations(range(n)))
    return float(best) / n
