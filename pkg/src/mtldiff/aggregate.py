"""Multi-task gradient and loss aggregation.

Four aggregation methods over per-cluster losses/gradients:

* ``uniform``: mean of the cluster gradients.
* ``pcgrad``: each gradient is projected off the normal component of every
  conflicting gradient (negative dot product), visiting the others in a
  seeded random order per task; the projected copies are summed.
* ``nash``: a bargaining weighting; the weights alpha solve
  ``(G G^T) alpha = 1 / alpha`` elementwise with alpha > 0, refreshed on a
  fixed cadence and reused in between.
* ``uw``: learnable per-task log-variances eta weight the losses as
  ``sum_i exp(-eta_i) L_i + eta_i / 2``; the gradient update is the matching
  weighted sum of cluster gradients, and eta gets its own exact gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NonConvergenceError, NotPositiveDefiniteError

AGGREGATOR_METHODS = ("uniform", "pcgrad", "nash", "uw")

# Near-singular Gram matrices get this added to the diagonal before solving.
NASH_JITTER = 1e-8


@dataclass(frozen=True)
class AggregatorState:
    """Method selector plus whatever evolving state the method carries.

    ``step`` counts combine calls; pcgrad derives its per-step projection
    order from (order_seed, step), nash refreshes its weights when
    ``step % update_every == 0``.  Treat instances as immutable: combining
    returns a new state.
    """

    method: str
    k: int
    step: int = 0
    order_seed: int = 0
    nash_alpha: np.ndarray | None = None
    nash_update_every: int = 25
    nash_tol: float = 1e-8
    uw_eta: np.ndarray | None = None

    def __post_init__(self):
        if self.method not in AGGREGATOR_METHODS:
            raise ValueError(f"unknown aggregation method {self.method!r}")
        if self.k < 1:
            raise ValueError(f"need at least one task, got k={self.k}")
        if self.method == "nash":
            alpha = self.nash_alpha if self.nash_alpha is not None else np.ones(self.k)
            alpha = np.asarray(alpha, dtype=np.float64)
            if alpha.shape != (self.k,) or np.any(alpha <= 0):
                raise ValueError("nash weights must be positive with one entry per task")
            object.__setattr__(self, "nash_alpha", alpha)
            if self.nash_update_every < 1:
                raise ValueError("nash_update_every must be >= 1")
        if self.method == "uw":
            eta = self.uw_eta if self.uw_eta is not None else np.zeros(self.k)
            eta = np.asarray(eta, dtype=np.float64)
            if eta.shape != (self.k,):
                raise ValueError("uw needs one eta per task")
            object.__setattr__(self, "uw_eta", eta)


def pcgrad_combine(grads, order_seed: int) -> np.ndarray:
    """Sum of conflict-projected task gradients.

    For each task i, a working copy of g_i is projected onto the normal plane
    of every other g_j it conflicts with (dot < 0), visiting the others in a
    random order drawn from ``order_seed``; the k projected copies are summed.
    A conflicting g_j with zero squared norm is an error (no projection
    direction exists).
    """
    G = np.ascontiguousarray(np.atleast_2d(np.asarray(grads, dtype=np.float64)))
    k = G.shape[0]
    norms_sq = np.einsum("ij,ij->i", G, G)
    rng = np.random.default_rng(order_seed)
    out = np.zeros(G.shape[1])
    for i in range(k):
        gi = G[i].copy()
        others = np.delete(np.arange(k), i)
        for j in rng.permutation(others):
            d = gi @ G[j]
            if d < 0.0:
                if norms_sq[j] == 0.0:
                    raise ValueError(f"cannot project onto zero-norm gradient (task {j})")
                gi -= (d / norms_sq[j]) * G[j]
        out += gi
    return out


def nash_solve(gram: np.ndarray, tol: float = 1e-8, max_iter: int = 10000) -> np.ndarray:
    """Positive weights alpha with ``gram @ alpha = 1 / alpha`` elementwise.

    ``gram`` must be symmetric positive definite.  The fixed point is the
    minimiser of the strictly convex ``0.5 a'Ma - sum(log a)`` over a > 0,
    found by damped Newton iteration: backtracking on the objective far from
    the optimum, plain positivity-guarded steps near it (where backtracking
    cannot resolve the tiny objective decrease).  Convergence is declared at
    ``max |a * (M a) - 1| < tol``.
    """
    M = np.asarray(gram, dtype=np.float64)
    k = M.shape[0]
    if M.shape != (k, k):
        raise ValueError(f"gram must be square, got {M.shape}")
    if not np.allclose(M, M.T, rtol=1e-8, atol=1e-12):
        raise ValueError("gram matrix is not symmetric")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError as e:
        raise NotPositiveDefiniteError("gram matrix is not positive definite") from e

    def objective(a):
        return 0.5 * a @ M @ a - np.sum(np.log(a))

    a = 1.0 / np.sqrt(np.diag(M))
    fa = objective(a)
    for _ in range(max_iter):
        Ma = M @ a
        if np.max(np.abs(Ma * a - 1.0)) < tol:
            return a
        g = Ma - 1.0 / a
        H = M + np.diag(1.0 / a**2)
        step = np.linalg.solve(H, g)
        if np.max(np.abs(Ma * a - 1.0)) < 1e-3:
            t = 1.0
            a_new = a - t * step
            while np.any(a_new <= 0.0):
                t *= 0.5
                a_new = a - t * step
            a = a_new
            fa = objective(a)
            continue
        t = 1.0
        while True:
            a_new = a - t * step
            if np.all(a_new > 0.0):
                f_new = objective(a_new)
                if f_new <= fa + 1e-12 * abs(fa):
                    break
            t *= 0.5
            if t < 1e-20:
                a_new, f_new = a, fa
                break
        a, fa = a_new, f_new
    Ma = M @ a
    if np.max(np.abs(Ma * a - 1.0)) < tol:
        return a
    raise NonConvergenceError(
        f"weight solve residual {np.max(np.abs(Ma * a - 1.0)):.3e} after {max_iter} iterations"
    )


def _nash_gram(G: np.ndarray) -> np.ndarray:
    gram = G @ G.T
    gram = 0.5 * (gram + gram.T)
    try:
        np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        gram = gram + NASH_JITTER * np.eye(gram.shape[0])
    return gram


def nash_combine(grads, state: AggregatorState) -> tuple[np.ndarray, AggregatorState]:
    """Weighted gradient sum ``sum_i alpha_i g_i`` under the nash weighting.

    Weights are re-solved from the Gram matrix of the current gradients when
    ``state.step`` hits the update cadence and reused otherwise.  Returns the
    combined gradient and the advanced state.
    """
    if state.method != "nash":
        raise ValueError(f"state is for method {state.method!r}, not nash")
    G = np.ascontiguousarray(np.atleast_2d(np.asarray(grads, dtype=np.float64)))
    if G.shape[0] != state.k:
        raise ValueError(f"expected {state.k} gradients, got {G.shape[0]}")
    alpha = state.nash_alpha
    if state.step % state.nash_update_every == 0:
        alpha = nash_solve(_nash_gram(G), tol=state.nash_tol)
    combined = alpha @ G
    return combined, replace(state, step=state.step + 1, nash_alpha=alpha)


def uw_total_loss(losses, eta) -> tuple[float, np.ndarray, np.ndarray]:
    """Uncertainty-weighted total loss and its exact eta gradient.

    Total is ``sum_i exp(-eta_i) L_i + eta_i / 2``; returns (total,
    d(total)/d(eta), weights) with weights ``exp(-eta)``.  Losses must be
    finite and nonnegative.
    """
    L = np.asarray(losses, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if L.shape != eta.shape or L.ndim != 1:
        raise ValueError(f"losses and eta must be matching vectors, got {L.shape}, {eta.shape}")
    if not np.all(np.isfinite(L)):
        raise ValueError("losses must be finite")
    if np.any(L < 0):
        raise ValueError("losses must be nonnegative")
    w = np.exp(-eta)
    total = float(np.sum(w * L + 0.5 * eta))
    d_eta = -w * L + 0.5
    return total, d_eta, w


def combine_step(state: AggregatorState, losses, grads):
    """One aggregation step over per-cluster inputs.

    ``losses`` and ``grads`` are sequences of length k whose entries may be
    None for clusters absent from the batch; present clusters contribute
    their mean loss / mean gradient.  Returns ``(update_grad, eta_grad,
    new_state)`` where ``eta_grad`` is None except under uw.  The parameter
    update direction per method: mean of present gradients (uniform),
    conflict-projected sum (pcgrad), bargained weighting (nash), or
    ``sum_i exp(-eta_i) g_i / k`` (uw).
    """
    k = state.k
    if grads is None:
        raise ValueError(f"{state.method} aggregation needs cluster gradients")
    grads = list(grads)
    if len(grads) != k:
        raise ValueError(f"expected {k} cluster gradients, got {len(grads)}")
    present = [i for i, g in enumerate(grads) if g is not None]
    if not present:
        raise ValueError("no cluster present in this step")
    G = np.ascontiguousarray(np.stack([np.asarray(grads[i], np.float64) for i in present]))

    if state.method == "uniform":
        update = G.sum(axis=0) / k
        return update, None, replace(state, step=state.step + 1)

    if state.method == "pcgrad":
        seed = np.random.SeedSequence((state.order_seed, state.step)).generate_state(1)[0]
        update = pcgrad_combine(G, int(seed))
        return update, None, replace(state, step=state.step + 1)

    if state.method == "nash":
        alpha = state.nash_alpha
        if state.step % state.nash_update_every == 0:
            sub = nash_solve(_nash_gram(G), tol=state.nash_tol)
            alpha = alpha.copy()
            alpha[present] = sub
        update = alpha[present] @ G
        return update, None, replace(state, step=state.step + 1, nash_alpha=alpha)

    # uw
    if losses is None:
        raise ValueError("uw aggregation needs cluster losses")
    losses = list(losses)
    if len(losses) != k:
        raise ValueError(f"expected {k} cluster losses, got {len(losses)}")
    for i in present:
        if losses[i] is None:
            raise ValueError(f"cluster {i} has a gradient but no loss")
    L_sub = np.array([float(losses[i]) for i in present])
    _, d_sub, w_sub = uw_total_loss(L_sub, state.uw_eta[present])
    update = (w_sub @ G) / k
    eta_grad = np.zeros(k)
    eta_grad[present] = d_sub
    return update, eta_grad, replace(state, step=state.step + 1)
