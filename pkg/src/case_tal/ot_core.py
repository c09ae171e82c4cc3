"""Entropic optimal transport for self-labeling.

The solver finds the plan ``Q`` minimising

    <Q, -L> + (1 / eps) * KL(Q || Q_hat)

subject to every row of ``Q`` summing to 1 and column ``k`` summing to
``N * beta[k]``.  The minimiser has the form
``diag(u) (Q_hat * exp(eps * L)) diag(v)`` and is found by alternately
rescaling rows and columns.  ``ot_dual_oracle`` reaches the same plan by
Newton ascent on the Lagrangian dual and is kept around as ground truth.
"""

from __future__ import annotations

import numpy as np

from .errors import ConvergenceError, InputError, NumericalError, ShapeError

DEFAULT_EPS = 20.0
DEFAULT_ITERS = 3


def _validate(logits, beta, prior, eps_sharp):
    L = np.asarray(logits, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] < 1 or L.shape[1] < 1:
        raise ShapeError(f"logits must be a non-empty N x K matrix, got shape {L.shape}")
    if not np.all(np.isfinite(L)):
        raise InputError("logits contain non-finite values")
    N, K = L.shape
    if beta is None:
        b = np.full(K, 1.0 / K)
    else:
        b = np.asarray(beta, dtype=np.float64).ravel()
        if b.shape != (K,):
            raise ShapeError(f"beta has {b.size} entries, logits have {K} columns")
        if not np.all(np.isfinite(b)):
            raise InputError("beta contains non-finite values")
        if np.any(b < 0):
            raise InputError("beta entries must be nonnegative")
        if abs(b.sum() - 1.0) > 1e-9:
            raise InputError(f"beta must sum to 1, sums to {b.sum()!r}")
    if not (np.isfinite(eps_sharp) and eps_sharp > 0):
        raise InputError(f"eps_sharp must be positive, got {eps_sharp!r}")
    # an absent prior is the uniform plan, normalised like a given one
    log_prior = np.full((N, K), -np.log(N * K))
    if prior is not None:
        Qh = np.asarray(prior, dtype=np.float64)
        if Qh.shape != (N, K):
            raise ShapeError(f"prior shape {Qh.shape} does not match logits {L.shape}")
        if not np.all(np.isfinite(Qh)):
            raise InputError("prior contains non-finite values")
        if np.any(Qh <= 0):
            raise InputError("prior must be strictly positive")
        log_prior = np.log(Qh / Qh.sum())
    return L, b, log_prior


def _kernel(L, b, log_prior, eps_sharp):
    """Row-shifted kernel ``Q_hat * exp(eps*L)`` restricted to supported columns.

    Returns the kernel and the per-row shifts that were subtracted in log
    space.  Row shifts are absorbed by the row scaling, so the plan is
    unaffected.
    """
    support = b > 0
    if not support.any():
        raise InputError("beta has no positive entry")
    logS = log_prior + eps_sharp * L
    shift = logS[:, support].max(axis=1)
    S = np.zeros_like(logS)
    S[:, support] = np.exp(logS[:, support] - shift[:, None])
    if not np.all(np.isfinite(S)):
        raise NumericalError("kernel overflowed after stabilisation")
    return S, shift


def sinkhorn(logits, beta=None, prior=None, eps_sharp: float = DEFAULT_EPS,
             n_iter: int = DEFAULT_ITERS) -> np.ndarray:
    """Sinkhorn-Knopp self-labeling.

    Args:
        logits: N x K pre-softmax scores.
        beta: length-K column fractions summing to 1 (uniform when None).
        prior: optional strictly positive N x K prior plan; only relative
            values matter.
        eps_sharp: sharpening factor multiplying the logits.
        n_iter: number of column/row rescaling rounds.

    Returns:
        N x K plan whose rows sum to 1 and whose column ``k`` sums to
        ``N * beta[k]`` once converged.
    """
    if int(n_iter) < 1:
        raise InputError(f"n_iter must be >= 1, got {n_iter!r}")
    L, b, log_prior = _validate(logits, beta, prior, eps_sharp)
    N = L.shape[0]
    S, _ = _kernel(L, b, log_prior, eps_sharp)

    Q = S.T.copy()  # K x N, as in the reference loop
    Q /= Q.sum()
    for _ in range(int(n_iter)):
        col_mass = Q.sum(axis=1, keepdims=True)
        Q = np.divide(Q, col_mass, out=np.zeros_like(Q), where=col_mass > 0)
        Q *= b[:, None]
        row_mass = Q.sum(axis=0, keepdims=True)
        if np.any(row_mass <= 0) or not np.all(np.isfinite(row_mass)):
            raise NumericalError("a sample lost all of its mass during rescaling")
        Q /= row_mass
        Q /= N
    return (Q * N).T


def factorization_residual(plan, logits, prior=None, eps_sharp: float = DEFAULT_EPS) -> float:
    """Worst relative cross-ratio error of ``plan / (Q_hat * exp(eps*L))``.

    An optimal plan divided elementwise by the kernel is ``u v^T``, so every
    cross-ratio ``R[n,k] R[m,j] / (R[n,j] R[m,k])`` equals 1.  Returns the
    largest deviation ``exp(|log cross-ratio|) - 1`` over entries where the
    plan is positive.
    """
    Q = np.asarray(plan, dtype=np.float64)
    L, _, log_prior = _validate(logits, None, prior, eps_sharp)
    if Q.shape != L.shape:
        raise ShapeError(f"plan shape {Q.shape} does not match logits {L.shape}")
    cols = np.all(Q > 0, axis=0)
    if cols.sum() < 2:
        return 0.0
    logK = log_prior + eps_sharp * L
    logR = np.log(Q[:, cols]) - (logK[:, cols] - logK[:, cols].max())
    diff = logR[:, None, :] - logR[None, :, :]  # N x N x K'
    spread = diff.max(axis=2) - diff.min(axis=2)
    return float(np.expm1(spread.max()))


def dual_bound_trace(logits, beta=None, prior=None, eps_sharp: float = DEFAULT_EPS,
                     n_iter: int = DEFAULT_ITERS) -> np.ndarray:
    """Lower bound on :func:`ot_objective` after every half-step of Sinkhorn.

    Sinkhorn is block-coordinate ascent on the Lagrangian dual, so this
    sequence is non-decreasing and its limit equals the optimal objective.
    The returned array has ``2 * n_iter`` entries (row step, column step).
    """
    L, b, log_prior = _validate(logits, beta, prior, eps_sharp)
    N = L.shape[0]
    S, shift = _kernel(L, b, log_prior, eps_sharp)
    a = np.full(N, 1.0 / N)
    support = b > 0
    u = np.ones(N)
    v = support.astype(np.float64)

    def bound():
        log_v = np.log(v[support])
        mass = (u[:, None] * S * v[None, :]).sum()
        dual = a @ (np.log(u) - shift) + b[support] @ log_v - mass
        return (dual + 1.0) / eps_sharp

    out = []
    for _ in range(int(n_iter)):
        u = a / (S @ v)
        out.append(bound())
        v = np.zeros(L.shape[1])
        v[support] = b[support] / (S.T @ u)[support]
        out.append(bound())
    return np.asarray(out)


def ot_objective(plan, logits, prior=None, eps_sharp: float = DEFAULT_EPS) -> float:
    """Self-labeling objective ``<q, -L> + KL(q || q_hat) / eps``.

    Both the plan and the prior are normalised to total mass 1 first, so
    values are comparable with :func:`dual_bound_trace`.
    """
    Q = np.asarray(plan, dtype=np.float64)
    L = np.asarray(logits, dtype=np.float64)
    q = Q / Q.sum()
    if prior is None:
        q_hat = np.full_like(q, 1.0 / q.size)
    else:
        q_hat = np.asarray(prior, dtype=np.float64)
        q_hat = q_hat / q_hat.sum()
    return float(np.sum(q * -L) + kl_divergence(q, q_hat) / eps_sharp)


def ot_dual_oracle(logits, beta=None, prior=None, eps_sharp: float = DEFAULT_EPS,
                   tol: float = 1e-10, max_iter: int = 5000,
                   max_log_step: float = 4.0) -> np.ndarray:
    """Solve the same problem as :func:`sinkhorn` by Newton ascent on the dual.

    With row potentials ``phi`` and column potentials ``psi`` the optimal
    plan is ``q = q_hat * exp(eps * L + phi_n + psi_k)``.  The row potentials
    are eliminated in closed form, leaving the concave semi-dual

        F(psi) = beta . psi - sum_n a_n * logsumexp_k(eps * L_nk + log q_hat_nk + psi_k)

    which is maximised by damped Newton steps until the marginal violation
    (the dual gradient) has norm at most ``tol``.
    """
    L, b, log_prior = _validate(logits, beta, prior, eps_sharp)
    N, K = L.shape
    cols = np.flatnonzero(b > 0)
    bk = b[cols]
    a = np.full(N, 1.0 / N)
    logS = log_prior[:, cols] + eps_sharp * L[:, cols]
    m = cols.size

    def row_softmax(psi):
        z = logS + psi[None, :]
        zmax = z.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
        return np.exp(z - lse[:, None]), lse

    def value(psi):
        _, lse = row_softmax(psi)
        return bk @ psi - a @ lse

    # psi[-1] stays at 0 to remove the additive gauge freedom.
    psi = np.zeros(m)
    for _ in range(max_iter):
        P, _ = row_softmax(psi)
        col_mass = a @ P
        g_full = bk - col_mass
        if np.linalg.norm(g_full) <= tol:
            full = np.zeros((N, K))
            full[:, cols] = P  # rows of N * diag(a) P sum to 1
            return full
        if m == 1:
            raise ConvergenceError("single supported column but marginals disagree")
        g = g_full[:-1]
        Pw = P[:, :-1] * a[:, None]
        H = np.diag(col_mass[:-1]) - P[:, :-1].T @ Pw
        H += 1e-13 * np.eye(m - 1)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = g.copy()
        if not np.all(np.isfinite(step)) or g @ step <= 0:
            step = g.copy()
        big = np.abs(step).max()
        if big > max_log_step:
            step = step * (max_log_step / big)
        d = np.append(step, 0.0)
        base = value(psi)
        slope = g @ step
        gnorm = np.linalg.norm(g_full)
        t = 1.0
        while t > 1e-14:
            cand = psi + t * d
            if value(cand) >= base + 1e-4 * t * slope:
                break
            # Near the optimum F is flat to round-off; accept progress on
            # the marginal violation instead.
            Pc, _ = row_softmax(cand)
            if np.linalg.norm(bk - a @ Pc) < (1 - 1e-4 * t) * gnorm:
                break
            t *= 0.5
        else:
            raise ConvergenceError("line search failed in dual ascent")
        psi = cand
    raise ConvergenceError(f"dual ascent did not reach tolerance {tol} in {max_iter} steps")


def entropy(dist) -> float:
    """Shannon entropy in nats with ``0 log 0 = 0``.

    A vector is normalised to a distribution.  For a matrix, each row is
    normalised and the mean row entropy is returned.
    """
    p = np.asarray(dist, dtype=np.float64)
    if np.any(p < 0):
        raise InputError("entropy requires nonnegative entries")
    rows = np.atleast_2d(p)
    rows = rows / rows.sum(axis=1, keepdims=True)
    logs = np.log(rows, out=np.zeros_like(rows), where=rows > 0)
    return float(np.mean(-(rows * logs).sum(axis=1)))


def kl_divergence(q, q_hat) -> float:
    """``sum q log(q / q_hat)`` after normalising both to unit mass."""
    q = np.asarray(q, dtype=np.float64)
    q_hat = np.asarray(q_hat, dtype=np.float64)
    if q.shape != q_hat.shape:
        raise ShapeError(f"shape mismatch {q.shape} vs {q_hat.shape}")
    if np.any(q < 0):
        raise InputError("q must be nonnegative")
    if np.any(q_hat <= 0):
        raise InputError("q_hat must be strictly positive")
    q = q / q.sum()
    q_hat = q_hat / q_hat.sum()
    ratio = np.divide(q, q_hat)
    logs = np.log(ratio, out=np.zeros_like(ratio), where=q > 0)
    return float(np.sum(q * logs))
