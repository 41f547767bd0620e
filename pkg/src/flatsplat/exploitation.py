"""Exploitation-stage optimizer: per-Gaussian L-BFGS directions on positions,
fed to Adam as pseudo-gradients; every other parameter group stays on plain Adam.

Each Gaussian keeps its own ring buffer of (displacement, gradient-difference)
pairs, so directions are independent across Gaussians and the two-loop
recursion vectorizes over the whole cloud. No line search: Adam supplies the
step-size robustness.
"""

from dataclasses import dataclass

import numpy as np

from .adam import adam_precondition
from .exploration import NoiseGate, StepInfo, langevin_noise
from .rendering import PARAM_GROUPS

CURVATURE_EPS = 1e-10


class LbfgsHistory:
    """Ring buffers of up to K curvature pairs per Gaussian.

    Stored pairs always satisfy s.y > curvature_eps; offered pairs that do not
    are rejected (and counted by push).
    """

    def __init__(self, n, k, curvature_eps=CURVATURE_EPS):
        if not 1 <= k:
            raise ValueError("history size must be >= 1")
        self.k = int(k)
        self.curvature_eps = float(curvature_eps)
        self.s = np.zeros((n, k, 2))
        self.y = np.zeros((n, k, 2))
        self.rho = np.zeros((n, k))
        self.count = np.zeros(n, dtype=np.int64)
        self.head = np.zeros(n, dtype=np.int64)

    @property
    def n(self):
        return self.s.shape[0]

    def push(self, s_new, y_new, attempt=None) -> int:
        """Store pairs satisfying the curvature condition; returns how many
        offered pairs were rejected. attempt masks rows that have a pair to offer."""
        s_new = np.asarray(s_new, dtype=np.float64)
        y_new = np.asarray(y_new, dtype=np.float64)
        if attempt is None:
            attempt = np.ones(self.n, dtype=bool)
        sy = np.einsum("ij,ij->i", s_new, y_new)
        finite = np.isfinite(s_new).all(axis=1) & np.isfinite(y_new).all(axis=1)
        ok = attempt & finite & (sy > self.curvature_eps)
        rejected = int(np.count_nonzero(attempt & ~ok))
        rows = np.nonzero(ok)[0]
        if rows.size:
            slots = self.head[rows]
            self.s[rows, slots] = s_new[rows]
            self.y[rows, slots] = y_new[rows]
            self.rho[rows, slots] = 1.0 / sy[rows]
            self.head[rows] = (slots + 1) % self.k
            self.count[rows] = np.minimum(self.count[rows] + 1, self.k)
        return rejected

    def append_rows(self, k):
        self.s = np.concatenate([self.s, np.zeros((k, self.k, 2))])
        self.y = np.concatenate([self.y, np.zeros((k, self.k, 2))])
        self.rho = np.concatenate([self.rho, np.zeros((k, self.k))])
        self.count = np.concatenate([self.count, np.zeros(k, dtype=np.int64)])
        self.head = np.concatenate([self.head, np.zeros(k, dtype=np.int64)])

    def reset_rows(self, indices):
        self.count[indices] = 0
        self.head[indices] = 0


def lbfgs_direction(history: LbfgsHistory, grad):
    """Two-loop recursion per Gaussian, vectorized over the cloud.

    Initial scaling gamma = s.y / y.y of the newest pair. Empty histories (and
    rows with non-finite intermediates) fall back to the raw gradient; returns
    (directions, fallback_count).
    """
    grad = np.asarray(grad, dtype=np.float64)
    n, k = history.count.shape[0], history.k
    rows = np.arange(n)
    q = grad.copy()
    alphas = np.zeros((n, k))
    for j in range(k):
        idx = (history.head - 1 - j) % k
        active = j < history.count
        s_j = history.s[rows, idx]
        y_j = history.y[rows, idx]
        a_j = np.where(active, history.rho[rows, idx] * np.einsum("ij,ij->i", s_j, q), 0.0)
        alphas[:, j] = a_j
        q -= a_j[:, None] * y_j
    newest = (history.head - 1) % k
    s_n = history.s[rows, newest]
    y_n = history.y[rows, newest]
    yy = np.einsum("ij,ij->i", y_n, y_n)
    gamma = np.where(history.count > 0,
                     np.einsum("ij,ij->i", s_n, y_n) / np.where(yy > 0, yy, 1.0), 1.0)
    r = gamma[:, None] * q
    for j in range(k - 1, -1, -1):
        idx = (history.head - 1 - j) % k
        active = j < history.count
        s_j = history.s[rows, idx]
        y_j = history.y[rows, idx]
        b_j = np.where(active, history.rho[rows, idx] * np.einsum("ij,ij->i", y_j, r), 0.0)
        r += ((alphas[:, j] - b_j))[:, None] * s_j
    bad = ~np.isfinite(r).all(axis=1)
    if np.any(bad):
        r[bad] = grad[bad]
    return r, int(np.count_nonzero(bad))


@dataclass
class ExploitState:
    """History plus the bookkeeping needed to form curvature pairs across steps."""

    history: LbfgsHistory
    prev_mu: np.ndarray = None
    prev_grad: np.ndarray = None
    valid: np.ndarray = None
    rejected_total: int = 0
    fallback_total: int = 0

    @classmethod
    def fresh(cls, n, k, curvature_eps=CURVATURE_EPS):
        return cls(history=LbfgsHistory(n, k, curvature_eps),
                   prev_mu=np.zeros((n, 2)), prev_grad=np.zeros((n, 2)),
                   valid=np.zeros(n, dtype=bool))

    def append_rows(self, k):
        self.history.append_rows(k)
        self.prev_mu = np.concatenate([self.prev_mu, np.zeros((k, 2))])
        self.prev_grad = np.concatenate([self.prev_grad, np.zeros((k, 2))])
        self.valid = np.concatenate([self.valid, np.zeros(k, dtype=bool)])

    def reset_rows(self, indices):
        self.history.reset_rows(indices)
        self.valid[indices] = False


def exploitation_step(cloud, grads, state: ExploitState, adam_states,
                      gate: NoiseGate, rng, *, lrs: dict) -> StepInfo:
    """One exploitation update: mu <- mu - lr * adam(two_loop(grad_mu)) + noise,
    plain Adam with zero noise elsewhere. The flattening multiplier is off.

    Pairs (delta mu, delta grad_mu) from the previous step are pushed first,
    per Gaussian, subject to the curvature condition. A non-finite gradient
    rejects the whole step.
    """
    for group in PARAM_GROUPS:
        if not np.all(np.isfinite(grads.group(group))):
            return StepInfo(rejected=True)

    mu_now = cloud.mu.astype(np.float64)
    grad_mu = grads.mu
    rejected = 0
    if np.any(state.valid):
        rejected = state.history.push(mu_now - state.prev_mu,
                                      grad_mu - state.prev_grad,
                                      attempt=state.valid)
    state.rejected_total += rejected

    directions, fallbacks = lbfgs_direction(state.history, grad_mu)
    state.fallback_total += fallbacks

    noise = None
    if gate.lambda_noise != 0.0:
        noise = gate.lambda_noise * langevin_noise(cloud, gate, lrs["mu"], rng)

    for group in PARAM_GROUPS:
        pseudo = directions if group == "mu" else grads.group(group)
        direction = adam_precondition(pseudo, adam_states[group])
        delta = lrs[group] * direction
        p = cloud.params(group)
        if group == "mu" and noise is not None:
            p[...] = p - delta + noise
        else:
            p[...] = p - delta

    state.prev_mu = mu_now
    state.prev_grad = grad_mu.copy()
    state.valid[:] = True
    return StepInfo(nu=1.0, rejected_pairs=rejected, fallbacks=fallbacks)
