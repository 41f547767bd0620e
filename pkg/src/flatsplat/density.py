"""MCMC density control: opacity-proportional target sampling, appearance-conserving
N-way splits, growth on a fixed rate, and dead-Gaussian relocation.

A split of a Gaussian with opacity o into N copies keeps the rendered blend
approximately unchanged by setting o_new = 1 - (1 - o)^(1/N) and shrinking the
covariance by a scalar factor derived from an alternating binomial sum; because
the factor is scalar, a split only shifts log_scale by half its log and leaves
the rotation alone.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .model import inverse_sigmoid, sigmoid

SPLIT_MAX_N = 32  # alternating-sum cancellation grows with N; cap it


def sampling_probabilities(cloud, eligible=None):
    """Categorical distribution over Gaussians with P(i) proportional to opacity."""
    o = sigmoid(cloud.opacity_logit.astype(np.float64))
    if eligible is not None:
        o = np.where(eligible, o, 0.0)
    total = o.sum()
    if total <= 0.0:
        raise ValueError("no Gaussian with positive opacity to sample")
    return o / total


def sample_by_opacity(cloud, count, rng, eligible=None, opacity_floor=0.0):
    """count i.i.d. Gaussian indices drawn proportionally to opacity."""
    if count == 0:
        return np.empty(0, dtype=np.int64)
    o = sigmoid(cloud.opacity_logit.astype(np.float64))
    mask = o > opacity_floor
    if eligible is not None:
        mask &= eligible
    if not np.any(mask):
        raise ValueError(f"no sampling target with opacity above {opacity_floor}")
    p = np.where(mask, o, 0.0)
    p /= p.sum()
    return rng.choice(cloud.n, size=count, p=p).astype(np.int64)


def sampling_entropy(cloud) -> float:
    """Entropy (nats) of the opacity sampling distribution; the clustering diagnostic."""
    p = sampling_probabilities(cloud)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def split_scale_factor(o_old: float, n: int) -> float:
    """Scalar multiplier on the covariance for an n-way split."""
    if not 0.0 < o_old < 1.0:
        raise ValueError("opacity must lie strictly inside (0, 1)")
    if not 1 <= n <= SPLIT_MAX_N:
        raise ValueError(f"split count must be in 1..{SPLIT_MAX_N}")
    if n == 1:
        return 1.0
    o_new = split_opacity(o_old, n)
    terms = []
    for i in range(1, n + 1):
        binom = 1.0
        for k in range(i):
            terms.append(binom * (-1.0) ** k * o_new ** (k + 1) / math.sqrt(k + 1.0))
            binom = binom * (i - 1 - k) / (k + 1.0)
    # alternating sum: accumulate in descending magnitude
    terms.sort(key=abs, reverse=True)
    total = 0.0
    for t in terms:
        total += t
    return o_old**2 / total**2


def split_opacity(o_old: float, n: int) -> float:
    if not 0.0 < o_old < 1.0:
        raise ValueError("opacity must lie strictly inside (0, 1)")
    if n < 1:
        raise ValueError("split count must be >= 1")
    if n == 1:
        return float(o_old)
    return float(1.0 - (1.0 - o_old) ** (1.0 / n))


def split_parameters(o_old: float, sigma_old, n: int):
    """Shared (opacity, covariance) of the n copies replacing one Gaussian."""
    o_new = split_opacity(o_old, n)
    factor = split_scale_factor(o_old, n)
    return o_new, factor * np.asarray(sigma_old, dtype=np.float64)


@dataclass
class DensityEvent:
    kind: str                 # "grow" or "relocate"
    target: int
    n_way: int
    indices: list = field(default_factory=list)  # children or movers
    entropy: float = 0.0


def _apply_split(cloud, target: int, n_way: int):
    """Rewrite the target in place with the shared split parameters; returns the
    (opacity logit, log_scale) the copies share."""
    o_old = float(sigmoid(float(cloud.opacity_logit[target])))
    o_new = split_opacity(o_old, n_way)
    factor = split_scale_factor(o_old, n_way)
    logit_new = float(inverse_sigmoid(o_new))
    if n_way > 1:
        cloud.opacity_logit[target] = logit_new
        cloud.log_scale[target] = cloud.log_scale[target] + 0.5 * np.log(factor)
    return logit_new, cloud.log_scale[target].copy()


def grow(cloud, rate: float, rng, states=()):
    """Add ceil(rate * n) Gaussians (clamped to capacity) by opacity-sampled splits.

    Targets drawn more than once split with correspondingly higher N; the target
    itself is rewritten to the shared post-split parameters and each new copy is
    appended with fresh depth indices. Optimizer states passed in `states` are
    extended with zero rows for the copies.
    """
    events = []
    if rate < 0:
        raise ValueError("growth rate must be >= 0")
    room = cloud.max_count - cloud.n
    if room <= 0 or rate == 0.0:
        return events
    n_add = min(int(math.ceil(rate * cloud.n)), room)
    if n_add <= 0:
        return events
    entropy = sampling_entropy(cloud)
    targets = sample_by_opacity(cloud, n_add, rng)
    uniq, counts = np.unique(targets, return_counts=True)
    for target, copies in zip(uniq.tolist(), counts.tolist()):
        logit_new, log_scale_new = _apply_split(cloud, target, copies + 1)
        rows = cloud.append(
            mu=np.repeat(cloud.mu[target][None, :], copies, axis=0),
            log_scale=np.repeat(log_scale_new[None, :], copies, axis=0),
            rot_angle=np.repeat(cloud.rot_angle[target], copies),
            opacity_logit=np.full(copies, logit_new),
            color=np.repeat(cloud.color[target][None, :], copies, axis=0),
        )
        for st in states:
            st.append_rows(copies)
        events.append(DensityEvent("grow", target, copies + 1, rows.tolist(), entropy))
    return events


def relocate_dead(cloud, opacity_floor: float, rng, states=()):
    """Move every Gaussian with opacity below the floor onto a live target.

    Target and movers end up sharing the split parameters for N = movers + 1;
    movers copy the target's position, rotation and color, and their optimizer
    state rows are reset.
    """
    o = sigmoid(cloud.opacity_logit.astype(np.float64))
    dead = np.nonzero(o < opacity_floor)[0]
    events = []
    if dead.size == 0:
        return events
    alive = o >= opacity_floor
    if not np.any(alive):
        raise ValueError("every Gaussian is below the opacity floor")
    entropy = sampling_entropy(cloud)
    targets = sample_by_opacity(cloud, dead.size, rng, eligible=alive)
    for target in np.unique(targets).tolist():
        movers = dead[targets == target]
        logit_new, log_scale_new = _apply_split(cloud, target, movers.size + 1)
        cloud.mu[movers] = cloud.mu[target]
        cloud.log_scale[movers] = log_scale_new
        cloud.rot_angle[movers] = cloud.rot_angle[target]
        cloud.opacity_logit[movers] = logit_new
        cloud.color[movers] = cloud.color[target]
        for st in states:
            st.reset_rows(movers)
        events.append(DensityEvent("relocate", target, movers.size + 1,
                                   movers.tolist(), entropy))
    return events
