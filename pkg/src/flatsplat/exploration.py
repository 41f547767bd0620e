"""Exploration-stage sampler: flat-histogram energy weighting on top of
opacity-gated Langevin updates.

The energy axis is split into bins; a weight vector tracks per-bin visit mass
via stochastic approximation and yields a scalar multiplier on the descent
direction. The multiplier is applied to the Adam-preconditioned direction, not
the raw gradient: Adam is invariant to gradient rescaling, so an inner
multiplier would cancel out.
"""

from dataclasses import dataclass

import numpy as np

from .adam import AdamState, adam_precondition
from .model import sigmoid
from .rendering import PARAM_GROUPS


@dataclass(frozen=True)
class EnergyPartition:
    """Energy bins: bin 1 is (-inf, e_lo], bin n_bins is (e_hi, +inf), interior
    bins split [e_lo, e_hi] uniformly with right-closed intervals."""

    n_bins: int
    e_lo: float
    e_hi: float

    def __post_init__(self):
        if self.n_bins < 3:
            raise ValueError("need at least 3 bins")
        if not self.e_lo < self.e_hi:
            raise ValueError("energy bounds must satisfy e_lo < e_hi")

    @property
    def bin_width(self) -> float:
        return (self.e_hi - self.e_lo) / (self.n_bins - 2)

    def edge(self, n) -> float:
        """Finite edge u_n for n in 1..n_bins-1."""
        return self.e_lo + (n - 1) * self.bin_width


def bin_index(energy, part: EnergyPartition) -> int:
    """1-based index of the bin containing the energy."""
    energy = float(energy)
    if np.isnan(energy):
        raise ValueError("energy is NaN")
    if energy <= part.e_lo:
        return 1
    if energy > part.e_hi:
        return part.n_bins
    j = int(np.ceil((energy - part.e_lo) / part.bin_width))
    return min(max(j, 1), part.n_bins - 2) + 1


@dataclass
class BinWeights:
    """Per-bin probability weights, strictly positive and summing to one."""

    weights: np.ndarray
    TOLERANCE = 1e-9

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if np.any(w <= 0.0) or np.any(w >= 1.0):
            raise ValueError("bin weights must lie strictly inside (0, 1)")
        drift = abs(w.sum() - 1.0)
        if drift > self.TOLERANCE:
            w = w / w.sum()
        self.weights = w

    @classmethod
    def uniform(cls, n_bins: int) -> "BinWeights":
        return cls(np.full(n_bins, 1.0 / n_bins))

    @property
    def n_bins(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class FlatteningConfig:
    zeta: float = 0.75
    tau: float = 1.0
    weight_lr: float = 0.01
    warmup_iters: int = 250
    nu_min: float = 0.1
    nu_max: float = 20.0
    weight_floor: float = 1e-12
    # literal reading of the lower-bin clamp: clamp the weight value at 1
    # (log term drops) instead of clamping the index
    value_clamp: bool = False
    # optional stochastic-approximation decay lr/(1 + t/t0)^exp; t0 = 0 disables
    weight_lr_decay_t0: float = 0.0
    weight_lr_decay_exp: float = 0.6
    # optional EMA smoothing of the binning energy; 0 disables
    energy_ema: float = 0.0

    def __post_init__(self):
        if self.zeta < 0 or self.tau <= 0 or self.weight_lr < 0:
            raise ValueError("zeta >= 0, tau > 0 and weight_lr >= 0 required")
        if not self.nu_min <= 1.0 <= self.nu_max:
            raise ValueError("nu clip range must contain 1")


@dataclass(frozen=True)
class NoiseGate:
    """Opacity gate sigma(-sharpness * (threshold - o)) scaling position noise.

    gate_sign +1 keeps that orientation (more noise at high opacity); -1 flips
    the argument, matching the convention that perturbs near-dead Gaussians.
    """

    sharpness: float = 100.0
    threshold: float = 0.005
    lambda_noise: float = 0.0
    gate_sign: int = 1

    def factor(self, opacity):
        arg = self.threshold - np.asarray(opacity, dtype=np.float64)
        return sigmoid(-self.gate_sign * self.sharpness * arg)


def interpolated_weight(weights: BinWeights, energy, part: EnergyPartition) -> float:
    """Piecewise-exponential interpolation of the bin weights at an energy.

    Continuous across interior edges; boundary bins clamp the energy into
    [e_lo, e_hi] first, so the value saturates outside the partition.
    """
    w = weights.weights
    e = min(max(float(energy), part.e_lo), part.e_hi)
    j = bin_index(e, part)
    j_lo = max(j - 1, 1)
    lower_edge = part.e_lo if j <= 1 else part.edge(j - 1)
    frac = (e - lower_edge) / part.bin_width
    return float(w[j_lo - 1] * np.exp((np.log(w[j - 1]) - np.log(w[j_lo - 1])) * frac))


def gradient_multiplier(weights: BinWeights, energy, part: EnergyPartition,
                        cfg: FlatteningConfig) -> float:
    """Scalar nu scaling the descent direction, clipped to [nu_min, nu_max]."""
    w = weights.weights
    j = bin_index(energy, part)
    log_hi = np.log(w[j - 1])
    log_lo = 0.0 if cfg.value_clamp else np.log(w[max(j - 1, 1) - 1])
    nu = 1.0 + cfg.zeta * cfg.tau * (log_hi - log_lo) / part.bin_width
    return float(min(max(nu, cfg.nu_min), cfg.nu_max))


def update_bin_weights(weights: BinWeights, j: int, cfg: FlatteningConfig,
                       iteration: int | None = None) -> float:
    """Stochastic-approximation pull of weight mass onto the visited bin.

    In-place: w(i) += step * w(j)^zeta * (1[i==j] - w(i)), then floor and
    renormalize. Returns the pre-renormalization drift |sum - 1|. Raises when
    the step would produce negative weights.
    """
    w = weights.weights
    if not 1 <= j <= w.shape[0]:
        raise ValueError(f"bin index {j} outside 1..{w.shape[0]}")
    step = cfg.weight_lr
    if cfg.weight_lr_decay_t0 > 0.0 and iteration is not None:
        step = cfg.weight_lr / (1.0 + iteration / cfg.weight_lr_decay_t0) ** cfg.weight_lr_decay_exp
    delta = step * w[j - 1] ** cfg.zeta
    if delta >= 1.0:
        raise ValueError(f"weight step {delta:.3g} >= 1 would produce negative weights")
    w -= delta * w
    w[j - 1] += delta
    drift = abs(w.sum() - 1.0)
    np.maximum(w, cfg.weight_floor, out=w)
    w /= w.sum()
    return float(drift)


def langevin_noise(cloud, gate: NoiseGate, lr: float, rng, eta=None):
    """Position perturbations lr * gate(o) * Sigma @ eta with eta ~ N(0, I_2).

    Only positions are perturbed; all other attributes receive zero noise.
    """
    if eta is None:
        eta = rng.standard_normal((cloud.n, 2))
    cov = cloud.covariances()
    g = gate.factor(sigmoid(cloud.opacity_logit.astype(np.float64)))
    return lr * g[:, None] * np.einsum("nij,nj->ni", cov, eta)


@dataclass
class StepInfo:
    nu: float = 1.0
    bin: int = 0
    rejected: bool = False
    weight_drift: float = 0.0
    rejected_pairs: int = 0
    fallbacks: int = 0


def exploration_step(cloud, grads, weights, part, cfg, gate: NoiseGate,
                     adam_states, rng, *, energy: float, lrs: dict,
                     iteration: int) -> StepInfo:
    """One sampler update of every parameter group.

    p <- p - lr * nu * adam(grad_p) + lambda_noise * eps, with eps nonzero only
    for positions. Pass cfg (and weights/part) as None for the plain-Langevin
    arm: nu stays 1 and no weight bookkeeping happens. During warm-up nu is 1
    and the weights are frozen. A non-finite gradient rejects the whole step
    and leaves parameters and moments untouched.
    """
    for group in PARAM_GROUPS:
        if not np.all(np.isfinite(grads.group(group))):
            return StepInfo(rejected=True, bin=_safe_bin(energy, part))

    flatten = cfg is not None and iteration >= cfg.warmup_iters
    if flatten:
        nu = gradient_multiplier(weights, energy, part, cfg)
    else:
        nu = 1.0

    noise = None
    if gate.lambda_noise != 0.0:
        noise = gate.lambda_noise * langevin_noise(cloud, gate, lrs["mu"], rng)

    for group in PARAM_GROUPS:
        direction = adam_precondition(grads.group(group), adam_states[group])
        delta = (lrs[group] * nu) * direction
        p = cloud.params(group)
        if group == "mu" and noise is not None:
            p[...] = p - delta + noise
        else:
            p[...] = p - delta

    drift = 0.0
    if flatten and cfg.weight_lr > 0.0:
        j = bin_index(energy, part)
        drift = update_bin_weights(weights, j, cfg, iteration=iteration)
    return StepInfo(nu=nu, bin=_safe_bin(energy, part), weight_drift=drift)


def _safe_bin(energy, part):
    if part is None or energy is None or np.isnan(energy):
        return 0
    return bin_index(energy, part)
