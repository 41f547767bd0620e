"""Synthetic low-dimensional energy landscapes with exact oracles.

Used to verify the sampler claims that image fitting cannot isolate: bin-weight
convergence against quadrature masses, occupancy flattening, and escape from a
non-global basin. The chain update mirrors the image trainer (Adam-preconditioned
descent direction, optional flattening multiplier, Gaussian noise scaled by lr)
minus everything splat-specific.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import integrate, optimize

from . import kernels
from .exploration import BinWeights, EnergyPartition, bin_index

DEFAULT_ESCAPE_RADIUS = 0.2


@dataclass(frozen=True)
class Landscape:
    kind: str             # "double_well" | "mixture"
    dim: int
    params: np.ndarray    # packed for the sampler kernel
    bounds: tuple         # ((lo, hi), ...) per dimension
    minima: tuple         # ((x,...), energy) pairs sorted by energy, global first

    def energy(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "double_well":
            return (x[..., 0] ** 2 - 1.0) ** 2 - self.params[0] * x[..., 0]
        w, c, s = _unpack_mixture(self.params)
        d = x[..., None, :] - c
        expo = -0.5 * (d * d).sum(-1) / s**2
        shift = expo.max(axis=-1, keepdims=True)
        return -(shift[..., 0] + np.log((w * np.exp(expo - shift)).sum(-1)))

    def grad(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "double_well":
            g = 4.0 * x[..., 0] * (x[..., 0] ** 2 - 1.0) - self.params[0]
            return np.stack([g], axis=-1)
        w, c, s = _unpack_mixture(self.params)
        d = x[..., None, :] - c
        expo = -0.5 * (d * d).sum(-1) / s**2
        shift = expo.max(axis=-1, keepdims=True)
        terms = w * np.exp(expo - shift)
        coef = terms / terms.sum(-1, keepdims=True) / s**2
        return (coef[..., None] * d).sum(-2)

    @property
    def global_minimum(self):
        return np.asarray(self.minima[0][0], dtype=np.float64)


def _unpack_mixture(params):
    k = int(params[0])
    w = params[1:1 + k]
    c = np.stack([params[1 + k:1 + 2 * k], params[1 + 2 * k:1 + 3 * k]], axis=1)
    s = params[1 + 3 * k:1 + 4 * k]
    return w, c, s


def make_double_well(tilt: float = 0.0) -> Landscape:
    """U(x) = (x^2 - 1)^2 - tilt * x on [-3, 3]; tilt > 0 favors the right well."""
    if not abs(tilt) < 1.0:
        raise ValueError("|tilt| must be < 1")
    params = np.array([tilt])
    crit = np.roots([4.0, 0.0, -4.0, -tilt])
    crit = np.sort(crit[np.abs(crit.imag) < 1e-12].real)
    minima = []
    for x in crit:
        if 12.0 * x * x - 4.0 > 0.0:  # second derivative
            e = (x * x - 1.0) ** 2 - tilt * x
            minima.append(((float(x),), float(e)))
    minima.sort(key=lambda me: me[1])
    return Landscape("double_well", 1, params, ((-3.0, 3.0),), tuple(minima))


def make_gaussian_mixture() -> Landscape:
    """Three-mode 2D energy -log sum_j w_j N(c_j, s_j^2 I) with unequal depths."""
    w = np.array([1.0, 0.55, 0.3])
    cx = np.array([-1.5, 1.5, 0.0])
    cy = np.array([-1.0, -0.5, 1.5])
    s = np.array([0.40, 0.35, 0.30])
    params = np.concatenate([[3.0], w, cx, cy, s])
    land = Landscape("mixture", 2, params, ((-3.5, 3.5), (-3.5, 3.5)), ())
    minima = []
    for j in range(3):
        res = optimize.minimize(lambda x: float(land.energy(x)), np.array([cx[j], cy[j]]),
                                jac=lambda x: land.grad(x), method="BFGS",
                                options={"gtol": 1e-12})
        minima.append((tuple(float(v) for v in res.x), float(res.fun)))
    minima.sort(key=lambda me: me[1])
    return Landscape("mixture", 2, params, land.bounds, tuple(minima))


# ---------------------------------------------------------------------------
# quadrature oracle for per-bin Boltzmann masses

def _poly_edge_roots(tilt, u, lo, hi):
    """Roots of (x^2-1)^2 - tilt*x = u inside [lo, hi], Newton-polished."""
    roots = np.roots([1.0, 0.0, -2.0, -tilt, 1.0 - u])
    roots = roots[np.abs(roots.imag) < 1e-8].real
    out = []
    for x in roots:
        for _ in range(3):
            f = (x * x - 1.0) ** 2 - tilt * x - u
            fp = 4.0 * x * (x * x - 1.0) - tilt
            if abs(fp) < 1e-12:
                break
            x -= f / fp
        if lo < x < hi:
            out.append(float(x))
    return out


def bin_mass_oracle(land: Landscape, part: EnergyPartition, tau: float) -> np.ndarray:
    """Normalized Boltzmann mass exp(-U/tau) of each energy bin.

    1D: the domain is split exactly at the roots of U = edge (quartic roots,
    Newton-polished) and each smooth piece is integrated adaptively. 2D: outer
    composite Gauss-Legendre in x; per x-node the y-line is split exactly at
    bracketed edge crossings and integrated per piece. Bin membership of a
    piece is decided at its midpoint.
    """
    edges = [part.edge(n) for n in range(1, part.n_bins)]
    masses = np.zeros(part.n_bins)
    if land.kind == "double_well":
        lo, hi = land.bounds[0]
        tilt = float(land.params[0])
        cuts = {lo, hi}
        for u in edges:
            cuts.update(_poly_edge_roots(tilt, u, lo, hi))
        cuts = sorted(cuts)
        for a, b in zip(cuts[:-1], cuts[1:]):
            if b - a < 1e-14:
                continue
            val, _ = integrate.quad(
                lambda x: math.exp(-land.energy(np.array([x])) / tau), a, b,
                epsabs=1e-13, epsrel=1e-11, limit=200)
            j = bin_index(float(land.energy(np.array([0.5 * (a + b)]))), part)
            masses[j - 1] += val
    elif land.kind == "mixture":
        masses = _mixture_bin_masses(land, part, tau, edges)
    else:
        raise ValueError(f"no oracle for landscape kind {land.kind!r}")
    total = masses.sum()
    if not total > 0.0:
        raise ValueError("bin mass integral underflowed")
    return masses / total


def _line_masses(land, part, tau, edges, x, y_lo, y_hi, gl_nodes, gl_weights):
    """Exact-segmented integral of exp(-U/tau) along a vertical line, per bin."""
    ys = np.linspace(y_lo, y_hi, 513)
    pts = np.stack([np.full_like(ys, x), ys], axis=-1)
    u_line = land.energy(pts)
    cuts = [y_lo, y_hi]
    for u_edge in edges:
        if u_edge < u_line.min() or u_edge > u_line.max():
            continue
        sign = u_line - u_edge
        flips = np.nonzero(np.diff(np.signbit(sign)))[0]
        for f in flips:
            cuts.append(optimize.brentq(
                lambda y: float(land.energy(np.array([x, y]))) - u_edge,
                ys[f], ys[f + 1], xtol=1e-13))
    cuts = np.array(sorted(cuts))
    out = np.zeros(part.n_bins)
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b - a < 1e-14:
            continue
        yq = 0.5 * (b - a) * gl_nodes + 0.5 * (a + b)
        vals = np.exp(-land.energy(np.stack([np.full_like(yq, x), yq], axis=-1)) / tau)
        j = bin_index(float(land.energy(np.array([x, 0.5 * (a + b)]))), part)
        out[j - 1] += 0.5 * (b - a) * (gl_weights * vals).sum()
    return out


def _mixture_bin_masses(land, part, tau, edges, n_panels=192, deg=6):
    (x_lo, x_hi), (y_lo, y_hi) = land.bounds
    gl_x, gw_x = np.polynomial.legendre.leggauss(deg)
    gl_y, gw_y = np.polynomial.legendre.leggauss(12)
    masses = np.zeros(part.n_bins)
    panel_edges = np.linspace(x_lo, x_hi, n_panels + 1)
    for a, b in zip(panel_edges[:-1], panel_edges[1:]):
        xq = 0.5 * (b - a) * gl_x + 0.5 * (a + b)
        for x, wx in zip(xq, 0.5 * (b - a) * gw_x):
            masses += wx * _line_masses(land, part, tau, edges, x, y_lo, y_hi, gl_y, gw_y)
    return masses


# ---------------------------------------------------------------------------
# sampler chains

@dataclass(frozen=True)
class ChainConfig:
    iters: int = 100_000
    warmup: int = 1_000
    lr: float = 0.01
    lambda_noise: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    zeta: float = 0.75
    tau: float = 1.0
    weight_lr: float = 0.05
    weight_lr_decay_t0: float = 0.0
    weight_lr_decay_exp: float = 0.6
    nu_min: float = 0.1
    nu_max: float = 20.0
    weight_floor: float = 1e-12
    value_clamp: bool = False
    n_bins: int = 20
    e_lo: float = 0.0
    e_hi: float = 2.0
    escape_radius: float = DEFAULT_ESCAPE_RADIUS


@dataclass
class ChainResult:
    x: np.ndarray
    weights: np.ndarray
    bin_counts: np.ndarray
    first_escape_iter: int      # iterate index, 0 = started inside; -1 = never
    final_energy: float

    @property
    def escaped(self) -> bool:
        return self.first_escape_iter >= 0


def run_chain(land: Landscape, cfg: ChainConfig, flatten: bool, start, seed) -> ChainResult:
    """Run one sampler chain; flatten toggles the adaptive-weighting machinery."""
    EnergyPartition(cfg.n_bins, cfg.e_lo, cfg.e_hi)  # validates the bin layout
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((cfg.iters, land.dim))
    weights = BinWeights.uniform(cfg.n_bins).weights
    start = np.asarray(start, dtype=np.float64)
    target = land.global_minimum
    x, counts, first_escape = kernels.sampler_chain(
        0 if land.kind == "double_well" else 1,
        np.ascontiguousarray(land.params, dtype=np.float64),
        np.ascontiguousarray(start), cfg.iters, cfg.warmup, cfg.lr,
        cfg.lambda_noise, cfg.beta1, cfg.beta2, cfg.eps_hat, flatten,
        cfg.zeta, cfg.tau, cfg.weight_lr, cfg.weight_lr_decay_t0,
        cfg.weight_lr_decay_exp, cfg.nu_min, cfg.nu_max, cfg.weight_floor,
        cfg.value_clamp, weights, cfg.e_lo, cfg.e_hi, noise,
        np.ascontiguousarray(target), cfg.escape_radius,
    )
    d0 = start - target
    if float(d0 @ d0) < cfg.escape_radius**2:
        first_escape = 0
    return ChainResult(x=x, weights=weights, bin_counts=counts,
                       first_escape_iter=int(first_escape),
                       final_energy=float(land.energy(x)))


def run_escape_trial(land: Landscape, optimizer: str, start, iters: int, seed,
                     cfg: ChainConfig | None = None):
    """(escaped, summary) for one seeded trial of 'sgld' or 'awsgld'."""
    if optimizer not in ("sgld", "awsgld"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    cfg = replace(cfg or ChainConfig(), iters=int(iters))
    result = run_chain(land, cfg, flatten=(optimizer == "awsgld"), start=start, seed=seed)
    summary = {
        "optimizer": optimizer,
        "seed": int(seed),
        "escaped": result.escaped,
        "first_escape_iter": result.first_escape_iter,
        "final_energy": result.final_energy,
        "bin_counts": result.bin_counts,
        "weights": result.weights,
    }
    return result.escaped, summary


def occupancy_chi_square(bin_counts, reachable) -> float:
    """Chi-square distance between the visit distribution and uniform over the
    reachable bins."""
    counts = np.asarray(bin_counts, dtype=np.float64)[reachable]
    if counts.sum() == 0:
        raise ValueError("no visits recorded")
    p = counts / counts.sum()
    u = 1.0 / counts.size
    return float(((p - u) ** 2 / u).sum())


def weight_mae(weights, oracle_masses) -> float:
    return float(np.abs(np.asarray(weights) - np.asarray(oracle_masses)).mean())
