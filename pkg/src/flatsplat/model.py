"""2D Gaussian primitives: parameter activations, covariance algebra, cloud container.

All optimizable parameters are stored unconstrained (pre-activation): opacity as a
logit, axis scales as logs. Activation happens at the point of use.
"""

from dataclasses import dataclass

import numpy as np

PARAM_GROUPS = ("mu", "log_scale", "rot_angle", "opacity_logit", "color")

# Activated scales are floored to this (in pixels) inside the renderer only, so a
# collapsing Gaussian cannot produce a singular covariance. Parameters are untouched.
SCALE_FLOOR = 1e-4

EIGEN_TOLERANCE = 1e-9


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else out[()]


def inverse_sigmoid(o):
    """Exact inverse of sigmoid; valid only on (0, 1)."""
    o = np.asarray(o, dtype=np.float64)
    if np.any(o <= 0.0) or np.any(o >= 1.0):
        raise ValueError("inverse_sigmoid requires values strictly inside (0, 1)")
    out = np.log(o) - np.log1p(-o)
    return out if out.ndim else out[()]


def activate_scale(log_scale):
    return np.exp(log_scale)


def deactivate_scale(scale):
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0.0):
        raise ValueError("scales must be positive")
    out = np.log(scale)
    return out if out.ndim else out[()]


@dataclass(frozen=True)
class Gaussian2D:
    """One primitive, value-semantic. Arrays are copied on construction."""

    mu: np.ndarray          # (2,) position, pixels
    log_scale: np.ndarray   # (2,) log axis lengths
    rot_angle: float        # radians
    opacity_logit: float
    color: np.ndarray       # (3,) rgb
    depth_index: int        # compositing order, unique within a cloud

    def __post_init__(self):
        object.__setattr__(self, "mu", np.array(self.mu, dtype=np.float64))
        object.__setattr__(self, "log_scale", np.array(self.log_scale, dtype=np.float64))
        object.__setattr__(self, "color", np.array(self.color, dtype=np.float64))

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))

    @property
    def scale(self):
        return np.exp(self.log_scale)


def rotation_matrix(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def build_covariance(g) -> np.ndarray:
    """Covariance R diag(s^2) R^T of a Gaussian2D (or anything with log_scale/rot_angle)."""
    return covariance_from(np.exp(np.asarray(g.log_scale, dtype=np.float64)), g.rot_angle)


def covariance_from(scale, angle):
    """Symmetric 2x2 covariance from activated scales and rotation angle.

    Vectorized: scale (..., 2) and angle (...) give (..., 2, 2).
    """
    scale = np.asarray(scale, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    a1 = scale[..., 0] ** 2
    a2 = scale[..., 1] ** 2
    c, s = np.cos(angle), np.sin(angle)
    xx = c * c * a1 + s * s * a2
    yy = s * s * a1 + c * c * a2
    xy = c * s * (a1 - a2)
    out = np.empty(np.broadcast(a1, c).shape + (2, 2))
    out[..., 0, 0] = xx
    out[..., 0, 1] = xy
    out[..., 1, 0] = xy
    out[..., 1, 1] = yy
    return out


def covariance_eigen_sqrt(sigma) -> np.ndarray:
    """Square roots of the two eigenvalues of a symmetric 2x2 matrix, descending.

    Closed form via trace/determinant. Eigenvalues more negative than the
    tolerance raise; small negatives from roundoff are clamped to zero.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    half_tr = 0.5 * (sigma[..., 0, 0] + sigma[..., 1, 1])
    det = sigma[..., 0, 0] * sigma[..., 1, 1] - sigma[..., 0, 1] * sigma[..., 1, 0]
    disc = np.sqrt(np.maximum(half_tr**2 - det, 0.0))
    lam = np.stack([half_tr + disc, half_tr - disc], axis=-1)
    if np.any(lam < -EIGEN_TOLERANCE):
        raise ValueError(f"covariance has negative eigenvalue beyond tolerance: {lam.min()}")
    return np.sqrt(np.maximum(lam, 0.0))


class GaussianCloud:
    """Mutable struct-of-arrays container for a set of primitives.

    The trainer is the only writer; everything else treats a cloud as read-only.
    Storage order equals creation order, and depth_index is assigned from a
    monotone counter, so storage order is also compositing order.
    """

    def __init__(self, mu, log_scale, rot_angle, opacity_logit, color,
                 max_count, rng_seed=0, depth_index=None, dtype=np.float32):
        n = len(mu)
        if n > max_count:
            raise ValueError(f"cloud size {n} exceeds max_count {max_count}")
        self.mu = np.ascontiguousarray(mu, dtype=dtype).reshape(n, 2)
        self.log_scale = np.ascontiguousarray(log_scale, dtype=dtype).reshape(n, 2)
        self.rot_angle = np.ascontiguousarray(rot_angle, dtype=dtype).reshape(n)
        self.opacity_logit = np.ascontiguousarray(opacity_logit, dtype=dtype).reshape(n)
        self.color = np.ascontiguousarray(color, dtype=dtype).reshape(n, 3)
        self.max_count = int(max_count)
        self.rng_seed = int(rng_seed)
        if depth_index is None:
            depth_index = np.arange(n, dtype=np.int64)
        self.depth_index = np.ascontiguousarray(depth_index, dtype=np.int64).reshape(n)
        if len(np.unique(self.depth_index)) != n:
            raise ValueError("depth_index values must be unique")
        self._next_depth = int(self.depth_index.max()) + 1 if n else 0

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    def __len__(self) -> int:
        return self.n

    @property
    def dtype(self):
        return self.mu.dtype

    def opacities(self):
        return sigmoid(self.opacity_logit.astype(np.float64))

    def scales(self):
        return np.exp(self.log_scale.astype(np.float64))

    def covariances(self):
        return covariance_from(self.scales(), self.rot_angle.astype(np.float64))

    def gaussian(self, i) -> Gaussian2D:
        return Gaussian2D(
            mu=self.mu[i], log_scale=self.log_scale[i],
            rot_angle=float(self.rot_angle[i]),
            opacity_logit=float(self.opacity_logit[i]),
            color=self.color[i], depth_index=int(self.depth_index[i]),
        )

    def params(self, group):
        return getattr(self, group)

    def append(self, mu, log_scale, rot_angle, opacity_logit, color):
        """Append new primitives with fresh (contiguous) depth indices; returns their row indices."""
        k = len(mu)
        if self.n + k > self.max_count:
            raise ValueError(f"append of {k} would exceed max_count {self.max_count}")
        dt = self.dtype
        self.mu = np.concatenate([self.mu, np.asarray(mu, dtype=dt).reshape(k, 2)])
        self.log_scale = np.concatenate([self.log_scale, np.asarray(log_scale, dtype=dt).reshape(k, 2)])
        self.rot_angle = np.concatenate([self.rot_angle, np.asarray(rot_angle, dtype=dt).reshape(k)])
        self.opacity_logit = np.concatenate([self.opacity_logit, np.asarray(opacity_logit, dtype=dt).reshape(k)])
        self.color = np.concatenate([self.color, np.asarray(color, dtype=dt).reshape(k, 3)])
        fresh = np.arange(self._next_depth, self._next_depth + k, dtype=np.int64)
        self.depth_index = np.concatenate([self.depth_index, fresh])
        self._next_depth += k
        return np.arange(self.n - k, self.n)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.mu.copy(), self.log_scale.copy(), self.rot_angle.copy(),
            self.opacity_logit.copy(), self.color.copy(),
            max_count=self.max_count, rng_seed=self.rng_seed,
            depth_index=self.depth_index.copy(), dtype=self.dtype,
        )

    def astype(self, dtype) -> "GaussianCloud":
        return GaussianCloud(
            self.mu, self.log_scale, self.rot_angle, self.opacity_logit, self.color,
            max_count=self.max_count, rng_seed=self.rng_seed,
            depth_index=self.depth_index, dtype=dtype,
        )

    # -- snapshot interface: bit-exact round trip of all unconstrained parameters --

    SNAPSHOT_VERSION = 1

    def save(self, path):
        np.savez(
            path,
            snapshot_version=np.int64(self.SNAPSHOT_VERSION),
            mu=self.mu, log_scale=self.log_scale, rot_angle=self.rot_angle,
            opacity_logit=self.opacity_logit, color=self.color,
            depth_index=self.depth_index,
            max_count=np.int64(self.max_count), rng_seed=np.int64(self.rng_seed),
            next_depth=np.int64(self._next_depth),
        )

    @classmethod
    def load(cls, path) -> "GaussianCloud":
        with np.load(path) as z:
            if int(z["snapshot_version"]) != cls.SNAPSHOT_VERSION:
                raise ValueError(f"unsupported snapshot version {int(z['snapshot_version'])}")
            cloud = cls(
                z["mu"], z["log_scale"], z["rot_angle"], z["opacity_logit"], z["color"],
                max_count=int(z["max_count"]), rng_seed=int(z["rng_seed"]),
                depth_index=z["depth_index"], dtype=z["mu"].dtype,
            )
            cloud._next_depth = int(z["next_depth"])
        return cloud
