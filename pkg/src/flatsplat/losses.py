"""Staged training loss: photometric + SSIM terms on the image, opacity and
covariance-scale regularizers on the primitives.

energy = (1 - lambda_ssim) * photometric + lambda_ssim * (1 - SSIM)
         + lambda_o * sum_i |o_i| + lambda_sigma * sum_ij |sqrt(eig_j(Sigma_i))|

The photometric term is mean absolute error during exploration and mean squared
error during exploitation. SSIM is the mean local SSIM over valid Gaussian
windows (no padding, so the adjoint is exact). For covariances built as
R diag(s^2) R^T the eigenvalue square roots are exactly the activated scales,
which is how the scale regularizer and its gradient are evaluated.
"""

from dataclasses import dataclass, replace

import numpy as np

from .model import sigmoid
from .rendering import ParamGrads

EXPLORATION = "exploration"
EXPLOITATION = "exploitation"
STAGES = (EXPLORATION, EXPLOITATION)


@dataclass(frozen=True)
class LossConfig:
    lambda_ssim: float = 0.2
    lambda_o: float = 0.01
    lambda_sigma: float = 0.01
    photometric_mode: str = "l1"
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2

    def __post_init__(self):
        if not (0.0 <= self.lambda_ssim <= 1.0):
            raise ValueError("lambda_ssim must be in [0, 1]")
        if self.lambda_o < 0 or self.lambda_sigma < 0:
            raise ValueError("regularizer weights must be >= 0")
        if self.photometric_mode not in ("l1", "l2"):
            raise ValueError("photometric_mode must be 'l1' or 'l2'")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be odd and >= 3")


def photometric_swap(cfg: LossConfig, stage: str) -> LossConfig:
    """L1 photometric term while exploring, L2 while exploiting; nothing else changes."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    return replace(cfg, photometric_mode="l1" if stage == EXPLORATION else "l2")


@dataclass
class LossResult:
    energy: float
    d_image: np.ndarray       # (H, W, 3) gradient of the image terms
    d_params: ParamGrads      # regularizer gradients (opacity_logit, log_scale)
    photometric: float
    ssim: float


def _gaussian_taps(window, sigma):
    r = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def _corr_valid(x, k, axis):
    win = np.lib.stride_tricks.sliding_window_view(x, k.shape[0], axis=axis)
    return win @ k


def _corr_valid_adjoint(g, k, axis, size):
    pad = [(0, 0)] * g.ndim
    pad[axis] = (k.shape[0] - 1, k.shape[0] - 1)
    gp = np.pad(g, pad)
    # symmetric taps make the padded valid correlation the exact transpose
    out = _corr_valid(gp, k, axis)
    assert out.shape[axis] == size
    return out


def _filter(x, k):
    return _corr_valid(_corr_valid(x, k, 0), k, 1)


def _filter_adjoint(g, k, shape):
    return _corr_valid_adjoint(_corr_valid_adjoint(g, k, 1, shape[1]), k, 0, shape[0])


def ssim_and_grad(x, y, window=11, sigma=1.5, c1=0.01**2, c2=0.03**2):
    """Mean local SSIM of two (H, W, 3) images and its gradient w.r.t. x."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    h, w = x.shape[:2]
    if h < window or w < window:
        raise ValueError(f"images ({h}x{w}) smaller than the SSIM window {window}")
    k = _gaussian_taps(window, sigma)
    grad = np.zeros_like(x)
    total = 0.0
    count = 0
    for ch in range(x.shape[2]):
        xc, yc = x[..., ch], y[..., ch]
        mx = _filter(xc, k)
        my = _filter(yc, k)
        mx2 = _filter(xc * xc, k)
        my2 = _filter(yc * yc, k)
        mxy = _filter(xc * yc, k)
        a1 = 2 * mx * my + c1
        b1 = mx * mx + my * my + c1
        a2 = 2 * (mxy - mx * my) + c2
        b2 = (mx2 - mx * mx) + (my2 - my * my) + c2
        s_map = (a1 * a2) / (b1 * b2)
        total += s_map.sum()
        count += s_map.size
        # partials w.r.t. the filtered maps
        d_a1 = a2 / (b1 * b2)
        d_a2 = a1 / (b1 * b2)
        d_b1 = -s_map / b1
        d_b2 = -s_map / b2
        d_mx = 2 * my * d_a1 + 2 * mx * d_b1 - 2 * my * d_a2 - 2 * mx * d_b2
        d_mx2 = d_b2
        d_mxy = 2 * d_a2
        grad[..., ch] = (
            _filter_adjoint(d_mx, k, (h, w))
            + 2 * xc * _filter_adjoint(d_mx2, k, (h, w))
            + yc * _filter_adjoint(d_mxy, k, (h, w))
        )
    return total / count, grad / count


def ssim_value(x, y, window=11, sigma=1.5, c1=0.01**2, c2=0.03**2) -> float:
    value, _ = ssim_and_grad(x, y, window=window, sigma=sigma, c1=c1, c2=c2)
    return float(value)


def total_loss(rendered, target, cloud, cfg: LossConfig) -> LossResult:
    """Scalar energy plus analytic gradients of both the image and regularizer paths."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    if cloud.n == 0:
        raise ValueError("total_loss requires a nonempty cloud")
    npix = rendered.size
    diff = rendered - target
    if cfg.photometric_mode == "l1":
        photo = float(np.abs(diff).sum() / npix)
        d_photo = np.sign(diff) / npix
    else:
        photo = float((diff * diff).sum() / npix)
        d_photo = 2.0 * diff / npix
    if cfg.lambda_ssim > 0.0:
        ssim, d_ssim = ssim_and_grad(rendered, target, window=cfg.ssim_window,
                                     sigma=cfg.ssim_sigma, c1=cfg.ssim_c1, c2=cfg.ssim_c2)
    else:
        ssim, d_ssim = 1.0, 0.0
    d_image = (1.0 - cfg.lambda_ssim) * d_photo - cfg.lambda_ssim * np.asarray(d_ssim)

    d_params = ParamGrads.zeros(cloud.n)
    opacities = sigmoid(cloud.opacity_logit.astype(np.float64))
    scales = cloud.scales()
    reg_o = cfg.lambda_o * float(opacities.sum())
    reg_sigma = cfg.lambda_sigma * float(scales.sum())
    d_params.opacity_logit[:] = cfg.lambda_o * opacities * (1.0 - opacities)
    d_params.log_scale[:] = cfg.lambda_sigma * scales

    energy = ((1.0 - cfg.lambda_ssim) * photo + cfg.lambda_ssim * (1.0 - ssim)
              + reg_o + reg_sigma)
    return LossResult(energy=float(energy), d_image=d_image, d_params=d_params,
                      photometric=photo, ssim=float(ssim))
