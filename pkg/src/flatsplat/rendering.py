"""Forward splatting of a GaussianCloud and analytic gradients for all parameter groups.

Per pixel x, Gaussians are composited front to back in depth_index order with
alpha = min(o * exp(-0.5 * (x - mu)^T Sigma^-1 (x - mu)), 0.99); color(x) =
sum_i c_i alpha_i T_i + T_final * background. A Gaussian touches exactly the
pixels inside the axis-aligned bounding box of its 3-sigma ellipse; everything
outside contributes exactly zero (the one intentional truncation).

Pixel centers sit at integer coordinates: pixel (row r, col c) is the point
(x=c, y=r).
"""

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import kernels
from .model import SCALE_FLOOR, sigmoid

FOOTPRINT_SIGMAS = 3.0
PSNR_SENTINEL = 99.0

PARAM_GROUPS = ("mu", "log_scale", "rot_angle", "opacity_logit", "color")


@dataclass
class ParamGrads:
    """Per-Gaussian gradients for the five parameter groups, float64."""

    mu: np.ndarray
    log_scale: np.ndarray
    rot_angle: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, 2)), np.zeros((n, 2)), np.zeros(n),
                   np.zeros(n), np.zeros((n, 3)))

    def add_(self, other):
        for g in PARAM_GROUPS:
            getattr(self, g)[...] += getattr(other, g)
        return self

    def group(self, name):
        return getattr(self, name)


@dataclass
class RenderOutput:
    image: np.ndarray             # (H, W, 3) unclamped composite
    t_final: np.ndarray           # (H, W) final transmittance
    per_gaussian_grads: ParamGrads | None = None  # populated by backward()
    _cache: dict = field(default_factory=dict, repr=False)


def _geometry(cloud, width, height):
    """Depth order, floored scales, covariance/inverse and integer footprints."""
    order = np.argsort(cloud.depth_index, kind="stable")
    mu = cloud.mu.astype(np.float64)[order]
    scales = cloud.scales()[order]
    floored = scales < SCALE_FLOOR
    s_eff = np.maximum(scales, SCALE_FLOOR)
    angle = cloud.rot_angle.astype(np.float64)[order]
    a1 = s_eff[:, 0] ** 2
    a2 = s_eff[:, 1] ** 2
    c, s = np.cos(angle), np.sin(angle)
    cov_xx = c * c * a1 + s * s * a2
    cov_yy = s * s * a1 + c * c * a2
    cov_xy = c * s * (a1 - a2)
    det = a1 * a2  # rotation leaves the determinant alone
    icov = np.stack([cov_yy / det, -cov_xy / det, cov_xx / det], axis=1)
    rx = FOOTPRINT_SIGMAS * np.sqrt(cov_xx)
    ry = FOOTPRINT_SIGMAS * np.sqrt(cov_yy)
    x0 = np.clip(np.ceil(mu[:, 0] - rx), 0, width).astype(np.int32)
    x1 = np.clip(np.floor(mu[:, 0] + rx) + 1, 0, width).astype(np.int32)
    y0 = np.clip(np.ceil(mu[:, 1] - ry), 0, height).astype(np.int32)
    y1 = np.clip(np.floor(mu[:, 1] + ry) + 1, 0, height).astype(np.int32)
    bbox = np.stack([x0, x1, y0, y1], axis=1)
    areas = np.maximum(x1 - x0, 0).astype(np.int64) * np.maximum(y1 - y0, 0)
    offsets = np.zeros(len(order) + 1, dtype=np.int64)
    np.cumsum(areas, out=offsets[1:])
    return {
        "order": order, "mu": mu, "s_eff": s_eff, "floored": floored,
        "angle": angle, "a1": a1, "a2": a2, "cos": c, "sin": s,
        "icov": icov, "bbox": bbox, "offsets": offsets,
    }


def render(cloud, width, height, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Composite the cloud onto a width x height canvas over a fixed background."""
    if width < 1 or height < 1:
        raise ValueError("width and height must be >= 1")
    dt = cloud.dtype
    geo = _geometry(cloud, width, height)
    order = geo["order"]
    bg = np.ascontiguousarray(background, dtype=dt)
    if bg.shape != (3,):
        raise ValueError("background must be an RGB triple")
    image, t_final, raw_alpha = kernels.composite_forward(
        np.ascontiguousarray(geo["mu"], dtype=dt),
        np.ascontiguousarray(geo["icov"], dtype=dt),
        np.ascontiguousarray(sigmoid(cloud.opacity_logit.astype(np.float64))[order], dtype=dt),
        np.ascontiguousarray(cloud.color[order], dtype=dt),
        np.ascontiguousarray(geo["bbox"]),
        geo["offsets"], bg, height, width,
    )
    out = RenderOutput(image=image, t_final=t_final)
    out._cache = {"geo": geo, "raw_alpha": raw_alpha, "bg": bg,
                  "width": width, "height": height, "n": cloud.n}
    return out


def backward(cloud, out: RenderOutput, d_image) -> ParamGrads:
    """Analytic gradients of the composite w.r.t. all unconstrained parameters.

    Requires the RenderOutput of a render() call with identical inputs. Pixels
    where the alpha clamp was active, and pixels outside a Gaussian's
    footprint, propagate zero gradient into that Gaussian.
    """
    cache = out._cache
    if not cache or cache["n"] != cloud.n:
        raise ValueError("backward requires the RenderOutput of a matching render call")
    d_image = np.asarray(d_image)
    if d_image.shape != (cache["height"], cache["width"], 3):
        raise ValueError(f"d_image shape {d_image.shape} does not match rendered size")
    if not np.all(np.isfinite(d_image)):
        raise ValueError("d_image must be finite")
    dt = cloud.dtype
    geo = cache["geo"]
    order = geo["order"]
    opa = sigmoid(cloud.opacity_logit.astype(np.float64))[order]
    g_mu, g_icov, g_opa, g_color = kernels.composite_backward(
        np.ascontiguousarray(geo["mu"], dtype=dt),
        np.ascontiguousarray(geo["icov"], dtype=dt),
        np.ascontiguousarray(opa, dtype=dt),
        np.ascontiguousarray(cloud.color[order], dtype=dt),
        np.ascontiguousarray(geo["bbox"]),
        geo["offsets"], cache["bg"], out.t_final, cache["raw_alpha"],
        np.ascontiguousarray(d_image, dtype=dt),
    )

    # Chain d/d(Sigma^-1) -> d/dSigma -> (log_scale, rot_angle). With
    # P = Sigma^-1 and M the symmetric matrix of quadratic-form gradients,
    # dL/dSigma = -P M P.
    pa, pb, pc = geo["icov"].T
    ma = g_icov[:, 0]
    mb = g_icov[:, 1] / 2.0  # kernel accumulated the combined off-diagonal term
    mc = g_icov[:, 2]
    # rows of P M
    pm_xx = pa * ma + pb * mb
    pm_xy = pa * mb + pb * mc
    pm_yx = pb * ma + pc * mb
    pm_yy = pb * mb + pc * mc
    gs_xx = -(pm_xx * pa + pm_xy * pb)
    gs_xy = -(pm_xx * pb + pm_xy * pc)
    gs_yy = -(pm_yx * pb + pm_yy * pc)

    c, s = geo["cos"], geo["sin"]
    a1, a2 = geo["a1"], geo["a2"]
    # A = R^T G R diagonal entries give d/d(s_k^2)
    a_diag1 = c * c * gs_xx + 2 * c * s * gs_xy + s * s * gs_yy
    a_diag2 = s * s * gs_xx - 2 * c * s * gs_xy + c * c * gs_yy
    g_log_scale = np.stack([2 * a1 * a_diag1, 2 * a2 * a_diag2], axis=1)
    g_log_scale[geo["floored"]] = 0.0  # renderer-side scale floor blocks gradient

    sin2 = 2 * c * s
    cos2 = c * c - s * s
    diff = a1 - a2
    g_angle = gs_xx * (-diff * sin2) + gs_yy * (diff * sin2) + 2 * gs_xy * (diff * cos2)

    g_logit = g_opa * opa * (1.0 - opa)

    grads = ParamGrads.zeros(cloud.n)
    grads.mu[order] = g_mu
    grads.log_scale[order] = g_log_scale
    grads.rot_angle[order] = g_angle
    grads.opacity_logit[order] = g_logit
    grads.color[order] = g_color
    out.per_gaussian_grads = grads
    return grads


def psnr(ref, test, peak=1.0) -> float:
    """10 log10(peak^2 / MSE); identical images return the 99 dB sentinel."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"image shapes differ: {ref.shape} vs {test.shape}")
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return float(10.0 * np.log10(peak * peak / mse))


def load_image(path) -> np.ndarray:
    """8-bit RGB PNG (or anything PIL reads) to float64 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def save_image(path, image):
    """Clamp to [0, 1] and write an 8-bit RGB PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8), mode="RGB").save(path)
