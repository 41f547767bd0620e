"""Pure-numpy fallback implementations of the hot kernels.

Same contracts as the compiled core in ``_core.pyx``; used when the extension
is unavailable (or forced via FLATSPLAT_KERNELS=reference). Compositing loops
are per-Gaussian with vectorized pixel patches, the sampler chain is a plain
Python loop, so expect roughly an order of magnitude less throughput.
"""

import numpy as np

ALPHA_CLAMP = 0.99

name = "reference"


def composite_forward(mu, icov, opacity, color, bbox, offsets, background, height, width):
    """Front-to-back alpha compositing of depth-ordered Gaussians.

    Returns (image, t_final, raw_alpha): the unclamped composited image, the
    final per-pixel transmittance, and the cached unclamped per-pair alpha
    (opacity times Gaussian falloff) consumed by the backward pass.
    """
    dt = mu.dtype
    n = mu.shape[0]
    image = np.zeros((height, width, 3), dtype=dt)
    trans = np.ones((height, width), dtype=dt)
    raw_alpha = np.zeros(int(offsets[-1]), dtype=dt)
    one = dt.type(1)
    clamp = dt.type(ALPHA_CLAMP)
    for i in range(n):
        x0, x1, y0, y1 = bbox[i]
        if x1 <= x0 or y1 <= y0:
            continue
        xs = np.arange(x0, x1, dtype=dt)
        ys = np.arange(y0, y1, dtype=dt)
        dx = xs[None, :] - mu[i, 0]
        dy = ys[:, None] - mu[i, 1]
        pa, pb, pc = icov[i]
        q = pa * dx * dx + 2 * pb * dx * dy + pc * dy * dy
        raw = opacity[i] * np.exp(dt.type(-0.5) * q)
        raw_alpha[offsets[i]:offsets[i + 1]] = raw.ravel()
        a = np.minimum(raw, clamp)
        t = trans[y0:y1, x0:x1]
        at = a * t
        image[y0:y1, x0:x1, :] += at[:, :, None] * color[i][None, None, :]
        trans[y0:y1, x0:x1] = t * (one - a)
    image += trans[:, :, None] * np.asarray(background, dtype=dt)[None, None, :]
    return image, trans, raw_alpha


def composite_backward(mu, icov, opacity, color, bbox, offsets, background,
                       t_final, raw_alpha, d_image):
    """Reverse-order adjoint of composite_forward.

    Reconstructs per-Gaussian transmittance by back-to-front division (safe:
    1 - alpha >= 0.01 after the clamp) and accumulates gradients w.r.t. mu,
    the inverse-covariance components (pa, pb, pc), the activated opacity and
    the color. Pairs clamped at ALPHA_CLAMP propagate zero gradient through
    the alpha path; the transmittance factor still applies.
    """
    n = mu.shape[0]
    mu = np.asarray(mu, dtype=np.float64)
    icov = np.asarray(icov, dtype=np.float64)
    opacity = np.asarray(opacity, dtype=np.float64)
    color = np.asarray(color, dtype=np.float64)
    d_image = np.asarray(d_image, dtype=np.float64)
    g_mu = np.zeros((n, 2))
    g_icov = np.zeros((n, 3))
    g_opa = np.zeros(n)
    g_color = np.zeros((n, 3))
    trans = np.asarray(t_final, dtype=np.float64).copy()
    behind = trans[:, :, None] * np.asarray(background, dtype=np.float64)[None, None, :]
    for i in range(n - 1, -1, -1):
        x0, x1, y0, y1 = bbox[i]
        if x1 <= x0 or y1 <= y0:
            continue
        xs = np.arange(x0, x1, dtype=np.float64)
        ys = np.arange(y0, y1, dtype=np.float64)
        dx = xs[None, :] - mu[i, 0]
        dy = ys[:, None] - mu[i, 1]
        raw = raw_alpha[offsets[i]:offsets[i + 1]].astype(np.float64).reshape(y1 - y0, x1 - x0)
        a = np.minimum(raw, ALPHA_CLAMP)
        one_m = 1.0 - a
        t_in = trans[y0:y1, x0:x1] / one_m
        dimg = d_image[y0:y1, x0:x1, :]
        at = a * t_in
        g_color[i] = (dimg * at[:, :, None]).sum(axis=(0, 1))
        s_patch = behind[y0:y1, x0:x1, :]
        d_alpha = (dimg * (color[i][None, None, :] * t_in[:, :, None]
                           - s_patch / one_m[:, :, None])).sum(axis=2)
        behind[y0:y1, x0:x1, :] = s_patch + at[:, :, None] * color[i][None, None, :]
        trans[y0:y1, x0:x1] = t_in
        d_raw = np.where(raw < ALPHA_CLAMP, d_alpha, 0.0)
        g_opa[i] = (d_raw * raw).sum() / opacity[i] if opacity[i] > 0 else 0.0
        wq = d_raw * raw * -0.5
        g_icov[i, 0] = (wq * dx * dx).sum()
        g_icov[i, 1] = (wq * 2 * dx * dy).sum()
        g_icov[i, 2] = (wq * dy * dy).sum()
        pa, pb, pc = icov[i]
        g_mu[i, 0] = (wq * (-2) * (pa * dx + pb * dy)).sum()
        g_mu[i, 1] = (wq * (-2) * (pb * dx + pc * dy)).sum()
    return g_mu, g_icov, g_opa, g_color


def _double_well_energy_grad(x, tilt):
    e = (x[0] ** 2 - 1.0) ** 2 - tilt * x[0]
    g = 4.0 * x[0] * (x[0] ** 2 - 1.0) - tilt
    return e, np.array([g])


def _mixture_energy_grad(x, weights, centers, sigmas):
    d = x[None, :] - centers
    r2 = (d * d).sum(axis=1)
    expo = -0.5 * r2 / sigmas**2
    shift = expo.max()
    terms = weights * np.exp(expo - shift)
    total = terms.sum()
    e = -(shift + np.log(total))
    coef = terms / total / sigmas**2
    g = (coef[:, None] * d).sum(axis=0)
    return e, g


def sampler_chain(kind, params, x0, iters, warmup, lr, lambda_noise,
                  beta1, beta2, eps_hat, flatten, zeta, tau,
                  theta_lr, theta_decay_t0, theta_decay_exp,
                  nu_min, nu_max, theta_floor, value_clamp,
                  theta, u_lo, u_hi, noise, target, radius):
    """Langevin chain on a synthetic landscape, optionally with flat-histogram weighting.

    kind 0 = tilted double well (params = [tilt]); kind 1 = Gaussian mixture
    (params = [k, w..., cx..., cy..., sigma...]). theta is updated in place when
    flatten is true. noise holds pre-generated standard normal draws, one row
    per iteration, so compiled and fallback backends follow identical paths.
    Returns (x, bin_counts, first_escape_iter) with first_escape_iter = -1 when
    the chain never comes within radius of target (iterate k is checked after
    step k-1; the caller checks the initial iterate 0).
    """
    m = theta.shape[0]
    delta_u = (u_hi - u_lo) / (m - 2)
    x = np.array(x0, dtype=np.float64)
    dim = x.shape[0]
    m1 = np.zeros(dim)
    m2 = np.zeros(dim)
    bin_counts = np.zeros(m, dtype=np.int64)
    first_escape = -1
    if kind == 1:
        k = int(params[0])
        weights = params[1:1 + k]
        centers = np.stack([params[1 + k:1 + 2 * k], params[1 + 2 * k:1 + 3 * k]], axis=1)
        sigmas = params[1 + 3 * k:1 + 4 * k]
    for it in range(iters):
        if kind == 0:
            energy, grad = _double_well_energy_grad(x, params[0])
        else:
            energy, grad = _mixture_energy_grad(x, weights, centers, sigmas)
        if energy <= u_lo:
            j = 1
        elif energy > u_hi:
            j = m
        else:
            j = min(max(int(np.ceil((energy - u_lo) / delta_u)), 1), m - 2) + 1
        bin_counts[j - 1] += 1
        active = flatten and it >= warmup
        if active:
            lo = 0.0 if value_clamp else np.log(theta[max(j - 1, 1) - 1])
            nu = 1.0 + zeta * tau * (np.log(theta[j - 1]) - lo) / delta_u
            nu = min(max(nu, nu_min), nu_max)
        else:
            nu = 1.0
        t = it + 1
        m1 = beta1 * m1 + (1.0 - beta1) * grad
        m2 = beta2 * m2 + (1.0 - beta2) * grad * grad
        mh = m1 / (1.0 - beta1**t)
        vh = m2 / (1.0 - beta2**t)
        direction = mh / (np.sqrt(vh) + eps_hat)
        x = x - (lr * nu) * direction + (lr * lambda_noise) * noise[it]
        if active:
            step = theta_lr
            if theta_decay_t0 > 0.0:
                step = theta_lr / (1.0 + it / theta_decay_t0) ** theta_decay_exp
            delta = step * theta[j - 1] ** zeta
            if delta < 1.0:
                theta -= delta * theta
                theta[j - 1] += delta
                np.maximum(theta, theta_floor, out=theta)
                theta /= theta.sum()
        if first_escape < 0:
            dd = x - target
            if float(dd @ dd) < radius * radius:
                first_escape = it + 1
    return x, bin_counts, first_escape
