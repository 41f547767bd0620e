# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Compiled hot kernels: alpha compositing forward/backward and the sampler chain.

Contracts match kernels/reference.py exactly; per-pair arithmetic runs in double
precision regardless of the storage dtype.
"""

import numpy as np

cimport cython
from libc.math cimport ceil, exp, log, sqrt

ALPHA_CLAMP = 0.99
cdef double CLAMP = 0.99

name = "compiled"

ctypedef fused real:
    float
    double


def composite_forward(real[:, ::1] mu, real[:, ::1] icov, real[::1] opacity,
                      real[:, ::1] color, int[:, ::1] bbox, long[::1] offsets,
                      real[::1] background, int height, int width):
    """See kernels.reference.composite_forward."""
    dtype = np.float32 if real is float else np.float64
    image_arr = np.zeros((height, width, 3), dtype=dtype)
    trans_arr = np.ones((height, width), dtype=dtype)
    raw_arr = np.zeros(offsets[mu.shape[0]], dtype=dtype)
    cdef real[:, :, ::1] image = image_arr
    cdef real[:, ::1] trans = trans_arr
    cdef real[::1] raw_alpha = raw_arr
    cdef Py_ssize_t n = mu.shape[0]
    cdef Py_ssize_t i, xx, yy, pos
    cdef int x0, x1, y0, y1
    cdef double mx, my, pa, pb, pc, o, c0, c1, c2
    cdef double dx, dy, q, raw, a, t, at
    with nogil:
        for i in range(n):
            x0 = bbox[i, 0]; x1 = bbox[i, 1]; y0 = bbox[i, 2]; y1 = bbox[i, 3]
            if x1 <= x0 or y1 <= y0:
                continue
            mx = mu[i, 0]; my = mu[i, 1]
            pa = icov[i, 0]; pb = icov[i, 1]; pc = icov[i, 2]
            o = opacity[i]
            c0 = color[i, 0]; c1 = color[i, 1]; c2 = color[i, 2]
            pos = offsets[i]
            for yy in range(y0, y1):
                dy = yy - my
                for xx in range(x0, x1):
                    dx = xx - mx
                    q = pa * dx * dx + 2.0 * pb * dx * dy + pc * dy * dy
                    raw = o * exp(-0.5 * q)
                    raw_alpha[pos] = <real> raw
                    pos += 1
                    a = raw if raw < CLAMP else CLAMP
                    t = trans[yy, xx]
                    at = a * t
                    image[yy, xx, 0] = image[yy, xx, 0] + <real> (at * c0)
                    image[yy, xx, 1] = image[yy, xx, 1] + <real> (at * c1)
                    image[yy, xx, 2] = image[yy, xx, 2] + <real> (at * c2)
                    trans[yy, xx] = <real> (t * (1.0 - a))
        for yy in range(height):
            for xx in range(width):
                t = trans[yy, xx]
                image[yy, xx, 0] = image[yy, xx, 0] + <real> (t * background[0])
                image[yy, xx, 1] = image[yy, xx, 1] + <real> (t * background[1])
                image[yy, xx, 2] = image[yy, xx, 2] + <real> (t * background[2])
    return image_arr, trans_arr, raw_arr


def composite_backward(real[:, ::1] mu, real[:, ::1] icov, real[::1] opacity,
                       real[:, ::1] color, int[:, ::1] bbox, long[::1] offsets,
                       real[::1] background, real[:, ::1] t_final,
                       real[::1] raw_alpha, real[:, :, ::1] d_image):
    """See kernels.reference.composite_backward. Gradients are returned in float64."""
    cdef Py_ssize_t n = mu.shape[0]
    cdef int height = t_final.shape[0]
    cdef int width = t_final.shape[1]
    g_mu_arr = np.zeros((n, 2))
    g_icov_arr = np.zeros((n, 3))
    g_opa_arr = np.zeros(n)
    g_color_arr = np.zeros((n, 3))
    trans_arr = np.asarray(t_final, dtype=np.float64).copy()
    behind_arr = np.empty((height, width, 3))
    cdef double[:, ::1] g_mu = g_mu_arr
    cdef double[:, ::1] g_icov = g_icov_arr
    cdef double[::1] g_opa = g_opa_arr
    cdef double[:, ::1] g_color = g_color_arr
    cdef double[:, ::1] trans = trans_arr
    cdef double[:, :, ::1] behind = behind_arr
    cdef Py_ssize_t i, xx, yy, pos
    cdef int x0, x1, y0, y1
    cdef double mx, my, pa, pb, pc, o, c0, c1, c2
    cdef double dx, dy, raw, a, one_m, t_in, at, d_alpha, d_raw, wq
    cdef double acc_o, acc_a, acc_b, acc_c, acc_mx, acc_my, acc_c0, acc_c1, acc_c2
    with nogil:
        for yy in range(height):
            for xx in range(width):
                behind[yy, xx, 0] = trans[yy, xx] * background[0]
                behind[yy, xx, 1] = trans[yy, xx] * background[1]
                behind[yy, xx, 2] = trans[yy, xx] * background[2]
        for i in range(n - 1, -1, -1):
            x0 = bbox[i, 0]; x1 = bbox[i, 1]; y0 = bbox[i, 2]; y1 = bbox[i, 3]
            if x1 <= x0 or y1 <= y0:
                continue
            mx = mu[i, 0]; my = mu[i, 1]
            pa = icov[i, 0]; pb = icov[i, 1]; pc = icov[i, 2]
            o = opacity[i]
            c0 = color[i, 0]; c1 = color[i, 1]; c2 = color[i, 2]
            acc_o = acc_a = acc_b = acc_c = acc_mx = acc_my = 0.0
            acc_c0 = acc_c1 = acc_c2 = 0.0
            pos = offsets[i]
            for yy in range(y0, y1):
                dy = yy - my
                for xx in range(x0, x1):
                    dx = xx - mx
                    raw = raw_alpha[pos]
                    pos += 1
                    a = raw if raw < CLAMP else CLAMP
                    one_m = 1.0 - a
                    t_in = trans[yy, xx] / one_m
                    at = a * t_in
                    acc_c0 += d_image[yy, xx, 0] * at
                    acc_c1 += d_image[yy, xx, 1] * at
                    acc_c2 += d_image[yy, xx, 2] * at
                    d_alpha = (d_image[yy, xx, 0] * (c0 * t_in - behind[yy, xx, 0] / one_m)
                               + d_image[yy, xx, 1] * (c1 * t_in - behind[yy, xx, 1] / one_m)
                               + d_image[yy, xx, 2] * (c2 * t_in - behind[yy, xx, 2] / one_m))
                    behind[yy, xx, 0] = behind[yy, xx, 0] + at * c0
                    behind[yy, xx, 1] = behind[yy, xx, 1] + at * c1
                    behind[yy, xx, 2] = behind[yy, xx, 2] + at * c2
                    trans[yy, xx] = t_in
                    if raw < CLAMP:
                        d_raw = d_alpha
                        acc_o += d_raw * raw
                        wq = d_raw * raw * -0.5
                        acc_a += wq * dx * dx
                        acc_b += wq * 2.0 * dx * dy
                        acc_c += wq * dy * dy
                        acc_mx += wq * -2.0 * (pa * dx + pb * dy)
                        acc_my += wq * -2.0 * (pb * dx + pc * dy)
            g_opa[i] = acc_o / o if o > 0.0 else 0.0
            g_icov[i, 0] = acc_a
            g_icov[i, 1] = acc_b
            g_icov[i, 2] = acc_c
            g_mu[i, 0] = acc_mx
            g_mu[i, 1] = acc_my
            g_color[i, 0] = acc_c0
            g_color[i, 1] = acc_c1
            g_color[i, 2] = acc_c2
    return g_mu_arr, g_icov_arr, g_opa_arr, g_color_arr


cdef inline double _dw_energy(double x, double tilt) nogil:
    return (x * x - 1.0) * (x * x - 1.0) - tilt * x


cdef inline double _dw_grad(double x, double tilt) nogil:
    return 4.0 * x * (x * x - 1.0) - tilt


def sampler_chain(int kind, double[::1] params, double[::1] x0,
                  long iters, long warmup, double lr, double lambda_noise,
                  double beta1, double beta2, double eps_hat, bint flatten,
                  double zeta, double tau, double theta_lr,
                  double theta_decay_t0, double theta_decay_exp,
                  double nu_min, double nu_max, double theta_floor,
                  bint value_clamp, double[::1] theta, double u_lo, double u_hi,
                  double[:, ::1] noise, double[::1] target, double radius):
    """See kernels.reference.sampler_chain. theta is updated in place."""
    cdef Py_ssize_t m = theta.shape[0]
    cdef Py_ssize_t dim = x0.shape[0]
    cdef double delta_u = (u_hi - u_lo) / (m - 2)
    x_arr = np.array(x0, dtype=np.float64)
    counts_arr = np.zeros(m, dtype=np.int64)
    cdef double[::1] x = x_arr
    cdef long[::1] bin_counts = counts_arr
    cdef double[8] m1
    cdef double[8] m2
    cdef double[8] grad
    cdef long first_escape = -1
    cdef Py_ssize_t it, d, j, jj, kmix
    cdef long t
    cdef double energy, nu, lo, step, delta, s, dd, r2
    cdef double mh, vh, bc1, bc2
    cdef double tilt = 0.0
    # mixture parameters (kind 1): params = [k, w..., cx..., cy..., sigma...]
    cdef Py_ssize_t nmix = 0
    cdef double[16] w_mix, cx_mix, cy_mix, s_mix
    cdef double expo, shift, total, term, coef, e0, e1
    if dim > 8:
        raise ValueError("sampler_chain supports at most 8 dimensions")
    if kind == 1:
        nmix = <Py_ssize_t> params[0]
        if nmix > 16:
            raise ValueError("too many mixture components")
        for kmix in range(nmix):
            w_mix[kmix] = params[1 + kmix]
            cx_mix[kmix] = params[1 + nmix + kmix]
            cy_mix[kmix] = params[1 + 2 * nmix + kmix]
            s_mix[kmix] = params[1 + 3 * nmix + kmix]
    for d in range(dim):
        m1[d] = 0.0
        m2[d] = 0.0
    t = 0
    with nogil:
        for it in range(iters):
            # energy and gradient of the landscape at the current iterate
            if kind == 0:
                tilt = params[0]
                energy = _dw_energy(x[0], tilt)
                grad[0] = _dw_grad(x[0], tilt)
            else:
                shift = -1e300
                for kmix in range(nmix):
                    e0 = x[0] - cx_mix[kmix]
                    e1 = x[1] - cy_mix[kmix]
                    r2 = e0 * e0 + e1 * e1
                    expo = -0.5 * r2 / (s_mix[kmix] * s_mix[kmix])
                    if expo > shift:
                        shift = expo
                total = 0.0
                grad[0] = 0.0
                grad[1] = 0.0
                for kmix in range(nmix):
                    e0 = x[0] - cx_mix[kmix]
                    e1 = x[1] - cy_mix[kmix]
                    r2 = e0 * e0 + e1 * e1
                    expo = -0.5 * r2 / (s_mix[kmix] * s_mix[kmix])
                    term = w_mix[kmix] * exp(expo - shift)
                    total += term
                    grad[0] += term * e0 / (s_mix[kmix] * s_mix[kmix])
                    grad[1] += term * e1 / (s_mix[kmix] * s_mix[kmix])
                energy = -(shift + log(total))
                grad[0] /= total
                grad[1] /= total
            if energy <= u_lo:
                j = 1
            elif energy > u_hi:
                j = m
            else:
                jj = <Py_ssize_t> ceil((energy - u_lo) / delta_u)
                if jj < 1:
                    jj = 1
                elif jj > m - 2:
                    jj = m - 2
                j = jj + 1
            bin_counts[j - 1] += 1
            if flatten and it >= warmup:
                if value_clamp:
                    lo = 0.0
                else:
                    jj = j - 1 if j - 1 >= 1 else 1
                    lo = log(theta[jj - 1])
                nu = 1.0 + zeta * tau * (log(theta[j - 1]) - lo) / delta_u
                if nu < nu_min:
                    nu = nu_min
                elif nu > nu_max:
                    nu = nu_max
            else:
                nu = 1.0
            t += 1
            bc1 = 1.0 - beta1 ** t
            bc2 = 1.0 - beta2 ** t
            for d in range(dim):
                m1[d] = beta1 * m1[d] + (1.0 - beta1) * grad[d]
                m2[d] = beta2 * m2[d] + (1.0 - beta2) * grad[d] * grad[d]
                mh = m1[d] / bc1
                vh = m2[d] / bc2
                x[d] = x[d] - (lr * nu) * (mh / (sqrt(vh) + eps_hat)) \
                    + (lr * lambda_noise) * noise[it, d]
            if flatten and it >= warmup:
                step = theta_lr
                if theta_decay_t0 > 0.0:
                    step = theta_lr / (1.0 + it / theta_decay_t0) ** theta_decay_exp
                delta = step * theta[j - 1] ** zeta
                if delta < 1.0:
                    for d in range(m):
                        theta[d] -= delta * theta[d]
                    theta[j - 1] += delta
                    s = 0.0
                    for d in range(m):
                        if theta[d] < theta_floor:
                            theta[d] = theta_floor
                        s += theta[d]
                    for d in range(m):
                        theta[d] /= s
            if first_escape < 0:
                r2 = 0.0
                for d in range(dim):
                    dd = x[d] - target[d]
                    r2 += dd * dd
                if r2 < radius * radius:
                    first_escape = it + 1
    return x_arr, counts_arr, first_escape
