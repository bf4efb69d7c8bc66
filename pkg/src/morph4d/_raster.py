"""Per-pixel front-to-back compositing kernels (numba).

Splats arrive pre-sorted front to back. Each kernel call handles one tile of
image rows; within a pixel the splats are visited in the given order, so the
result does not depend on how tiles are scheduled across threads.
"""

import math

import numpy as np
from numba import njit

# Per-splat gradient slots in the tile accumulators.
G_MX, G_MY, G_CA, G_CB, G_CC, G_OP, G_R, G_G, G_B = range(9)
N_GRAD = 9


@njit(cache=True, nogil=True)
def forward_tile(r0, r1, width, idx, mx, my, ca, cb, cc, op, col, cutoff2, out):
    for r in range(r0, r1):
        py = r + 0.5
        for c in range(width):
            px = c + 0.5
            t = 1.0
            acc0 = 0.0
            acc1 = 0.0
            acc2 = 0.0
            for k in range(idx.shape[0]):
                i = idx[k]
                dx = px - mx[i]
                dy = py - my[i]
                q = ca[i] * dx * dx + 2.0 * cb[i] * dx * dy + cc[i] * dy * dy
                if cutoff2 > 0.0 and q > cutoff2:
                    continue
                a = op[i] * math.exp(-0.5 * q)
                w = t * a
                acc0 += w * col[i, 0]
                acc1 += w * col[i, 1]
                acc2 += w * col[i, 2]
                t *= 1.0 - a
            out[r, c, 0] = acc0
            out[r, c, 1] = acc1
            out[r, c, 2] = acc2


@njit(cache=True, nogil=True)
def backward_tile(r0, r1, width, idx, mx, my, ca, cb, cc, op, col, cutoff2, grad_img, grads):
    """Accumulate d(loss)/d(splat params) for one tile into ``grads`` (N, 9).

    With ``B_i`` the color composited behind splat ``i`` (transmittance reset
    to one after ``i``), ``dC/da_i = T_i (c_i - B_i)``, which avoids dividing
    by ``1 - a_i``.
    """
    m = idx.shape[0]
    t_buf = np.empty(m)
    a_buf = np.empty(m)
    g_buf = np.empty(m)
    for r in range(r0, r1):
        py = r + 0.5
        for c in range(width):
            px = c + 0.5
            g0 = grad_img[r, c, 0]
            g1 = grad_img[r, c, 1]
            g2 = grad_img[r, c, 2]
            if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                continue
            t = 1.0
            for k in range(m):
                i = idx[k]
                dx = px - mx[i]
                dy = py - my[i]
                q = ca[i] * dx * dx + 2.0 * cb[i] * dx * dy + cc[i] * dy * dy
                if cutoff2 > 0.0 and q > cutoff2:
                    a_buf[k] = -1.0
                    continue
                gauss = math.exp(-0.5 * q)
                a = op[i] * gauss
                t_buf[k] = t
                a_buf[k] = a
                g_buf[k] = gauss
                t *= 1.0 - a
            b0 = 0.0
            b1 = 0.0
            b2 = 0.0
            for k in range(m - 1, -1, -1):
                a = a_buf[k]
                if a < 0.0:
                    continue
                i = idx[k]
                ti = t_buf[k]
                d_a = ti * (g0 * (col[i, 0] - b0) + g1 * (col[i, 1] - b1) + g2 * (col[i, 2] - b2))
                w = ti * a
                grads[i, G_R] += g0 * w
                grads[i, G_G] += g1 * w
                grads[i, G_B] += g2 * w
                grads[i, G_OP] += d_a * g_buf[k]
                b0 = a * col[i, 0] + (1.0 - a) * b0
                b1 = a * col[i, 1] + (1.0 - a) * b1
                b2 = a * col[i, 2] + (1.0 - a) * b2
                d_q = -0.5 * a * d_a
                dx = px - mx[i]
                dy = py - my[i]
                grads[i, G_MX] -= d_q * 2.0 * (ca[i] * dx + cb[i] * dy)
                grads[i, G_MY] -= d_q * 2.0 * (cb[i] * dx + cc[i] * dy)
                grads[i, G_CA] += d_q * dx * dx
                grads[i, G_CB] += d_q * 2.0 * dx * dy
                grads[i, G_CC] += d_q * dy * dy


@njit(cache=True)
def reduce_tiles(partials):
    """Sum (tiles, N, 9) in tile order."""
    out = np.zeros(partials.shape[1:])
    for k in range(partials.shape[0]):
        out += partials[k]
    return out
