"""Fused per-pixel apply kernel (eval mode).

The kernel works on a contiguous range of pixels so callers can split an
image over worker threads; it never touches shared mutable state.
"""

import numpy as np
from numba import njit


@njit(nogil=True, cache=True)
def apply_range(colors, what, knots, ybar, w1, b1, bn_scale, bn_shift,
                w2, b2, u, bypass, out, start, stop):
    n_pig = what.shape[1]
    n_pts = knots.shape[0]
    last = n_pts - 2
    pbar = np.empty(n_pig, dtype=colors.dtype)
    hid = np.empty(n_pig, dtype=colors.dtype)
    phat = np.empty(n_pig, dtype=colors.dtype)
    zero = colors.dtype.type(0.0)
    one = colors.dtype.type(1.0)
    scale = colors.dtype.type(n_pts - 1)

    for i in range(start, stop):
        r = colors[i, 0]
        g = colors[i, 1]
        b = colors[i, 2]
        for n in range(n_pig):
            v = what[0, n] * r + what[1, n] * g + what[2, n] * b
            if v < zero:
                v = zero
            elif v > one:
                v = one
            seg = int(v * scale)
            if seg > last:
                seg = last
            if seg > 0 and v < knots[seg]:
                seg -= 1
            elif seg < last and v >= knots[seg + 1]:
                seg += 1
            alpha = (knots[seg + 1] - v) / (knots[seg + 1] - knots[seg])
            pbar[n] = alpha * ybar[n, seg] + (one - alpha) * ybar[n, seg + 1]

        if bypass:
            for n in range(n_pig):
                phat[n] = pbar[n]
        else:
            for m in range(n_pig):
                acc = zero
                for n in range(n_pig):
                    acc += w1[m, n] * pbar[n]
                z = (acc + b1[m]) * bn_scale[m] + bn_shift[m]
                hid[m] = z if z > zero else zero
            for m in range(n_pig):
                acc = zero
                for n in range(n_pig):
                    acc += w2[m, n] * hid[n]
                phat[m] = acc + b2[m]

        for c in range(3):
            acc = zero
            for n in range(n_pig):
                acc += u[c, n] * phat[n]
            out[i, c] = acc
