"""Numba inner loops for the explicit stencil and the sensitivity kernel.

Kernels are literal-free so float32 inputs stay in float32 arithmetic; the
single- and double-precision code paths are the same compiled loops at the
two dtypes. All loops are sequential, which makes every run bitwise
reproducible.

Face-weight arrays have one entry per interior face along their axis
(shape n-1 on that axis). Boundary faces carry no term at all, which is the
discrete homogeneous Neumann condition: mirrored ghost values make the face
difference vanish identically.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def step_1d(u_prev, u_cur, wf0, coef, out):
    n0 = u_cur.shape[0]
    for i in range(n0):
        acc = u_cur[i] - u_cur[i]
        if i < n0 - 1:
            acc += (u_cur[i + 1] - u_cur[i]) * wf0[i]
        if i > 0:
            acc -= (u_cur[i] - u_cur[i - 1]) * wf0[i - 1]
        out[i] = u_cur[i] + u_cur[i] - u_prev[i] + coef[i] * acc


@njit(cache=True)
def step_2d(u_prev, u_cur, wf0, wf1, coef, out):
    n0, n1 = u_cur.shape
    for i in range(n0):
        for j in range(n1):
            acc = u_cur[i, j] - u_cur[i, j]
            if i < n0 - 1:
                acc += (u_cur[i + 1, j] - u_cur[i, j]) * wf0[i, j]
            if i > 0:
                acc -= (u_cur[i, j] - u_cur[i - 1, j]) * wf0[i - 1, j]
            if j < n1 - 1:
                acc += (u_cur[i, j + 1] - u_cur[i, j]) * wf1[i, j]
            if j > 0:
                acc -= (u_cur[i, j] - u_cur[i, j - 1]) * wf1[i, j - 1]
            out[i, j] = u_cur[i, j] + u_cur[i, j] - u_prev[i, j] + coef[i, j] * acc


@njit(cache=True)
def step_3d(u_prev, u_cur, wf0, wf1, wf2, coef, out):
    n0, n1, n2 = u_cur.shape
    for i in range(n0):
        for j in range(n1):
            for k in range(n2):
                acc = u_cur[i, j, k] - u_cur[i, j, k]
                if i < n0 - 1:
                    acc += (u_cur[i + 1, j, k] - u_cur[i, j, k]) * wf0[i, j, k]
                if i > 0:
                    acc -= (u_cur[i, j, k] - u_cur[i - 1, j, k]) * wf0[i - 1, j, k]
                if j < n1 - 1:
                    acc += (u_cur[i, j + 1, k] - u_cur[i, j, k]) * wf1[i, j, k]
                if j > 0:
                    acc -= (u_cur[i, j, k] - u_cur[i, j - 1, k]) * wf1[i, j - 1, k]
                if k < n2 - 1:
                    acc += (u_cur[i, j, k + 1] - u_cur[i, j, k]) * wf2[i, j, k]
                if k > 0:
                    acc -= (u_cur[i, j, k] - u_cur[i, j, k - 1]) * wf2[i, j, k - 1]
                out[i, j, k] = (
                    u_cur[i, j, k] + u_cur[i, j, k] - u_prev[i, j, k]
                    + coef[i, j, k] * acc
                )


@njit(cache=True)
def kernel_increment_1d(acc, a_old, a_mid, a_new, b_old, b_mid, b_new,
                        cv, cg, inv2dt, inv2dx, sdt):
    n0 = a_mid.shape[0]
    for i in range(n0):
        im = i - 1 if i > 0 else 0
        ip = i + 1 if i < n0 - 1 else n0 - 1
        va = (a_new[i] - a_old[i]) * inv2dt
        vb = (b_new[i] - b_old[i]) * inv2dt
        ga = (a_mid[ip] - a_mid[im]) * inv2dx
        gb = (b_mid[ip] - b_mid[im]) * inv2dx
        acc[i] += sdt * (cv * va * vb + cg * ga * gb)


@njit(cache=True)
def kernel_increment_2d(acc, a_old, a_mid, a_new, b_old, b_mid, b_new,
                        cv, cg, inv2dt, inv2dx, sdt):
    n0, n1 = a_mid.shape
    for i in range(n0):
        im = i - 1 if i > 0 else 0
        ip = i + 1 if i < n0 - 1 else n0 - 1
        for j in range(n1):
            jm = j - 1 if j > 0 else 0
            jp = j + 1 if j < n1 - 1 else n1 - 1
            va = (a_new[i, j] - a_old[i, j]) * inv2dt
            vb = (b_new[i, j] - b_old[i, j]) * inv2dt
            ga0 = (a_mid[ip, j] - a_mid[im, j]) * inv2dx
            gb0 = (b_mid[ip, j] - b_mid[im, j]) * inv2dx
            ga1 = (a_mid[i, jp] - a_mid[i, jm]) * inv2dx
            gb1 = (b_mid[i, jp] - b_mid[i, jm]) * inv2dx
            acc[i, j] += sdt * (cv * va * vb + cg * (ga0 * gb0 + ga1 * gb1))


@njit(cache=True)
def kernel_increment_3d(acc, a_old, a_mid, a_new, b_old, b_mid, b_new,
                        cv, cg, inv2dt, inv2dx, sdt):
    n0, n1, n2 = a_mid.shape
    for i in range(n0):
        im = i - 1 if i > 0 else 0
        ip = i + 1 if i < n0 - 1 else n0 - 1
        for j in range(n1):
            jm = j - 1 if j > 0 else 0
            jp = j + 1 if j < n1 - 1 else n1 - 1
            for k in range(n2):
                km = k - 1 if k > 0 else 0
                kp = k + 1 if k < n2 - 1 else n2 - 1
                va = (a_new[i, j, k] - a_old[i, j, k]) * inv2dt
                vb = (b_new[i, j, k] - b_old[i, j, k]) * inv2dt
                ga0 = (a_mid[ip, j, k] - a_mid[im, j, k]) * inv2dx
                gb0 = (b_mid[ip, j, k] - b_mid[im, j, k]) * inv2dx
                ga1 = (a_mid[i, jp, k] - a_mid[i, jm, k]) * inv2dx
                gb1 = (b_mid[i, jp, k] - b_mid[i, jm, k]) * inv2dx
                ga2 = (a_mid[i, j, kp] - a_mid[i, j, km]) * inv2dx
                gb2 = (b_mid[i, j, kp] - b_mid[i, j, km]) * inv2dx
                acc[i, j, k] += sdt * (
                    cv * va * vb + cg * (ga0 * gb0 + ga1 * gb1 + ga2 * gb2)
                )


STEP_BY_NDIM = {1: step_1d, 2: step_2d, 3: step_3d}
KERNEL_INCREMENT_BY_NDIM = {1: kernel_increment_1d, 2: kernel_increment_2d,
                            3: kernel_increment_3d}


def apply_step(u_prev, u_cur, face_weights, coef, out):
    """Dispatch the stencil update by dimensionality, writing into out."""
    step = STEP_BY_NDIM[u_cur.ndim]
    step(u_prev, u_cur, *face_weights, coef, out)


def apply_kernel_increment(acc, win_a, win_b, cv, cg, inv2dt, inv2dx, sdt):
    """Accumulate one time-centered kernel increment for window pair (a, b).

    Windows are (older, mid, newer) triples in physical time order.
    """
    a_old, a_mid, a_new = win_a
    b_old, b_mid, b_new = win_b
    dt_ = acc.dtype.type
    inc = KERNEL_INCREMENT_BY_NDIM[a_mid.ndim]
    inc(acc, a_old, a_mid, a_new, b_old, b_mid, b_new,
        dt_(cv), dt_(cg), dt_(inv2dt), dt_(inv2dx), dt_(sdt))
