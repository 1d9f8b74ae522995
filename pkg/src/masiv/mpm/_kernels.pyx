# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled MPM transfer kernels (OpenMP-parallel, deterministic reductions).

Scatter in p2g uses per-thread grid buffers merged in fixed node order, so
multi-threaded results are bit-identical to the single-threaded ones."""

import numpy as np

cimport cython
cimport numpy as cnp
from cython.parallel cimport parallel, prange
from libc.math cimport floor, sqrt
from libc.stdlib cimport free, malloc
from libc.string cimport memset

cimport openmp


def p2g_scatter(double[:, ::1] x, double[:, ::1] v, double[:, :, ::1] F,
                double[:, :, ::1] C, double[::1] m, double[::1] vol,
                double[:, :, ::1] A,
                double[::1] mass, double[:, ::1] mom, double[:, ::1] force,
                double dx, double ox, double oy, double oz,
                long rx, long ry, long rz, int n_threads):
    """Accumulate mass, APIC momentum and -V P F^T grad(w) into flat node arrays."""
    cdef long q = x.shape[0]
    cdef long n = rx * ry * rz
    cdef long sx = ry * rz, sy = rz
    cdef long p, node, i, j, k, d, t
    cdef double inv_dx = 1.0 / dx
    cdef double xr0, xr1, xr2, fx0, fx1, fx2
    cdef long b0, b1, b2
    cdef double w0[3]
    cdef double w1[3]
    cdef double w2[3]
    cdef double g0[3]
    cdef double g1[3]
    cdef double g2[3]
    cdef double wq, wm, gx, gy, gz, dp0, dp1, dp2
    cdef double *buf
    cdef double *bslot
    cdef long stride = n * 7

    if n_threads < 1:
        n_threads = 1

    buf = <double *> malloc(<size_t> n_threads * stride * sizeof(double))
    if buf == NULL:
        raise MemoryError

    with nogil, parallel(num_threads=n_threads):
        memset(buf + openmp.omp_get_thread_num() * stride, 0,
               <size_t> stride * sizeof(double))
        for p in prange(q, schedule='static'):
            bslot = buf + openmp.omp_get_thread_num() * stride
            xr0 = (x[p, 0] - ox) * inv_dx
            xr1 = (x[p, 1] - oy) * inv_dx
            xr2 = (x[p, 2] - oz) * inv_dx
            b0 = <long> floor(xr0 - 0.5)
            b1 = <long> floor(xr1 - 0.5)
            b2 = <long> floor(xr2 - 0.5)
            fx0 = xr0 - b0
            fx1 = xr1 - b1
            fx2 = xr2 - b2
            w0[0] = 0.5 * (1.5 - fx0) * (1.5 - fx0)
            w0[1] = 0.75 - (fx0 - 1.0) * (fx0 - 1.0)
            w0[2] = 0.5 * (fx0 - 0.5) * (fx0 - 0.5)
            w1[0] = 0.5 * (1.5 - fx1) * (1.5 - fx1)
            w1[1] = 0.75 - (fx1 - 1.0) * (fx1 - 1.0)
            w1[2] = 0.5 * (fx1 - 0.5) * (fx1 - 0.5)
            w2[0] = 0.5 * (1.5 - fx2) * (1.5 - fx2)
            w2[1] = 0.75 - (fx2 - 1.0) * (fx2 - 1.0)
            w2[2] = 0.5 * (fx2 - 0.5) * (fx2 - 0.5)
            g0[0] = (fx0 - 1.5) * inv_dx
            g0[1] = (2.0 - 2.0 * fx0) * inv_dx
            g0[2] = (fx0 - 0.5) * inv_dx
            g1[0] = (fx1 - 1.5) * inv_dx
            g1[1] = (2.0 - 2.0 * fx1) * inv_dx
            g1[2] = (fx1 - 0.5) * inv_dx
            g2[0] = (fx2 - 1.5) * inv_dx
            g2[1] = (2.0 - 2.0 * fx2) * inv_dx
            g2[2] = (fx2 - 0.5) * inv_dx
            for i in range(3):
                for j in range(3):
                    for k in range(3):
                        wq = w0[i] * w1[j] * w2[k]
                        gx = g0[i] * w1[j] * w2[k]
                        gy = w0[i] * g1[j] * w2[k]
                        gz = w0[i] * w1[j] * g2[k]
                        node = (b0 + i) * sx + (b1 + j) * sy + (b2 + k)
                        dp0 = ox + (b0 + i) * dx - x[p, 0]
                        dp1 = oy + (b1 + j) * dx - x[p, 1]
                        dp2 = oz + (b2 + k) * dx - x[p, 2]
                        wm = wq * m[p]
                        bslot[node * 7 + 0] += wm
                        bslot[node * 7 + 1] += wm * (v[p, 0] + C[p, 0, 0] * dp0 + C[p, 0, 1] * dp1 + C[p, 0, 2] * dp2)
                        bslot[node * 7 + 2] += wm * (v[p, 1] + C[p, 1, 0] * dp0 + C[p, 1, 1] * dp1 + C[p, 1, 2] * dp2)
                        bslot[node * 7 + 3] += wm * (v[p, 2] + C[p, 2, 0] * dp0 + C[p, 2, 1] * dp1 + C[p, 2, 2] * dp2)
                        bslot[node * 7 + 4] -= vol[p] * (A[p, 0, 0] * gx + A[p, 0, 1] * gy + A[p, 0, 2] * gz)
                        bslot[node * 7 + 5] -= vol[p] * (A[p, 1, 0] * gx + A[p, 1, 1] * gy + A[p, 1, 2] * gz)
                        bslot[node * 7 + 6] -= vol[p] * (A[p, 2, 0] * gx + A[p, 2, 1] * gy + A[p, 2, 2] * gz)
        # Fixed-order reduction: thread 0, 1, ... for every node.
        for node in prange(n, schedule='static'):
            for t in range(n_threads):
                bslot = buf + t * stride
                mass[node] += bslot[node * 7 + 0]
                mom[node, 0] += bslot[node * 7 + 1]
                mom[node, 1] += bslot[node * 7 + 2]
                mom[node, 2] += bslot[node * 7 + 3]
                force[node, 0] += bslot[node * 7 + 4]
                force[node, 1] += bslot[node * 7 + 5]
                force[node, 2] += bslot[node * 7 + 6]
    free(buf)


def grid_momentum_to_velocity(double[::1] mass, double[:, ::1] mom,
                              double[:, ::1] force, double dt,
                              double gx, double gy, double gz,
                              double mass_epsilon, int n_threads):
    """In place: v_g = (p_g + dt f_g) / m_g + dt g on active nodes, else 0."""
    cdef long n = mass.shape[0]
    cdef long node
    cdef double inv_m
    if n_threads < 1:
        n_threads = 1
    with nogil:
        for node in prange(n, num_threads=n_threads, schedule='static'):
            if mass[node] > mass_epsilon:
                inv_m = 1.0 / mass[node]
                mom[node, 0] = (mom[node, 0] + dt * force[node, 0]) * inv_m + dt * gx
                mom[node, 1] = (mom[node, 1] + dt * force[node, 1]) * inv_m + dt * gy
                mom[node, 2] = (mom[node, 2] + dt * force[node, 2]) * inv_m + dt * gz
            else:
                mom[node, 0] = 0.0
                mom[node, 1] = 0.0
                mom[node, 2] = 0.0


def g2p_gather(double[:, ::1] x, double[:, :, ::1] F, double[:, ::1] vel,
               double[:, ::1] x_new, double[:, ::1] v_new,
               double[:, :, ::1] c_new, double[:, :, ::1] f_trial,
               double dx, double ox, double oy, double oz,
               long rx, long ry, long rz, double dt, int n_threads):
    """Gather node velocities into particle velocity, affine matrix and trial F."""
    cdef long q = x.shape[0]
    cdef long sx = ry * rz, sy = rz
    cdef long p, node, i, j, k, a, b
    cdef double inv_dx = 1.0 / dx
    cdef double d_inv = 4.0 * inv_dx * inv_dx
    cdef double xr0, xr1, xr2, fx0, fx1, fx2
    cdef long b0, b1, b2
    cdef double w0[3]
    cdef double w1[3]
    cdef double w2[3]
    cdef double g0[3]
    cdef double g1[3]
    cdef double g2[3]
    cdef double gv[9]
    cdef double cv[9]
    cdef double vv[3]
    cdef double wq, gx, gy, gz, dp0, dp1, dp2, vg0, vg1, vg2
    cdef double t00, t01, t02, t10, t11, t12, t20, t21, t22
    if n_threads < 1:
        n_threads = 1
    with nogil:
        for p in prange(q, num_threads=n_threads, schedule='static'):
            xr0 = (x[p, 0] - ox) * inv_dx
            xr1 = (x[p, 1] - oy) * inv_dx
            xr2 = (x[p, 2] - oz) * inv_dx
            b0 = <long> floor(xr0 - 0.5)
            b1 = <long> floor(xr1 - 0.5)
            b2 = <long> floor(xr2 - 0.5)
            fx0 = xr0 - b0
            fx1 = xr1 - b1
            fx2 = xr2 - b2
            w0[0] = 0.5 * (1.5 - fx0) * (1.5 - fx0)
            w0[1] = 0.75 - (fx0 - 1.0) * (fx0 - 1.0)
            w0[2] = 0.5 * (fx0 - 0.5) * (fx0 - 0.5)
            w1[0] = 0.5 * (1.5 - fx1) * (1.5 - fx1)
            w1[1] = 0.75 - (fx1 - 1.0) * (fx1 - 1.0)
            w1[2] = 0.5 * (fx1 - 0.5) * (fx1 - 0.5)
            w2[0] = 0.5 * (1.5 - fx2) * (1.5 - fx2)
            w2[1] = 0.75 - (fx2 - 1.0) * (fx2 - 1.0)
            w2[2] = 0.5 * (fx2 - 0.5) * (fx2 - 0.5)
            g0[0] = (fx0 - 1.5) * inv_dx
            g0[1] = (2.0 - 2.0 * fx0) * inv_dx
            g0[2] = (fx0 - 0.5) * inv_dx
            g1[0] = (fx1 - 1.5) * inv_dx
            g1[1] = (2.0 - 2.0 * fx1) * inv_dx
            g1[2] = (fx1 - 0.5) * inv_dx
            g2[0] = (fx2 - 1.5) * inv_dx
            g2[1] = (2.0 - 2.0 * fx2) * inv_dx
            g2[2] = (fx2 - 0.5) * inv_dx
            for a in range(9):
                gv[a] = 0.0
                cv[a] = 0.0
            vv[0] = 0.0
            vv[1] = 0.0
            vv[2] = 0.0
            for i in range(3):
                for j in range(3):
                    for k in range(3):
                        wq = w0[i] * w1[j] * w2[k]
                        gx = g0[i] * w1[j] * w2[k]
                        gy = w0[i] * g1[j] * w2[k]
                        gz = w0[i] * w1[j] * g2[k]
                        node = (b0 + i) * sx + (b1 + j) * sy + (b2 + k)
                        vg0 = vel[node, 0]
                        vg1 = vel[node, 1]
                        vg2 = vel[node, 2]
                        dp0 = ox + (b0 + i) * dx - x[p, 0]
                        dp1 = oy + (b1 + j) * dx - x[p, 1]
                        dp2 = oz + (b2 + k) * dx - x[p, 2]
                        vv[0] += wq * vg0
                        vv[1] += wq * vg1
                        vv[2] += wq * vg2
                        cv[0] += wq * vg0 * dp0
                        cv[1] += wq * vg0 * dp1
                        cv[2] += wq * vg0 * dp2
                        cv[3] += wq * vg1 * dp0
                        cv[4] += wq * vg1 * dp1
                        cv[5] += wq * vg1 * dp2
                        cv[6] += wq * vg2 * dp0
                        cv[7] += wq * vg2 * dp1
                        cv[8] += wq * vg2 * dp2
                        gv[0] += vg0 * gx
                        gv[1] += vg0 * gy
                        gv[2] += vg0 * gz
                        gv[3] += vg1 * gx
                        gv[4] += vg1 * gy
                        gv[5] += vg1 * gz
                        gv[6] += vg2 * gx
                        gv[7] += vg2 * gy
                        gv[8] += vg2 * gz
            v_new[p, 0] = vv[0]
            v_new[p, 1] = vv[1]
            v_new[p, 2] = vv[2]
            x_new[p, 0] = x[p, 0] + dt * vv[0]
            x_new[p, 1] = x[p, 1] + dt * vv[1]
            x_new[p, 2] = x[p, 2] + dt * vv[2]
            for a in range(3):
                for b in range(3):
                    c_new[p, a, b] = d_inv * cv[a * 3 + b]
            # F_trial = (I + dt grad_v) F
            t00 = 1.0 + dt * gv[0]
            t01 = dt * gv[1]
            t02 = dt * gv[2]
            t10 = dt * gv[3]
            t11 = 1.0 + dt * gv[4]
            t12 = dt * gv[5]
            t20 = dt * gv[6]
            t21 = dt * gv[7]
            t22 = 1.0 + dt * gv[8]
            for b in range(3):
                f_trial[p, 0, b] = t00 * F[p, 0, b] + t01 * F[p, 1, b] + t02 * F[p, 2, b]
                f_trial[p, 1, b] = t10 * F[p, 0, b] + t11 * F[p, 1, b] + t12 * F[p, 2, b]
                f_trial[p, 2, b] = t20 * F[p, 0, b] + t21 * F[p, 1, b] + t22 * F[p, 2, b]


def adjoint_g2p_scatter(double[:, ::1] x, double[:, ::1] u_post,
                        double[:, ::1] vb, double[:, :, ::1] gbar,
                        double[:, :, ::1] bbar,
                        double[:, ::1] xbar, double[:, :, ::1] grad_v,
                        double[:, ::1] ubar,
                        double dx, double ox, double oy, double oz,
                        long rx, long ry, long rz, int n_threads):
    """Adjoint of the gather half of a transfer.

    Scatters the node-velocity cotangent into ``ubar`` (deterministic
    per-thread reduction), adds the direct position terms into ``xbar``
    and records grad_v for the F_trial chain rule."""
    cdef long q = x.shape[0]
    cdef long n = rx * ry * rz
    cdef long sx = ry * rz, sy = rz
    cdef long p, node, i, j, k, t
    cdef double inv_dx = 1.0 / dx
    cdef double inv_dx2 = inv_dx * inv_dx
    cdef double xr0, xr1, xr2, fx0, fx1, fx2
    cdef long b0, b1, b2
    cdef double w0[3]
    cdef double w1[3]
    cdef double w2[3]
    cdef double g0[3]
    cdef double g1[3]
    cdef double g2[3]
    cdef double dd[3]
    cdef double wq, gx, gy, gz, dp0, dp1, dp2
    cdef double u0, u1, u2, s1, s2, bd0, bd1, bd2
    cdef double gtu0, gtu1, gtu2
    cdef double hxx, hyy, hzz, hxy, hxz, hyz
    cdef double pw, pgx, pgy, phxx, phyy, phxy
    cdef double xb0, xb1, xb2
    cdef double gv00, gv01, gv02, gv10, gv11, gv12, gv20, gv21, gv22
    cdef double *buf
    cdef double *bslot
    cdef long stride = n * 3

    dd[0] = inv_dx2
    dd[1] = -2.0 * inv_dx2
    dd[2] = inv_dx2

    if n_threads < 1:
        n_threads = 1
    buf = <double *> malloc(<size_t> n_threads * stride * sizeof(double))
    if buf == NULL:
        raise MemoryError

    with nogil, parallel(num_threads=n_threads):
        memset(buf + openmp.omp_get_thread_num() * stride, 0,
               <size_t> stride * sizeof(double))
        for p in prange(q, schedule='static'):
            bslot = buf + openmp.omp_get_thread_num() * stride
            xr0 = (x[p, 0] - ox) * inv_dx
            xr1 = (x[p, 1] - oy) * inv_dx
            xr2 = (x[p, 2] - oz) * inv_dx
            b0 = <long> floor(xr0 - 0.5)
            b1 = <long> floor(xr1 - 0.5)
            b2 = <long> floor(xr2 - 0.5)
            fx0 = xr0 - b0
            fx1 = xr1 - b1
            fx2 = xr2 - b2
            w0[0] = 0.5 * (1.5 - fx0) * (1.5 - fx0)
            w0[1] = 0.75 - (fx0 - 1.0) * (fx0 - 1.0)
            w0[2] = 0.5 * (fx0 - 0.5) * (fx0 - 0.5)
            w1[0] = 0.5 * (1.5 - fx1) * (1.5 - fx1)
            w1[1] = 0.75 - (fx1 - 1.0) * (fx1 - 1.0)
            w1[2] = 0.5 * (fx1 - 0.5) * (fx1 - 0.5)
            w2[0] = 0.5 * (1.5 - fx2) * (1.5 - fx2)
            w2[1] = 0.75 - (fx2 - 1.0) * (fx2 - 1.0)
            w2[2] = 0.5 * (fx2 - 0.5) * (fx2 - 0.5)
            g0[0] = (fx0 - 1.5) * inv_dx
            g0[1] = (2.0 - 2.0 * fx0) * inv_dx
            g0[2] = (fx0 - 0.5) * inv_dx
            g1[0] = (fx1 - 1.5) * inv_dx
            g1[1] = (2.0 - 2.0 * fx1) * inv_dx
            g1[2] = (fx1 - 0.5) * inv_dx
            g2[0] = (fx2 - 1.5) * inv_dx
            g2[1] = (2.0 - 2.0 * fx2) * inv_dx
            g2[2] = (fx2 - 0.5) * inv_dx
            xb0 = 0.0
            xb1 = 0.0
            xb2 = 0.0
            gv00 = 0.0
            gv01 = 0.0
            gv02 = 0.0
            gv10 = 0.0
            gv11 = 0.0
            gv12 = 0.0
            gv20 = 0.0
            gv21 = 0.0
            gv22 = 0.0
            for i in range(3):
                for j in range(3):
                    pw = w0[i] * w1[j]
                    pgx = g0[i] * w1[j]
                    pgy = w0[i] * g1[j]
                    phxx = dd[i] * w1[j]
                    phyy = w0[i] * dd[j]
                    phxy = g0[i] * g1[j]
                    for k in range(3):
                        wq = pw * w2[k]
                        gx = pgx * w2[k]
                        gy = pgy * w2[k]
                        gz = pw * g2[k]
                        node = (b0 + i) * sx + (b1 + j) * sy + (b2 + k)
                        u0 = u_post[node, 0]
                        u1 = u_post[node, 1]
                        u2 = u_post[node, 2]
                        dp0 = ox + (b0 + i) * dx - x[p, 0]
                        dp1 = oy + (b1 + j) * dx - x[p, 1]
                        dp2 = oz + (b2 + k) * dx - x[p, 2]
                        bd0 = bbar[p, 0, 0] * dp0 + bbar[p, 0, 1] * dp1 + bbar[p, 0, 2] * dp2
                        bd1 = bbar[p, 1, 0] * dp0 + bbar[p, 1, 1] * dp1 + bbar[p, 1, 2] * dp2
                        bd2 = bbar[p, 2, 0] * dp0 + bbar[p, 2, 1] * dp1 + bbar[p, 2, 2] * dp2
                        bslot[node * 3 + 0] += wq * (vb[p, 0] + bd0) + gbar[p, 0, 0] * gx + gbar[p, 0, 1] * gy + gbar[p, 0, 2] * gz
                        bslot[node * 3 + 1] += wq * (vb[p, 1] + bd1) + gbar[p, 1, 0] * gx + gbar[p, 1, 1] * gy + gbar[p, 1, 2] * gz
                        bslot[node * 3 + 2] += wq * (vb[p, 2] + bd2) + gbar[p, 2, 0] * gx + gbar[p, 2, 1] * gy + gbar[p, 2, 2] * gz
                        s1 = vb[p, 0] * u0 + vb[p, 1] * u1 + vb[p, 2] * u2
                        s2 = u0 * bd0 + u1 * bd1 + u2 * bd2
                        xb0 = xb0 + (s1 + s2) * gx
                        xb1 = xb1 + (s1 + s2) * gy
                        xb2 = xb2 + (s1 + s2) * gz
                        xb0 = xb0 - wq * (bbar[p, 0, 0] * u0 + bbar[p, 1, 0] * u1 + bbar[p, 2, 0] * u2)
                        xb1 = xb1 - wq * (bbar[p, 0, 1] * u0 + bbar[p, 1, 1] * u1 + bbar[p, 2, 1] * u2)
                        xb2 = xb2 - wq * (bbar[p, 0, 2] * u0 + bbar[p, 1, 2] * u1 + bbar[p, 2, 2] * u2)
                        gtu0 = gbar[p, 0, 0] * u0 + gbar[p, 1, 0] * u1 + gbar[p, 2, 0] * u2
                        gtu1 = gbar[p, 0, 1] * u0 + gbar[p, 1, 1] * u1 + gbar[p, 2, 1] * u2
                        gtu2 = gbar[p, 0, 2] * u0 + gbar[p, 1, 2] * u1 + gbar[p, 2, 2] * u2
                        hxx = phxx * w2[k]
                        hyy = phyy * w2[k]
                        hzz = pw * dd[k]
                        hxy = phxy * w2[k]
                        hxz = pgx * g2[k]
                        hyz = pgy * g2[k]
                        xb0 = xb0 + hxx * gtu0 + hxy * gtu1 + hxz * gtu2
                        xb1 = xb1 + hxy * gtu0 + hyy * gtu1 + hyz * gtu2
                        xb2 = xb2 + hxz * gtu0 + hyz * gtu1 + hzz * gtu2
                        gv00 = gv00 + u0 * gx
                        gv01 = gv01 + u0 * gy
                        gv02 = gv02 + u0 * gz
                        gv10 = gv10 + u1 * gx
                        gv11 = gv11 + u1 * gy
                        gv12 = gv12 + u1 * gz
                        gv20 = gv20 + u2 * gx
                        gv21 = gv21 + u2 * gy
                        gv22 = gv22 + u2 * gz
            xbar[p, 0] += xb0
            xbar[p, 1] += xb1
            xbar[p, 2] += xb2
            grad_v[p, 0, 0] = gv00
            grad_v[p, 0, 1] = gv01
            grad_v[p, 0, 2] = gv02
            grad_v[p, 1, 0] = gv10
            grad_v[p, 1, 1] = gv11
            grad_v[p, 1, 2] = gv12
            grad_v[p, 2, 0] = gv20
            grad_v[p, 2, 1] = gv21
            grad_v[p, 2, 2] = gv22
        for node in prange(n, schedule='static'):
            for t in range(n_threads):
                bslot = buf + t * stride
                ubar[node, 0] += bslot[node * 3 + 0]
                ubar[node, 1] += bslot[node * 3 + 1]
                ubar[node, 2] += bslot[node * 3 + 2]
    free(buf)


def adjoint_p2g_gather(double[:, ::1] x, double[:, ::1] v,
                       double[:, :, ::1] C, double[:, :, ::1] A,
                       double[::1] m, double[::1] vol,
                       double[:, ::1] qbar, double[:, ::1] fgbar,
                       double[::1] mbar,
                       double[:, ::1] xbar, double[:, ::1] vbar,
                       double[:, :, ::1] cbar, double[:, :, ::1] abar,
                       double dx, double ox, double oy, double oz,
                       long rx, long ry, long rz, int n_threads):
    """Adjoint of the scatter half: node cotangents back onto particles."""
    cdef long q = x.shape[0]
    cdef long sx = ry * rz, sy = rz
    cdef long p, node, i, j, k
    cdef double inv_dx = 1.0 / dx
    cdef double inv_dx2 = inv_dx * inv_dx
    cdef double xr0, xr1, xr2, fx0, fx1, fx2
    cdef long b0, b1, b2
    cdef double w0[3]
    cdef double w1[3]
    cdef double w2[3]
    cdef double g0[3]
    cdef double g1[3]
    cdef double g2[3]
    cdef double dd[3]
    cdef double cb[9]
    cdef double ab[9]
    cdef double wq, gx, gy, gz, dp0, dp1, dp2
    cdef double q0, q1, q2, f0, f1, f2, mb, mq, coef
    cdef double aff0, aff1, aff2, atf0, atf1, atf2
    cdef double hxx, hyy, hzz, hxy, hxz, hyz
    cdef double pw, pgx, pgy, phxx, phyy, phxy
    cdef double xb0, xb1, xb2, vb0, vb1, vb2

    dd[0] = inv_dx2
    dd[1] = -2.0 * inv_dx2
    dd[2] = inv_dx2
    if n_threads < 1:
        n_threads = 1
    with nogil:
        for p in prange(q, num_threads=n_threads, schedule='static'):
            xr0 = (x[p, 0] - ox) * inv_dx
            xr1 = (x[p, 1] - oy) * inv_dx
            xr2 = (x[p, 2] - oz) * inv_dx
            b0 = <long> floor(xr0 - 0.5)
            b1 = <long> floor(xr1 - 0.5)
            b2 = <long> floor(xr2 - 0.5)
            fx0 = xr0 - b0
            fx1 = xr1 - b1
            fx2 = xr2 - b2
            w0[0] = 0.5 * (1.5 - fx0) * (1.5 - fx0)
            w0[1] = 0.75 - (fx0 - 1.0) * (fx0 - 1.0)
            w0[2] = 0.5 * (fx0 - 0.5) * (fx0 - 0.5)
            w1[0] = 0.5 * (1.5 - fx1) * (1.5 - fx1)
            w1[1] = 0.75 - (fx1 - 1.0) * (fx1 - 1.0)
            w1[2] = 0.5 * (fx1 - 0.5) * (fx1 - 0.5)
            w2[0] = 0.5 * (1.5 - fx2) * (1.5 - fx2)
            w2[1] = 0.75 - (fx2 - 1.0) * (fx2 - 1.0)
            w2[2] = 0.5 * (fx2 - 0.5) * (fx2 - 0.5)
            g0[0] = (fx0 - 1.5) * inv_dx
            g0[1] = (2.0 - 2.0 * fx0) * inv_dx
            g0[2] = (fx0 - 0.5) * inv_dx
            g1[0] = (fx1 - 1.5) * inv_dx
            g1[1] = (2.0 - 2.0 * fx1) * inv_dx
            g1[2] = (fx1 - 0.5) * inv_dx
            g2[0] = (fx2 - 1.5) * inv_dx
            g2[1] = (2.0 - 2.0 * fx2) * inv_dx
            g2[2] = (fx2 - 0.5) * inv_dx
            xb0 = 0.0
            xb1 = 0.0
            xb2 = 0.0
            vb0 = 0.0
            vb1 = 0.0
            vb2 = 0.0
            for i in range(9):
                cb[i] = 0.0
                ab[i] = 0.0
            for i in range(3):
                for j in range(3):
                    pw = w0[i] * w1[j]
                    pgx = g0[i] * w1[j]
                    pgy = w0[i] * g1[j]
                    phxx = dd[i] * w1[j]
                    phyy = w0[i] * dd[j]
                    phxy = g0[i] * g1[j]
                    for k in range(3):
                        wq = pw * w2[k]
                        gx = pgx * w2[k]
                        gy = pgy * w2[k]
                        gz = pw * g2[k]
                        node = (b0 + i) * sx + (b1 + j) * sy + (b2 + k)
                        q0 = qbar[node, 0]
                        q1 = qbar[node, 1]
                        q2 = qbar[node, 2]
                        f0 = fgbar[node, 0]
                        f1 = fgbar[node, 1]
                        f2 = fgbar[node, 2]
                        mb = mbar[node]
                        dp0 = ox + (b0 + i) * dx - x[p, 0]
                        dp1 = oy + (b1 + j) * dx - x[p, 1]
                        dp2 = oz + (b2 + k) * dx - x[p, 2]
                        aff0 = v[p, 0] + C[p, 0, 0] * dp0 + C[p, 0, 1] * dp1 + C[p, 0, 2] * dp2
                        aff1 = v[p, 1] + C[p, 1, 0] * dp0 + C[p, 1, 1] * dp1 + C[p, 1, 2] * dp2
                        aff2 = v[p, 2] + C[p, 2, 0] * dp0 + C[p, 2, 1] * dp1 + C[p, 2, 2] * dp2
                        mq = aff0 * q0 + aff1 * q1 + aff2 * q2
                        coef = m[p] * (mb + mq)
                        xb0 = xb0 + coef * gx
                        xb1 = xb1 + coef * gy
                        xb2 = xb2 + coef * gz
                        xb0 = xb0 - m[p] * wq * (C[p, 0, 0] * q0 + C[p, 1, 0] * q1 + C[p, 2, 0] * q2)
                        xb1 = xb1 - m[p] * wq * (C[p, 0, 1] * q0 + C[p, 1, 1] * q1 + C[p, 2, 1] * q2)
                        xb2 = xb2 - m[p] * wq * (C[p, 0, 2] * q0 + C[p, 1, 2] * q1 + C[p, 2, 2] * q2)
                        vb0 = vb0 + wq * m[p] * q0
                        vb1 = vb1 + wq * m[p] * q1
                        vb2 = vb2 + wq * m[p] * q2
                        cb[0] = cb[0] + wq * m[p] * q0 * dp0
                        cb[1] = cb[1] + wq * m[p] * q0 * dp1
                        cb[2] = cb[2] + wq * m[p] * q0 * dp2
                        cb[3] = cb[3] + wq * m[p] * q1 * dp0
                        cb[4] = cb[4] + wq * m[p] * q1 * dp1
                        cb[5] = cb[5] + wq * m[p] * q1 * dp2
                        cb[6] = cb[6] + wq * m[p] * q2 * dp0
                        cb[7] = cb[7] + wq * m[p] * q2 * dp1
                        cb[8] = cb[8] + wq * m[p] * q2 * dp2
                        ab[0] = ab[0] - vol[p] * f0 * gx
                        ab[1] = ab[1] - vol[p] * f0 * gy
                        ab[2] = ab[2] - vol[p] * f0 * gz
                        ab[3] = ab[3] - vol[p] * f1 * gx
                        ab[4] = ab[4] - vol[p] * f1 * gy
                        ab[5] = ab[5] - vol[p] * f1 * gz
                        ab[6] = ab[6] - vol[p] * f2 * gx
                        ab[7] = ab[7] - vol[p] * f2 * gy
                        ab[8] = ab[8] - vol[p] * f2 * gz
                        atf0 = A[p, 0, 0] * f0 + A[p, 1, 0] * f1 + A[p, 2, 0] * f2
                        atf1 = A[p, 0, 1] * f0 + A[p, 1, 1] * f1 + A[p, 2, 1] * f2
                        atf2 = A[p, 0, 2] * f0 + A[p, 1, 2] * f1 + A[p, 2, 2] * f2
                        hxx = phxx * w2[k]
                        hyy = phyy * w2[k]
                        hzz = pw * dd[k]
                        hxy = phxy * w2[k]
                        hxz = pgx * g2[k]
                        hyz = pgy * g2[k]
                        xb0 = xb0 - vol[p] * (hxx * atf0 + hxy * atf1 + hxz * atf2)
                        xb1 = xb1 - vol[p] * (hxy * atf0 + hyy * atf1 + hyz * atf2)
                        xb2 = xb2 - vol[p] * (hxz * atf0 + hyz * atf1 + hzz * atf2)
            xbar[p, 0] += xb0
            xbar[p, 1] += xb1
            xbar[p, 2] += xb2
            vbar[p, 0] = vb0
            vbar[p, 1] = vb1
            vbar[p, 2] = vb2
            for i in range(3):
                for j in range(3):
                    cbar[p, i, j] = cb[i * 3 + j]
                    abar[p, i, j] = ab[i * 3 + j]


cdef void _svd3(const double *a, double *u, double *s, double *vt) noexcept nogil:
    """One matrix: one-sided Jacobi SVD with proper-rotation convention.

    U and V come out as rotations (det +1); when det(a) < 0 the smallest
    singular value is negative."""
    cdef double b[9]
    cdef double vv[9]
    cdef int i, j, p_, q_, sweep
    cdef double alpha, beta, gamma, zeta, t, c, sn, tmp
    cdef double n0, n1, n2, d, swap
    cdef int idx[3]
    cdef double off, scale

    for i in range(9):
        b[i] = a[i]
        vv[i] = 0.0
    vv[0] = 1.0
    vv[4] = 1.0
    vv[8] = 1.0
    scale = 0.0
    for i in range(9):
        tmp = b[i] if b[i] >= 0 else -b[i]
        if tmp > scale:
            scale = tmp
    if scale == 0.0:
        for i in range(9):
            u[i] = vv[i]
            vt[i] = vv[i]
        s[0] = 0.0
        s[1] = 0.0
        s[2] = 0.0
        return

    for sweep in range(30):
        off = 0.0
        for p_ in range(2):
            for q_ in range(p_ + 1, 3):
                # columns p_ and q_ of b
                alpha = b[p_] * b[p_] + b[3 + p_] * b[3 + p_] + b[6 + p_] * b[6 + p_]
                beta = b[q_] * b[q_] + b[3 + q_] * b[3 + q_] + b[6 + q_] * b[6 + q_]
                gamma = b[p_] * b[q_] + b[3 + p_] * b[3 + q_] + b[6 + p_] * b[6 + q_]
                if gamma * gamma <= 1e-28 * alpha * beta:
                    continue
                off += 1.0
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0:
                    t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                sn = c * t
                for i in range(3):
                    tmp = b[3 * i + p_]
                    b[3 * i + p_] = c * tmp - sn * b[3 * i + q_]
                    b[3 * i + q_] = sn * tmp + c * b[3 * i + q_]
                    tmp = vv[3 * i + p_]
                    vv[3 * i + p_] = c * tmp - sn * vv[3 * i + q_]
                    vv[3 * i + q_] = sn * tmp + c * vv[3 * i + q_]
        if off == 0.0:
            break

    n0 = sqrt(b[0] * b[0] + b[3] * b[3] + b[6] * b[6])
    n1 = sqrt(b[1] * b[1] + b[4] * b[4] + b[7] * b[7])
    n2 = sqrt(b[2] * b[2] + b[5] * b[5] + b[8] * b[8])
    idx[0] = 0
    idx[1] = 1
    idx[2] = 2
    s[0] = n0
    s[1] = n1
    s[2] = n2
    # sort descending (3 elements)
    for i in range(2):
        for j in range(i + 1, 3):
            if s[j] > s[i]:
                swap = s[i]
                s[i] = s[j]
                s[j] = swap
                p_ = idx[i]
                idx[i] = idx[j]
                idx[j] = p_
    for i in range(3):
        for j in range(3):
            vt[3 * j + i] = vv[3 * i + idx[j]]    # row j of V^T = col idx[j] of V
    # u columns: normalized b columns; rebuild degenerate ones orthogonally
    for j in range(2):
        if s[j] > 1e-12 * scale:
            d = 1.0 / s[j]
            for i in range(3):
                u[3 * i + j] = b[3 * i + idx[j]] * d
        else:
            # pick any unit vector orthogonal to previous columns
            for i in range(3):
                u[3 * i + j] = 0.0
            if j == 0:
                u[j] = 1.0
            else:
                # cross(col0, e_k) against the axis least aligned with col0
                n0 = u[0]
                n1 = u[3]
                n2 = u[6]
                if n0 * n0 <= n1 * n1 and n0 * n0 <= n2 * n2:
                    # cross with e_x
                    u[1] = 0.0
                    u[4] = n2
                    u[7] = -n1
                elif n1 * n1 <= n2 * n2:
                    u[1] = -n2
                    u[4] = 0.0
                    u[7] = n0
                else:
                    u[1] = n1
                    u[4] = -n0
                    u[7] = 0.0
                d = sqrt(u[1] * u[1] + u[4] * u[4] + u[7] * u[7])
                u[1] /= d
                u[4] /= d
                u[7] /= d
    # last column: cross product of the first two keeps det(U) = +1
    u[2] = u[3] * u[7] - u[6] * u[4]
    u[5] = u[6] * u[1] - u[0] * u[7]
    u[8] = u[0] * u[4] - u[3] * u[1]
    if s[2] > 1e-12 * scale:
        # sign of s2 from alignment with the actual third column
        d = (b[0 * 3 + idx[2]] * u[2] + b[1 * 3 + idx[2]] * u[5]
             + b[2 * 3 + idx[2]] * u[8])
        if d < 0.0:
            s[2] = -s[2]
    else:
        s[2] = 0.0
    # det(V) must be +1 too; flip its last row together with s2
    d = (vt[0] * (vt[4] * vt[8] - vt[5] * vt[7])
         - vt[1] * (vt[3] * vt[8] - vt[5] * vt[6])
         + vt[2] * (vt[3] * vt[7] - vt[4] * vt[6]))
    if d < 0.0:
        vt[6] = -vt[6]
        vt[7] = -vt[7]
        vt[8] = -vt[8]
        s[2] = -s[2]


def svd3_batch(double[:, :, ::1] a, double[:, :, ::1] u, double[:, ::1] s,
               double[:, :, ::1] vt, int n_threads):
    """Proper-rotation SVD of a (Q,3,3) batch."""
    cdef long q = a.shape[0]
    cdef long p
    if n_threads < 1:
        n_threads = 1
    with nogil:
        for p in prange(q, num_threads=n_threads, schedule='static'):
            _svd3(&a[p, 0, 0], &u[p, 0, 0], &s[p, 0], &vt[p, 0, 0])
