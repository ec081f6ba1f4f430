# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled numerical core: Bessel ratio chains, exact empirical drift
evaluation, and the per-trajectory reverse-diffusion loop.

Mirrors the interface and semantics of ``_purepy`` (same seeds, same random
stream consumption, same stopping rules); see that module for the algorithm
notes.  Scalar evaluations and single-trajectory simulations are the hot
paths that benefit from compilation; batched endpoint sampling stays in
numpy either way.
"""

import numpy as np

from libc.math cimport INFINITY, M_PI, exp, isfinite, log, sqrt

from scipy.special.cython_special cimport k0e, k1e

BACKEND_NAME = "compiled"

NORMAL_BLOCK = 256

STOP_THRESHOLD = 0
STOP_STEP_CAP = 1
STOP_SINGULARITY = 2


cdef inline void _chain(double nu, double z, double* out_logk, double* out_ratio) noexcept nogil:
    """Upward ratio recurrence with compensated log accumulation."""
    cdef long twice = <long>(2.0 * nu + 0.5)
    cdef long steps, j
    cdef double nu0, logk, r, s0, comp, term, tot
    if twice % 2 == 1:
        nu0 = 0.5
        steps = (twice - 1) // 2
        logk = 0.5 * log(M_PI / (2.0 * z)) - z
        r = 1.0 + 1.0 / z
    else:
        nu0 = 0.0
        steps = twice // 2
        s0 = k0e(z)
        logk = log(s0) - z
        r = k1e(z) / s0
    comp = 0.0
    for j in range(1, steps + 1):
        term = log(r) - comp
        tot = logk + term
        comp = (tot - logk) - term
        logk = tot
        r = 2.0 * (nu0 + j) / z + 1.0 / r
    out_logk[0] = logk
    out_ratio[0] = r


def log_k_and_ratio(double nu, double z):
    """Return (log K_nu(z), K_{nu+1}(z)/K_nu(z)) for half-integral nu >= 0, z > 0."""
    cdef double logk, ratio
    _chain(nu, z, &logk, &ratio)
    return logk, ratio


def log_k_and_ratio_many(double nu, z):
    """Elementwise (log K_nu, ratio) over an array of arguments, shared order."""
    zarr = np.ascontiguousarray(np.asarray(z, dtype=np.float64))
    cdef const double[::1] zv = zarr.reshape(-1)
    logk = np.empty(zv.shape[0])
    ratio = np.empty(zv.shape[0])
    cdef double[::1] lv = logk
    cdef double[::1] rv = ratio
    cdef Py_ssize_t i
    with nogil:
        for i in range(zv.shape[0]):
            _chain(nu, zv[i], &lv[i], &rv[i])
    return logk.reshape(zarr.shape), ratio.reshape(zarr.shape)


cdef int _drift_eval_c(
    const double[:, ::1] atoms,
    double* y,
    double sigma,
    double log_norm,
    double snap_radius,
    double* out_b,
    double* out_logh,
    long* out_wargmax,
    long* out_nidx,
    double* out_ndist,
    double* dist,
    double* logg,
    double* ratio,
) noexcept nogil:
    """Exact empirical drift at one point.  Returns 1 when within snap_radius
    of an atom (Bessel terms skipped), else 0."""
    cdef Py_ssize_t n = atoms.shape[0]
    cdef Py_ssize_t d = atoms.shape[1]
    cdef Py_ssize_t i, j
    cdef double acc, diff, nu, kappa, m, wsum, coef, w
    cdef long nidx = 0, wargmax = 0

    for i in range(n):
        acc = 0.0
        for j in range(d):
            diff = atoms[i, j] - y[j]
            acc += diff * diff
        dist[i] = sqrt(acc)
        if dist[i] < dist[nidx]:
            nidx = i
    out_nidx[0] = nidx
    out_ndist[0] = dist[nidx]
    if dist[nidx] < snap_radius:
        out_wargmax[0] = -1
        out_logh[0] = 0.0
        return 1

    nu = 0.5 * (d - 2)
    kappa = sqrt(2.0) / sigma
    m = -INFINITY
    for i in range(n):
        _chain(nu, kappa * dist[i], &logg[i], &ratio[i])
        logg[i] += log_norm - nu * log(dist[i])
        if logg[i] > m:
            m = logg[i]
            wargmax = i
    wsum = 0.0
    for i in range(n):
        logg[i] = (logg[i] - m)
        wsum += exp(logg[i])
    out_logh[0] = m + log(wsum) - log(<double>n)
    out_wargmax[0] = wargmax
    for j in range(d):
        out_b[j] = 0.0
    for i in range(n):
        w = exp(logg[i]) / wsum
        coef = w * kappa * ratio[i] / dist[i]
        for j in range(d):
            out_b[j] += coef * (atoms[i, j] - y[j])
    return 0


def drift_eval(atoms, y, double sigma, double log_norm, double snap_radius):
    """Exact empirical drift at one point; mirrors ``_purepy.drift_eval``."""
    cdef const double[:, ::1] av = np.ascontiguousarray(atoms, dtype=np.float64)
    yarr = np.ascontiguousarray(y, dtype=np.float64).copy()
    cdef double[::1] yv = yarr
    cdef Py_ssize_t n = av.shape[0]
    b = np.empty(av.shape[1])
    cdef double[::1] bv = b
    scratch = np.empty((3, n))
    cdef double[:, ::1] sv = scratch
    cdef double logh, ndist
    cdef long wargmax, nidx
    cdef int snapped
    snapped = _drift_eval_c(
        av, &yv[0], sigma, log_norm, snap_radius,
        &bv[0], &logh, &wargmax, &nidx, &ndist,
        &sv[0, 0], &sv[1, 0], &sv[2, 0],
    )
    if snapped:
        return None, float("nan"), -1, int(nidx), ndist
    return b, logh, int(wargmax), int(nidx), ndist


def reverse_sim(
    atoms,
    y0,
    double sigma,
    double log_norm,
    double m_sq,
    long max_steps,
    double dt_max,
    double dt_scale,
    double snap_radius,
    long store_every,
    rng,
):
    """Single reverse trajectory under the exact empirical drift.

    Identical stepping, stopping, storage and random-stream semantics as
    ``_purepy.reverse_sim``.
    """
    cdef const double[:, ::1] av = np.ascontiguousarray(atoms, dtype=np.float64)
    cdef Py_ssize_t n = av.shape[0]
    cdef Py_ssize_t d = av.shape[1]

    y = np.array(y0, dtype=np.float64)
    cdef double[::1] yv = y
    b = np.empty(d)
    cdef double[::1] bv = b
    scratch = np.empty((3, n))
    cdef double[:, ::1] sv = scratch

    times = [0.0]
    states = [y.copy()]
    accs = [0.0]

    cdef long block = NORMAL_BLOCK
    buf = rng.standard_normal((block, d))
    cdef double[:, ::1] bufv = buf
    cdef long pos = 0

    cdef double t = 0.0, acc = 0.0
    cdef long nsteps = 0
    cdef int stop = -1
    cdef double logh, ndist, b2, dt, sq
    cdef long wargmax, nidx
    cdef Py_ssize_t j
    cdef int snapped, nonfinite = 0, do_store

    while True:
        snapped = _drift_eval_c(
            av, &yv[0], sigma, log_norm, snap_radius,
            &bv[0], &logh, &wargmax, &nidx, &ndist,
            &sv[0, 0], &sv[1, 0], &sv[2, 0],
        )
        if snapped:
            stop = STOP_SINGULARITY
            break
        if nsteps >= max_steps:
            stop = STOP_STEP_CAP
            break
        b2 = 0.0
        for j in range(d):
            b2 += bv[j] * bv[j]
        if not isfinite(b2):
            raise FloatingPointError(
                "drift norm overflowed at step %d (t=%.6g)" % (nsteps, t)
            )
        dt = dt_max if b2 * dt_max <= dt_scale else dt_scale / b2
        sq = sqrt(dt)
        for j in range(d):
            yv[j] = yv[j] + bv[j] * dt + sq * bufv[pos, j]
            if not isfinite(yv[j]):
                nonfinite = 1
        pos += 1
        if pos == block:
            buf = rng.standard_normal((block, d))
            bufv = buf
            pos = 0
        if nonfinite:
            raise FloatingPointError(
                "non-finite state after step %d (t=%.6g)" % (nsteps + 1, t)
            )
        t += dt
        acc += b2 * dt
        nsteps += 1
        if nsteps % store_every == 0:
            times.append(t)
            states.append(y.copy())
            accs.append(acc)
        if acc >= m_sq:
            stop = STOP_THRESHOLD
            break

    if times[len(times) - 1] != t:
        times.append(t)
        states.append(y.copy())
        accs.append(acc)
    return (
        np.asarray(times),
        np.asarray(states),
        np.asarray(accs),
        stop,
        nsteps,
        y,
    )
