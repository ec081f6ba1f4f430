"""Pure-Python / numpy implementation of the numerical core.

This module mirrors the interface of the compiled extension ``_core``.  It is
selected automatically when the extension is unavailable (see ``_backend``),
and it is the reference for the backend parity tests.

Scaled modified Bessel functions of the second kind are evaluated in the log
domain via the upward ratio recurrence

    r_nu = K_{nu+1}(z) / K_nu(z) = 2*nu/z + 1/r_{nu-1}

seeded at order 0 (integer chain, scaled seeds from scipy's cephes k0e/k1e)
or order 1/2 (half-integer chain, closed form).  log K accumulates the log of
the ratios with compensated summation.  Upward recurrence is stable for K,
which is the solution growing in the order.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import k0e, k1e

BACKEND_NAME = "python"

# Normal variates for the simulation loops are drawn in blocks of this many
# steps.  numpy Generator streams are chunk-invariant, so the block size does
# not affect the values consumed.
NORMAL_BLOCK = 256

STOP_THRESHOLD = 0
STOP_STEP_CAP = 1
STOP_SINGULARITY = 2


def _chain_steps(nu: float) -> tuple[float, int]:
    """Split an order into (seed order, number of recurrence steps)."""
    twice = int(round(2.0 * nu))
    if twice % 2 == 1:
        return 0.5, (twice - 1) // 2
    return 0.0, twice // 2


def log_k_and_ratio(nu: float, z: float) -> tuple[float, float]:
    """Return (log K_nu(z), K_{nu+1}(z)/K_nu(z)) for half-integral nu >= 0, z > 0."""
    nu0, steps = _chain_steps(nu)
    if nu0 == 0.5:
        logk = 0.5 * math.log(math.pi / (2.0 * z)) - z
        r = 1.0 + 1.0 / z
    else:
        s0 = float(k0e(z))
        logk = math.log(s0) - z
        r = float(k1e(z)) / s0
    comp = 0.0
    for j in range(1, steps + 1):
        term = math.log(r) - comp
        tot = logk + term
        comp = (tot - logk) - term
        logk = tot
        r = 2.0 * (nu0 + j) / z + 1.0 / r
    return logk, r


def log_k_and_ratio_many(nu: float, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise (log K_nu, ratio) over an array of arguments, shared order."""
    z = np.asarray(z, dtype=np.float64)
    nu0, steps = _chain_steps(nu)
    if nu0 == 0.5:
        logk = 0.5 * np.log(np.pi / (2.0 * z)) - z
        r = 1.0 + 1.0 / z
    else:
        s0 = k0e(z)
        logk = np.log(s0) - z
        r = k1e(z) / s0
    comp = np.zeros_like(logk)
    for j in range(1, steps + 1):
        term = np.log(r) - comp
        tot = logk + term
        comp = (tot - logk) - term
        logk = tot
        r = 2.0 * (nu0 + j) / z + 1.0 / r
    return logk, r


def _green_terms(atoms, y, sigma, log_norm):
    """Distances, per-atom log kernel values and ratios for one probe point."""
    d = atoms.shape[1]
    nu = 0.5 * (d - 2)
    diff = atoms - y
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    kappa = math.sqrt(2.0) / sigma
    logk, ratio = log_k_and_ratio_many(nu, kappa * dist)
    logg = log_norm - nu * np.log(dist) + logk
    return diff, dist, logg, ratio, kappa


def drift_eval(atoms, y, sigma, log_norm, snap_radius):
    """Exact empirical drift at one point.

    Returns ``(b, log_h, weight_argmax, nearest_idx, nearest_dist)``.  When the
    nearest atom is closer than ``snap_radius`` the Bessel terms are skipped and
    ``b``/``log_h`` come back as ``None``/nan: the caller decides whether that
    is an arrival or an error.
    """
    atoms = np.asarray(atoms, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    diff = atoms - y
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    nearest_idx = int(np.argmin(dist))
    nearest_dist = float(dist[nearest_idx])
    if nearest_dist < snap_radius:
        return None, math.nan, -1, nearest_idx, nearest_dist

    d = atoms.shape[1]
    nu = 0.5 * (d - 2)
    kappa = math.sqrt(2.0) / sigma
    logk, ratio = log_k_and_ratio_many(nu, kappa * dist)
    logg = log_norm - nu * np.log(dist) + logk
    m = logg.max()
    w = np.exp(logg - m)
    s = w.sum()
    log_h = m + math.log(s) - math.log(atoms.shape[0])
    w /= s
    coef = w * kappa * ratio / dist
    b = coef @ diff
    return b, log_h, int(np.argmax(logg)), nearest_idx, nearest_dist


def reverse_sim(
    atoms,
    y0,
    sigma,
    log_norm,
    m_sq,
    max_steps,
    dt_max,
    dt_scale,
    snap_radius,
    store_every,
    rng,
):
    """Single reverse-diffusion trajectory under the exact empirical drift.

    Euler-Maruyama with adaptive step dt = min(dt_max, dt_scale/|b|^2); per
    step |b|^2 dt accrues into the squared path norm; stops on threshold,
    step cap, or proximity to an atom.  Returns
    ``(times, states, acc, stop_code, n_steps, endpoint)`` with the stored
    history decimated by ``store_every`` (first and final states always kept).
    """
    atoms = np.asarray(atoms, dtype=np.float64)
    y = np.array(y0, dtype=np.float64)
    d = y.shape[0]

    times = [0.0]
    states = [y.copy()]
    accs = [0.0]

    buf = rng.standard_normal((NORMAL_BLOCK, d))
    pos = 0

    t = 0.0
    acc = 0.0
    nsteps = 0
    while True:
        b, _logh, _widx, _nidx, ndist = drift_eval(atoms, y, sigma, log_norm, snap_radius)
        if b is None:
            stop = STOP_SINGULARITY
            break
        if nsteps >= max_steps:
            stop = STOP_STEP_CAP
            break
        b2 = float(b @ b)
        if not math.isfinite(b2):
            raise FloatingPointError(
                "drift norm overflowed at step %d (t=%.6g)" % (nsteps, t)
            )
        dt = dt_max if b2 * dt_max <= dt_scale else dt_scale / b2
        xi = buf[pos]
        pos += 1
        if pos == NORMAL_BLOCK:
            buf = rng.standard_normal((NORMAL_BLOCK, d))
            pos = 0
        y = y + b * dt + math.sqrt(dt) * xi
        if not np.isfinite(y).all():
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

    if times[-1] != t:
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
