"""Forward corruption, backward drift fields, and reverse-diffusion sampling.

The forward model corrupts a clean atom X with isotropic noise sigma*sqrt(U)*V
(U exponential, V standard Gaussian), which is in law a Brownian motion
started at X and stopped at an independent exponential time.  Recovery runs
the time-reversed diffusion

    dY_s = b(Y_s) ds + dW_s,     b = grad log h,   h(y) = mean_i G(x_i, y),

whose drift is available in closed form over an empirical prior.  Simulation
is Euler-Maruyama with the adaptive step dt = min(dt_max, dt_scale/|b|^2)
(the drift stiffens like dim/distance near the atoms, so each drift-limited
step contributes about dt_scale to the accumulated squared path norm), and it
stops on one of three conditions:

* ``threshold_hit``   - accumulated int |b|^2 ds reaches stop_threshold^2,
* ``step_cap``        - max_steps Euler steps were taken,
* ``singularity_floor`` - the state came within snap_radius of an atom.

Randomness discipline: every trajectory consumes the normal stream of its own
``SeedSequence(seed, spawn_key=(index,))`` generator, so batched runs return
identical results for any worker count or chunking.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field
from enum import Enum
from pathlib import Path

import numpy as np

from . import _backend
from .errors import (
    DimensionMismatchError,
    InvalidParameterError,
    NonFiniteStateError,
    PriorFormatError,
    SingularityError,
    VersionMismatchError,
)
from .kernel import KernelParams, R_MIN_DEFAULT
from .prior import EmpiricalPrior
from .util import logsumexp, softmax_rows, spawned_rng

PERTURBATION_MODES = ("additive_gaussian_field", "smooth_bias")

#: Rowwise element budget for chunked batch evaluation (m*n*d per chunk).
_CHUNK_ELEMS = 1 << 22


class StopReason(Enum):
    THRESHOLD_HIT = "threshold_hit"
    STEP_CAP = "step_cap"
    SINGULARITY_FLOOR = "singularity_floor"


_STOP_FROM_CODE = {
    _backend.STOP_THRESHOLD: StopReason.THRESHOLD_HIT,
    _backend.STOP_STEP_CAP: StopReason.STEP_CAP,
    _backend.STOP_SINGULARITY: StopReason.SINGULARITY_FLOOR,
}
_CODE_FROM_STOP = {v: k for k, v in _STOP_FROM_CODE.items()}


@dataclass(frozen=True)
class ModelConfig:
    """Reverse-sampler configuration around a kernel parameterization.

    ``snap_radius`` defaults to 1e-6 * sigma; it declares arrival once the
    kernel singularity makes further steps meaningless.  The default
    ``stop_threshold`` convention for experiments is 20 * dim (see
    :func:`default_stop_threshold`); it is deliberately generous so the
    proximity stop fires first for exact drifts, while estimated drifts that
    cannot blow up rely on the threshold.
    """

    kernel: KernelParams
    stop_threshold: float
    max_steps: int
    dt_max: float
    dt_scale: float = 0.1
    snap_radius: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.stop_threshold) and self.stop_threshold > 0):
            raise InvalidParameterError(f"stop_threshold: must be > 0, got {self.stop_threshold!r}")
        if self.max_steps < 1:
            raise InvalidParameterError(f"max_steps: must be >= 1, got {self.max_steps!r}")
        if not (math.isfinite(self.dt_max) and self.dt_max > 0):
            raise InvalidParameterError(f"dt_max: must be > 0, got {self.dt_max!r}")
        if not (math.isfinite(self.dt_scale) and self.dt_scale > 0):
            raise InvalidParameterError(f"dt_scale: must be > 0, got {self.dt_scale!r}")
        snap = self.snap_radius
        if snap is None:
            snap = 1.0e-6 * self.kernel.sigma
        if snap < 0:
            raise InvalidParameterError(f"snap_radius: must be >= 0, got {snap!r}")
        if 0.0 < snap < 1.0e-8 * self.kernel.sigma:
            raise InvalidParameterError(
                f"snap_radius: {snap!r} is below 1e-8 * sigma; kernel arguments "
                f"would leave the supported accuracy domain before arrival"
            )
        object.__setattr__(self, "snap_radius", float(snap))
        object.__setattr__(self, "stop_threshold", float(self.stop_threshold))
        object.__setattr__(self, "max_steps", int(self.max_steps))
        object.__setattr__(self, "dt_max", float(self.dt_max))
        object.__setattr__(self, "dt_scale", float(self.dt_scale))
        object.__setattr__(self, "seed", int(self.seed))


def default_stop_threshold(dim: int, factor: float = 20.0) -> float:
    """Experiment convention for M: factor * dim."""
    return factor * dim


# --- drift fields -----------------------------------------------------------


@dataclass
class DriftEval:
    """One drift evaluation: the vector field, log h, and bookkeeping.

    ``nearest_atom_index`` is the argmax posterior weight (ties to the lowest
    index), ``distance_estimate`` is dim/|drift| (the large-d distance reading
    of the drift magnitude), and ``nearest_distance`` is the true Euclidean
    distance to the closest atom (nan when the field carries no atoms).
    """

    drift: np.ndarray
    log_h: float
    nearest_atom_index: int | None
    distance_estimate: float
    nearest_distance: float


@dataclass
class BatchEval:
    drift: np.ndarray
    log_h: np.ndarray
    weight_argmax: np.ndarray
    nearest_index: np.ndarray
    nearest_distance: np.ndarray


class DriftField:
    """Evaluator contract y -> (drift, log h, nearest atom, distance estimate).

    Implementations are immutable after construction and safe for concurrent
    use.  ``atoms`` is the supported point set when the field knows it (used
    by the samplers for arrival detection), else None.
    """

    dim: int
    snap_radius: float = 0.0

    @property
    def atoms(self) -> np.ndarray | None:
        return None

    def evaluate_batch(self, points: np.ndarray, snap_action: str = "raise") -> BatchEval:
        raise NotImplementedError

    def evaluate(self, y) -> DriftEval:
        y = np.asarray(y, dtype=np.float64)
        ev = self.evaluate_batch(y[None, :], snap_action="raise")
        b = ev.drift[0]
        nb = float(np.linalg.norm(b))
        widx = int(ev.weight_argmax[0])
        return DriftEval(
            drift=b,
            log_h=float(ev.log_h[0]),
            nearest_atom_index=widx if widx >= 0 else None,
            distance_estimate=self.dim / nb if nb > 0 else math.inf,
            nearest_distance=float(ev.nearest_distance[0]),
        )


def _check_points(points: np.ndarray, dim: int) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != dim:
        raise DimensionMismatchError(f"expected points of shape (m, {dim}), got {points.shape}")
    return points


class _AtomFieldBase(DriftField):
    """Shared chunked evaluation over an atom cloud."""

    def __init__(self, prior: EmpiricalPrior, kernel: KernelParams, snap_radius: float, r_min: float):
        if prior.dim != kernel.dim:
            raise DimensionMismatchError(
                f"prior dim {prior.dim} != kernel dim {kernel.dim}"
            )
        self.prior = prior
        self.kernel = kernel
        self.dim = kernel.dim
        self.snap_radius = float(snap_radius)
        self.r_min = float(r_min)

    @property
    def atoms(self) -> np.ndarray:
        return self.prior.atoms

    def _weights_and_terms(self, dist):
        raise NotImplementedError

    def evaluate_batch(self, points, snap_action: str = "raise") -> BatchEval:
        points = _check_points(points, self.dim)
        m = points.shape[0]
        n = self.prior.n
        out_drift = np.empty((m, self.dim))
        out_logh = np.empty(m)
        out_wargmax = np.empty(m, dtype=np.int64)
        out_nidx = np.empty(m, dtype=np.int64)
        out_ndist = np.empty(m)
        rows = max(1, _CHUNK_ELEMS // max(1, n * self.dim))
        atoms = self.prior.atoms
        for lo in range(0, m, rows):
            hi = min(m, lo + rows)
            pts = points[lo:hi]
            diff = atoms[None, :, :] - pts[:, None, :]
            dist = np.sqrt(np.einsum("mnd,mnd->mn", diff, diff))
            nidx = np.argmin(dist, axis=1)
            ndist = dist[np.arange(hi - lo), nidx]
            out_nidx[lo:hi] = nidx
            out_ndist[lo:hi] = ndist
            snapped = ndist < self.snap_radius
            if snapped.any():
                if snap_action == "raise":
                    i = int(np.argmax(snapped))
                    raise SingularityError(
                        f"point {lo + i} within snap_radius {self.snap_radius!r} "
                        f"of atom {int(nidx[i])} (distance {float(ndist[i])!r})"
                    )
                if snap_action != "nan":
                    raise InvalidParameterError(f"snap_action: unknown value {snap_action!r}")
            ok = ~snapped
            out_drift[lo:hi][snapped] = np.nan
            out_logh[lo:hi][snapped] = np.nan
            out_wargmax[lo:hi][snapped] = -1
            if ok.any():
                dist_ok = np.maximum(dist[ok], self.r_min)
                logw, coef = self._weights_and_terms(dist_ok)
                w = softmax_rows(logw)
                out_logh[lo:hi][ok] = logsumexp(logw, axis=1) - math.log(n)
                out_wargmax[lo:hi][ok] = np.argmax(logw, axis=1)
                out_drift[lo:hi][ok] = np.einsum("mn,mnd->md", w * coef, diff[ok])
        return BatchEval(
            drift=out_drift,
            log_h=out_logh,
            weight_argmax=out_wargmax,
            nearest_index=out_nidx,
            nearest_distance=out_ndist,
        )


class ExactEmpiricalDrift(_AtomFieldBase):
    """b(y) = sum_i w_i(y) grad_2 log G(x_i, y), w = softmax of log G(x_i, y).

    The exact backward drift of the reverse diffusion for a uniform atom
    prior; also the population minimiser of the truncated denoising
    regression objective away from the atoms.
    """

    def _weights_and_terms(self, dist):
        kp = self.kernel
        logk, ratio = _backend.log_k_and_ratio_many(kp.order, kp.kappa * dist)
        logw = kp.log_norm - kp.order * np.log(dist) + logk
        coef = kp.kappa * ratio / dist
        return logw, coef

    def evaluate(self, y) -> DriftEval:
        # Scalar path goes through the backend so single-trajectory work
        # benefits from the compiled core.
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.dim,):
            raise DimensionMismatchError(f"expected point of shape ({self.dim},), got {y.shape}")
        b, log_h, widx, nidx, ndist = _backend.drift_eval(
            self.prior.atoms, y, self.kernel.sigma, self.kernel.log_norm, self.snap_radius
        )
        if b is None:
            raise SingularityError(
                f"point within snap_radius {self.snap_radius!r} of atom {nidx} "
                f"(distance {ndist!r})"
            )
        b = np.asarray(b)
        nb = float(np.linalg.norm(b))
        return DriftEval(
            drift=b,
            log_h=log_h,
            nearest_atom_index=widx,
            distance_estimate=self.dim / nb if nb > 0 else math.inf,
            nearest_distance=ndist,
        )


class LeadingOrderDrift(_AtomFieldBase):
    """Large-d surrogate: weights |x_i-y|^(2-d), per-atom pull d*(x_i-y)/|x_i-y|^2.

    Shares the exact field's interface so experiments can swap the two via
    configuration; diagnostic only at moderate dimension.
    """

    def _weights_and_terms(self, dist):
        kp = self.kernel
        nu = kp.order
        const = (
            -0.5 * math.log(2.0 * math.pi * nu)
            + nu * (math.log(nu) - math.log(math.pi) - 1.0)
            - 2.0 * math.log(kp.sigma)
        )
        logw = const - 2.0 * nu * np.log(dist)
        coef = kp.dim / dist**2
        return logw, coef


class PerturbedDrift(DriftField):
    """A base field plus a bounded deterministic perturbation.

    ``additive_gaussian_field`` superposes random cosine features with unit
    directions, normalized so the perturbation norm never exceeds
    ``magnitude`` anywhere; ``smooth_bias`` adds magnitude times a fixed
    random unit vector.  log h and the atom bookkeeping pass through from the
    base field unchanged (the perturbation is a model of estimation error,
    not a change of posterior).
    """

    def __init__(self, base: DriftField, mode: str, magnitude: float, seed: int,
                 n_features: int = 32, length_scale: float = 1.0):
        if mode not in PERTURBATION_MODES:
            raise InvalidParameterError(f"mode: unknown perturbation {mode!r}; choose from {PERTURBATION_MODES}")
        if magnitude < 0:
            raise InvalidParameterError(f"magnitude: must be >= 0, got {magnitude!r}")
        if length_scale <= 0:
            raise InvalidParameterError(f"length_scale: must be > 0, got {length_scale!r}")
        self.base = base
        self.dim = base.dim
        self.snap_radius = base.snap_radius
        self.mode = mode
        self.magnitude = float(magnitude)
        self.seed = int(seed)
        rng = spawned_rng(seed, 97)
        if mode == "additive_gaussian_field":
            k = int(n_features)
            self._omega = rng.standard_normal((k, self.dim)) / length_scale
            self._phase = rng.uniform(0.0, 2.0 * math.pi, k)
            dirs = rng.standard_normal((k, self.dim))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            # 1/k normalization bounds |perturbation| by magnitude pointwise.
            self._dirs = dirs * (self.magnitude / k)
        else:
            u = rng.standard_normal(self.dim)
            self._bias = self.magnitude * u / np.linalg.norm(u)

    @property
    def atoms(self) -> np.ndarray | None:
        return self.base.atoms

    def perturbation(self, points: np.ndarray) -> np.ndarray:
        points = _check_points(points, self.dim)
        if self.magnitude == 0.0:
            return np.zeros_like(points)
        if self.mode == "smooth_bias":
            return np.broadcast_to(self._bias, points.shape).copy()
        feats = np.cos(points @ self._omega.T + self._phase)
        return feats @ self._dirs

    def evaluate_batch(self, points, snap_action: str = "raise") -> BatchEval:
        ev = self.base.evaluate_batch(points, snap_action=snap_action)
        if self.magnitude != 0.0:
            pert = self.perturbation(np.asarray(points, dtype=np.float64))
            ev.drift = ev.drift + pert
        return ev


def exact_drift(
    prior: EmpiricalPrior,
    kernel: KernelParams,
    *,
    snap_radius: float | None = None,
    r_min: float = R_MIN_DEFAULT,
) -> ExactEmpiricalDrift:
    """The exact empirical backward drift field (softmax-weighted kernel gradients)."""
    snap = 1.0e-6 * kernel.sigma if snap_radius is None else float(snap_radius)
    return ExactEmpiricalDrift(prior, kernel, snap, r_min)


def leading_order_drift(
    prior: EmpiricalPrior,
    kernel: KernelParams,
    *,
    snap_radius: float | None = None,
    r_min: float = R_MIN_DEFAULT,
) -> LeadingOrderDrift:
    snap = 1.0e-6 * kernel.sigma if snap_radius is None else float(snap_radius)
    return LeadingOrderDrift(prior, kernel, snap, r_min)


def perturb_drift(base: DriftField, mode: str, magnitude: float, seed: int,
                  *, n_features: int = 32, length_scale: float = 1.0) -> PerturbedDrift:
    return PerturbedDrift(base, mode, magnitude, seed, n_features=n_features, length_scale=length_scale)


# --- forward corruption ------------------------------------------------------


@dataclass(frozen=True)
class ForwardBatch:
    """Forward-model draws: noisy = clean + sigma*sqrt(u)*v, componentwise rows."""

    clean: np.ndarray
    noisy: np.ndarray
    u: np.ndarray
    v: np.ndarray
    atom_index: np.ndarray

    def __len__(self) -> int:
        return self.clean.shape[0]

    def __getitem__(self, i):
        return self.clean[i], self.noisy[i], self.u[i], self.v[i]


def forward_corrupt(prior: EmpiricalPrior, config: ModelConfig, count: int) -> ForwardBatch:
    """Bootstrap clean atoms and corrupt them with sigma*sqrt(U)*V noise.

    Draw order per seed: atom indices, then U (exponential of rate 1), then V
    (standard normal rows).  Deterministic given ``config.seed``.
    """
    if count < 1:
        raise InvalidParameterError(f"count: must be >= 1, got {count}")
    if prior.dim != config.kernel.dim:
        raise DimensionMismatchError(f"prior dim {prior.dim} != kernel dim {config.kernel.dim}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    idx = rng.integers(0, prior.n, size=count)
    u = rng.standard_exponential(count)
    v = rng.standard_normal((count, prior.dim))
    clean = prior.atoms[idx]
    noisy = clean + config.kernel.sigma * np.sqrt(u)[:, None] * v
    return ForwardBatch(clean=clean, noisy=noisy, u=u, v=v, atom_index=idx)


# --- trajectories ------------------------------------------------------------


@dataclass
class Trajectory:
    """Stored reverse-diffusion path (possibly decimated) plus stop metadata.

    ``times`` strictly increase from 0; ``accumulated_l2sq`` is the running
    int_0^s |b|^2 dr at the stored instants and is nondecreasing; the final
    value reaches stop_threshold^2 exactly when ``stop_reason`` is
    ``THRESHOLD_HIT``.
    """

    times: np.ndarray
    states: np.ndarray
    accumulated_l2sq: np.ndarray
    stop_reason: StopReason
    endpoint: np.ndarray
    endpoint_snapped: int | None
    n_steps: int

    @property
    def final_time(self) -> float:
        return float(self.times[-1])

    @property
    def final_accumulated(self) -> float:
        return float(self.accumulated_l2sq[-1])


def _endpoint_snap(endpoint, atoms, stop_reason, snap_radius):
    """Nearest-atom bookkeeping at the endpoint; index only for arrivals."""
    if atoms is None:
        return None, -1, math.nan
    diff = atoms - endpoint
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    nidx = int(np.argmin(dist))
    ndist = float(dist[nidx])
    snapped = None
    if stop_reason in (StopReason.THRESHOLD_HIT, StopReason.SINGULARITY_FLOOR):
        if ndist < 10.0 * snap_radius:
            snapped = nidx
    return snapped, nidx, ndist


def reverse_sample(
    drift: DriftField, y0, config: ModelConfig, *, store_every: int = 1
) -> Trajectory:
    """Simulate one reverse trajectory from y0 under the given drift field.

    Exact empirical fields run in the numerical backend (compiled when
    available); other fields run a generic Python loop with identical
    semantics and random-stream discipline.  ``store_every`` decimates the
    stored history (first and final states are always kept); it does not
    affect the dynamics.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    if y0.shape != (drift.dim,):
        raise DimensionMismatchError(f"y0 must have shape ({drift.dim},), got {y0.shape}")
    if store_every < 1:
        raise InvalidParameterError(f"store_every: must be >= 1, got {store_every}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    m_sq = config.stop_threshold**2

    if isinstance(drift, ExactEmpiricalDrift):
        try:
            times, states, accs, code, nsteps, endpoint = _backend.reverse_sim(
                drift.prior.atoms,
                y0,
                drift.kernel.sigma,
                drift.kernel.log_norm,
                m_sq,
                config.max_steps,
                config.dt_max,
                config.dt_scale,
                config.snap_radius,
                store_every,
                rng,
            )
        except FloatingPointError as exc:
            raise NonFiniteStateError(str(exc)) from exc
        reason = _STOP_FROM_CODE[int(code)]
    else:
        times, states, accs, reason, nsteps, endpoint = _generic_sim(
            drift, y0, config, store_every, rng
        )

    snapped, _nidx, _ndist = _endpoint_snap(endpoint, drift.atoms, reason, config.snap_radius)
    return Trajectory(
        times=np.asarray(times),
        states=np.asarray(states),
        accumulated_l2sq=np.asarray(accs),
        stop_reason=reason,
        endpoint=np.asarray(endpoint),
        endpoint_snapped=snapped,
        n_steps=int(nsteps),
    )


def _generic_sim(field, y0, config, store_every, rng):
    """Reference loop for arbitrary drift fields (same stepping rules as the backend)."""
    d = field.dim
    block = 256
    buf = rng.standard_normal((block, d))
    pos = 0
    y = y0.copy()
    t = acc = 0.0
    nsteps = 0
    times, states, accs = [0.0], [y.copy()], [0.0]
    m_sq = config.stop_threshold**2
    snap = config.snap_radius
    while True:
        ev = field.evaluate_batch(y[None, :], snap_action="nan")
        ndist = float(ev.nearest_distance[0])
        if not math.isnan(ndist) and ndist < snap:
            reason = StopReason.SINGULARITY_FLOOR
            break
        if nsteps >= config.max_steps:
            reason = StopReason.STEP_CAP
            break
        b = ev.drift[0]
        with np.errstate(over="ignore"):
            b2 = float(b @ b)
        if not math.isfinite(b2):
            raise NonFiniteStateError(f"drift norm overflowed at step {nsteps} (t={t:.6g})")
        dt = config.dt_max if b2 * config.dt_max <= config.dt_scale else config.dt_scale / b2
        xi = buf[pos]
        pos += 1
        if pos == block:
            buf = rng.standard_normal((block, d))
            pos = 0
        y = y + b * dt + math.sqrt(dt) * xi
        if not np.isfinite(y).all():
            raise NonFiniteStateError(f"non-finite state after step {nsteps + 1} (t={t:.6g})")
        t += dt
        acc += b2 * dt
        nsteps += 1
        if nsteps % store_every == 0:
            times.append(t)
            states.append(y.copy())
            accs.append(acc)
        if acc >= m_sq:
            reason = StopReason.THRESHOLD_HIT
            break
    if times[-1] != t:
        times.append(t)
        states.append(y.copy())
        accs.append(acc)
    return times, states, accs, reason, nsteps, y


# --- batched endpoint sampling ------------------------------------------------


@dataclass
class BatchRunResult:
    """Endpoint-level results of many independent reverse trajectories."""

    endpoints: np.ndarray
    stop_codes: np.ndarray
    snapped: np.ndarray
    nearest_index: np.ndarray
    nearest_distance: np.ndarray
    final_accumulated: np.ndarray
    final_time: np.ndarray
    n_steps: np.ndarray

    def stop_reason(self, i: int) -> StopReason:
        return _STOP_FROM_CODE[int(self.stop_codes[i])]

    def atom_histogram(self, n_atoms: int, *, fallback_nearest: bool = True) -> np.ndarray:
        """Endpoint counts per atom, using snapped indices (nearest as fallback)."""
        idx = self.snapped.copy()
        if fallback_nearest:
            missing = idx < 0
            idx[missing] = self.nearest_index[missing]
        counts = np.zeros(n_atoms, dtype=np.int64)
        for i in idx:
            if i >= 0:
                counts[i] += 1
        return counts


def _lockstep_chunk(field: DriftField, y0: np.ndarray, config: ModelConfig,
                    idx_lo: int, idx_hi: int) -> BatchRunResult:
    """Run trajectories idx_lo..idx_hi-1 in lockstep (vectorized over the batch)."""
    m = idx_hi - idx_lo
    d = field.dim
    y0 = np.asarray(y0, dtype=np.float64)
    Y = np.tile(y0, (m, 1))
    gens = [spawned_rng(config.seed, i) for i in range(idx_lo, idx_hi)]

    block = int(max(8, min(256, (64 << 20) // max(1, 8 * d * m))))
    buf = np.empty((m, block, d))
    times = np.zeros(m)
    acc = np.zeros(m)
    steps = np.zeros(m, dtype=np.int64)
    codes = np.full(m, -1, dtype=np.int8)
    active = np.arange(m)
    snap = config.snap_radius
    m_sq = config.stop_threshold**2
    it = 0
    while active.size:
        pos = it % block
        if pos == 0:
            for j in active:
                buf[j] = gens[j].standard_normal((block, d))
        ev = field.evaluate_batch(Y[active], snap_action="nan")
        nd = ev.nearest_distance
        sing = np.where(np.isnan(nd), False, nd < snap)
        cap = (~sing) & (steps[active] >= config.max_steps)
        codes[active[sing]] = _backend.STOP_SINGULARITY
        codes[active[cap]] = _backend.STOP_STEP_CAP
        go = ~(sing | cap)
        act = active[go]
        if act.size:
            B = ev.drift[go]
            with np.errstate(over="raise"):
                try:
                    b2 = np.einsum("md,md->m", B, B)
                except FloatingPointError as exc:
                    raise NonFiniteStateError(
                        f"drift norm overflowed in lockstep batch at iteration {it}"
                    ) from exc
            if not np.isfinite(b2).all():
                raise NonFiniteStateError(
                    f"drift norm overflowed in lockstep batch at iteration {it}"
                )
            with np.errstate(divide="ignore"):
                dt = np.where(b2 * config.dt_max <= config.dt_scale,
                              config.dt_max, config.dt_scale / b2)
            xi = buf[act, pos, :]
            Y[act] += B * dt[:, None] + np.sqrt(dt)[:, None] * xi
            if not np.isfinite(Y[act]).all():
                raise NonFiniteStateError(f"non-finite state in lockstep batch at iteration {it}")
            times[act] += dt
            acc[act] += b2 * dt
            steps[act] += 1
            hit = acc[act] >= m_sq
            codes[act[hit]] = _backend.STOP_THRESHOLD
            active = act[~hit]
        else:
            active = act
        it += 1

    atoms = field.atoms
    snapped = np.full(m, -1, dtype=np.int64)
    nearest_idx = np.full(m, -1, dtype=np.int64)
    nearest_dist = np.full(m, np.nan)
    if atoms is not None:
        diff = atoms[None, :, :] - Y[:, None, :]
        dist = np.sqrt(np.einsum("mnd,mnd->mn", diff, diff))
        nearest_idx = np.argmin(dist, axis=1)
        nearest_dist = dist[np.arange(m), nearest_idx]
        arrival = (codes == _backend.STOP_THRESHOLD) | (codes == _backend.STOP_SINGULARITY)
        close = nearest_dist < 10.0 * snap
        snapped = np.where(arrival & close, nearest_idx, -1)
    return BatchRunResult(
        endpoints=Y,
        stop_codes=codes,
        snapped=snapped,
        nearest_index=nearest_idx,
        nearest_distance=nearest_dist,
        final_accumulated=acc,
        final_time=times,
        n_steps=steps,
    )


def _chunk_worker(args):
    field, y0, config, lo, hi = args
    return _lockstep_chunk(field, y0, config, lo, hi)


def reverse_sample_batch(
    drift: DriftField, y0, config: ModelConfig, count: int, *, jobs: int = 1
) -> BatchRunResult:
    """Run ``count`` independent reverse trajectories and collect endpoints.

    Trajectory i consumes the stream of ``SeedSequence(config.seed,
    spawn_key=(i,))``, so the result is identical for any ``jobs`` value; the
    worker split is purely a throughput knob.
    """
    if count < 1:
        raise InvalidParameterError(f"count: must be >= 1, got {count}")
    y0 = np.asarray(y0, dtype=np.float64)
    if y0.shape != (drift.dim,):
        raise DimensionMismatchError(f"y0 must have shape ({drift.dim},), got {y0.shape}")
    jobs = max(1, int(jobs))
    if jobs == 1 or count < 2 * jobs:
        return _lockstep_chunk(drift, y0, config, 0, count)
    bounds = np.linspace(0, count, jobs + 1, dtype=int)
    tasks = [(drift, y0, config, int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    with ProcessPoolExecutor(max_workers=len(tasks)) as pool:
        parts = list(pool.map(_chunk_worker, tasks))
    return BatchRunResult(
        endpoints=np.concatenate([p.endpoints for p in parts]),
        stop_codes=np.concatenate([p.stop_codes for p in parts]),
        snapped=np.concatenate([p.snapped for p in parts]),
        nearest_index=np.concatenate([p.nearest_index for p in parts]),
        nearest_distance=np.concatenate([p.nearest_distance for p in parts]),
        final_accumulated=np.concatenate([p.final_accumulated for p in parts]),
        final_time=np.concatenate([p.final_time for p in parts]),
        n_steps=np.concatenate([p.n_steps for p in parts]),
    )


# --- exponential-time identity -------------------------------------------------


@dataclass
class ExpTimeReport:
    """Monte Carlo comparison of E[X_tau] against lambda E[int_0^tau X_t dt]."""

    lhs_mean: float
    lhs_se: float
    rhs_mean: float
    rhs_se: float
    diff_mean: float
    diff_se: float
    n_samples: int
    clipped_fraction: float
    consistent: bool


def exp_time_identity_check(
    path_sampler,
    lam: float,
    *,
    count: int = 4000,
    seed: int = 0,
    horizon: float | None = None,
    grid_steps: int = 2000,
    tolerance_se: float = 4.0,
) -> ExpTimeReport:
    """Check E[X_tau] = lambda E[int_0^tau X_t dt] for independent tau ~ Exp(lambda).

    ``path_sampler(rng, ts, count)`` must return a (count, len(ts)) array of
    path values on the time grid, independent of the exponential times (which
    this routine draws afterwards from the same generator).  Both sides are
    estimated per path; the report flags disagreement beyond ``tolerance_se``
    paired standard errors.
    """
    if lam <= 0:
        raise InvalidParameterError(f"lam: must be > 0, got {lam}")
    if horizon is None:
        horizon = 40.0 / lam
    rng = np.random.default_rng(seed)
    ts = np.linspace(0.0, horizon, grid_steps + 1)
    xs = np.asarray(path_sampler(rng, ts, count), dtype=np.float64)
    if xs.shape != (count, len(ts)):
        raise DimensionMismatchError(
            f"path_sampler returned shape {xs.shape}, expected {(count, len(ts))}"
        )
    tau = rng.standard_exponential(count) / lam
    clipped = tau > horizon
    tau = np.minimum(tau, horizon)

    k = np.clip(np.searchsorted(ts, tau, side="right") - 1, 0, grid_steps - 1)
    rows = np.arange(count)
    frac = (tau - ts[k]) / (ts[k + 1] - ts[k])
    x_tau = xs[rows, k] * (1.0 - frac) + xs[rows, k + 1] * frac

    seg = 0.5 * (xs[:, :-1] + xs[:, 1:]) * np.diff(ts)
    cum = np.concatenate([np.zeros((count, 1)), np.cumsum(seg, axis=1)], axis=1)
    c_tau = cum[rows, k] + 0.5 * (xs[rows, k] + x_tau) * (tau - ts[k])
    rhs = lam * c_tau

    diff = x_tau - rhs
    lhs_se = float(np.std(x_tau, ddof=1) / math.sqrt(count))
    rhs_se = float(np.std(rhs, ddof=1) / math.sqrt(count))
    diff_se = float(np.std(diff, ddof=1) / math.sqrt(count))
    diff_mean = float(np.mean(diff))
    consistent = abs(diff_mean) <= tolerance_se * diff_se if diff_se > 0 else diff_mean == 0.0
    return ExpTimeReport(
        lhs_mean=float(np.mean(x_tau)),
        lhs_se=lhs_se,
        rhs_mean=float(np.mean(rhs)),
        rhs_se=rhs_se,
        diff_mean=diff_mean,
        diff_se=diff_se,
        n_samples=count,
        clipped_fraction=float(np.mean(clipped)),
        consistent=bool(consistent),
    )


# --- trajectory persistence ----------------------------------------------------

TRAJECTORY_MAGIC = b"PDTJ"
TRAJECTORY_VERSION = 1


def export_trajectory_csv(traj: Trajectory, path) -> None:
    d = traj.states.shape[1]
    header = "s," + ",".join(f"x{i}" for i in range(d)) + ",accumulated_l2sq"
    lines = [header]
    for t, row, a in zip(traj.times, traj.states, traj.accumulated_l2sq):
        lines.append(",".join([repr(float(t))] + [repr(float(v)) for v in row] + [repr(float(a))]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def save_trajectory(traj: Trajectory, path) -> None:
    import struct

    k, d = traj.states.shape
    snapped = -1 if traj.endpoint_snapped is None else int(traj.endpoint_snapped)
    head = TRAJECTORY_MAGIC + struct.pack(
        "<IIQbqQ",
        TRAJECTORY_VERSION,
        d,
        k,
        _CODE_FROM_STOP[traj.stop_reason],
        snapped,
        traj.n_steps,
    )
    payload = np.column_stack([traj.times, traj.states, traj.accumulated_l2sq])
    Path(path).write_bytes(head + np.ascontiguousarray(payload, dtype="<f8").tobytes())


def load_trajectory(path) -> Trajectory:
    import struct

    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != TRAJECTORY_MAGIC:
        raise PriorFormatError(f"bad trajectory magic {raw[:4]!r}")
    off = 4
    version, d, k, code, snapped, n_steps = struct.unpack_from("<IIQbqQ", raw, off)
    if version != TRAJECTORY_VERSION:
        raise VersionMismatchError(f"trajectory version {version}, reader supports {TRAJECTORY_VERSION}")
    off += struct.calcsize("<IIQbqQ")
    need = off + 8 * k * (d + 2)
    if len(raw) < need:
        raise PriorFormatError(f"truncated trajectory: wanted {need} bytes, got {len(raw)}")
    payload = np.frombuffer(raw, dtype="<f8", count=k * (d + 2), offset=off).reshape(k, d + 2)
    times = payload[:, 0].copy()
    states = payload[:, 1 : 1 + d].copy()
    accs = payload[:, 1 + d].copy()
    return Trajectory(
        times=times,
        states=states,
        accumulated_l2sq=accs,
        stop_reason=_STOP_FROM_CODE[int(code)],
        endpoint=states[-1].copy(),
        endpoint_snapped=None if snapped < 0 else int(snapped),
        n_steps=int(n_steps),
    )
