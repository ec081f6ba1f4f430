"""Denoising regression: training pairs with closed-form score targets, the
truncated least-squares objective whose population minimiser is the backward
drift, a locally weighted regression baseline, and path-space error
diagnostics for estimated drifts.

Each training pair corrupts a bootstrapped atom xi into
input = xi + sigma*sqrt(u)*v and carries the target

    target = -(sqrt(2)/sigma) * (v/|v|) * K_{nu+1}/K_nu(sqrt(2u)|v|),

the gradient of the log kernel at the corrupted point.  Pairs whose noise
radius sigma*sqrt(u)|v| falls below the truncation delta are flagged and
excluded from the loss: the raw target fails to be square-integrable near the
atoms, and the drift is only identified by the regression away from them.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _backend
from .errors import (
    DimensionMismatchError,
    InvalidParameterError,
    NoKeptPairsError,
    PriorFormatError,
    VersionMismatchError,
)
from .kernel import KernelParams
from .prior import EmpiricalPrior
from .util import softmax_rows
from .dynamics import BatchEval, DriftField, Trajectory, _check_points

PAIRS_MAGIC = b"PDPR"
PAIRS_VERSION = 1


@dataclass(frozen=True)
class TrainingPairs:
    """Structure-of-arrays batch of training pairs.

    ``targets`` are antiparallel to the noise directions with magnitude
    (sqrt(2)/sigma) * ratio > 0; ``keep`` is exactly ``radial >= delta``.
    """

    inputs: np.ndarray
    targets: np.ndarray
    radial: np.ndarray
    keep: np.ndarray
    delta: float
    sigma: float

    def __post_init__(self):
        for name in ("inputs", "targets", "radial", "keep"):
            arr = np.asarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_kept(self) -> int:
        return int(np.count_nonzero(self.keep))


def make_training_pairs(
    prior: EmpiricalPrior,
    kernel: KernelParams,
    delta: float,
    count: int,
    seed: int,
    *,
    asymptotic_target: bool = False,
) -> TrainingPairs:
    """Monte Carlo pairs from bootstrapped atoms under the forward corruption.

    Draw order per seed: atom indices, exponential u, Gaussian v.  With
    ``asymptotic_target`` the targets use the large-d simplification
    -v/(sigma*sqrt(u)) instead of the Bessel-ratio form.
    """
    if count < 1:
        raise InvalidParameterError(f"count: must be >= 1, got {count}")
    if delta < 0:
        raise InvalidParameterError(f"delta: must be >= 0, got {delta}")
    if prior.dim != kernel.dim:
        raise DimensionMismatchError(f"prior dim {prior.dim} != kernel dim {kernel.dim}")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, prior.n, size=count)
    u = rng.standard_exponential(count)
    v = rng.standard_normal((count, prior.dim))
    vnorm = np.linalg.norm(v, axis=1)
    inputs = prior.atoms[idx] + kernel.sigma * np.sqrt(u)[:, None] * v
    radial = kernel.sigma * np.sqrt(u) * vnorm
    if asymptotic_target:
        targets = -v / (kernel.sigma * np.sqrt(u))[:, None]
    else:
        _, ratio = _backend.log_k_and_ratio_many(kernel.order, np.sqrt(2.0 * u) * vnorm)
        targets = -(kernel.kappa * ratio / vnorm)[:, None] * v
    return TrainingPairs(
        inputs=inputs,
        targets=targets,
        radial=radial,
        keep=radial >= delta,
        delta=float(delta),
        sigma=kernel.sigma,
    )


def default_truncation(kernel: KernelParams, fraction: float = 0.05) -> float:
    """Truncation radius as a fraction of the typical noise radius sigma*sqrt(d)."""
    return fraction * kernel.sigma * math.sqrt(kernel.dim)


def dsm_loss(drift: DriftField, pairs: TrainingPairs) -> float:
    """Mean squared deviation |drift(input) - target|^2 over the kept pairs.

    Sign convention: the stored target already is the score sample, so the
    objective reads |b(input) - target|^2 (equivalently |b + (sqrt(2)/sigma)
    (v/|v|) ratio|^2 with v the generating noise direction).
    """
    kept = pairs.keep
    if not kept.any():
        raise NoKeptPairsError("no pairs at or above the truncation radius")
    ev = drift.evaluate_batch(np.asarray(pairs.inputs[kept], dtype=np.float64), snap_action="raise")
    resid = ev.drift - pairs.targets[kept]
    return float(np.mean(np.einsum("md,md->m", resid, resid)))


class LocalRegressionDrift(DriftField):
    """Gaussian-kernel locally weighted vector regression of target on input.

    A deterministic, parameter-light stand-in for a trained drift estimator:
    evaluation returns the kernel-weighted mean target.  log h is not defined
    for this field and is reported as nan.  Optionally carries the generating
    prior's atoms so the samplers can apply arrival stopping.
    """

    def __init__(self, inputs: np.ndarray, targets: np.ndarray, bandwidth: float,
                 atoms: np.ndarray | None = None, snap_radius: float = 0.0):
        if bandwidth <= 0:
            raise InvalidParameterError(f"bandwidth: must be > 0, got {bandwidth}")
        if inputs.shape[0] < 1:
            raise NoKeptPairsError("need at least one kept pair to fit")
        self._inputs = np.ascontiguousarray(inputs, dtype=np.float64)
        self._targets = np.ascontiguousarray(targets, dtype=np.float64)
        self.bandwidth = float(bandwidth)
        self.dim = inputs.shape[1]
        self._atoms = None if atoms is None else np.ascontiguousarray(atoms, dtype=np.float64)
        self.snap_radius = float(snap_radius)

    @property
    def atoms(self) -> np.ndarray | None:
        return self._atoms

    @property
    def n_points(self) -> int:
        return self._inputs.shape[0]

    def evaluate_batch(self, points, snap_action: str = "raise") -> BatchEval:
        points = _check_points(points, self.dim)
        m = points.shape[0]
        logw = np.empty((m, self.n_points))
        h2 = 2.0 * self.bandwidth**2
        # chunk the (m, n_points) kernel matrix to bound memory
        rows = max(1, (1 << 22) // max(1, self.n_points))
        drift = np.empty((m, self.dim))
        for lo in range(0, m, rows):
            hi = min(m, lo + rows)
            diff = points[lo:hi, None, :] - self._inputs[None, :, :]
            d2 = np.einsum("mnd,mnd->mn", diff, diff)
            w = softmax_rows(-d2 / h2)
            drift[lo:hi] = w @ self._targets
            logw[lo:hi] = -d2 / h2
        nearest_idx = np.full(m, -1, dtype=np.int64)
        nearest_dist = np.full(m, np.nan)
        if self._atoms is not None:
            diff = self._atoms[None, :, :] - points[:, None, :]
            dist = np.sqrt(np.einsum("mnd,mnd->mn", diff, diff))
            nearest_idx = np.argmin(dist, axis=1)
            nearest_dist = dist[np.arange(m), nearest_idx]
        return BatchEval(
            drift=drift,
            log_h=np.full(m, np.nan),
            weight_argmax=np.full(m, -1, dtype=np.int64),
            nearest_index=nearest_idx,
            nearest_distance=nearest_dist,
        )

    def evaluate(self, y):
        ev = super().evaluate(y)
        ev.nearest_atom_index = None
        return ev


def fit_local_drift(
    pairs: TrainingPairs,
    bandwidth: float,
    *,
    atoms: np.ndarray | None = None,
    snap_radius: float = 0.0,
) -> LocalRegressionDrift:
    """Fit the locally weighted regression baseline on the kept pairs."""
    kept = pairs.keep
    if not kept.any():
        raise NoKeptPairsError("no pairs at or above the truncation radius")
    return LocalRegressionDrift(
        inputs=pairs.inputs[kept],
        targets=pairs.targets[kept],
        bandwidth=bandwidth,
        atoms=atoms,
        snap_radius=snap_radius,
    )


def drift_l2_error_along_paths(
    candidate: DriftField,
    reference: DriftField,
    trajectories: list[Trajectory],
    exclusion_delta: float,
) -> list[float]:
    """Per-trajectory discretised L2(path) norm of (candidate - reference).

    For each trajectory (produced under the reference drift), integrates
    |candidate - reference|^2 along the stored states by the left-endpoint
    rule, skipping states within ``exclusion_delta`` of the reference atoms,
    and returns the square roots.
    """
    if exclusion_delta < 0:
        raise InvalidParameterError(f"exclusion_delta: must be >= 0, got {exclusion_delta}")
    atoms = reference.atoms
    if atoms is None:
        raise InvalidParameterError("reference drift field must expose its atom set")
    out = []
    for traj in trajectories:
        states = traj.states[:-1]
        ds = np.diff(traj.times)
        if states.shape[0] == 0:
            out.append(0.0)
            continue
        diff = atoms[None, :, :] - states[:, None, :]
        dist = np.sqrt(np.einsum("mnd,mnd->mn", diff, diff)).min(axis=1)
        keep = dist > exclusion_delta
        if not keep.any():
            out.append(0.0)
            continue
        ev_c = candidate.evaluate_batch(states[keep], snap_action="nan")
        ev_r = reference.evaluate_batch(states[keep], snap_action="nan")
        delta = ev_c.drift - ev_r.drift
        sq = np.einsum("md,md->m", delta, delta)
        out.append(float(math.sqrt(np.sum(sq * ds[keep]))))
    return out


def save_pairs(pairs: TrainingPairs, path) -> None:
    """Binary export mirroring the atom-cloud format (header + f64 payload + keep bytes)."""
    buf = io.BytesIO()
    buf.write(PAIRS_MAGIC)
    buf.write(struct.pack("<IIQdd", PAIRS_VERSION, pairs.dim, len(pairs), pairs.delta, pairs.sigma))
    buf.write(np.ascontiguousarray(pairs.inputs, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(pairs.targets, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(pairs.radial, dtype="<f8").tobytes())
    buf.write(np.packbits(pairs.keep.astype(np.uint8)).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_pairs(path) -> TrainingPairs:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != PAIRS_MAGIC:
        raise PriorFormatError(f"bad training-pair magic {raw[:4]!r}")
    off = 4
    version, dim, n, delta, sigma = struct.unpack_from("<IIQdd", raw, off)
    if version != PAIRS_VERSION:
        raise VersionMismatchError(f"pairs version {version}, reader supports {PAIRS_VERSION}")
    off += struct.calcsize("<IIQdd")
    need = off + 8 * n * (2 * dim + 1) + (n + 7) // 8
    if len(raw) < need:
        raise PriorFormatError(f"truncated pairs file: wanted {need} bytes, got {len(raw)}")
    inputs = np.frombuffer(raw, dtype="<f8", count=n * dim, offset=off).reshape(n, dim)
    off += 8 * n * dim
    targets = np.frombuffer(raw, dtype="<f8", count=n * dim, offset=off).reshape(n, dim)
    off += 8 * n * dim
    radial = np.frombuffer(raw, dtype="<f8", count=n, offset=off)
    off += 8 * n
    keep = np.unpackbits(
        np.frombuffer(raw, dtype=np.uint8, count=(n + 7) // 8, offset=off), count=n
    ).astype(bool)
    return TrainingPairs(
        inputs=inputs.copy(),
        targets=targets.copy(),
        radial=radial.copy(),
        keep=keep,
        delta=delta,
        sigma=sigma,
    )
