"""Resolvent (Green) kernel of Brownian motion killed at an independent
exponential time, its log-gradient, and large-dimension surrogates.

With kappa = sqrt(2)/sigma and nu = (d-2)/2,

    log G(x, y) = log_norm - nu*log|x-y| + log K_nu(kappa*|x-y|),
    log_norm    = -(d/2)*log(2*pi) + log(2/sigma^2) + nu*log(kappa).

All quantities are exposed in the log domain only: across an atom cloud in
high dimension the kernel values span hundreds of orders of magnitude, so
consumers combine them via log-sum-exp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _backend, specfun
from .errors import DimensionMismatchError, InvalidParameterError, SingularityError, SpecFunRangeError

#: Default floor on |x - y|: closer pairs raise SingularityError rather than
#: propagating infinities from the kernel singularity.
R_MIN_DEFAULT = 1.0e-12


@dataclass(frozen=True)
class KernelParams:
    """Ambient dimension and noise scale, with the derived order and rate.

    ``order = (dim-2)/2`` exactly and ``kappa = sqrt(2)/sigma``; ``dim >= 3``
    is required (single points are only avoided by Brownian motion from
    dimension three on, which is what makes atom clouds reachable exactly at
    the terminal time).
    """

    dim: int
    sigma: float
    order: float = field(init=False)
    kappa: float = field(init=False)

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 3:
            raise InvalidParameterError(f"dim must be an integer >= 3, got {self.dim!r}")
        if not (math.isfinite(self.sigma) and self.sigma > 0.0):
            raise InvalidParameterError(f"sigma must be positive and finite, got {self.sigma!r}")
        object.__setattr__(self, "dim", int(self.dim))
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "order", (self.dim - 2) / 2.0)
        object.__setattr__(self, "kappa", math.sqrt(2.0) / self.sigma)

    @property
    def log_norm(self) -> float:
        """Constant part of log G (independent of |x - y|)."""
        return (
            -0.5 * self.dim * math.log(2.0 * math.pi)
            + math.log(2.0 / self.sigma**2)
            + self.order * math.log(self.kappa)
        )


def _pair_distance(params: KernelParams, x, y, r_min: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != (params.dim,) or y.shape != (params.dim,):
        raise DimensionMismatchError(
            f"points must have shape ({params.dim},), got {x.shape} and {y.shape}"
        )
    rho = float(np.linalg.norm(x - y))
    if rho < r_min:
        raise SingularityError(f"|x - y| = {rho!r} below the distance floor {r_min!r}")
    return rho


def log_green(params: KernelParams, x, y, *, r_min: float = R_MIN_DEFAULT) -> float:
    """log G(x, y); isotropic, so it depends on (x, y) only through |x - y|."""
    rho = _pair_distance(params, x, y, r_min)
    logk = specfun.log_bessel_k(params.order, params.kappa * rho)
    return params.log_norm - params.order * math.log(rho) + logk


def grad2_log_green(params: KernelParams, x, y, *, r_min: float = R_MIN_DEFAULT) -> np.ndarray:
    """Gradient of log G(x, y) in the second argument.

    Equals -(sqrt(2)/sigma) * (y-x)/|y-x| * K_{nu+1}/K_nu(kappa*|x-y|): a
    vector pointing from y toward x.
    """
    rho = _pair_distance(params, x, y, r_min)
    ratio = specfun.bessel_k_ratio(params.order, params.kappa * rho)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return (params.kappa * ratio / rho) * (x - y)


def log_green_leading_order(params: KernelParams, x, y, *, r_min: float = R_MIN_DEFAULT) -> float:
    """Large-d surrogate for log G; diagnostic only.

    log of (2*pi*nu)^(-1/2) (nu/(pi*e))^nu |x-y|^(2-d) / sigma^2.  Useful from
    roughly d in the hundreds; at small d (say d=10) it visibly disagrees with
    :func:`log_green` and no accuracy is promised.
    """
    rho = _pair_distance(params, x, y, r_min)
    nu = params.order
    return (
        -0.5 * math.log(2.0 * math.pi * nu)
        + nu * (math.log(nu) - math.log(math.pi) - 1.0)
        - 2.0 * nu * math.log(rho)
        - 2.0 * math.log(params.sigma)
    )


def _distances(params: KernelParams, atoms, y, r_min: float) -> np.ndarray:
    atoms = np.asarray(atoms, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if atoms.ndim != 2 or atoms.shape[1] != params.dim or y.shape != (params.dim,):
        raise DimensionMismatchError(
            f"expected atoms (n, {params.dim}) and point ({params.dim},), "
            f"got {atoms.shape} and {y.shape}"
        )
    diff = atoms - y
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    if dist.min(initial=np.inf) < r_min:
        i = int(np.argmin(dist))
        raise SingularityError(
            f"atom {i} at distance {dist[i]!r} below the floor {r_min!r}"
        )
    return dist


def log_green_atoms(params: KernelParams, atoms, y, *, r_min: float = R_MIN_DEFAULT) -> np.ndarray:
    """Vector of log G(x_i, y) over an atom array, one backend chain pass."""
    dist = _distances(params, atoms, y, r_min)
    z = params.kappa * dist
    zmin, zmax = float(z.min()), float(z.max())
    if zmin < specfun.ARG_MIN or zmax > specfun.ARG_MAX:
        bad = zmin if zmin < specfun.ARG_MIN else zmax
        raise SpecFunRangeError(
            f"kernel argument z={bad!r} (nu={params.order!r}) outside the "
            f"supported accuracy domain"
        )
    logk, _ = _backend.log_k_and_ratio_many(params.order, z)
    return params.log_norm - params.order * np.log(dist) + logk


def log_green_leading_order_atoms(
    params: KernelParams, atoms, y, *, r_min: float = R_MIN_DEFAULT
) -> np.ndarray:
    """Vector of leading-order log G over atoms (see log_green_leading_order)."""
    dist = _distances(params, atoms, y, r_min)
    nu = params.order
    const = (
        -0.5 * math.log(2.0 * math.pi * nu)
        + nu * (math.log(nu) - math.log(math.pi) - 1.0)
        - 2.0 * math.log(params.sigma)
    )
    return const - 2.0 * nu * np.log(dist)
