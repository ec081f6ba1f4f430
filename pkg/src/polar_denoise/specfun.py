"""Log-domain modified Bessel functions of the second kind, K_nu.

Everything downstream (resolvent kernel, drift fields, score targets) reduces
to two quantities: log K_nu(z) and the ratio K_{nu+1}(z)/K_nu(z), for
half-integral orders nu = (d-2)/2 up to ~10^4 and arguments over many decades.
Both are computed by a stable upward ratio recurrence in the log domain; see
``_purepy`` for the algorithm.

Accuracy is only promised inside an explicit domain (``ORDER_MAX``,
``ARG_MIN``, ``ARG_MAX``); outside it the operations raise
:class:`~polar_denoise.errors.SpecFunRangeError` instead of degrading.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import _backend
from .errors import SpecFunDomainError, SpecFunRangeError

#: Supported accuracy domain.  log K is accurate to <= 1e-10 relative and the
#: ratio to <= 1e-8 relative inside it (empirically ~1e-15; see tests).
ORDER_MAX = 1.0e4
ARG_MIN = 1.0e-8
ARG_MAX = 1.0e5


@dataclass(frozen=True)
class BesselEval:
    """One joint evaluation: order, argument, log K and the upward ratio.

    Invariants (for nu >= 0, z > 0): ``ratio_up > 1``, ``ratio_up >= 2*nu/z``,
    and ``log_k`` is finite on the supported domain.
    """

    order: float
    argument: float
    log_k: float
    ratio_up: float


def _validate(order: float, argument: float) -> tuple[float, float]:
    order = float(order)
    argument = float(argument)
    if not math.isfinite(argument) or argument <= 0.0:
        raise SpecFunDomainError(f"argument must be positive and finite, got z={argument!r}")
    if not math.isfinite(order) or order < 0.0:
        raise SpecFunDomainError(f"order must be nonnegative and finite, got nu={order!r}")
    twice = 2.0 * order
    if twice != round(twice):
        raise SpecFunDomainError(
            f"order must be an integer or half-integer, got nu={order!r}"
        )
    if order > ORDER_MAX or argument < ARG_MIN or argument > ARG_MAX:
        raise SpecFunRangeError(
            f"(nu={order!r}, z={argument!r}) outside the supported accuracy domain "
            f"nu <= {ORDER_MAX:g}, {ARG_MIN:g} <= z <= {ARG_MAX:g}"
        )
    return order, argument


def log_bessel_k(order: float, argument: float) -> float:
    """log K_nu(z) for half-integral nu in [0, 1e4], z in [1e-8, 1e5]."""
    order, argument = _validate(order, argument)
    logk, _ = _backend.log_k_and_ratio(order, argument)
    if not math.isfinite(logk):
        raise SpecFunRangeError(
            f"log K overflowed internal scaling at (nu={order!r}, z={argument!r})"
        )
    return logk


def bessel_k_ratio(order: float, argument: float) -> float:
    """K_{nu+1}(z) / K_nu(z), computed by ratio recurrence without forming either K."""
    order, argument = _validate(order, argument)
    _, ratio = _backend.log_k_and_ratio(order, argument)
    if not math.isfinite(ratio):
        raise SpecFunRangeError(
            f"Bessel ratio overflowed at (nu={order!r}, z={argument!r})"
        )
    return ratio


def bessel_eval(order: float, argument: float) -> BesselEval:
    """Joint (log K, ratio) evaluation sharing one recurrence pass."""
    order, argument = _validate(order, argument)
    logk, ratio = _backend.log_k_and_ratio(order, argument)
    if not (math.isfinite(logk) and math.isfinite(ratio)):
        raise SpecFunRangeError(
            f"Bessel evaluation overflowed at (nu={order!r}, z={argument!r})"
        )
    return BesselEval(order=order, argument=argument, log_k=logk, ratio_up=ratio)


def log_bessel_k_large_order(order: float, argument: float) -> float:
    """Leading-order log K_nu(z) for large order, z = o(nu).

    Evaluates log of sqrt(pi/(2 nu)) (2 nu / e)^nu z^(-nu).  Diagnostic only:
    no accuracy promise outside the z = o(nu) regime (e.g. nu=50, z=40 is out
    of regime), and it is never substituted for :func:`log_bessel_k`.
    """
    order = float(order)
    argument = float(argument)
    if not math.isfinite(argument) or argument <= 0.0:
        raise SpecFunDomainError(f"argument must be positive and finite, got z={argument!r}")
    if not math.isfinite(order) or order < 10.0:
        raise SpecFunDomainError(
            f"large-order form requires nu >= 10, got nu={order!r}"
        )
    return (
        0.5 * math.log(math.pi / (2.0 * order))
        + order * (math.log(2.0 * order) - 1.0 - math.log(argument))
    )
