"""Backend selection: compiled extension core with pure-Python fallback.

The hot kernels (Bessel chains, drift evaluation, the per-trajectory
simulation loop) exist twice: in the Cython extension ``_core`` and in the
numpy module ``_purepy``.  The compiled core is used when importable; set
``POLAR_DENOISE_BACKEND=python`` or ``=compiled`` to force a choice.

The two backends implement identical algorithms and consume identical random
streams, but floating-point results may differ at the last few ulps (loop
versus vectorized arithmetic), so simulated paths agree statistically rather
than bitwise.  Within a backend, results are fully deterministic.
"""

from __future__ import annotations

import os

from . import _purepy

_forced = os.environ.get("POLAR_DENOISE_BACKEND")

_compiled = None
if _forced != "python":
    try:
        from . import _core as _compiled  # type: ignore[no-redef]
    except ImportError:
        _compiled = None

if _forced == "compiled" and _compiled is None:
    raise ImportError(
        "POLAR_DENOISE_BACKEND=compiled but the extension module "
        "polar_denoise._core is not importable; rebuild with "
        "`pip install -e . --no-build-isolation` or unset the variable"
    )

_impl = _compiled if _compiled is not None else _purepy

BACKEND_NAME: str = _impl.BACKEND_NAME
HAVE_COMPILED: bool = _compiled is not None

log_k_and_ratio = _impl.log_k_and_ratio
drift_eval = _impl.drift_eval
reverse_sim = _impl.reverse_sim

# The elementwise chain is always the vectorized numpy one unless the
# compiled core provides its own.
log_k_and_ratio_many = getattr(_impl, "log_k_and_ratio_many", _purepy.log_k_and_ratio_many)

STOP_THRESHOLD = _purepy.STOP_THRESHOLD
STOP_STEP_CAP = _purepy.STOP_STEP_CAP
STOP_SINGULARITY = _purepy.STOP_SINGULARITY


def active_backend() -> str:
    """Name of the numerical core in use: ``"compiled"`` or ``"python"``."""
    return BACKEND_NAME


def get_backend(name: str):
    """Return a specific backend module by name (for parity tests and benchmarks)."""
    if name == "python":
        return _purepy
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled backend not available")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")
