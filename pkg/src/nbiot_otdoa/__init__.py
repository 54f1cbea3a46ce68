"""NB-IoT OTDOA link-level simulator with a two-stage EM-SIC ToA detector.

Modules, in signal order: ``prs`` (reference signal synthesis), ``airlink``
(multi-cell channel), ``correlate`` (per-symbol correlation and the
conventional detector), ``emsic`` (stage 1), ``refine`` (stage 2),
``locate`` (TDOA multilateration and CRLB), ``scenario`` and ``harness``.
"""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402

__all__ = ["BACKEND", "__version__"]
