"""
alevar: variance estimation and Monte Carlo verification for asymptotically linear estimators.
"""

__all__ = [
    "__version__",
    "CALIBRATION_SCHEMA_VERSION",
]

__version__ = "0.3.0"
CALIBRATION_SCHEMA_VERSION = 1
