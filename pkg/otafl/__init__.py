"""This package contains a simulator and analysis toolkit for biased
over-the-air federated learning under heterogeneous average path loss.
"""

__version__ = "1.0.0"


class OtaflException(Exception):
    """Base class of all domain errors raised by the package."""
