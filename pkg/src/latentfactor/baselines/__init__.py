"""Reference forecasters: rolling probabilistic PCA and per-stock GARCH."""

from .garch import GarchFitError, SkewTGARCH
from .ppca import PPCA, ppca_fit, rolling_ppca

__all__ = ["GarchFitError", "PPCA", "SkewTGARCH", "ppca_fit", "rolling_ppca"]
