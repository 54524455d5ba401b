"""Principal components of derivatives of multivariate functional data.

Three estimators share one interface (:func:`dmfpca.pipelines.fit`):
derivative MFPCA from differentiated covariance surfaces, the derivative of
the multivariate Karhunen-Loeve expansion, and per-curve spline
derivatives followed by MFPCA.
"""

__version__ = "0.1.0"

from dmfpca.fdata import DenseCurves, FunctionalSample, Grid, make_uniform_grid  # noqa: E402
from dmfpca.pipelines import FitConfig, FitResult, fit  # noqa: E402

__all__ = ["DenseCurves", "FitConfig", "FitResult", "FunctionalSample", "Grid", "fit", "make_uniform_grid",
           "__version__"]
