"""Joint atom reconstruction and scan-distortion estimation for raster-scanned
image series.

Modules: ``noise`` (detector model and dissimilarities), ``density`` (Gaussian
bump model), ``scan`` (raster geometry and containers), ``synth`` (synthetic
data), ``deconv`` (convex atom identification), ``energy`` (multi-frame
objective), ``solve`` (trust-region and BFGS), ``pipeline`` (staged
reconstruction and precision) and ``cli``.
"""
__version__ = "0.1.0"

from .kernels import BACKEND

__all__ = ["BACKEND", "__version__"]
