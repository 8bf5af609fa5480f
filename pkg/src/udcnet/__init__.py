"""Blind under-display-camera image restoration in pure numpy.

Submodules:

- ``tensor``   reverse-mode autograd over numpy arrays
- ``blocks``   CoordConv, dense residual module, CBAM, inverted residual
- ``models``   DRM-UDCNet (optional attention branch) and LUDCNet
- ``losses``   L1 + SSIM + gradient objective, PSNR/SSIM metrics
- ``data``     tone mapping, PSF degradation, patches, PNM I/O, manifests
- ``weights``  binary weight files
- ``train``    Adam + reduce-on-plateau training loop
- ``analyze``  parameter/FLOPs cost model and latency benchmark
- ``cli``      the ``udcnet`` command
"""

from .models import Model, ModelSpec, build_model
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Model", "ModelSpec", "Tensor", "build_model", "__version__"]
