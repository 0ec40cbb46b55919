"""Grayscale image colorization by feature-space optimization.

The engine matches a canvas image's deep-feature statistics to a grayscale
content image (structure) and a color style image (palette/texture), using
L-BFGS over raw pixels with a multiplicatively decaying style weight.

Subpackages/modules:

* :mod:`chromabrush.tensorcore` -- dense float64 tensors and bulk kernels
* :mod:`chromabrush.convnet`    -- conv trunk forward/backward + weight files
* :mod:`chromabrush.styleloss`  -- content/Gram losses with exact gradients
* :mod:`chromabrush.optim`      -- L-BFGS (strong Wolfe) and momentum SGD
* :mod:`chromabrush.colorpipe`  -- image I/O, schedule, run orchestration
* :mod:`chromabrush.cli`        -- command-line front end
* :mod:`chromabrush.service`    -- FastAPI wrapper with background jobs
"""

__version__ = "0.1.0"

from .colorpipe import RunConfig, run_colorization, compare_optimizers  # noqa: F401
from .tensorcore import Tensor  # noqa: F401
