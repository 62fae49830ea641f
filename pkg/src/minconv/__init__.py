"""MinConvNets: convolutional networks whose convolution products are
replaced by a signed-minimum operator."""

from minconv._backend import USE_NUMBA
from minconv.errors import MinConvError

__version__ = "0.1.0"

__all__ = ["USE_NUMBA", "MinConvError", "__version__"]
