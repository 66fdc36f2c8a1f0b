"""Transfer-neuron detection and deactivation toolkit for gated-MLP decoders."""

from xfrn.errors import ConfigError, DataError, ModelError, XfrnError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "ModelError", "XfrnError", "__version__"]
