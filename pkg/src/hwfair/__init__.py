"""Hardware-induced fairness disparities in small classifiers, measured and mitigated.

Models are trained under virtual hardware profiles (deterministic
floating-point reduction plans); per-group diagnostics then compare the
resulting parameters in a shared binary64 reference evaluation mode.
"""

from . import data, fairlab, models, numkit, train, vhw
from .errors import HwFairError

__version__ = "0.1.0"

__all__ = ["HwFairError", "data", "fairlab", "models", "numkit", "train", "vhw", "__version__"]
