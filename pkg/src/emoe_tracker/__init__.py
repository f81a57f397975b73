"""Event-guided single-object tracker with a mixture-of-experts prompt router."""
from .config import RunConfig
from .errors import ConfigError, DataError, EmoeError, NumericError
from .model import EMoETracker, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = ["RunConfig", "EMoETracker", "load_checkpoint", "save_checkpoint",
           "ConfigError", "DataError", "EmoeError", "NumericError"]
