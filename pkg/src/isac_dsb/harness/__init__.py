from .config import ConfigError, DEFAULTS, load_config
from .pipeline import StageError, cmd_eval, cmd_gen_dataset, cmd_train
from .tensorio import BadMagic, DtypeMismatch, TensorFormatError, Truncated, load_tensor, save_tensor

__all__ = [
    "BadMagic",
    "ConfigError",
    "DEFAULTS",
    "DtypeMismatch",
    "StageError",
    "TensorFormatError",
    "Truncated",
    "cmd_eval",
    "cmd_gen_dataset",
    "cmd_train",
    "load_config",
    "load_tensor",
    "save_tensor",
]
