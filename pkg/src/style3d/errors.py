"""Exception types shared across the package.

Anything raised on bad user input derives from ConfigError so the CLI can
map it to a distinct exit code; backend weight-loading problems get their
own class for the same reason.
"""


class Style3DError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(Style3DError):
    """Invalid configuration or CLI input (exit code 2)."""


class BackendError(Style3DError):
    """Diffusion backend could not be constructed or loaded (exit code 3)."""


class EvalError(Style3DError):
    """Evaluation harness could not run (bad manifest, missing assets)."""


class TrainingDiverged(Style3DError):
    """Optimization produced a non-finite loss."""
