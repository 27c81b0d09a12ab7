"""
Module with core functionality of this package.

Holds what every other module shares: the exception hierarchy, numeric
constants, logging setup and seeding.
"""
import logging
import random

import numpy as np
import torch

LOG_EPS = 1e-7
"""Floor applied to every argument of a logarithm in the losses."""

IMAGE_RANGE = (0.0, 1.0)
"""Value range of every image handled by the package."""

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class RetargetError(Exception):
    """Base class of all errors raised by this package."""


class ArgumentError(RetargetError, ValueError):
    """An argument is outside of its documented domain."""


class ConfigurationError(RetargetError, ValueError):
    """Shapes or architecture settings do not fit together."""


class ConfigParseError(ConfigurationError):
    """A configuration file contains an invalid entry.

    Parameters
    ----------
    key : str
        Name of the offending key.
    message : str
        What is wrong with it.
    """

    def __init__(self, key, message):
        super().__init__("{}: {}".format(key, message))
        self.key = key


class NumericError(RetargetError, ArithmeticError):
    """A parameter or a loss became non-finite.

    Parameters
    ----------
    message : str
        Description of the failure.
    diagnostics : dict, optional
        Values that help to locate the failure (losses, step, ...).
    """

    def __init__(self, message, diagnostics=None):
        self.diagnostics = dict(diagnostics or {})
        if self.diagnostics:
            details = ", ".join("{}={}".format(k, v) for k, v in self.diagnostics.items())
            message = "{} ({})".format(message, details)
        super().__init__(message)


class CheckpointError(RetargetError, OSError):
    """A checkpoint could not be stored, found or verified."""


def configure_logging(level=logging.INFO):
    """Install a single stream handler on the package logger.

    Only the command line app calls this; library code just logs.
    """
    root = logging.getLogger("retarget")
    root.setLevel(level)
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
    return root


def progress_disabled(logger):
    """True when progress bars would only add noise to the log."""
    return not logger.isEnabledFor(logging.INFO)


def seed_everything(seed, deterministic=False):
    """Seed python, numpy and torch.

    Parameters
    ----------
    seed : int
        Seed shared by all generators.
    deterministic : bool, optional
        If True, torch is switched to deterministic algorithms.

    Returns
    -------
    torch.Generator
        Generator seeded with `seed` for noise and sampling.
    """
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False
    return torch.Generator().manual_seed(seed)
