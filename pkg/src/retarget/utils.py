"""
Module with useful functions and others.
"""
import contextlib
import functools
import hashlib
import inspect
import logging
import math
import os

import numpy as np
import torch

from retarget.core import ArgumentError
from retarget.core import CheckpointError

logger = logging.getLogger(__name__)


def isinrange(value, bounds):
    """Check if the value lies within the bounds.

    Parameters
    ----------
    value : float
        Value to check.
    bounds : tuple of (float or None, float or None)
        Inclusive lower and upper bound, None for an open side.

    Returns
    -------
    bool
        True if value is a finite number within the bounds.
    """
    low, high = bounds
    if not math.isfinite(value):
        return False
    if low is not None and value < low:
        return False
    if high is not None and value > high:
        return False
    return True


def checkranges(f, ranges, args, kwargs):
    """Check all ranged parameters of the function.

    Parameters
    ----------
    f : callable
        Function parameters of which should be checked.
    ranges : dict[str, tuple]
        Dictionary of name - bounds pairs.
    args : list of Any
        List of the positional parameters values.
    kwargs : dict[str, Any]
        Dictionary of the parameter name - value pairs.

    Raises
    ------
    ArgumentError
        If a parameter is outside of its bounds.
    """
    call_args = inspect.getcallargs(f, *args, **kwargs)
    for p, bounds in ranges.items():
        v = call_args.get(p)
        if v is None:
            continue
        if not isinrange(float(v), bounds):
            raise ArgumentError(
                "{}() argument {}={!r} is outside of [{}, {}]".format(
                    f.__name__, p, v,
                    "-inf" if bounds[0] is None else bounds[0],
                    "inf" if bounds[1] is None else bounds[1]))


def rangecheck(**kwargs):
    """
    Convenience function to check the numeric parameters
    of the function against inclusive bounds.

    Intended to use as a function or method decorator.

    Parameters
    ----------
    **kwargs
        Name - bounds pairs, where name is the name of the parameter
        and bounds is a ``(low, high)`` tuple, None meaning unbounded.

    Returns
    -------
    callable
        Wrapper for the function.

    Examples
    --------
    >>> @rangecheck(p=(0, 1))
    ... def half(p):
    ...     return p / 2
    >>> half(0.5)
    0.25
    """
    ranges = kwargs

    def decorator(f):
        @functools.wraps(f)
        def wrapper(*args, **kwargs):
            checkranges(f, ranges, args, kwargs)
            return f(*args, **kwargs)
        return wrapper
    return decorator


def isclose(a, b, atol=1e-6):
    """
    Superset of `numpy.isclose` with rtol == 0 that
    also accepts torch tensors.

    Parameters
    ----------
    a, b : array_like or torch.Tensor
        Input arrays to compare.
    atol : float, optional
        The absolute tolerance parameter.
        Default is 1e-6.

    Returns
    -------
    bool
        True if all elements are equal within the tolerance.
    """
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    if isinstance(b, torch.Tensor):
        b = b.detach().cpu().numpy()
    return bool(np.all(np.isclose(a, b, atol=atol, rtol=0)))


def tensor_digest(named_tensors):
    """SHA-256 over names, dtypes, shapes and raw bytes of the tensors.

    Parameters
    ----------
    named_tensors : Mapping[str, torch.Tensor]
        Ordered collection of tensors.

    Returns
    -------
    str
        Hex digest; equal iff all tensors are bit-identical.
    """
    h = hashlib.sha256()
    for name, t in named_tensors.items():
        t = t.detach().cpu().contiguous()
        h.update(name.encode("utf8"))
        h.update(str(t.dtype).encode("utf8"))
        h.update(str(tuple(t.shape)).encode("utf8"))
        h.update(t.numpy().tobytes())
    return h.hexdigest()


@contextlib.contextmanager
def run_lock(directory):
    """Hold an exclusive lock file in a run directory.

    Raises
    ------
    CheckpointError
        If another command already owns the directory.
    """
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "run.lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CheckpointError("run directory {} is locked by {}".format(directory, path))
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield path
    finally:
        os.remove(path)
