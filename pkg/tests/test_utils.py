from collections import OrderedDict

import numpy as np
import pytest
import torch

from retarget.core import ArgumentError
from retarget.core import CheckpointError
from retarget.core import NumericError
from retarget.core import seed_everything
from retarget.utils import isclose
from retarget.utils import rangecheck
from retarget.utils import run_lock
from retarget.utils import tensor_digest


def test_rangecheck_full_kwargs():

    @rangecheck(b=(0, 1), c=(None, 10))
    def func1(a, b, c=3):
        return a * b * c

    assert func1(5, 0.5) == 7.5
    assert func1(5, b=1, c=-4) == -20
    with pytest.raises(ArgumentError):
        func1(5, 1.5)
    with pytest.raises(ArgumentError):
        func1(5, 0.5, c=11)
    with pytest.raises(ArgumentError):
        func1(5, float("nan"))


def test_rangecheck_skips_none():

    @rangecheck(p=(0, None))
    def func2(p=None):
        return p

    assert func2() is None
    assert func2.__name__ == "func2"


def test_isclose():
    a = torch.tensor([1.0, 2.0])
    b = np.array([1.0, 2.0000001])
    assert isclose(a, b)
    assert not isclose(a, b + 1e-3)
    assert isclose(5, 5.0000001)


def test_tensor_digest():
    t = OrderedDict(w=torch.arange(6.0).reshape(2, 3))
    h = tensor_digest(t)
    assert h == tensor_digest(OrderedDict(w=torch.arange(6.0).reshape(2, 3)))
    assert h != tensor_digest(OrderedDict(w=torch.arange(6.0).reshape(3, 2)))
    assert h != tensor_digest(OrderedDict(v=torch.arange(6.0).reshape(2, 3)))
    t["w"][0, 0] = -0.0
    assert h != tensor_digest(t)


def test_run_lock(tmp_path):
    with run_lock(str(tmp_path)) as path:
        with pytest.raises(CheckpointError):
            with run_lock(str(tmp_path)):
                pass
    assert not (tmp_path / "run.lock").exists()
    assert path.endswith("run.lock")


def test_seed_everything():
    a = torch.rand(3, generator=seed_everything(11))
    b = torch.rand(3, generator=seed_everything(11))
    assert torch.equal(a, b)


def test_numeric_error_diagnostics():
    err = NumericError("non-finite loss", {"step": 3})
    assert err.diagnostics == {"step": 3}
    assert "step=3" in str(err)
