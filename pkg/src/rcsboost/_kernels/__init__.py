"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback is used. :func:`use_backend` switches explicitly (tests and the
benchmark run both).
"""
from __future__ import annotations

import contextlib
from types import ModuleType

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_active: ModuleType = _ckernels if _ckernels is not None else _pykernels


def available() -> list[str]:
    return ["python"] + (["cython"] if _ckernels is not None else [])


def backend() -> ModuleType:
    return _active


def backend_name() -> str:
    return _active.NAME


def use_backend(name: str) -> None:
    global _active
    if name == "python":
        _active = _pykernels
    elif name == "cython":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        _active = _ckernels
    else:
        raise ValueError(f"unknown backend {name!r}")


@contextlib.contextmanager
def backend_scope(name: str):
    prev = _active.NAME
    use_backend(name)
    try:
        yield
    finally:
        use_backend(prev)
