"""Kernel backend selection.

The compiled ``_core`` extension is used when it imports; otherwise the
numpy implementation in ``_pycore``. Set ``QSNN_BACKEND=python`` to force
the fallback, or call :func:`use` at runtime (tests and benchmarks do).
"""
import os

from . import _pycore

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

_BACKENDS = {"python": _pycore}
if _core is not None:
    _BACKENDS["cython"] = _core

_active = _pycore
if _core is not None and os.environ.get("QSNN_BACKEND", "").lower() != "python":
    _active = _core


def available() -> list[str]:
    return sorted(_BACKENDS)


def get():
    return _active


def name() -> str:
    return _active.NAME


def use(backend: str):
    """Switch the active backend, returning the previous one's name."""
    global _active
    if backend not in _BACKENDS:
        raise ValueError(f"backend {backend!r} not available; have {available()}")
    previous = _active.NAME
    _active = _BACKENDS[backend]
    return previous
