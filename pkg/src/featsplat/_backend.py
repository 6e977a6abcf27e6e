"""Kernel backend selection.

Set ``FEATSPLAT_DISABLE_NUMBA=1`` to force the pure-numpy kernels (also used
automatically when numba is not importable).
"""
import contextlib
import os

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

_state = {"name": "numpy" if os.environ.get("FEATSPLAT_DISABLE_NUMBA", "") not in ("", "0") or not HAVE_NUMBA
          else "numba"}


def current() -> str:
    return _state["name"]


def set_backend(name: str) -> None:
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _state["name"] = name


@contextlib.contextmanager
def backend(name: str):
    prev = current()
    set_backend(name)
    try:
        yield
    finally:
        _state["name"] = prev
