"""Kernel backend selection: compiled extension with a pure-Python fallback.

The compiled module (``dpmf._ckernels``) is built at install time; when it is
missing (e.g. running from a source tree without building) the numpy fallback
is selected automatically. Override per call site with ``backend=`` or
globally with the DPMF_BACKEND environment variable ("compiled"/"python").
"""

from __future__ import annotations

import os

_forced: str | None = None


def force(name: str | None) -> None:
    """Process-wide override, mainly for tests and the benchmark harness."""
    global _forced
    if name not in (None, "auto", "compiled", "python"):
        raise ValueError(f"unknown backend {name!r}")
    _forced = None if name == "auto" else name


def compiled_available() -> bool:
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        return False
    return True


def get(name: str | None = None):
    """Resolve a kernel module; precedence: arg > force() > env > auto."""
    name = name or _forced or os.environ.get("DPMF_BACKEND") or "auto"
    if name == "auto":
        name = "compiled" if compiled_available() else "python"
    if name == "compiled":
        from . import _ckernels as mod
    elif name == "python":
        from . import _pykernels as mod
    else:
        raise ValueError(f"unknown backend {name!r}")
    return mod


def active_name(name: str | None = None) -> str:
    return get(name).BACKEND_NAME
