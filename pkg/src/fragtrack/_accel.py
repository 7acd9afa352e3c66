"""Backend selection for the hot numeric kernels.

Set ``FRAGTRACK_NUMBA=0`` to force the pure-numpy fallback (useful when numba is
missing or to cross-check results). Both backends produce identical outputs.
"""
import os

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _env_enabled() -> bool:
    return os.environ.get("FRAGTRACK_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


DEFAULT_BACKEND = "numba" if (HAVE_NUMBA and _env_enabled()) else "numpy"


def resolve_backend(backend=None) -> str:
    if backend is None:
        return DEFAULT_BACKEND
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    return backend


def njit(*args, **kwargs):
    """``numba.njit`` with on-disk caching, or a no-op decorator without numba."""
    kwargs.setdefault("cache", True)
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda f: f
