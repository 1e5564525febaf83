"""Hot kernels for the latent-space sampler.

The compiled ``_core`` extension is used when it was built; otherwise the numpy
implementation in ``_fallback`` is selected.  Set ``VAEGUARD_PURE_PYTHON=1`` to
force the fallback.
"""

import os

from . import _fallback

try:
    if os.environ.get("VAEGUARD_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python kernels requested")
    from . import _core
except ImportError:
    _core = None

BACKEND = "compiled" if _core is not None else "python"
_impl = _core if _core is not None else _fallback

decoder_potential = _impl.decoder_potential
leapfrog = _impl.leapfrog


def get_backend(name=None):
    """Return the kernel module for ``name`` ("compiled", "python" or None for the default)."""
    if name is None:
        return _impl
    if name == "python":
        return _fallback
    if name == "compiled":
        if _core is None:
            raise ImportError("compiled kernels are not available; build the package extension")
        return _core
    raise ValueError(f"unknown kernel backend {name!r}")
