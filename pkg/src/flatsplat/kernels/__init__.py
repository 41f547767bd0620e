"""Hot-kernel backend selection.

The compiled Cython core is preferred; the numpy reference backend is the
fallback when the extension was not built. Selection happens at import and can
be forced with FLATSPLAT_KERNELS=compiled|reference or switched at runtime
(used by the cross-checking tests and the kernel benchmark).
"""

import os
from contextlib import contextmanager

from . import reference

try:
    from . import _core as compiled
except ImportError:  # extension not built; numpy fallback only
    compiled = None

_forced = os.environ.get("FLATSPLAT_KERNELS", "")
if _forced == "reference":
    _active = reference
elif _forced == "compiled":
    if compiled is None:
        raise ImportError("FLATSPLAT_KERNELS=compiled but the extension is not built")
    _active = compiled
elif _forced:
    raise ImportError(f"unknown FLATSPLAT_KERNELS value: {_forced!r}")
else:
    _active = compiled if compiled is not None else reference

ALPHA_CLAMP = reference.ALPHA_CLAMP


def available_backends():
    return ("compiled", "reference") if compiled is not None else ("reference",)


def backend_name() -> str:
    return _active.name


def set_backend(name: str):
    global _active
    if name == "reference":
        _active = reference
    elif name == "compiled":
        if compiled is None:
            raise ValueError("compiled kernel backend is not available")
        _active = compiled
    else:
        raise ValueError(f"unknown backend {name!r}")


@contextmanager
def use_backend(name: str):
    previous = backend_name()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def composite_forward(*args, **kwargs):
    return _active.composite_forward(*args, **kwargs)


def composite_backward(*args, **kwargs):
    return _active.composite_backward(*args, **kwargs)


def sampler_chain(*args, **kwargs):
    return _active.sampler_chain(*args, **kwargs)
