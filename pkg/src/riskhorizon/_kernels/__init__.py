"""Hot-kernel backend selection.

The compiled ``_core`` extension is used when it imports; otherwise the numpy
fallback is used. Set ``RISKHORIZON_NO_EXT=1`` to force the fallback.
"""

from __future__ import annotations

import importlib
import os

from . import _fallback

_NAMES = ("pair_dist_grad", "edge_loss_grad", "mask_loss_grad", "lagged_pair_keys")


def load_backend(name: str | None = None):
    """Return the kernel module for ``"compiled"``, ``"python"`` or the default."""
    if name == "python":
        return _fallback
    if name == "compiled":
        return importlib.import_module("riskhorizon._kernels._core")
    if name is not None:
        raise ValueError(f"unknown kernel backend {name!r}")
    if os.environ.get("RISKHORIZON_NO_EXT") == "1":
        return _fallback
    try:
        return importlib.import_module("riskhorizon._kernels._core")
    except ImportError:
        return _fallback


def available_backends() -> list[str]:
    names = ["python"]
    try:
        importlib.import_module("riskhorizon._kernels._core")
    except ImportError:
        return names
    return ["compiled"] + names


_backend = load_backend()
BACKEND = _backend.NAME

pair_dist_grad = _backend.pair_dist_grad
edge_loss_grad = _backend.edge_loss_grad
mask_loss_grad = _backend.mask_loss_grad
lagged_pair_keys = _backend.lagged_pair_keys
