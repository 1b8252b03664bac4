"""Poincaré-ball geometry with curvature -c.

All functions operate on the last axis and broadcast over leading axes, so a
single point is a 1-D array and a batch is an ``(n, d)`` array. Everything is
evaluated in float64.
"""

from __future__ import annotations

import numpy as np

BALL_EPS = 1e-5
CLAMP_EPS = 1e-15
# below this tangent/ball norm the origin maps use their limiting values
MIN_NORM = 1e-15


class InvalidInputError(ValueError):
    """Raised for non-finite coordinates or a non-positive curvature."""


def _check(*arrays: np.ndarray, c: float) -> None:
    if not (np.isfinite(c) and c > 0):
        raise InvalidInputError(f"curvature must be finite and positive, got {c!r}")
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidInputError("non-finite coordinates")


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _sqnorm(x: np.ndarray) -> np.ndarray:
    return np.sum(x * x, axis=-1, keepdims=True)


def max_norm(c: float, ball_eps: float = BALL_EPS) -> float:
    """Largest norm a stored point may have after projection."""
    return (1.0 - ball_eps) / np.sqrt(c)


def project(x, c: float = 1.0, ball_eps: float = BALL_EPS) -> np.ndarray:
    """Pull points with ``||x|| >= (1 - ball_eps)/sqrt(c)`` back onto that radius."""
    x = _as_f64(x)
    _check(x, c=c)
    bound = max_norm(c, ball_eps)
    norm = np.sqrt(_sqnorm(x))
    scale = np.where(norm >= bound, bound / np.maximum(norm, MIN_NORM), 1.0)
    return x * scale


def _mobius_add_raw(x: np.ndarray, y: np.ndarray, c: float) -> np.ndarray:
    xy = np.sum(x * y, axis=-1, keepdims=True)
    x2 = _sqnorm(x)
    y2 = _sqnorm(y)
    num = (1.0 + 2.0 * c * xy + c * y2) * x + (1.0 - c * x2) * y
    den = 1.0 + 2.0 * c * xy + c * c * x2 * y2
    return num / den


def mobius_add(x, y, c: float = 1.0) -> np.ndarray:
    """Möbius addition ``x ⊕_c y``; the result is projected back into the ball."""
    x, y = _as_f64(x), _as_f64(y)
    _check(x, y, c=c)
    return project(_mobius_add_raw(x, y, c), c)


def dist(x, y, c: float = 1.0) -> np.ndarray | float:
    """Geodesic distance ``(2/sqrt(c)) artanh(sqrt(c) ||(-x) ⊕_c y||)``.

    The artanh argument is clamped to ``1 - CLAMP_EPS``. Returns a float for
    1-D inputs and an array of shape ``broadcast(x, y).shape[:-1]`` otherwise.
    """
    x, y = _as_f64(x), _as_f64(y)
    _check(x, y, c=c)
    sc = np.sqrt(c)
    w = np.sqrt(_sqnorm(_mobius_add_raw(-x, y, c)))[..., 0]
    arg = np.minimum(sc * w, 1.0 - CLAMP_EPS)
    out = 2.0 / sc * np.arctanh(arg)
    return float(out) if out.ndim == 0 else out


def log0(x, c: float = 1.0) -> np.ndarray:
    """Logarithmic map at the origin; ``log0(0) = 0``."""
    x = _as_f64(x)
    _check(x, c=c)
    sc = np.sqrt(c)
    norm = np.sqrt(_sqnorm(x))
    safe = np.maximum(norm, MIN_NORM)
    arg = np.minimum(sc * safe, 1.0 - CLAMP_EPS)
    factor = np.where(norm > MIN_NORM, 2.0 / sc * np.arctanh(arg) / safe, 2.0)
    return factor * x


def exp0(v, c: float = 1.0) -> np.ndarray:
    """Exponential map at the origin; ``exp0(0) = 0`` and the image lies inside the ball."""
    v = _as_f64(v)
    _check(v, c=c)
    sc = np.sqrt(c)
    norm = np.sqrt(_sqnorm(v))
    safe = np.maximum(norm, MIN_NORM)
    factor = np.where(norm > MIN_NORM, np.tanh(sc * safe / 2.0) / (sc * safe), 0.5)
    out = factor * v
    # tanh saturates to exactly 1.0 for huge norms
    return project(out, c, ball_eps=CLAMP_EPS) if np.any(norm * sc > 30) else out


def riemannian_rescale(g, x, c: float = 1.0) -> np.ndarray:
    """Convert a Euclidean gradient at ``x`` to the Riemannian one, ``((1 - c||x||²)²/4) g``."""
    g, x = _as_f64(g), _as_f64(x)
    _check(g, x, c=c)
    return ((1.0 - c * _sqnorm(x)) ** 2 / 4.0) * g
