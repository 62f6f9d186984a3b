"""Softplus smoothing of ``max(0, s)`` with overflow-safe branches."""

import numpy as np

# beyond |beta*s| > _CUT the exponential tail is below double precision
_CUT = 36.0


def smooth_max(s, beta: float):
    """``log(1 + exp(beta*s)) / beta``; error against ``max(0, s)`` is at most ``log(2)/beta``."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    z = beta * np.asarray(s, dtype=float)
    out = np.where(z > _CUT, z, np.log1p(np.exp(np.minimum(z, _CUT))))
    out = np.where(z < -_CUT, np.exp(np.clip(z, -745.0, -_CUT)), out)
    out = out / beta
    return out if out.ndim else float(out)


def smooth_max_grad(s, beta: float):
    """Derivative of :func:`smooth_max`: the logistic function ``1/(1+exp(-beta*s))``."""
    z = beta * np.asarray(s, dtype=float)
    out = 0.5 * (1.0 + np.tanh(0.5 * z))
    return out if out.ndim else float(out)


def smoothing_width(beta: float) -> float:
    """Distance past which softplus equals ``max(0, s)`` to double precision."""
    return _CUT / beta
