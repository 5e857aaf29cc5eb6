import numpy as np


def central_diff_grad(fn, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Coordinate-wise central finite differences of a scalar function."""
    g = np.zeros(theta.size)
    for k in range(theta.size):
        up = theta.copy()
        up[k] += h
        dn = theta.copy()
        dn[k] -= h
        g[k] = (fn(up) - fn(dn)) / (2.0 * h)
    return g


def grads_agree(analytic: np.ndarray, numeric: np.ndarray,
                rel: float = 1e-6, abs_floor: float = 1e-9) -> bool:
    """Per-coordinate |a - f| <= rel * max(|a|, |f|) + abs_floor.

    The absolute floor keeps exactly-zero coordinates (untouched segments)
    from tripping on finite-difference round-off noise.
    """
    gap = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return bool(np.all(gap <= rel * scale + abs_floor))


def directional_diff(fn, theta: np.ndarray, direction: np.ndarray,
                     h: float = 1e-5) -> float:
    return (fn(theta + h * direction) - fn(theta - h * direction)) / (2.0 * h)
