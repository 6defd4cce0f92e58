"""
Central finite differences for checking hand-written gradients.
"""
import numpy as np


def central_difference(func, x, eps=1e-5):
    """
    Centered-difference gradient of a scalar function at x.

    x is perturbed in place one entry at a time and restored afterwards, so
    func may close over the array.
    """
    x = np.asarray(x)
    grad = np.zeros(x.shape)
    flat = x.reshape(-1)
    for j in range(flat.size):
        saved = flat[j]
        flat[j] = saved + eps
        fplus = func()
        flat[j] = saved - eps
        fminus = func()
        flat[j] = saved
        grad.reshape(-1)[j] = (fplus - fminus) / (2 * eps)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    """||a - n|| / max(||a||, ||n||, floor) over the whole array"""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)
