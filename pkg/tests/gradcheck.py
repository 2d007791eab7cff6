"""Central finite differences over model parameters (real and imaginary parts)."""

import numpy as np


def fd_gradient(loss, arr, eps=1e-5):
    """Numerical ``dL/dRe + i dL/dIm`` of ``loss()`` w.r.t. ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr)
    units = (1.0, 1j) if np.iscomplexobj(arr) else (1.0,)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        for u in units:
            arr[idx] = orig + eps * u
            lp = loss()
            arr[idx] = orig - eps * u
            lm = loss()
            arr[idx] = orig
            out[idx] += (lp - lm) / (2 * eps) * u
    return out


def relative_error(analytic, numeric):
    """Largest deviation relative to the largest analytic entry of the group."""
    scale = np.abs(analytic).max()
    diff = np.abs(analytic - numeric).max()
    return diff / scale if scale > 0 else diff


def check_model_gradients(model, x, loss, grads, eps=1e-5):
    """Return ``{name: relative_error}`` for every parameter group and the input.

    ``loss(model, x)`` is the scalar objective and ``grads(model, x)`` its
    analytic gradients keyed like ``model.params`` plus ``"input"``.
    """
    analytic = grads(model, x)
    report = {}
    for name, arr in model.params.items():
        num = fd_gradient(lambda: loss(model, x), arr, eps)
        report[name] = relative_error(analytic[name], num)
    xc = x.copy()
    num = fd_gradient(lambda: loss(model, xc), xc, eps)
    report["input"] = relative_error(analytic["input"], num)
    return report
