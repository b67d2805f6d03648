"""Shared test utilities: central finite-difference gradient oracle."""

import numpy as np


def finite_difference_gradient(loss_fn, array: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. every array entry.

    ``loss_fn`` must re-evaluate the loss from scratch each call; the array
    is perturbed in place and restored.
    """
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        up = loss_fn()
        flat[i] = original - h
        down = loss_fn()
        flat[i] = original
        out[i] = (up - down) / (2.0 * h)
    return grad


def assert_gradients_match(analytic: np.ndarray, numeric: np.ndarray,
                           rel_tol: float = 1e-4) -> None:
    """Vector-norm relative comparison of the two gradients.

    Per-entry ratios are ill-conditioned near sign changes, so the criterion
    is ||a - n|| / max(||a||, ||n||) <= rel_tol, which still flags any wrong
    vector-Jacobian rule (those produce errors at the scale of the gradient
    itself, not at the finite-difference truncation scale).
    """
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale <= 1e-9:
        # both sides at finite-difference noise level: a true zero gradient
        return
    rel = np.linalg.norm(analytic - numeric) / scale
    assert rel <= rel_tol, f"gradient mismatch: relative error {rel:.3e}"
