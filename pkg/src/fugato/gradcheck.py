"""Central finite-difference gradient checking.

The numeric side only ever runs forward passes, so it stays independent
of every backward implementation it is used to check. Run in float64
(``use_dtype("float64")``) for meaningful tolerances.
"""

from __future__ import annotations

import numpy as np

from .nn import Parameter


def numeric_gradient(loss_fn, tensor, h: float = 1e-5,
                     coords: np.ndarray | None = None) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. entries of ``tensor``.

    ``coords`` optionally restricts the check to a subset of flat indices;
    unchecked entries come back as nan.
    """
    flat = tensor.data.reshape(-1)
    grad = np.full(flat.shape, np.nan)
    indices = range(flat.size) if coords is None else coords
    for i in indices:
        original = flat[i]
        flat[i] = original + h
        up = float(loss_fn().data)
        flat[i] = original - h
        down = float(loss_fn().data)
        flat[i] = original
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(tensor.data.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(1, |a|, |n|) over the checked (non-nan) entries."""
    mask = ~np.isnan(numeric)
    if not mask.any():
        return 0.0
    a = analytic[mask]
    n = numeric[mask]
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))


def check_parameter_gradients(
    loss_fn,
    params: list[tuple[str, Parameter]],
    h: float = 1e-5,
    max_coords_per_tensor: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Backward pass versus central differences for every parameter.

    ``loss_fn`` builds the graph and returns the scalar loss tensor; it is
    re-run (forward only) for each probe. Returns name -> max relative
    error. Large tensors can be spot-checked at ``max_coords_per_tensor``
    random coordinates.
    """
    for _, p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for name, p in params}

    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for name, p in params:
        coords = None
        if max_coords_per_tensor is not None and p.size > max_coords_per_tensor:
            coords = rng.choice(p.size, size=max_coords_per_tensor, replace=False)
        numeric = numeric_gradient(loss_fn, p, h=h, coords=coords)
        errors[name] = max_relative_error(analytic[name], numeric)
    return errors
