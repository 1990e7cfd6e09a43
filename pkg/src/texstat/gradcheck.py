"""Central finite-difference checking of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad, record_constants, replay_constants

# relative errors are taken against max(|analytic|, |numeric|, REL_FLOOR * max(1, |f(x)|));
# the floor tracks the rounding noise of a central difference, which grows with |f|
REL_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    per_input: list[float] = field(default_factory=list)
    n_coords: int = 0


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float = 1.0) -> np.ndarray:
    floor = REL_FLOOR * max(1.0, abs(scale))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradient_check(f: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-5, tol: float = 1e-4,
                   max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare backward() against central differences of scalar ``f(*inputs)``.

    Quantities marked with ``forward_constant`` are recorded at the
    unperturbed point and held fixed for every perturbed evaluation.
    ``max_coords`` caps how many coordinates per input are probed.
    """
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with record_constants() as constants:
        out = f(*leaves)
    if out.size != 1:
        raise ValueError("gradient_check needs a scalar-valued function")
    out.backward()
    scale = float(out.data.reshape(-1)[0])

    def evaluate(values) -> float:
        with no_grad(), replay_constants(constants):
            return float(f(*[Tensor(v) for v in values]).data.reshape(-1)[0])

    rng = np.random.default_rng(seed)
    worst = 0.0
    per_input = []
    total = 0
    for k, base in enumerate(arrays):
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(base)
        coords = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            coords = rng.choice(base.size, size=max_coords, replace=False)
        err_k = 0.0
        for flat in coords:
            values = [a.copy() for a in arrays]
            pert = values[k].reshape(-1)
            orig = pert[flat]
            pert[flat] = orig + eps
            fp = evaluate(values)
            pert[flat] = orig - eps
            fm = evaluate(values)
            numeric = (fp - fm) / (2 * eps)
            err = float(relative_error(np.array(analytic.reshape(-1)[flat]), np.array(numeric), scale))
            err_k = max(err_k, err)
        per_input.append(err_k)
        worst = max(worst, err_k)
        total += len(coords)
    return GradCheckReport(worst, worst <= tol, tol, per_input, total)
