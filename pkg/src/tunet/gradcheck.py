"""Central finite-difference verification of reverse-mode gradients.

Coordinates whose perturbation flips a ReLU mask or a pooling argmax are not
compared, because the difference quotient straddles a kink there and is not
an estimate of the derivative. The number of such coordinates is reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, no_grad, record_branches


@dataclass
class GradCheckResult:
    max_rel_error: float = 0.0
    checked: int = 0
    skipped: int = 0
    worst: tuple[str, tuple[int, ...]] | None = None
    per_tensor: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.checked > 0 and self.max_rel_error < tol


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Mapping[str, Tensor], h: float = 1e-3,
                    max_per_tensor: int | None = None, rng: np.random.Generator | None = None,
                    floor: float = 1e-8) -> GradCheckResult:
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    Args:
        loss_fn: rebuilds the graph from the current tensor values and returns a scalar.
        tensors: leaves to check, keyed by a display name. Their ``data`` is
            perturbed in place and restored.
        h: finite-difference step.
        max_per_tensor: if set, check a random subset of this many coordinates per tensor.
        floor: added to ``|fd|`` in the relative-error denominator.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    with record_branches() as rec:
        loss = loss_fn()
    base_sig = rec.signature()
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in tensors.items()}

    def evaluate():
        with no_grad(), record_branches() as r:
            value = float(loss_fn().data)
        return value, r.signature()

    result = GradCheckResult()
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        idx_all = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            idx_all = np.sort(rng.choice(flat.size, size=max_per_tensor, replace=False))
        worst_here = 0.0
        for i in idx_all:
            orig = flat[i]
            flat[i] = orig + h
            f_plus, sig_plus = evaluate()
            flat[i] = orig - h
            f_minus, sig_minus = evaluate()
            flat[i] = orig
            if sig_plus != base_sig or sig_minus != base_sig:
                result.skipped += 1
                continue
            fd = (f_plus - f_minus) / (2 * h)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - fd) / (abs(fd) + floor)
            result.checked += 1
            worst_here = max(worst_here, rel)
            if rel > result.max_rel_error:
                result.max_rel_error = rel
                result.worst = (name, np.unravel_index(i, t.shape))
        result.per_tensor[name] = worst_here
    return result
