from __future__ import annotations

from typing import Callable, Mapping, Optional

import numpy as np

from .tensor import Tensor, backward, no_grad, zero_grad


class NonDeterministicFunction(RuntimeError):
    pass


def grad_check(build_fn: Callable[[Mapping[str, Tensor]], Tensor], inputs: Mapping[str, Tensor],
               eps: float = 1e-6, tol: Optional[float] = None) -> float:
    """Compare tape gradients with central differences.

    ``build_fn`` maps the ``inputs`` dict to a scalar loss. Every entry of
    every input that requires grad is perturbed by ``+-eps``. Returns the
    maximum of ``|analytic - numeric| / max(|analytic|, |numeric|, eps)``
    and raises ``AssertionError`` if it exceeds ``tol``.
    """
    zero_grad(inputs)
    loss = build_fn(inputs)
    base = float(loss.data)
    backward(loss)
    with no_grad():
        if float(build_fn(inputs).data) != base:
            raise NonDeterministicFunction("two forward passes over identical inputs disagree")
    worst = 0.0
    for name, t in inputs.items():
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        numeric = np.empty(flat.size)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(build_fn(inputs).data)
                flat[i] = orig - eps
                down = float(build_fn(inputs).data)
                flat[i] = orig
                numeric[i] = (up - down) / (2 * eps)
        a = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), eps)
        err = float(np.max(np.abs(a - numeric) / denom))
        worst = max(worst, err)
    if tol is not None and worst > tol:
        raise AssertionError(f"gradient check failed: max relative error {worst:.3g} > {tol:.3g}")
    return worst
