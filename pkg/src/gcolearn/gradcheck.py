"""Central-difference verification of backward passes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, precision


@dataclass(frozen=True)
class GradCheckReport:
    op: str
    max_rel_error: float
    elements: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.op}: max rel err {self.max_rel_error:.3e} over {self.elements} elements"


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5,
               tol: float = 1e-4, name: str | None = None) -> GradCheckReport:
    """Compare ``backward`` against (f(x+h) - f(x-h)) / 2h for every input element.

    ``fn`` receives one Tensor per array in ``inputs`` and must return a
    scalar.  Everything runs in float64.  The relative error of each element
    is |a - n| / max(|a|, |n|, 1e-8).
    """
    base = [np.array(x, dtype=np.float64) for x in inputs]
    with precision("float64"):
        ts = [Tensor(x, requires_grad=True) for x in base]
        backward(fn(*ts))
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

        def f(arrays):
            return float(fn(*[Tensor(a) for a in arrays]).data)

        worst, count = 0.0, 0
        for i, x in enumerate(base):
            flat = x.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                fp = f(base)
                flat[j] = orig - h
                fm = f(base)
                flat[j] = orig
                num = (fp - fm) / (2 * h)
                ana = float(analytic[i].reshape(-1)[j])
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, err)
                count += 1
    return GradCheckReport(name or getattr(fn, "__name__", "fn"), worst, count, tol)
