"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from capforge.errors import ContractError
from capforge.numerics.tensor import Tape, Tensor, backward, no_tape


@dataclass
class GradCheckReport:
    tol: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_rel_error.values())

    @property
    def failures(self) -> dict[str, float]:
        return {k: e for k, e in self.max_rel_error.items() if not e < self.tol}


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_elements: int = 10_000,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` against central differences.

    ``f`` closes over ``params`` and must be deterministic.  Parameters larger
    than ``max_elements`` are checked on a seeded random subsample.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    with Tape() as tape:
        loss = f()
    for p in params:
        p.grad = None
    backward(tape, loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def evaluate() -> float:
        with no_tape():
            return f().item()

    if evaluate() != evaluate():
        raise ContractError("grad_check: f is not deterministic")

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol)
    for i, (p, a) in enumerate(zip(params, analytic)):
        name = p.name or f"param{i}"
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, max_elements, replace=False))
        worst = 0.0
        a_flat = a.reshape(-1)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + step
            plus = evaluate()
            flat[j] = orig - step
            minus = evaluate()
            flat[j] = orig
            numeric = (plus - minus) / (2.0 * step)
            worst = max(worst, relative_error(a_flat[j], numeric))
        report.max_rel_error[name] = worst
        report.checked[name] = len(idx)
    return report
