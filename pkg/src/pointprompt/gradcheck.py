"""Finite-difference verification of autograd gradients.

Central differences with a fixed step are compared entry by entry
against backward-pass gradients.  The loss function under test must be
deterministic and hold every discrete choice fixed (assignments, inner
point alignments, decoded masks), otherwise the perturbed evaluations
would hop between branches and the comparison would be meaningless.
Everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ValidationError

#: entries where both gradients are this small count as matching zeros
ZERO_FLOOR = 1e-7


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    n_entries: int
    worst_param: int
    worst_index: int

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err <= tol


def analytic_gradients(
    f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor]
) -> list[np.ndarray]:
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = f()
    if loss.ndim != 0:
        raise ValidationError("gradient check requires a scalar loss")
    loss.backward()
    out = []
    for p in params:
        if p.grad is None:
            out.append(np.zeros(tuple(p.shape), dtype=np.float64))
        else:
            out.append(p.grad.detach().cpu().numpy().astype(np.float64).copy())
    return out


def finite_difference_gradients(
    f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], step: float = 1e-5
) -> list[np.ndarray]:
    grads = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            g = np.zeros(flat.shape[0], dtype=np.float64)
            for i in range(flat.shape[0]):
                original = float(flat[i])
                flat[i] = original + step
                up = float(f())
                flat[i] = original - step
                down = float(f())
                flat[i] = original
                g[i] = (up - down) / (2.0 * step)
            grads.append(g.reshape(tuple(p.shape)))
    return grads


def check_gradients(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare autograd against central differences over all entries.

    Relative error per entry is |a - n| / max(|a|, |n|); entries where
    both magnitudes sit below ZERO_FLOOR count as exact matches.
    """
    if not params:
        raise ValidationError("no parameters to check")
    analytic = analytic_gradients(f, params)
    numeric = finite_difference_gradients(f, params, step=step)
    worst = 0.0
    worst_param = -1
    worst_index = -1
    n_entries = 0
    for pi, (a, n) in enumerate(zip(analytic, numeric)):
        a = a.ravel()
        n = n.ravel()
        n_entries += a.size
        denom = np.maximum(np.abs(a), np.abs(n))
        err = np.where(denom < ZERO_FLOOR, 0.0, np.abs(a - n) / np.maximum(denom, ZERO_FLOOR))
        idx = int(np.argmax(err)) if err.size else 0
        if err.size and err[idx] > worst:
            worst = float(err[idx])
            worst_param = pi
            worst_index = idx
    return GradCheckReport(
        max_rel_err=worst, n_entries=n_entries, worst_param=worst_param, worst_index=worst_index
    )
