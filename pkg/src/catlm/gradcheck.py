"""Central finite-difference verification of analytic gradients.

The reverse-mode gradient of every differentiable op is compared against
(f(x+h) - f(x-h)) / 2h entry by entry. Checks default to float64 shadow mode
with h = 1e-4, where the difference quotient's own truncation error sits well
below the 1e-3 relative tolerance even for small-magnitude gradients; float32
callers should widen h to 1e-2 and expect correspondingly looser agreement.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .optim import zero_grads
from .tensor import Tensor


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    worst_index: tuple
    analytic: float
    numeric: float
    entries_checked: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def _rel_err(a: float, f: float, floor: float) -> float:
    denom = max(abs(a) + abs(f), floor)
    return abs(a - f) / denom


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Dict[str, Tensor],
                      h: float = 1e-4, max_entries: int = 64,
                      rng: Optional[np.random.Generator] = None,
                      floor: float = 1e-4) -> list[GradCheckResult]:
    """Compare analytic grads of ``loss_fn`` against central differences.

    ``loss_fn`` must rebuild the forward graph from the live parameter arrays
    on every call. For parameters larger than ``max_entries`` a random subset
    of entries is probed.
    """
    zero_grads(params)
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    rng = rng or np.random.default_rng(0)
    results = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_entries:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=max_entries, replace=False)
        worst = (0.0, (0,), 0.0, 0.0)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[i])
            err = _rel_err(a, numeric, floor)
            if err > worst[0]:
                worst = (err, np.unravel_index(i, p.data.shape), a, numeric)
        results.append(GradCheckResult(
            name=name, max_rel_err=worst[0], worst_index=worst[1],
            analytic=worst[2], numeric=worst[3], entries_checked=len(idx)))
    return results


def max_rel_err(results: Sequence[GradCheckResult]) -> float:
    return max((r.max_rel_err for r in results), default=0.0)
