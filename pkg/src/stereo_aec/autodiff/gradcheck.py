"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: tuple | None = None                       # (parameter name, flat index)
    excluded: list = field(default_factory=list)     # kink-adjacent (name, flat index)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def _rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def finite_diff_check(f, params, h: float = 1e-4, max_coords: int = 500, rng=None,
                      kink_tol: float = 0.75, stencil: int = 5) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    `stencil` is 3 (f(x+h) - f(x-h)) / 2h or 5, the fourth-order rule
    (f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h. The 5-point rule allows a
    larger h, which keeps rounding noise (~ eps |f| / h) small next to tiny
    gradient entries.

    `f()` must rebuild the graph from the current parameter values and return a
    scalar Tensor. Analytic gradients come from one `f().backward()`. Up to
    `max_coords` coordinates are sampled uniformly across all parameters.

    A coordinate whose central difference disagrees with the analytic gradient
    is re-probed with half the step: if the forward/backward one-sided slopes
    keep (more than `kink_tol` of) their gap, the function has a kink within
    +-h there and the coordinate is reported in `excluded` instead of failing.
    Before that, a mismatching coordinate is retried once with step 10 h and
    the smaller error is kept.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    params = list(params)
    for p in params:
        p.zero_grad()
    f().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    flat_ids = np.arange(total) if total <= max_coords else np.sort(
        rng.choice(total, size=max_coords, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def value():
        return float(f().data)

    worst_err, worst, excluded = 0.0, None, []
    for flat in flat_ids:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = int(flat - offsets[k])
        p = params[k]
        view = p.data.reshape(-1)
        orig = view[idx]

        def at(delta):
            view[idx] = orig + delta
            return value()

        def slope(step):
            up, down = at(step), at(-step)
            if stencil == 5:
                return up, down, (at(-2 * step) - 8 * down + 8 * up - at(2 * step)) / (12 * step)
            if stencil == 3:
                return up, down, (up - down) / (2 * step)
            raise ValueError("stencil must be 3 or 5")

        fp, fm, numeric = slope(h)
        a = float(analytic[k].reshape(-1)[idx])
        err = _rel_error(a, numeric)
        if err >= 1e-4:
            # rounding noise scales like 1/h: retry with a coarser step
            err = min(err, _rel_error(a, slope(10 * h)[2]))
        if err >= 1e-4:
            f0 = at(0.0)
            gap_h = (fp - f0) / h - (f0 - fm) / h
            fp2, fm2 = at(h / 2), at(-h / 2)
            gap_h2 = (fp2 - f0) / (h / 2) - (f0 - fm2) / (h / 2)
            if abs(gap_h) > 0 and abs(gap_h2) > kink_tol * abs(gap_h):
                excluded.append((p.name, idx))
                view[idx] = orig
                continue
        view[idx] = orig
        if err > worst_err:
            worst_err, worst = err, (p.name, idx)
    return GradCheckReport(worst_err, len(flat_ids) - len(excluded), worst, excluded)
