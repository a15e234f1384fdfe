"""Central finite-difference check of tape gradients."""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_array: dict = field(default_factory=dict)
    coords_checked: int = 0

    def passed(self, tol):
        return self.max_rel_error <= tol


def _rel_error(analytic, numeric, floor=1e-12):
    # normalised by the finite-difference norm so a gradient scaled by c
    # reports |c - 1|
    denom = max(np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradient_check(loss_fn, params, h=1e-5, max_coords=None, seed=0,
                   grad_scale=1.0):
    """Compare backward gradients to central differences.

    ``loss_fn(params)`` must bind a tape on ``params``, return a scalar
    tensor, and be a deterministic function of the parameter values.
    ``max_coords`` caps the number of probed coordinates per array (chosen
    by a seeded RNG); ``None`` probes all of them. ``grad_scale`` multiplies
    the analytic gradient and exists to sanity-check the checker itself.
    """
    loss = loss_fn(params)
    loss.tape.backward(loss)
    analytic = params.flat_grad.copy() * grad_scale
    params.detach()

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error=0.0)
    flat = params.flat
    for name in params.names:
        off = params.offsets[name]
        size = int(np.prod(params.shapes[name], dtype=np.int64))
        idx = np.arange(size)
        if max_coords is not None and size > max_coords:
            idx = np.sort(rng.choice(size, size=max_coords, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            k = off + i
            orig = flat[k]
            flat[k] = orig + h
            up = float(loss_fn(params).data)
            flat[k] = orig - h
            down = float(loss_fn(params).data)
            flat[k] = orig
            numeric[j] = (up - down) / (2.0 * h)
        params.detach()
        err = _rel_error(analytic[off + idx], numeric)
        report.per_array[name] = err
        report.coords_checked += idx.size
        report.max_rel_error = max(report.max_rel_error, err)
    return report
