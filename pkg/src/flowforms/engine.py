"""Block-vectorized Monte Carlo engine.

Paths are advanced in blocks of a few thousand, with all per-step geometry
(Heun step, derivative flow, parallel transports) vectorized over the block.
The stepping rules are identical to the single-path layer in flow.py, which
the test suite uses as a cross-check.

Determinism: a block's result is a pure function of (seed, path range), the
noise of path i depends only on (seed, i), and per-block partial results are
assembled in index order.  Thread count (FLOWFORMS_THREADS) therefore never
changes any output bit.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import flow as _flow
from .geometry import RotationGroup

ENV_THREADS = "FLOWFORMS_THREADS"
DEFAULT_BLOCK = 8192


def thread_count():
    raw = os.environ.get(ENV_THREADS, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass(frozen=True)
class MCConfig:
    """Monte Carlo run parameters shared by all estimators."""

    n_paths: int = 200_000
    h: float = 1e-3
    seed: int = 20240
    block: int = DEFAULT_BLOCK

    def n_steps(self, t_final):
        return _flow.n_steps_for(t_final, self.h)


class BlockPaths:
    """Stepping state for one block of paths.

    Maintains the current positions and, on request, the derivative flow
    (``flow``), the Levi-Civita parallel transport (``par``) and the
    adjoint-connection transport (``hat``, used by the conditional-expectation
    transports; it coincides with ``par`` except on the invariant group
    systems).  ``advance`` performs one Heun step and returns the left-point
    data needed by integrand accumulators.
    """

    def __init__(self, mf, x0, increments, h,
                 need_flow=False, need_par=False, need_hat=False):
        self.mf = mf
        self.incs = increments
        self.h = h
        n = increments.shape[0]
        d = mf.point_dim
        self.x = np.tile(np.asarray(x0, dtype=float), (n, 1))
        self.k = 0
        self.t = 0.0
        eye = np.broadcast_to(np.eye(d), (n, d, d)).copy()
        self.flow = mf.tangent_projector(self.x).copy() if need_flow else None
        self.par = eye.copy() if need_par else None
        self._hat_distinct = isinstance(mf, RotationGroup) and mf.mode != "biinvariant"
        if need_hat:
            self.hat = eye.copy() if self._hat_distinct else None
        else:
            self.hat = None
        self._need_hat = need_hat

    @property
    def cond_par(self):
        """Transport base of the conditional-expectation (damped) translations."""
        if self._need_hat and self._hat_distinct:
            return self.hat
        return self.par

    def advance(self):
        """One Heun step; returns (x_prev, db, mart) at the left grid point."""
        mf, h = self.mf, self.h
        db = self.incs[:, self.k]
        x = self.x
        mart = mf.martingale_increment(x, db)
        a0 = mf.step_field(x, db, h)
        x_pred = mf.project(x + a0)
        a1 = mf.step_field(x_pred, db, h)
        y = x + 0.5 * (a0 + a1)
        x_new = mf.project(y)
        _flow.check_blowup(mf, y, x_new, db, h)
        if self.flow is not None:
            g0 = mf.step_field_jac(x, self.flow, db, h)
            g1 = mf.step_field_jac(x_pred, self.flow + g0, db, h)
            self.flow = mf.tangent_projector(x_new) @ (self.flow + 0.5 * (g0 + g1))
        if self.par is not None:
            self.par = mf.transport_step(x, x_new) @ self.par
        if self.hat is not None:
            self.hat = mf.hat_transport_step(x, x_new) @ self.hat
        self.x = x_new
        self.k += 1
        self.t = self.k * h
        return x, db, mart


def run_kernel(kernel, mc: MCConfig, n_steps, noise_dim):
    """Run a block kernel over all paths with deterministic ordered reduction.

    ``kernel(first_path, increments)`` must be a pure function returning a
    dict of per-path sample arrays.  Results are concatenated in path order.
    """
    ranges = []
    lo = 0
    while lo < mc.n_paths:
        hi = min(lo + mc.block, mc.n_paths)
        ranges.append((lo, hi))
        lo = hi

    def one(rng):
        lo, hi = rng
        incs = _flow.draw_increments(mc.seed, lo, hi - lo, n_steps, noise_dim, mc.h)
        return kernel(lo, incs)

    workers = thread_count()
    if workers <= 1 or len(ranges) <= 1:
        partials = [one(r) for r in ranges]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            partials = list(ex.map(one, ranges))

    keys = list(partials[0])
    return {k: np.concatenate([p[k] for p in partials]) for k in keys}


def mean_se(samples):
    """Sample mean and standard error of a per-path sample array."""
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    mean = float(np.mean(samples))
    if n < 2:
        return mean, float("inf")
    return mean, float(np.std(samples, ddof=1) / np.sqrt(n))
