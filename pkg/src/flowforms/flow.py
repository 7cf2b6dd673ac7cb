"""Path-level SDE engine: simulation, derivative flow, transports.

The Stratonovich equation dx = X(x) o dB + A(x) dt is discretized with a
Heun predictor-corrector on the ambient coefficient field followed by
re-projection onto the manifold (weak order one).  The derivative flow is
obtained by integrating the linearized equation with the same scheme and the
same noise.  All stochastic integrals use the left-point rule, and integrals
against dx are taken against the martingale increments X(x_k) dB_k.

Noise is drawn from counter-based Philox streams keyed by (seed, draw block),
with a fixed draw-block width, so the increments of path i are a pure
function of (seed, path_index, step) regardless of how execution is chunked
or threaded.

This module is the single-path reference layer; the block-vectorized engine
used by the Monte Carlo estimators (engine.py) follows the same stepping
rules and is cross-checked against it in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import DegreeError, Manifold

DRAW_BLOCK = 1024
BLOWUP_FACTOR = 10.0


class FlowBlowupError(RuntimeError):
    """Re-projection displaced a point far beyond the step scale."""


def draw_increments(seed, first_path, n_paths, n_steps, dim, h):
    """Brownian increments (n_paths, n_steps, dim) for a contiguous path range.

    Paths are grouped into fixed blocks of DRAW_BLOCK consecutive indices;
    each block is one Philox stream keyed by (seed, block index).
    """
    out = np.empty((n_paths, n_steps, dim))
    i0, i1 = first_path, first_path + n_paths
    for blk in range(i0 // DRAW_BLOCK, (i1 - 1) // DRAW_BLOCK + 1):
        gen = np.random.Generator(np.random.Philox(key=[seed, blk]))
        draws = gen.standard_normal((DRAW_BLOCK, n_steps, dim))
        lo, hi = max(i0, blk * DRAW_BLOCK), min(i1, (blk + 1) * DRAW_BLOCK)
        out[lo - i0:hi - i0] = draws[lo - blk * DRAW_BLOCK:hi - blk * DRAW_BLOCK]
    return out * np.sqrt(h)


@dataclass(frozen=True)
class NoiseDriver:
    """Reproducible driving noise for one path on a uniform grid."""

    seed: int
    path_index: int
    n_steps: int
    h: float
    dim: int

    def increments(self):
        return draw_increments(self.seed, self.path_index, 1,
                               self.n_steps, self.dim, self.h)[0]

    @property
    def times(self):
        return np.arange(self.n_steps + 1) * self.h


@dataclass(frozen=True)
class ArrayDriver:
    """Driver backed by explicit increments (perturbed-noise re-solves, tests)."""

    data: np.ndarray
    h: float

    @property
    def n_steps(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]

    def increments(self):
        return np.array(self.data, dtype=float, copy=True)

    @property
    def times(self):
        return np.arange(self.n_steps + 1) * self.h


@dataclass
class PathSample:
    """One discretized solution together with its driving increments."""

    manifold: Manifold
    driver: NoiseDriver
    points: np.ndarray        # (K+1, d)
    increments: np.ndarray    # (K, m)

    @property
    def n_steps(self):
        return self.driver.n_steps

    @property
    def h(self):
        return self.driver.h

    @property
    def times(self):
        return self.driver.times


def n_steps_for(t_final, h):
    k = int(round(t_final / h))
    if abs(k * h - t_final) > 1e-9 * max(1.0, t_final):
        raise ValueError(f"horizon {t_final} is not an integer multiple of step {h}")
    return k


def heun_step(mf, x, db, h):
    """One Stratonovich Heun step with post-step re-projection."""
    a0 = mf.step_field(x, db, h)
    x_pred = mf.project(x + a0)
    a1 = mf.step_field(x_pred, db, h)
    y = x + 0.5 * (a0 + a1)
    x_new = mf.project(y)
    return x_new, x_pred, y


def check_blowup(mf, y, x_new, db, h):
    moved = np.linalg.norm(x_new - y, axis=-1)
    allowed = BLOWUP_FACTOR * (np.linalg.norm(db, axis=-1) + h)
    if np.any(moved > allowed):
        raise FlowBlowupError(
            f"projection displaced a point by {np.max(moved):.3e} "
            f"(allowed {np.min(allowed):.3e}); reduce the step size")


def simulate(mf, x0=None, t_final=1.0, h=1e-3, seed=0, path_index=0, driver=None):
    """Integrate the SDE on [0, t_final] and return the sampled path."""
    if x0 is None:
        x0 = mf.default_start()
    x0 = mf.check_point(np.asarray(x0, dtype=float))
    if driver is None:
        driver = NoiseDriver(seed, path_index, n_steps_for(t_final, h), h, mf.noise_dim)
    incs = driver.increments()
    points = np.empty((driver.n_steps + 1, mf.point_dim))
    points[0] = mf.project(x0)
    x = points[0]
    for k in range(driver.n_steps):
        x, _, y = heun_step(mf, x, incs[k], driver.h)
        check_blowup(mf, y, x, incs[k], driver.h)
        points[k + 1] = x
    return PathSample(mf, driver, points, incs)


def derivative_flow(path):
    """Derivative flow maps T_{x_0} -> T_{x_k}, integrated alongside the path."""
    mf = path.manifold
    pts, incs, h = path.points, path.increments, path.h
    d = mf.point_dim
    flow = np.empty((path.n_steps + 1, d, d))
    flow[0] = mf.tangent_projector(pts[0])
    j = flow[0]
    for k in range(path.n_steps):
        db = incs[k]
        g0 = mf.step_field_jac(pts[k], j, db, h)
        a0 = mf.step_field(pts[k], db, h)
        x_pred = mf.project(pts[k] + a0)
        g1 = mf.step_field_jac(x_pred, j + g0, db, h)
        j = mf.tangent_projector(pts[k + 1]) @ (j + 0.5 * (g0 + g1))
        flow[k + 1] = j
    return flow


def derivative_flow_inverse(path, flow):
    """Inverses T_{x_k} -> T_{x_0} of the derivative flow (tangent-restricted)."""
    inv = np.empty_like(flow)
    for k in range(flow.shape[0]):
        inv[k] = np.linalg.pinv(flow[k], rcond=1e-10)
    return inv


_STEP_FOR = {
    "levi_civita": "transport_step",
    "breve": "breve_transport_step",
    "hat": "hat_transport_step",
}


def parallel_transport(path, connection="levi_civita"):
    """Isometries T_{x_0} -> T_{x_k} along the path (ambient orthogonal)."""
    mf = path.manifold
    step = getattr(mf, _STEP_FOR[connection])
    pts = path.points
    out = np.empty((path.n_steps + 1, mf.point_dim, mf.point_dim))
    out[0] = np.eye(mf.point_dim)
    p = out[0]
    for k in range(path.n_steps):
        p = step(pts[k], pts[k + 1]) @ p
        out[k + 1] = p
    return out


class DampedTransport:
    """Damped parallel translation of q-vectors along a path.

    Solves the covariant equation dW/ds = -1/2 R^q(x_s) W (plus the
    drift-derivative term in 'breve' mode, which vanishes for invariant
    drifts) by per-step transport composed with the exponential of the
    curvature term.  On the catalogue geometries the degree-q curvature
    operator equals a constant times the identity, so each exponential factor
    is the scalar exp(-h c_q / 2); the dense-matrix route is kept in the test
    suite as an oracle for this fast path.
    """

    def __init__(self, q, scalars, base):
        self.q = q
        self.scalars = scalars     # (K+1,)
        self.base = base           # (K+1, d, d) isometries

    def _slot_apply(self, mat, tensor, invert=False):
        m = np.swapaxes(mat, -1, -2) if invert else mat
        t = np.asarray(tensor, dtype=float)
        if self.q == 0:
            return t
        if self.q == 1:
            return (m @ t[..., None])[..., 0]
        if self.q == 2:
            return m @ t @ np.swapaxes(m, -1, -2)
        return np.einsum("ai,bj,ck,...ijk->...abc", m, m, m, t)

    def apply(self, k, tensor):
        """W_k applied to a degree-q tensor at the start point."""
        if self.q == 0:
            return np.asarray(tensor, dtype=float)
        return self.scalars[k] * self._slot_apply(self.base[k], tensor)

    def apply_inv(self, k, tensor):
        """W_k^{-1} applied to a degree-q tensor at x_k."""
        if self.q == 0:
            return np.asarray(tensor, dtype=float)
        return self._slot_apply(self.base[k], tensor, invert=True) / self.scalars[k]

    def between(self, j, k, tensor):
        """W^{t_j -> t_k} = W_k W_j^{-1} applied to a tensor at x_j."""
        return self.apply(k, self.apply_inv(j, tensor))

    def matrix(self, k):
        """Dense matrix on the full degree-q tensor space (single step, tests)."""
        if self.q == 0:
            return np.ones((1, 1))
        m = self.base[k]
        out = m
        for _ in range(self.q - 1):
            out = np.kron(out, m)
        return self.scalars[k] * out


def damped_transport(path, q, mode="levi_civita", par=None):
    """Damped parallel translation W^(q) (or the SDE-connection variant).

    mode 'levi_civita' damps the Levi-Civita transport by the Weitzenbock
    coefficient; mode 'breve' uses the adjoint-connection transport and the
    SDE-connection coefficient (zero for the flat group connections), which
    is the transport appearing under conditional expectations of the flow.
    """
    mf = path.manifold
    if not 0 <= q <= mf.dim:
        raise DegreeError(f"degree {q} out of range for {mf.name}")
    if mode == "levi_civita":
        coeff = mf.weitz_coeff(q)
        base = par if par is not None else parallel_transport(path)
    elif mode == "breve":
        coeff = mf.breve_weitz_coeff(q)
        base = parallel_transport(path, connection="hat")
    else:
        raise ValueError(f"unknown damped-transport mode {mode!r}")
    times = path.times
    scalars = np.exp(-0.5 * coeff * times)
    if q == 0:
        scalars = np.ones_like(times)
    return DampedTransport(q, scalars, base)


def anti_development(path, par):
    """Increments of the anti-developed Brownian motion in T_{x_0}.

    Martingale part only: dB_breve_k = par_k^{-1} X(x_k) dB_k.
    """
    mf = path.manifold
    mart = mf.martingale_increment(path.points[:-1], path.increments)
    return np.einsum("kji,kj->ki", par[:-1], mart)


def ito_integral(integrand, increments):
    """Left-point integral sum_k <a_k, d_k> (scalar result)."""
    a = np.asarray(integrand, dtype=float)
    d = np.asarray(increments, dtype=float)
    if a.shape != d.shape:
        raise ValueError(f"integrand shape {a.shape} != increments shape {d.shape}")
    return float(np.sum(a * d))


@dataclass
class TransportStack:
    """Per-path bundle of linear maps between tangent spaces along the path."""

    path: PathSample
    flow: np.ndarray | None = None          # T xi_k
    flow_inv: np.ndarray | None = None
    par: np.ndarray | None = None           # Levi-Civita parallel transport
    damped: dict = field(default_factory=dict)       # q -> DampedTransport
    damped_breve: dict = field(default_factory=dict)
    antidev: np.ndarray | None = None


def transport_stack(path, qs=(1, 2), need_flow=True, need_breve=False,
                    need_antidev=False):
    """Assemble the standard transport stack for a path."""
    stack = TransportStack(path)
    if need_flow:
        stack.flow = derivative_flow(path)
        stack.flow_inv = derivative_flow_inverse(path, stack.flow)
    stack.par = parallel_transport(path)
    for q in qs:
        stack.damped[q] = damped_transport(path, q, par=stack.par)
        if need_breve:
            stack.damped_breve[q] = damped_transport(path, q, mode="breve")
    if need_antidev:
        stack.antidev = anti_development(path, stack.par)
    return stack
