"""Calculus over the driving Wiener space.

Provides the Cameron-Martin representation of vector fields on path space
(grid values of hdot), the derivative of the solution map applied to such
fields, the flow-generated field family

    hdot_t = rho(t) Y_{x_t}(T xi_t b),    b in T_{x_0} M,

their Lie brackets in the torsion form, a finite-difference oracle for the
bracket, the wedge-field divergence

    div(h^1 ^ ... ^ h^p) = sum_j (-1)^j (int <hdot^j, dB>) h^(j omitted)
                         - sum_{i<j} (-1)^{i+j} [h^i, h^j] ^ h^(i, j omitted),

and a Monte Carlo integration-by-parts residual check against cylindrical
forms on Wiener space.

Quadrature conventions: cumulative schedule integrals inside the bracket
formula use the midpoint rule (half weight on the current node) while the
solution-map derivative uses plain left sums; with this pairing the discrete
integration by parts relating the bracket formula to its closed-form image
under the solution-map derivative is exact, not just O(h).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import engine
from .flow import ArrayDriver, PathSample, derivative_flow, ito_integral, simulate
from .geometry import RotationGroup


# ---------------------------------------------------------------------------
# scalar schedules

class ScalarSchedule:
    """Deterministic scalar weight on [0, T] with exact integral."""

    def __init__(self, name, fn, integral_fn, derivative_fn=None):
        self.name = name
        self._fn = fn
        self._integral = integral_fn
        self._derivative = derivative_fn

    def __call__(self, t):
        return self._fn(np.asarray(t, dtype=float))

    def integral(self, t):
        """Exact integral of the schedule over [0, t]."""
        return self._integral(np.asarray(t, dtype=float))

    def derivative(self, t):
        if self._derivative is None:
            raise ValueError(f"schedule {self.name!r} has no derivative")
        return self._derivative(np.asarray(t, dtype=float))

    @property
    def starts_at_zero(self):
        return abs(float(self(0.0))) < 1e-14

    def require_lambda(self):
        """Schedules damping two-vector fields must vanish at time zero."""
        if not self.starts_at_zero:
            raise ValueError(f"schedule {self.name!r} does not vanish at 0")
        self.derivative(0.0)
        return self


def make_schedule(name, horizon=None):
    """Named schedule catalogue: const | linear | poly<p> | sin | grid."""
    if name == "const":
        return ScalarSchedule("const", lambda t: np.ones_like(t), lambda t: t,
                              lambda t: np.zeros_like(t))
    if name == "linear":
        return ScalarSchedule("linear", lambda t: t, lambda t: 0.5 * t ** 2,
                              lambda t: np.ones_like(t))
    if name.startswith("poly"):
        p = int(name[4:] or 2)
        return ScalarSchedule(name, lambda t: t ** p,
                              lambda t: t ** (p + 1) / (p + 1),
                              lambda t: p * t ** (p - 1))
    if name == "sin":
        if horizon is None:
            raise ValueError("sin schedule needs the horizon")
        w = np.pi / (2.0 * horizon)
        return ScalarSchedule("sin", lambda t: np.sin(w * t),
                              lambda t: (1.0 - np.cos(w * t)) / w,
                              lambda t: w * np.cos(w * t))
    raise ValueError(f"unknown schedule {name!r}; use const, linear, poly<p> or sin")


def grid_schedule(times, values):
    """Piecewise-constant (left-continuous) schedule from tabulated values."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    cum = np.concatenate([[0.0], np.cumsum(values[:-1] * np.diff(times))])

    def fn(t):
        idx = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(values) - 1)
        return values[idx]

    def integral(t):
        idx = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(values) - 1)
        return cum[idx] + values[idx] * (t - times[idx])

    return ScalarSchedule("grid", fn, integral)


# ---------------------------------------------------------------------------
# H-vectors

@dataclass
class HVector:
    """Cameron-Martin path represented by its derivative on the grid."""

    hdot: np.ndarray     # (K, m)
    h: float             # grid step

    @property
    def n_steps(self):
        return self.hdot.shape[0]

    def values(self):
        """Cumulative values h_k = sum_{r<k} hdot_r h, shape (K+1, m); h_0 = 0."""
        out = np.zeros((self.n_steps + 1, self.hdot.shape[1]))
        np.cumsum(self.hdot * self.h, axis=0, out=out[1:])
        return out

    def norm2(self):
        return float(np.sum(self.hdot ** 2) * self.h)

    def norm(self):
        return float(np.sqrt(self.norm2()))

    def __add__(self, other):
        return HVector(self.hdot + other.hdot, self.h)

    def __sub__(self, other):
        return HVector(self.hdot - other.hdot, self.h)

    def __mul__(self, c):
        return HVector(self.hdot * float(c), self.h)

    __rmul__ = __mul__

    @classmethod
    def zero(cls, n_steps, dim, h):
        return cls(np.zeros((n_steps, dim)), h)


def _cum_left(a, h):
    """Left sums C_k = sum_{r<k} a_r h over axis 0, length K+1."""
    a = np.asarray(a, dtype=float)
    out = np.zeros((a.shape[0] + 1,) + a.shape[1:])
    np.cumsum(a * h, axis=0, out=out[1:])
    return out


def _cum_mid(a, h):
    """Midpoint cumulative at the left nodes: sum_{r<k} a_r h + a_k h / 2."""
    a = np.asarray(a, dtype=float)
    return _cum_left(a, h)[:-1] + 0.5 * h * a


def make_h(path: PathSample, flow, rho: ScalarSchedule, b):
    """Flow-generated Cameron-Martin field hdot_k = rho(t_k) Y_{x_k}(T xi_k b)."""
    mf = path.manifold
    b = np.asarray(b, dtype=float)
    y = mf.y_matrix(path.points[:-1])                       # (K, m, d)
    jb = (flow[:-1] @ b[:, None])[..., 0]                   # (K, d)
    hdot = rho(path.times[:-1])[:, None] * (y @ jb[..., None])[..., 0]
    return HVector(hdot, path.h)


def t_ito(path: PathSample, flow, flow_inv, hv: HVector):
    """Derivative of the solution map applied to an H-vector.

    Returns the tangent field T xi_t int_0^t (T xi_s)^{-1} X(x_s) hdot_s ds
    on the grid (left-point quadrature); vanishes at t = 0.
    """
    mf = path.manifold
    x = mf.x_matrix(path.points[:-1])                       # (K, d, m)
    u = (x @ hv.hdot[..., None])[..., 0]                    # (K, d)
    w = (flow_inv[:-1] @ u[..., None])[..., 0]
    cum = _cum_left(w, path.h)                              # (K+1, d)
    return (flow @ cum[..., None])[..., 0]


def _flow_torsion(path, flow, b1, b2):
    """T(T xi_k b1, T xi_k b2) along the path, shape (K, d)."""
    mf = path.manifold
    j = flow[:-1]
    u = (j @ np.asarray(b1, dtype=float)[:, None])[..., 0]
    v = (j @ np.asarray(b2, dtype=float)[:, None])[..., 0]
    return mf.torsion(path.points[:-1], u, v)


def bracket_formula(path: PathSample, flow, flow_inv, rho, b1, b2) -> HVector:
    """Lie bracket [h^1, h^2] of two flow-generated fields, via the torsion.

    The time derivative of the bracket is

        rho(t) (int_0^t rho) T(T xi_t b1, T xi_t b2)
        + rho(t) T xi_t int_0^t rho(r) (T xi_r)^{-1} T(T xi_r b1, T xi_r b2) dr

    read back through Y.  Identically zero (exact zeros) on torsion-free
    geometries.
    """
    mf = path.manifold
    k, m = path.n_steps, mf.noise_dim
    if mf.torsion_is_zero:
        return HVector.zero(k, m, path.h)
    t_grid = path.times[:-1]
    rho_k = rho(t_grid)
    tors = _flow_torsion(path, flow, b1, b2)                # (K, d)
    g = (flow_inv[:-1] @ tors[..., None])[..., 0]           # (K, d)
    r_mid = _cum_mid(rho_k, path.h)                         # (K,)
    s_mid = _cum_mid(rho_k[:, None] * g, path.h)            # (K, d)
    tangent = (rho_k * r_mid)[:, None] * tors \
        + rho_k[:, None] * (flow[:-1] @ s_mid[..., None])[..., 0]
    y = mf.y_matrix(path.points[:-1])
    return HVector((y @ tangent[..., None])[..., 0], path.h)


def t_ito_bracket(path: PathSample, flow, flow_inv, rho, b1, b2):
    """Closed form of the solution-map derivative of the bracket field:

        (int_0^t rho) T xi_t int_0^t rho(s) (T xi_s)^{-1} T(...) ds

    with left sums, which matches t_ito(bracket_formula(...)) exactly on the
    grid.
    """
    mf = path.manifold
    if mf.torsion_is_zero:
        return np.zeros((path.n_steps + 1, mf.point_dim))
    t_grid = path.times[:-1]
    rho_k = rho(t_grid)
    tors = _flow_torsion(path, flow, b1, b2)
    g = (flow_inv[:-1] @ tors[..., None])[..., 0]
    r_cum = _cum_left(rho_k, path.h)                        # (K+1,)
    s_cum = _cum_left(rho_k[:, None] * g, path.h)           # (K+1, d)
    return r_cum[:, None] * (flow @ s_cum[..., None])[..., 0]


def bracket_fd_oracle(mf, x0, t_final, h, rho, b1, b2, seed=0, path_index=0,
                      eps=1e-4):
    """Finite-difference bracket via drift injection on the driving noise.

    Computes D hdot^2 along h^1 (and vice versa) by re-solving the flow with
    increments dB_k -> dB_k + eps hdot_k h and differencing, then
    antisymmetrizes.  Independent of the torsion formula.
    """
    base = simulate(mf, x0, t_final, h, seed=seed, path_index=path_index)
    flow0 = derivative_flow(base)
    hs = [make_h(base, flow0, rho, b) for b in (b1, b2)]

    def directional(direction: HVector, target_b, base_h: HVector):
        incs = base.increments + eps * direction.hdot * h
        pert = simulate(mf, x0, t_final, h, driver=ArrayDriver(incs, h))
        flow_p = derivative_flow(pert)
        h_p = make_h(pert, flow_p, rho, target_b)
        return (h_p.hdot - base_h.hdot) / eps

    d12 = directional(hs[0], b2, hs[1])   # D hdot^2 (h^1)
    d21 = directional(hs[1], b1, hs[0])
    return HVector(d12 - d21, h)


# ---------------------------------------------------------------------------
# wedge-field divergence

@dataclass
class DivergenceTerm:
    """One summand of a wedge-field divergence: coefficient times a wedge."""

    coefficient: float
    factors: tuple


def shigekawa_div(h_list: Sequence[HVector], increments, brackets=None):
    """Divergence expansion of h^1 ^ ... ^ h^p as a list of weighted wedges.

    ``brackets`` maps index pairs (i, j), i < j (0-based), to bracket
    HVectors; omitted pairs are treated as commuting.  For a single
    deterministic field this reduces to minus the Ito integral of hdot.
    """
    p = len(h_list)
    terms = []
    for j in range(p):
        delta = ito_integral(h_list[j].hdot, increments)
        sign = -1.0 if (j + 1) % 2 else 1.0          # (-1)^j, 1-based
        rest = tuple(h_list[:j]) + tuple(h_list[j + 1:])
        terms.append(DivergenceTerm(sign * delta, rest))
    if brackets:
        for (i, j), br in sorted(brackets.items()):
            if br is None:
                continue
            sign = -((-1.0) ** (i + j))              # -(-1)^{i+j}, same parity 0- or 1-based
            rest = tuple(x for k, x in enumerate(h_list) if k not in (i, j))
            terms.append(DivergenceTerm(sign, (br,) + rest))
    return terms


# ---------------------------------------------------------------------------
# cylindrical forms on Wiener space

class CylindricalWienerForm:
    """Degree-q form depending on the path through finitely many time values.

    ``value(omega, hs)`` evaluates the form on q H-vectors; ``dvalue(omega,
    hs)`` evaluates the exterior derivative on q+1 H-vectors, computed
    analytically from the kernel's omega-derivative (constant H-directions
    commute, so no bracket terms enter).  ``omega`` and each element of
    ``hs`` are arrays of path values at ``self.times``, shape (..., r, m).
    """

    degree = 0
    times: tuple = ()

    def value(self, omega, hs):
        raise NotImplementedError

    def dvalue(self, omega, hs):
        raise NotImplementedError


class ScalarKernelForm(CylindricalWienerForm):
    """Degree-0 form F(omega) = g(omega_{t0}) with analytic gradient."""

    degree = 0

    def __init__(self, g, dg, t0):
        self.g = g
        self.dg = dg
        self.times = (t0,)

    def value(self, omega, hs=()):
        return self.g(omega[..., 0, :])

    def dvalue(self, omega, hs):
        (k,) = hs
        return np.sum(self.dg(omega[..., 0, :]) * k[..., 0, :], axis=-1)


class KernelOneForm(CylindricalWienerForm):
    """Degree-1 form phi(omega)(k) = g(omega_{t0}) <k_{t1}, c>."""

    degree = 1

    def __init__(self, g, dg, t0, c, t1):
        self.g = g
        self.dg = dg
        self.c = np.asarray(c, dtype=float)
        self.times = (t0, t1)

    def value(self, omega, hs):
        (k,) = hs
        return self.g(omega[..., 0, :]) * np.sum(k[..., 1, :] * self.c, axis=-1)

    def dvalue(self, omega, hs):
        u, v = hs
        gu = np.sum(self.dg(omega[..., 0, :]) * u[..., 0, :], axis=-1)
        gv = np.sum(self.dg(omega[..., 0, :]) * v[..., 0, :], axis=-1)
        pu = np.sum(u[..., 1, :] * self.c, axis=-1)
        pv = np.sum(v[..., 1, :] * self.c, axis=-1)
        return gu * pv - gv * pu


# ---------------------------------------------------------------------------
# integration-by-parts residual (Monte Carlo)

@dataclass(frozen=True)
class DeterministicH:
    """Non-random field hdot_k = schedule(t_k) * direction."""

    schedule: ScalarSchedule
    direction: np.ndarray


@dataclass(frozen=True)
class FlowH:
    """Flow-generated adapted field with tangent seed b at the start point."""

    schedule: ScalarSchedule
    b: np.ndarray


@dataclass
class IBPReport:
    residual: float
    stderr: float
    n_paths: int
    dphi_mean: float
    phidiv_mean: float


def _time_indices(times, t_list, h):
    idx = []
    for t in t_list:
        k = int(round(t / h))
        if abs(k * h - t) > 1e-9:
            raise ValueError(f"form evaluation time {t} is off the grid (h={h})")
        idx.append(k)
    return idx


def ibp_check(phi: CylindricalWienerForm, h_specs, t_final, mc: engine.MCConfig,
              manifold=None, x0=None):
    """Monte Carlo residual E[d phi(h)] + E[phi(div h)] for a wedge of fields.

    With only DeterministicH specs the check runs on flat Wiener space of the
    direction dimension; FlowH specs require ``manifold`` and generate the
    adapted flow fields (including their torsion brackets, which vanish on
    gradient systems).
    """
    p = len(h_specs)
    if phi.degree != p - 1:
        raise ValueError(f"form degree {phi.degree} != p-1 = {p - 1}")
    n_steps = mc.n_steps(t_final)
    h = mc.h
    t_grid = np.arange(n_steps) * h
    phi_idx = _time_indices(np.arange(n_steps + 1) * h, phi.times, h)

    flow_specs = [s for s in h_specs if isinstance(s, FlowH)]
    if flow_specs and manifold is None:
        raise ValueError("FlowH specs need a manifold")
    mf = manifold
    if mf is not None and x0 is None:
        x0 = mf.default_start()
    noise_dim = mf.noise_dim if mf is not None else len(
        next(s for s in h_specs if isinstance(s, DeterministicH)).direction)

    det_dots = {}
    for i, s in enumerate(h_specs):
        if isinstance(s, DeterministicH):
            det_dots[i] = s.schedule(t_grid)[:, None] * np.asarray(s.direction, float)

    def flat_kernel(first, incs):
        # all fields deterministic: pure Wiener-space arithmetic
        b_sz = incs.shape[0]
        deltas = np.stack([np.sum(det_dots[i][None] * incs, axis=(1, 2))
                           for i in range(p)])
        cum_b = np.concatenate(
            [np.zeros((b_sz, 1, noise_dim)), np.cumsum(incs, axis=1)], axis=1)
        omega = cum_b[:, phi_idx]
        hvals = []
        for i in range(p):
            vals = _cum_left(det_dots[i], h)[phi_idx]        # (r, m)
            hvals.append(np.broadcast_to(vals, (b_sz,) + vals.shape))
        dphi = phi.dvalue(omega, hvals)
        phidiv = np.zeros(b_sz)
        for j in range(p):
            sign = -1.0 if (j + 1) % 2 else 1.0
            rest = [hvals[i] for i in range(p) if i != j]
            phidiv += sign * deltas[j] * phi.value(omega, rest)
        return {"dphi": dphi, "phidiv": phidiv}

    if flow_specs:
        samples = _ibp_flow_kernel(phi, h_specs, mf, x0, t_final, mc, phi_idx)
    else:
        samples = engine.run_kernel(flat_kernel, mc, n_steps, noise_dim)
    resid = samples["dphi"] + samples["phidiv"]
    mean, se = engine.mean_se(resid)
    return IBPReport(mean, se, mc.n_paths,
                     float(np.mean(samples["dphi"])), float(np.mean(samples["phidiv"])))


def _ibp_flow_kernel(phi, h_specs, mf, x0, t_final, mc, phi_idx):
    """Block kernel for wedges containing flow-generated fields."""
    p = len(h_specs)
    n_steps = mc.n_steps(t_final)
    h = mc.h
    t_grid = np.arange(n_steps) * h
    noise_dim = mf.noise_dim
    rho_vals = [s.schedule(t_grid) for s in h_specs]
    rho_mid = [_cum_mid(r, h) for r in rho_vals]

    pair_keys = []
    tors0 = {}
    if not mf.torsion_is_zero:
        for i in range(p):
            for j in range(i + 1, p):
                if isinstance(h_specs[i], FlowH) and isinstance(h_specs[j], FlowH):
                    if h_specs[i].schedule is not h_specs[j].schedule:
                        raise ValueError("bracket pairs must share one schedule")
                    pair_keys.append((i, j))
                    tors0[(i, j)] = mf.torsion(x0, np.asarray(h_specs[i].b, float),
                                               np.asarray(h_specs[j].b, float))

    det_dots = {i: s.schedule(t_grid)[:, None] * np.asarray(s.direction, float)
                for i, s in enumerate(h_specs) if isinstance(s, DeterministicH)}

    def kernel(first, incs):
        b_sz = incs.shape[0]
        deltas = np.zeros((p, b_sz))
        hvals = [np.zeros((b_sz, len(phi_idx), noise_dim)) for _ in range(p)]
        hcum = [np.zeros((b_sz, noise_dim)) for _ in range(p)]
        brvals = {key: np.zeros((b_sz, len(phi_idx), noise_dim)) for key in pair_keys}
        brcum = {key: np.zeros((b_sz, noise_dim)) for key in pair_keys}
        omega = np.zeros((b_sz, len(phi_idx), noise_dim))
        omega_cum = np.zeros((b_sz, noise_dim))
        state = engine.BlockPaths(mf, x0, incs, h, need_flow=True)

        def snapshot(k):
            for slot, kk in enumerate(phi_idx):
                if kk == k:
                    omega[:, slot] = omega_cum
                    for i in range(p):
                        hvals[i][:, slot] = hcum[i]
                    for key in pair_keys:
                        brvals[key][:, slot] = brcum[key]

        for k in range(n_steps):
            snapshot(k)
            flow_prev = state.flow
            x_prev = state.x
            y = mf.y_matrix(x_prev)
            db = incs[:, k]
            jb = {}
            hdots = []
            for i, s in enumerate(h_specs):
                if isinstance(s, DeterministicH):
                    hdots.append(np.broadcast_to(det_dots[i][k], (b_sz, noise_dim)))
                else:
                    v = (flow_prev @ np.asarray(s.b, float)[:, None])[..., 0]
                    jb[i] = v
                    hdots.append(rho_vals[i][k] * (y @ v[..., None])[..., 0])
            for key in pair_keys:
                i, j = key
                tors_here = mf.torsion(x_prev, jb[i], jb[j])
                second = (flow_prev @ (rho_mid[i][k] * tors0[key])[:, None])[..., 0]
                tangent = rho_vals[i][k] * (rho_mid[i][k] * tors_here + second)
                brcum[key] += ((y @ tangent[..., None])[..., 0]) * h
            state.advance()
            for i in range(p):
                deltas[i] += np.sum(hdots[i] * db, axis=-1)
                hcum[i] += hdots[i] * h
            omega_cum += db
        snapshot(n_steps)

        dphi = phi.dvalue(omega, hvals)
        phidiv = np.zeros(b_sz)
        for j in range(p):
            sign = -1.0 if (j + 1) % 2 else 1.0
            rest = [hvals[i] for i in range(p) if i != j]
            phidiv += sign * deltas[j] * phi.value(omega, rest)
        for (i, j) in pair_keys:
            sign = -((-1.0) ** (i + j))
            rest = [hvals[x] for x in range(p) if x not in (i, j)]
            phidiv += sign * phi.value(omega, [brvals[(i, j)]] + rest)
        return {"dphi": dphi, "phidiv": phidiv}

    return engine.run_kernel(kernel, mc, n_steps, noise_dim)
