"""Monte Carlo estimators for heat-semigroup derivative identities.

Each estimator runs a block-vectorized kernel over the configured number of
paths and reports the sample mean with its standard error.  Reports retain
per-path samples so that estimators sharing (seed, paths, step, horizon,
manifold) can be compared path by path: the identities under test hold in
law, and common-noise pairing removes most of the Monte Carlo variance.

Integrand conventions (shared with the path-level layer): left-point rule,
dx-integrals against the martingale increments X(x_k) dB_k, and the
conditional-expectation transports (damped by the SDE-connection coefficient,
which is the Levi-Civita Weitzenbock damping on gradient systems and plain
group translation on the invariant group systems).

Block kernels exploit two structural facts about the catalogue geometries,
both enforced against the generic path-level implementations by the test
suite: the degree-q curvature corrections are constant scalars, and the
connection torsions are invariant under the flow.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import engine
from .forms import FormCatalogEntry
from .geometry import (RotationGroup, quat_embed, right_mult_matrix,
                       rotation_matrix)
from .multilinear import MultiVector, interior_torsion
from .wiener import ScalarSchedule


def config_digest(payload: dict) -> str:
    """Stable 64-bit hex digest of a canonical-JSON config payload."""
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        raise TypeError(f"not serializable: {o!r}")

    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=default)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class EstimatorReport:
    """Mean, standard error and provenance of one formula evaluation."""

    formula_id: str
    manifold: str
    q: int
    t: float
    h: float
    n_paths: int
    seed: int
    value: float
    stderr: float
    config_digest: str
    samples: Optional[np.ndarray] = field(default=None, repr=False)
    target: Optional[float] = None
    target_provenance: Optional[str] = None

    def to_record(self):
        rec = {k: getattr(self, k) for k in
               ("formula_id", "manifold", "q", "t", "h", "n_paths", "seed",
                "value", "stderr", "target", "target_provenance", "config_digest")}
        return rec


@dataclass
class PairedReport:
    """Common-noise difference of two estimator runs."""

    formula_a: str
    formula_b: str
    mean_diff: float
    se_diff: float
    n_paths: int


def paired_compare(report_a: EstimatorReport, report_b: EstimatorReport):
    """Per-path difference statistics for two runs on common noise."""
    for attr in ("manifold", "t", "h", "n_paths", "seed"):
        if getattr(report_a, attr) != getattr(report_b, attr):
            raise ValueError(f"paired comparison config mismatch on {attr}: "
                             f"{getattr(report_a, attr)} != {getattr(report_b, attr)}")
    if report_a.samples is None or report_b.samples is None:
        raise ValueError("paired comparison needs per-path samples")
    diff = report_a.samples - report_b.samples
    mean, se = engine.mean_se(diff)
    return PairedReport(report_a.formula_id, report_b.formula_id,
                        mean, se, report_a.n_paths)


# ---------------------------------------------------------------------------
# shared kernel helpers

def _resolve_start(mf, x0):
    x0 = mf.default_start() if x0 is None else np.asarray(x0, dtype=float)
    return mf.check_point(x0)


def _dense(v):
    if isinstance(v, MultiVector):
        return np.asarray(v.tensor, dtype=float)
    return np.asarray(v, dtype=float)


def _wedge_vectors(vectors):
    return MultiVector.from_vectors(*vectors).tensor if len(vectors) > 1 \
        else np.asarray(vectors[0], dtype=float)


def _push_q(base, tensor, q):
    """Apply the same block of matrices to every slot of a low-degree tensor."""
    if q == 0:
        return None
    if q == 1:
        return (base @ tensor[..., None])[..., 0] if tensor.ndim == 1 \
            else np.einsum("bij,bj->bi", base, tensor)
    if q == 2:
        t = tensor if tensor.ndim == 3 else np.broadcast_to(tensor, base.shape[:1] + tensor.shape)
        return base @ t @ np.swapaxes(base, -1, -2)
    raise NotImplementedError("block kernels support degree <= 2")


def _contract_first(m_cov, tensor2):
    """iota along the metric covector: contract the first slot of (B, d, d)."""
    return (m_cov[:, None, :] @ tensor2)[:, 0, :]


def _breve_scalars(mf, q, times):
    return np.exp(-0.5 * mf.breve_weitz_coeff(q) * times)


def _report(formula_id, mf, entry, q, t, mc, samples, extra=None, rho=None):
    mean, se = engine.mean_se(samples)
    payload = {"formula": formula_id, "manifold": mf.name, "form": entry.name,
               "q": q, "t": t, "h": mc.h, "n_paths": mc.n_paths, "seed": mc.seed,
               "rho": getattr(rho, "name", None)}
    if extra:
        payload.update(extra)
    return EstimatorReport(formula_id, mf.name, q, t, mc.h, mc.n_paths, mc.seed,
                           mean, se, config_digest(payload), samples=samples)


def _int_rho(rho, t):
    val = float(rho.integral(t))
    if abs(val) < 1e-14:
        raise ValueError(f"schedule {rho.name!r} has vanishing integral on [0, {t}]")
    return val


# ---------------------------------------------------------------------------
# direct (reference) estimators

def direct_pullback(mf, entry: FormCatalogEntry, t, v0, mc: engine.MCConfig,
                    x0=None):
    """Mean of the form evaluated on the flow-pushed multivector at time t."""
    q = entry.degree
    x0 = _resolve_start(mf, x0)
    v0d = _dense(v0) if q else None
    n_steps = mc.n_steps(t)

    def kernel(first, incs):
        state = engine.BlockPaths(mf, x0, incs, mc.h, need_flow=q > 0)
        for _ in range(n_steps):
            state.advance()
        tensor = _push_q(state.flow, v0d, q) if q else None
        return {"value": np.asarray(entry.value(state.x, tensor), dtype=float)}

    samples = engine.run_kernel(kernel, mc, n_steps, mf.noise_dim)["value"]
    return _report("direct_pullback", mf, entry, q, t, mc, samples)


def direct_damped(mf, entry: FormCatalogEntry, t, v0, mc: engine.MCConfig,
                  x0=None):
    """Mean of the form on the damped-transported multivector (the
    conditional expectation of the flow push-forward)."""
    q = entry.degree
    x0 = _resolve_start(mf, x0)
    v0d = _dense(v0) if q else None
    n_steps = mc.n_steps(t)
    s_q = float(_breve_scalars(mf, q, np.array([t]))[0]) if q else 1.0

    def kernel(first, incs):
        state = engine.BlockPaths(mf, x0, incs, mc.h, need_par=True, need_hat=True)
        for _ in range(n_steps):
            state.advance()
        tensor = s_q * _push_q(state.cond_par, v0d, q) if q else None
        return {"value": np.asarray(entry.value(state.x, tensor), dtype=float)}

    samples = engine.run_kernel(kernel, mc, n_steps, mf.noise_dim)["value"]
    return _report("direct_damped", mf, entry, q, t, mc, samples)


# ---------------------------------------------------------------------------
# derivative estimators

def bismut_q0(mf, entry: FormCatalogEntry, t, v0, rho: ScalarSchedule,
              mc: engine.MCConfig, x0=None):
    """Derivative of the function semigroup along v0, without differentiating f:

        d(P_t f)(v0) = (int_0^t rho)^{-1} E[ f(x_t)
                        int_0^t rho(s) <W_s v0, X(x_s) dB_s> ].
    """
    if entry.degree != 0:
        raise ValueError("bismut_q0 needs a degree-0 entry")
    x0 = _resolve_start(mf, x0)
    v0 = mf.check_tangent(x0, np.asarray(v0, dtype=float))
    n_steps = mc.n_steps(t)
    times = np.arange(n_steps + 1) * mc.h
    s1 = _breve_scalars(mf, 1, times)
    rho_k = rho(times[:-1])
    inv_rho = 1.0 / _int_rho(rho, t)
    scale = mf.metric_scale

    def kernel(first, incs):
        state = engine.BlockPaths(mf, x0, incs, mc.h, need_par=True, need_hat=True)
        acc = np.zeros(incs.shape[0])
        for k in range(n_steps):
            base_prev = state.cond_par
            _, _, mart = state.advance()
            wv = (base_prev @ v0[:, None])[..., 0]
            acc += (rho_k[k] * s1[k] * scale) * np.sum(wv * mart, axis=-1)
        f_val = np.asarray(entry.value(state.x, None), dtype=float)
        return {"value": f_val * acc * inv_rho}

    samples = engine.run_kernel(kernel, mc, n_steps, mf.noise_dim)["value"]
    return _report("bismut_q0", mf, entry, 0, t, mc, samples, rho=rho)


def _torsion_contract2(mf, x, tensor2):
    """iota_T of a (B, d, d) two-vector at points x: sum_{i<j} T(e_i,e_j) T_{ij}."""
    d = mf.point_dim
    out = np.zeros(tensor2.shape[:1] + (d,))
    p = mf.tangent_projector(x)
    for i in range(d):
        for j in range(i + 1, d):
            tv = mf.torsion(x, p[..., :, i], p[..., :, j])
            out += tv * tensor2[:, i, j][:, None]
    return out


def bismut_intrinsic(mf, entry: FormCatalogEntry, t, v0, rho: ScalarSchedule,
                     mc: engine.MCConfig, x0=None):
    """Intrinsic derivative formula for the form semigroup:

        d(P_t phi)(V0) = (int rho)^{-1} E phi( W_t^(q) int_0^t rho(s)
                         (W_s^(q))^{-1} iota_{<-, X dB_s>} W_s^(q+1)(V0) )
                         - E phi( W_t^(q) iota_T V0 )

    for flow-invariant torsion (the contraction term vanishes on gradient
    systems).  V0 is a (q+1)-vector at the start point.
    """
    q = entry.degree
    if q > 1:
        raise NotImplementedError("block kernel supports q <= 1")
    if not mf.torsion_flow_invariant:
        raise ValueError(f"{mf.name}: torsion must vanish or be flow-invariant")
    x0 = _resolve_start(mf, x0)
    v0d = _dense(v0)
    if v0d.ndim != q + 1:
        raise ValueError(f"V0 must be a (q+1)-vector, got degree {v0d.ndim}")
    n_steps = mc.n_steps(t)
    times = np.arange(n_steps + 1) * mc.h
    s_q = _breve_scalars(mf, q, times)
    s_q1 = _breve_scalars(mf, q + 1, times)
    rho_k = rho(times[:-1])
    inv_rho = 1.0 / _int_rho(rho, t)
    scale = mf.metric_scale
    tor0 = None
    if not mf.torsion_is_zero and q + 1 >= 2:
        tor0 = interior_torsion(mf, x0, MultiVector(v0d)).tensor

    def kernel(first, incs):
        state = engine.BlockPaths(mf, x0, incs, mc.h, need_par=True, need_hat=True)
        b_sz = incs.shape[0]
        acc = np.zeros((b_sz,) if q == 0 else (b_sz, mf.point_dim))
        for k in range(n_steps):
            base_prev = state.cond_par
            _, _, mart = state.advance()
            m_cov = scale * mart
            w = rho_k[k] * s_q1[k] / s_q[k]
            if q == 0:
                wv = (base_prev @ v0d[:, None])[..., 0]
                acc += w * np.sum(wv * m_cov, axis=-1)
            else:
                tt = base_prev @ v0d @ np.swapaxes(base_prev, -1, -2)
                c = _contract_first(m_cov, tt)
                acc += w * np.einsum("bji,bj->bi", base_prev, c)
        if q == 0:
            vals = np.asarray(entry.value(state.x, None), dtype=float) * acc
        else:
            out = s_q[n_steps] * np.einsum("bij,bj->bi", state.cond_par, acc)
            vals = np.asarray(entry.value(state.x, out), dtype=float)
        vals = vals * inv_rho
        if tor0 is not None:
            pushed = s_q[n_steps] * _push_q(state.cond_par, tor0, q)
            vals = vals - np.asarray(entry.value(state.x, pushed), dtype=float)
        return {"value": vals}

    samples = engine.run_kernel(kernel, mc, n_steps, mf.noise_dim)["value"]
    return _report("bismut_intrinsic", mf, entry, q, t, mc, samples, rho=rho)


def bismut_general_intrinsic(mf, entry: FormCatalogEntry, t, v0,
                             rho: ScalarSchedule, mc: engine.MCConfig, x0=None):
    """Intrinsic formula with the torsion contraction accumulated along the
    path (local evaluation under the transports) instead of the invariant
    shortcut; coincides with bismut_intrinsic pathwise on gradient systems.
    """
    q = entry.degree
    if q > 1:
        raise NotImplementedError("block kernel supports q <= 1")
    x0 = _resolve_start(mf, x0)
    v0d = _dense(v0)
    n_steps = mc.n_steps(t)
    times = np.arange(n_steps + 1) * mc.h
    s_q = _breve_scalars(mf, q, times)
    s_q1 = _breve_scalars(mf, q + 1, times)
    rho_k = rho(times[:-1])
    inv_rho = 1.0 / _int_rho(rho, t)
    scale = mf.metric_scale
    with_torsion = (not mf.torsion_is_zero) and q + 1 >= 2

    def kernel(first, incs):
        state = engine.BlockPaths(mf, x0, incs, mc.h, need_par=True, need_hat=True)
        b_sz = incs.shape[0]
        acc = np.zeros((b_sz,) if q == 0 else (b_sz, mf.point_dim))
        tor_acc = np.zeros((b_sz, mf.point_dim)) if with_torsion else None
        for k in range(n_steps):
            base_prev = state.cond_par
            x_prev = state.x
            _, _, mart = state.advance()
            m_cov = scale * mart
            w = rho_k[k] * s_q1[k] / s_q[k]
            if q == 0:
                wv = (base_prev @ v0d[:, None])[..., 0]
                acc += w * np.sum(wv * m_cov, axis=-1)
            else:
                tt = base_prev @ v0d @ np.swapaxes(base_prev, -1, -2)
                c = _contract_first(m_cov, tt)
                acc += w * np.einsum("bji,bj->bi", base_prev, c)
                if with_torsion:
                    c_tor = _torsion_contract2(mf, x_prev, s_q1[k] * tt)
                    tor_acc += (rho_k[k] * mc.h / s_q[k]) * \
                        np.einsum("bji,bj->bi", base_prev, c_tor)
        if q == 0:
            vals = np.asarray(entry.value(state.x, None), dtype=float) * acc
        else:
            main = acc if tor_acc is None else acc - tor_acc
            out = s_q[n_steps] * np.einsum("bij,bj->bi", state.cond_par, main)
            vals = np.asarray(entry.value(state.x, out), dtype=float)
        return {"value": vals * inv_rho}

    samples = engine.run_kernel(kernel, mc, n_steps, mf.noise_dim)["value"]
    return _report("bismut_general_intrinsic", mf, entry, q, t, mc, samples, rho=rho)


def bismut_flow(mf, entry: FormCatalogEntry, t, b_vectors, rho: ScalarSchedule,
                mc: engine.MCConfig, x0=None):
    """Non-intrinsic derivative formula built from the flow itself:

        (int rho) d(P_t phi)(b^1 ^ ... ^ b^{q+1})
          = E sum_j (-1)^{j+1} (int rho(s) <T xi_s b^j, X dB_s>)
                    xi_t^* phi (b-rest)
          - E sum_{i<j} (-1)^{i+j+1} xi_t^* phi( C_ij ^ b-rest ),

    with C_ij the rho-weighted accumulated pullback of the torsion of the
    flow-pushed pair (constant by flow invariance; identically zero on
    gradient systems, where the torsion sum is dropped exactly).
    """
    q = entry.degree
    if q > 1:
        raise NotImplementedError("block kernel supports q <= 1")
    if len(b_vectors) != q + 1:
        raise ValueError(f"need q+1 = {q + 1} start vectors")
    x0 = _resolve_start(mf, x0)
    bs = [mf.check_tangent(x0, np.asarray(b, dtype=float)) for b in b_vectors]
    n_steps = mc.n_steps(t)
    times = np.arange(n_steps + 1) * mc.h
    rho_k = rho(times[:-1])
    int_rho = _int_rho(rho, t)
    scale = mf.metric_scale

    torsion_pairs = []
    if not mf.torsion_is_zero:
        for i in range(q + 1):
            for j in range(i + 1, q + 1):
                c_ij = int_rho * mf.torsion(x0, bs[i], bs[j])
                rest = [bs[r] for r in range(q + 1) if r not in (i, j)]
                sign = (-1.0) ** (i + j + 1)      # 1-based (i+1)+(j+1)+1 has same parity
                torsion_pairs.append((sign, _wedge_vectors([c_ij] + rest)))

    def kernel(first, incs):
        state = engine.BlockPaths(mf, x0, incs, mc.h, need_flow=True)
        b_sz = incs.shape[0]
        ito = np.zeros((q + 1, b_sz))
        for k in range(n_steps):
            flow_prev = state.flow
            _, _, mart = state.advance()
            m_cov = scale * mart
            for i, b in enumerate(bs):
                jb = (flow_prev @ b[:, None])[..., 0]
                ito[i] += rho_k[k] * np.sum(jb * m_cov, axis=-1)
        vals = np.zeros(b_sz)
        for j in range(q + 1):
            sign = (-1.0) ** j                    # (-1)^{j+1} with 1-based j
            rest = [bs[r] for r in range(q + 1) if r != j]
            tensor = _push_q(state.flow, _wedge_vectors(rest), q) if q else None
            vals += sign * ito[j] * np.asarray(entry.value(state.x, tensor), dtype=float)
        for sign, wtensor in torsion_pairs:
            pushed = _push_q(state.flow, wtensor, q)
            vals -= sign * np.asarray(entry.value(state.x, pushed), dtype=float)
        return {"value": vals / int_rho}

    samples = engine.run_kernel(kernel, mc, n_steps, mf.noise_dim)["value"]
    return _report("bismut_flow", mf, entry, q, t, mc, samples, rho=rho)


def bismut_lie_group(mf, entry: FormCatalogEntry, t, b_algebra,
                     rho: ScalarSchedule, mc: engine.MCConfig):
    """Group form of the derivative formula (bi-invariant metric, start at the
    identity): the adjoint-rotated noise integral wedged against the
    right-translation pullback, plus the Lie-bracket sum.
    """
    if not isinstance(mf, RotationGroup) or mf.mode != "left":
        raise ValueError("the group estimator runs on the left-invariant rotation system")
    q = entry.degree
    if q > 1:
        raise NotImplementedError("block kernel supports q <= 1")
    bs = [np.asarray(b, dtype=float) for b in b_algebra]
    if len(bs) != q + 1:
        raise ValueError(f"need q+1 = {q + 1} algebra vectors")
    x0 = mf.default_start()
    n_steps = mc.n_steps(t)
    times = np.arange(n_steps + 1) * mc.h
    rho_k = rho(times[:-1])
    inv_rho = 1.0 / _int_rho(rho, t)
    b_dense = _wedge_vectors(bs)

    bracket_terms = []
    for i in range(q + 1):
        for j in range(i + 1, q + 1):
            br = mf.bracket(bs[i], bs[j])
            rest = [bs[r] for r in range(q + 1) if r not in (i, j)]
            sign = -((-1.0) ** (i + j))           # -(-1)^{i+j}, 1-based
            bracket_terms.append((sign, _wedge_vectors([br] + rest)))

    def kernel(first, incs):
        state = engine.BlockPaths(mf, x0, incs, mc.h)
        b_sz = incs.shape[0]
        acc = np.zeros((b_sz, 3))
        for k in range(n_steps):
            x_prev = state.x
            db = incs[:, k]
            state.advance()
            ad = rotation_matrix(x_prev)
            acc += rho_k[k] * (ad @ db[..., None])[..., 0]
        x_t = state.x
        tr = right_mult_matrix(x_t)       # right translation: T_e -> T_{x_t}
        if q == 0:
            contr = np.sum(acc * b_dense, axis=-1)
            vals = np.asarray(entry.value(x_t, None), dtype=float) * contr * inv_rho
        else:
            c = _contract_first(acc, np.broadcast_to(b_dense, (b_sz, 3, 3)))
            amb = (tr @ quat_embed(c)[..., None])[..., 0]
            vals = np.asarray(entry.value(x_t, amb), dtype=float) * inv_rho
            for sign, wtensor in bracket_terms:
                amb_b = (tr @ quat_embed(wtensor)[..., None])[..., 0]
                vals += sign * np.asarray(entry.value(x_t, amb_b), dtype=float)
        return {"value": vals}

    samples = engine.run_kernel(kernel, mc, n_steps, mf.noise_dim)["value"]
    return _report("bismut_lie_group", mf, entry, q, t, mc, samples, rho=rho)


def _right_translation_matrix(x):
    """Ambient matrix of right translation by x (tangent at identity -> at x)."""
    from .geometry import right_mult_matrix
    return right_mult_matrix(x)
