"""Model geometries for the stochastic-flow laboratory.

Each manifold bundles the coefficients of a Stratonovich SDE
``dx = X(x) o dB + A(x) dt`` with the metric, connection and curvature data
used by the transport and estimator layers:

* unit spheres S^1, S^2, S^3 in R^{n+1} and the flat Clifford torus in R^4,
  driven as gradient systems (X = orthogonal projection of the ambient
  noise, Y = inclusion, Levi-Civita connection, zero torsion);
* SO(3), realised as unit quaternions, with left-invariant, right-invariant
  or two-sided ("biinvariant", symmetric-space) driving noise.  The left and
  right systems carry the flat Cartan connections, whose torsion is minus or
  plus the Lie bracket; the two-sided system induces the Levi-Civita
  connection of (half) the bi-invariant metric.

Points and tangent vectors are plain ndarrays in ambient coordinates.  Every
operation accepts a single point ``(d,)`` or a batch ``(B, d)``; operators are
returned as ambient matrices supported on the tangent spaces.  All curvature
operators on these geometries are constant multiples of the identity, which
the transport layer exploits; the dense matrices are still exposed so tests
can check the scalar fast path against matrix exponentials.
"""

from __future__ import annotations

import numpy as np


class OffManifoldError(ValueError):
    """Point violates the manifold constraint beyond tolerance."""


class NotTangentError(ValueError):
    """Vector is not tangent at its base point beyond tolerance."""


class DegreeError(ValueError):
    """Form/multivector degree not supported on this manifold."""


POINT_TOL = 1e-8
TANGENT_TOL = 1e-8


def _unit(v, axis=-1):
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def _outer(a, b):
    return a[..., :, None] * b[..., None, :]


def _plane_rotation(x0, x1, d):
    """Ambient rotation mapping x0 to x1 in their common plane (unit vectors).

    Identity on the orthogonal complement; for unit-sphere geometries this is
    the Levi-Civita parallel transport along the connecting geodesic.
    """
    c = np.clip(_dot(x0, x1), -1.0, 1.0)
    w = x1 - c[..., None] * x0
    s = np.linalg.norm(w, axis=-1)
    # guard the coincident case; sin(theta) = |w| for unit vectors
    safe = np.where(s < 1e-30, 1.0, s)
    w_hat = w / safe[..., None]
    eye = np.broadcast_to(np.eye(d), x0.shape[:-1] + (d, d))
    r = (eye
         + (c - 1.0)[..., None, None] * (_outer(x0, x0) + _outer(w_hat, w_hat))
         + s[..., None, None] * (_outer(w_hat, x0) - _outer(x0, w_hat)))
    degenerate = (s < 1e-30)[..., None, None]
    return np.where(degenerate, eye, r)


# ---------------------------------------------------------------------------
# quaternion helpers (scalar-first convention q = (w, x, y, z))

def quat_mul(p, q):
    pw, px, py, pz = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    qw, qx, qy, qz = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ], axis=-1)


def quat_conj(q):
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_embed(a):
    """R^3 -> imaginary quaternions."""
    out = np.zeros(a.shape[:-1] + (4,))
    out[..., 1:] = a
    return out


def quat_imag(q):
    return q[..., 1:]


def left_mult_matrix(p):
    """Matrix L with L @ q = p * q."""
    w, x, y, z = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    rows = [[w, -x, -y, -z],
            [x, w, -z, y],
            [y, z, w, -x],
            [z, -y, x, w]]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def right_mult_matrix(p):
    """Matrix R with R @ q = q * p."""
    w, x, y, z = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    rows = [[w, -x, -y, -z],
            [x, w, z, -y],
            [y, -z, w, x],
            [z, y, -x, w]]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def rotation_matrix(q):
    """3x3 rotation matrix of a unit quaternion (the adjoint action)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [[1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


# ---------------------------------------------------------------------------


class Manifold:
    """Base class: SDE coefficients plus metric/curvature data.

    Attributes
    ----------
    dim : intrinsic dimension n
    point_dim : length of ambient coordinate vectors
    noise_dim : dimension m of the driving Brownian motion
    metric_scale : constant c with <u, v>_x = c * (u . v)_ambient
    sectional : constant sectional curvature of the metric (0 where flat)
    """

    name = "abstract"
    dim = 0
    point_dim = 0
    noise_dim = 0
    metric_scale = 1.0
    sectional = 0.0
    torsion_is_zero = True
    torsion_flow_invariant = True

    # -- constraint ---------------------------------------------------------

    def project(self, x):
        raise NotImplementedError

    def constraint_violation(self, x):
        raise NotImplementedError

    def check_point(self, x, tol=POINT_TOL):
        x = np.asarray(x, dtype=float)
        v = np.max(self.constraint_violation(x))
        if v > tol:
            raise OffManifoldError(
                f"point violates {self.name} constraint by {v:.3e} (tol {tol:.1e})")
        return x

    def check_tangent(self, x, v, tol=TANGENT_TOL):
        x = self.check_point(x)
        v = np.asarray(v, dtype=float)
        p = self.tangent_projector(x)
        resid = np.max(np.abs(v - (p @ v[..., None])[..., 0]))
        if resid > tol:
            raise NotTangentError(
                f"vector off tangent space by {resid:.3e} (tol {tol:.1e})")
        return v

    # -- SDE coefficients ---------------------------------------------------

    def tangent_projector(self, x):
        """Ambient-orthogonal projector onto T_x M, shape (..., d, d)."""
        raise NotImplementedError

    def x_matrix(self, x):
        """X(x) as an (..., d, m) matrix."""
        raise NotImplementedError

    def y_matrix(self, x):
        """Y(x) = X(x)^*, the metric right-inverse, as an (..., m, d) matrix."""
        return self.metric_scale * np.swapaxes(self.x_matrix(x), -1, -2)

    def x_apply(self, x, e):
        """Validated X(x)e for a single point; rejects off-manifold x."""
        x = self.check_point(x)
        return (self.x_matrix(x) @ np.asarray(e, dtype=float)[..., None])[..., 0]

    def y_apply(self, x, v):
        """Validated Y_x v for a tangent vector v."""
        v = self.check_tangent(x, v)
        return (self.y_matrix(np.asarray(x, dtype=float)) @ v[..., None])[..., 0]

    def metric(self, x, u, v):
        return self.metric_scale * _dot(u, v)

    def drift_vector(self, x):
        """A(x); zero unless the geometry carries an invariant drift."""
        return np.zeros(np.shape(x))

    def step_field(self, x, db, h):
        """X(x) db + A(x) h, the ambient Euler increment field."""
        raise NotImplementedError

    def step_field_jac(self, x, v_cols, db, h):
        """Directional derivative of step_field in each column of v_cols."""
        raise NotImplementedError

    def martingale_increment(self, x, db):
        """X(x) db, the martingale part of the solution increment."""
        return (self.x_matrix(x) @ db[..., None])[..., 0]

    # -- connection / curvature --------------------------------------------

    def torsion(self, x, u, v):
        """Torsion of the SDE-induced metric connection."""
        return np.zeros(np.broadcast(np.asarray(u), np.asarray(v)).shape)

    def lw_torsion(self, x, u, v):
        """Validated torsion for single tangent vectors."""
        u = self.check_tangent(x, u)
        v = self.check_tangent(x, v)
        return self.torsion(np.asarray(x, dtype=float), u, v)

    def adjoint_connection_correction(self, x, u, v):
        """Difference tensor taking the SDE connection to its adjoint."""
        return -self.lw_torsion(x, u, v)

    def weitz_coeff(self, q):
        """Scalar c_q with curvature-correction operator c_q * Id on q-vectors."""
        if not 0 <= q <= self.dim:
            raise DegreeError(f"degree {q} out of range for {self.name} (n={self.dim})")
        return float(q * (self.dim - q) * self.sectional)

    def breve_weitz_coeff(self, q):
        """Damping coefficient of the SDE-connection transports."""
        return self.weitz_coeff(q)

    def ricci_matrix(self, x):
        """Ricci operator on T_x as an ambient matrix."""
        return self.weitz_coeff(1) * self.tangent_projector(x)

    def curvature_apply2(self, x, t2):
        """Curvature operator on 2-vectors given as dense (..., d, d) tensors."""
        p = self.tangent_projector(x)
        pt = p @ t2 @ np.swapaxes(p, -1, -2)
        return self.sectional * 0.5 * (pt - np.swapaxes(pt, -1, -2))

    def curvature_matrix2(self, x):
        """Dense (d^2, d^2) matrix of the curvature operator (single point)."""
        d = self.point_dim
        out = np.empty((d * d, d * d))
        basis = np.zeros((d, d))
        for i in range(d):
            for j in range(d):
                basis[i, j] = 1.0
                out[:, i * d + j] = self.curvature_apply2(x, basis).ravel()
                basis[i, j] = 0.0
        return out

    def weitzenbock_apply(self, x, q, tq):
        """Weitzenbock curvature operator on dense degree-q tensors.

        Degree 0 vanishes, degree 1 is the Ricci operator, degree 2 is built
        from Ricci and the curvature operator through the two-form identity
        R^2 = Ric (x) 1 + 1 (x) Ric - 2 R; degree 3 falls back to the constant
        coefficient (zero on all catalogue geometries).
        """
        if not 0 <= q <= self.dim:
            raise DegreeError(f"degree {q} out of range for {self.name} (n={self.dim})")
        tq = np.asarray(tq, dtype=float)
        if q == 0:
            return np.zeros(np.shape(tq))
        if q == 1:
            return (self.ricci_matrix(x) @ tq[..., None])[..., 0]
        if q == 2:
            rc = self.ricci_matrix(x)
            both = rc @ tq + tq @ np.swapaxes(rc, -1, -2)
            return both - 2.0 * self.curvature_apply2(x, tq)
        return self.weitz_coeff(q) * tq

    def weitzenbock_matrix(self, x, q):
        """Dense matrix of the degree-q Weitzenbock operator (single point)."""
        d = self.point_dim
        if q == 0:
            return np.zeros((1, 1))
        if q == 1:
            return self.ricci_matrix(x)
        n = d ** q
        out = np.empty((n, n))
        basis = np.zeros((d,) * q)
        it = np.ndindex(*basis.shape)
        for col, idx in enumerate(it):
            basis[idx] = 1.0
            out[:, col] = self.weitzenbock_apply(x, q, basis).ravel()
            basis[idx] = 0.0
        return out

    # -- transports ---------------------------------------------------------

    def transport_step(self, x0, x1):
        """Levi-Civita parallel transport T_{x0} -> T_{x1} (ambient orthogonal)."""
        raise NotImplementedError

    def breve_transport_step(self, x0, x1):
        """Parallel transport of the SDE-induced connection."""
        return self.transport_step(x0, x1)

    def hat_transport_step(self, x0, x1):
        """Parallel transport of the adjoint connection."""
        return self.transport_step(x0, x1)

    # -- misc ---------------------------------------------------------------

    def geodesic(self, x, v, t):
        """Point reached after time t along the geodesic from x with velocity v."""
        raise NotImplementedError

    def tangent_basis(self, x):
        """Metric-orthonormal basis of T_x as columns of a (d, n) matrix."""
        x = np.asarray(x, dtype=float)
        p = self.tangent_projector(x)
        w, vecs = np.linalg.eigh(p)
        cols = vecs[:, w > 0.5]
        return cols / np.sqrt(self.metric_scale)

    def default_start(self):
        raise NotImplementedError


class Sphere(Manifold):
    """Unit sphere S^n in R^{n+1}, driven as a gradient system (m = n + 1)."""

    def __init__(self, n):
        if n not in (1, 2, 3):
            raise ValueError("sphere dimension must be 1, 2 or 3")
        self.dim = n
        self.point_dim = n + 1
        self.noise_dim = n + 1
        self.name = f"sphere{n}"
        self.sectional = 1.0 if n >= 2 else 0.0

    def project(self, x):
        return _unit(np.asarray(x, dtype=float))

    def constraint_violation(self, x):
        return np.abs(np.linalg.norm(np.asarray(x, dtype=float), axis=-1) - 1.0)

    def tangent_projector(self, x):
        d = self.point_dim
        return np.eye(d) - _outer(x, x)

    def x_matrix(self, x):
        return self.tangent_projector(x)

    def step_field(self, x, db, h):
        return db - _dot(x, db)[..., None] * x

    def step_field_jac(self, x, v_cols, db, h):
        coef = np.swapaxes(v_cols, -1, -2) @ db[..., None]          # (..., k, 1)
        term1 = x[..., :, None] * np.swapaxes(coef, -1, -2)         # (..., d, k)
        term2 = _dot(db, x)[..., None, None] * v_cols
        return -(term1 + term2)

    def transport_step(self, x0, x1):
        return _plane_rotation(x0, x1, self.point_dim)

    def geodesic(self, x, v, t):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        speed = np.linalg.norm(v, axis=-1, keepdims=True)
        if np.all(speed < 1e-300):
            return np.broadcast_to(x, v.shape).copy()
        theta = speed * t
        return np.cos(theta) * x + np.sin(theta) * v / speed

    def default_start(self):
        if self.dim == 1:
            a = np.pi / 3
            return np.array([np.cos(a), np.sin(a)])
        if self.dim == 2:
            return np.array([0.6, 0.0, 0.8])
        return _unit(np.array([0.5, 0.3, 0.1, 0.8]))


class CliffordTorus(Manifold):
    """Flat torus S^1 x S^1 in R^4, both circle factors of unit radius."""

    dim = 2
    point_dim = 4
    noise_dim = 4
    name = "clifford_torus"
    sectional = 0.0
    _slices = (slice(0, 2), slice(2, 4))

    def _factor_units(self, x):
        n = np.zeros(x.shape[:-1] + (2, 4))
        for f, s in enumerate(self._slices):
            n[..., f, s] = _unit(x[..., s])
        return n

    def project(self, x):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        for s in self._slices:
            out[..., s] = _unit(x[..., s])
        return out

    def constraint_violation(self, x):
        x = np.asarray(x, dtype=float)
        v = [np.abs(np.linalg.norm(x[..., s], axis=-1) - 1.0) for s in self._slices]
        return np.maximum(v[0], v[1])

    def tangent_projector(self, x):
        n = self._factor_units(x)
        return (np.eye(4) - _outer(n[..., 0, :], n[..., 0, :])
                - _outer(n[..., 1, :], n[..., 1, :]))

    def x_matrix(self, x):
        return self.tangent_projector(x)

    def step_field(self, x, db, h):
        out = np.array(db, dtype=float, copy=True)
        for s in self._slices:
            nf = x[..., s]
            out[..., s] -= _dot(nf, db[..., s])[..., None] * nf
        return out

    def step_field_jac(self, x, v_cols, db, h):
        out = np.zeros(np.shape(v_cols))
        for s in self._slices:
            nf = x[..., s]
            vf = v_cols[..., s, :]
            dbf = db[..., s]
            coef = np.swapaxes(vf, -1, -2) @ dbf[..., None]
            out[..., s, :] -= nf[..., :, None] * np.swapaxes(coef, -1, -2)
            out[..., s, :] -= _dot(dbf, nf)[..., None, None] * vf
        return out

    def transport_step(self, x0, x1):
        out = np.zeros(np.shape(x0)[:-1] + (4, 4))
        for s in self._slices:
            out[..., s, s] = _plane_rotation(x0[..., s], x1[..., s], 2)
        return out

    def geodesic(self, x, v, t):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        out = np.empty(np.broadcast(x, v).shape)
        for s in self._slices:
            speed = np.linalg.norm(v[..., s], axis=-1, keepdims=True)
            theta = speed * t
            safe = np.where(speed < 1e-300, 1.0, speed)
            out[..., s] = np.cos(theta) * x[..., s] + np.sin(theta) * v[..., s] / safe
        return out

    def default_start(self):
        a, b = np.pi / 3, np.pi / 5
        return np.array([np.cos(a), np.sin(a), np.cos(b), np.sin(b)])


class RotationGroup(Manifold):
    """SO(3) as unit quaternions, with invariant driving noise.

    ``mode`` selects the SDE: 'left' (X(q)a = q * a, flat left Cartan
    connection, torsion -[u, v]), 'right' (X(q)a = a * q, torsion +[u, v]),
    or 'biinvariant' (two-sided symmetric-space noise in g + g, Levi-Civita
    connection of half the ambient metric).  The Lie algebra is identified
    with R^3 through a -> (0, a); under this identification the bracket is
    [a, b] = 2 a x b and the adjoint action is the rotation matrix of q.

    ``drift`` optionally adds an invariant drift vector a in g (left/right
    modes only); the flow derivative and the conditional transports are
    unchanged by it.
    """

    dim = 3
    point_dim = 4

    def __init__(self, mode, drift=None):
        if mode not in ("left", "right", "biinvariant"):
            raise ValueError(f"unknown rotation-group mode {mode!r}")
        self.mode = mode
        self.name = f"so3_{mode}"
        if mode == "biinvariant":
            if drift is not None:
                raise ValueError("invariant drift is only supported in left/right modes")
            self.noise_dim = 6
            self.metric_scale = 0.5
            self.sectional = 2.0
            self.torsion_is_zero = True
        else:
            self.noise_dim = 3
            self.metric_scale = 1.0
            self.sectional = 1.0   # Levi-Civita data of the bi-invariant metric
            self.torsion_is_zero = False
        self.torsion_flow_invariant = True
        self.drift = None if drift is None else np.asarray(drift, dtype=float)

    def project(self, x):
        return _unit(np.asarray(x, dtype=float))

    def constraint_violation(self, x):
        return np.abs(np.linalg.norm(np.asarray(x, dtype=float), axis=-1) - 1.0)

    def tangent_projector(self, x):
        return np.eye(4) - _outer(x, x)

    def x_matrix(self, x):
        if self.mode == "left":
            return left_mult_matrix(x)[..., :, 1:]
        if self.mode == "right":
            return right_mult_matrix(x)[..., :, 1:]
        return np.concatenate([right_mult_matrix(x)[..., :, 1:],
                               -left_mult_matrix(x)[..., :, 1:]], axis=-1)

    def _step_matrix(self, db, h):
        """Ambient matrix M with step field M @ x (the coefficients are linear in x)."""
        if self.mode == "left":
            w = db if self.drift is None else db + self.drift * h
            return right_mult_matrix(quat_embed(w))
        if self.mode == "right":
            w = db if self.drift is None else db + self.drift * h
            return left_mult_matrix(quat_embed(w))
        return (left_mult_matrix(quat_embed(db[..., :3]))
                - right_mult_matrix(quat_embed(db[..., 3:])))

    def step_field(self, x, db, h):
        return (self._step_matrix(db, h) @ x[..., None])[..., 0]

    def step_field_jac(self, x, v_cols, db, h):
        return self._step_matrix(db, h) @ v_cols

    def drift_vector(self, x):
        if self.drift is None:
            return np.zeros(np.shape(x))
        x = np.asarray(x, dtype=float)
        a = quat_embed(self.drift)
        return quat_mul(x, a) if self.mode == "left" else quat_mul(a, x)

    def torsion(self, x, u, v):
        if self.mode == "biinvariant":
            return np.zeros(np.broadcast(np.asarray(u), np.asarray(v)).shape)
        xc = quat_conj(np.asarray(x, dtype=float))
        a = quat_imag(quat_mul(xc, u))
        b = quat_imag(quat_mul(xc, v))
        t = 2.0 * quat_mul(np.asarray(x, dtype=float), quat_embed(np.cross(a, b)))
        return -t if self.mode == "left" else t

    def torsion_identity(self, a, b):
        """Torsion at the identity in Lie-algebra coordinates."""
        if self.mode == "biinvariant":
            return np.zeros(3)
        t = 2.0 * np.cross(a, b)
        return -t if self.mode == "left" else t

    def breve_weitz_coeff(self, q):
        if not 0 <= q <= self.dim:
            raise DegreeError(f"degree {q} out of range for {self.name}")
        if self.mode == "biinvariant":
            return self.weitz_coeff(q)
        return 0.0   # flat Cartan connections

    def transport_step(self, x0, x1):
        return _plane_rotation(x0, x1, 4)

    def breve_transport_step(self, x0, x1):
        if self.mode == "left":
            return left_mult_matrix(quat_mul(x1, quat_conj(x0)))
        if self.mode == "right":
            return right_mult_matrix(quat_mul(quat_conj(x0), x1))
        return self.transport_step(x0, x1)

    def hat_transport_step(self, x0, x1):
        if self.mode == "left":
            return right_mult_matrix(quat_mul(quat_conj(x0), x1))
        if self.mode == "right":
            return left_mult_matrix(quat_mul(x1, quat_conj(x0)))
        return self.transport_step(x0, x1)

    def geodesic(self, x, v, t):
        # bi-invariant geodesics are ambient great circles
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        speed = np.linalg.norm(v, axis=-1, keepdims=True)
        if np.all(speed < 1e-300):
            return np.broadcast_to(x, v.shape).copy()
        theta = speed * t
        return np.cos(theta) * x + np.sin(theta) * v / speed

    def ad_matrix(self, x):
        """Adjoint action on g = R^3 (the rotation matrix of x)."""
        return rotation_matrix(np.asarray(x, dtype=float))

    @staticmethod
    def bracket(a, b):
        """Lie bracket in the R^3 identification."""
        return 2.0 * np.cross(a, b)

    def algebra_tangent(self, a):
        """Tangent vector at the identity for algebra coordinates a."""
        return quat_embed(np.asarray(a, dtype=float))

    def default_start(self):
        return np.array([1.0, 0.0, 0.0, 0.0])


_REGISTRY = {
    "sphere1": lambda: Sphere(1),
    "sphere2": lambda: Sphere(2),
    "sphere3": lambda: Sphere(3),
    "clifford_torus": CliffordTorus,
    "so3_left": lambda: RotationGroup("left"),
    "so3_right": lambda: RotationGroup("right"),
    "so3_biinvariant": lambda: RotationGroup("biinvariant"),
}

MANIFOLD_NAMES = tuple(sorted(_REGISTRY))


def make_manifold(name):
    """Instantiate a catalogue manifold by name."""
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ValueError(
            f"unknown manifold {name!r}; valid names: {', '.join(MANIFOLD_NAMES)}"
        ) from None
    return factory()
