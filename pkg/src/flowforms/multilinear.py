"""Dense exterior-algebra kernel for low degree and low ambient dimension.

Multivectors of degree q <= 3 over R^d (d <= 4 in practice) are stored as
dense antisymmetric tensors in the determinant normalization: the wedge of
vectors u, v is the tensor u (x) v - v (x) u, with no 1/q! rescaling.  Forms
pair with multivectors through full contraction divided by q!, so that
(alpha ^ beta)(u ^ v) = alpha(u) beta(v) - alpha(v) beta(u).

The interior products follow the convention

    iota_l (b1 ^ ... ^ bq) = sum_j (-1)^{j+1} l(b^j) b1 ^ ... ^ hat(b^j) ^ ...

which for dense tensors is contraction of the first slot, and

    iota_T (b1 ^ ... ^ bp) = sum_{i<j} (-1)^{i+j+1} T(b^i, b^j) ^ (rest)

for an antisymmetric vector-valued pairing T such as a connection torsion.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .geometry import DegreeError

ANTISYM_TOL = 1e-12


def _perm_sign(perm):
    sign = 1
    seen = [False] * len(perm)
    for i in range(len(perm)):
        if seen[i]:
            continue
        j = i
        length = 0
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            length += 1
        if length % 2 == 0:
            sign = -sign
    return sign


def alt_sum(tensor):
    """Signed sum over all slot permutations (no normalization)."""
    degree = tensor.ndim
    if degree <= 1:
        return np.array(tensor, dtype=float, copy=True)
    out = np.zeros_like(tensor, dtype=float)
    for perm in itertools.permutations(range(degree)):
        out += _perm_sign(perm) * np.transpose(tensor, perm)
    return out


class MultiVector:
    """Dense antisymmetric tensor of fixed degree over R^d."""

    def __init__(self, tensor, check=True):
        tensor = np.asarray(tensor, dtype=float)
        self.tensor = tensor
        self.degree = tensor.ndim
        self.dim = tensor.shape[0] if self.degree else 0
        if check and self.degree >= 2:
            resid = np.max(np.abs(alt_sum(tensor) / math.factorial(self.degree) - tensor))
            scale = max(1.0, np.max(np.abs(tensor)))
            if resid > ANTISYM_TOL * scale:
                raise ValueError(f"tensor is not antisymmetric (residual {resid:.3e})")

    @classmethod
    def from_vectors(cls, *vectors):
        """Wedge of 1-vectors in the determinant normalization."""
        if not vectors:
            raise ValueError("need at least one vector")
        t = np.asarray(vectors[0], dtype=float)
        for v in vectors[1:]:
            t = np.tensordot(t, np.asarray(v, dtype=float), axes=0)
        return cls(alt_sum(t), check=False)

    def __mul__(self, c):
        return MultiVector(self.tensor * float(c), check=False)

    __rmul__ = __mul__

    def __add__(self, other):
        if self.degree != other.degree:
            raise DegreeError("cannot add multivectors of different degree")
        return MultiVector(self.tensor + other.tensor, check=False)

    def __sub__(self, other):
        return self + (-1.0) * other

    def norm(self):
        return float(np.sqrt(np.sum(self.tensor ** 2) / math.factorial(max(self.degree, 1))))


def wedge(a: MultiVector, b: MultiVector) -> MultiVector:
    """Graded-anticommutative product; degrees must sum to at most 3."""
    p, q = a.degree, b.degree
    if p + q > 3:
        raise DegreeError(f"wedge degree {p}+{q} exceeds the supported maximum 3")
    if p == 0 or q == 0:
        scal = a.tensor if p == 0 else b.tensor
        other = b if p == 0 else a
        return MultiVector(float(scal) * other.tensor, check=False)
    t = np.tensordot(a.tensor, b.tensor, axes=0)
    return MultiVector(alt_sum(t) / (math.factorial(p) * math.factorial(q)), check=False)


_EINSUM = {
    1: ("ai,i->a",),
    2: ("ai,bj,ij->ab",),
    3: ("ai,bj,ck,ijk->abc",),
}


def push(maps, v):
    """Apply one linear map per slot of a multivector.

    ``maps`` is a single matrix (applied to every slot, giving the exterior
    power of the map) or a sequence with one matrix per slot.  Equal maps
    preserve antisymmetry and return a MultiVector; mixed maps return the raw
    slotwise tensor, as used for multi-time two-vectors.
    """
    tensor = v.tensor if isinstance(v, MultiVector) else np.asarray(v, dtype=float)
    degree = tensor.ndim
    if degree == 0:
        return v
    if isinstance(maps, np.ndarray) and maps.ndim == 2:
        maps = [maps] * degree
    maps = [np.asarray(m, dtype=float) for m in maps]
    if len(maps) != degree:
        raise DegreeError(f"need {degree} maps, got {len(maps)}")
    spec = _EINSUM[degree][0]
    out = np.einsum(spec, *maps, tensor)
    same = all(m is maps[0] or np.array_equal(m, maps[0]) for m in maps[1:])
    if isinstance(v, MultiVector) and same:
        return MultiVector(out, check=False)
    return out


def _covector(ell, dim):
    if callable(ell):
        eye = np.eye(dim)
        return np.array([float(ell(eye[i])) for i in range(dim)])
    return np.asarray(ell, dtype=float)


def interior_linear(ell, v: MultiVector) -> MultiVector:
    """Signed contraction of a linear functional into the first slot."""
    if v.degree < 1:
        raise DegreeError("interior product needs degree >= 1")
    cov = _covector(ell, v.dim)
    out = np.tensordot(cov, v.tensor, axes=([0], [0]))
    return MultiVector(out, check=False)


def torsion_tensor(manifold, x):
    """Dense torsion tensor T[a, i, j] at x, slots restricted to the tangent space."""
    d = manifold.point_dim
    p = manifold.tangent_projector(np.asarray(x, dtype=float))
    t = np.zeros((d, d, d))
    if manifold.torsion_is_zero:
        return t
    for i in range(d):
        for j in range(i + 1, d):
            val = manifold.torsion(x, p[:, i], p[:, j])
            t[:, i, j] = val
            t[:, j, i] = -val
    return t


def interior_torsion(manifold, x, v: MultiVector) -> MultiVector:
    """Contraction of the connection torsion into a multivector of degree >= 2."""
    if v.degree < 2:
        raise DegreeError("torsion contraction needs degree >= 2")
    t = torsion_tensor(manifold, x)
    c = 0.5 * np.tensordot(t, v.tensor, axes=([1, 2], [0, 1]))
    if v.degree == 2:
        return MultiVector(c, check=False)
    # degree 3: antisymmetrize the torsion slot against the remaining slot
    return MultiVector(c - c.T, check=False)


def pair(form_tensor, v) -> float:
    """Pairing of a dense antisymmetric form with a multivector."""
    tensor = v.tensor if isinstance(v, MultiVector) else np.asarray(v, dtype=float)
    form_tensor = np.asarray(form_tensor, dtype=float)
    if form_tensor.ndim != tensor.ndim:
        raise DegreeError("degree mismatch in pairing")
    q = tensor.ndim
    return float(np.sum(form_tensor * tensor) / math.factorial(max(q, 1)))
