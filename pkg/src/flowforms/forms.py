"""Catalogue of closed-form test functions and differential forms.

Each entry evaluates a q-form and its exact exterior derivative on dense
multivector tensors (the determinant normalization of multilinear.py), with
batched signatures: ``value(x, tensor)`` takes points ``(..., d)`` and degree-q
tensors ``(..., d, ..., d)`` and returns ``(...,)``.  Degree-0 entries ignore
the tensor argument; their ``dvalue`` is the differential on single vectors.

``heat_rate`` is the decay rate r with P_t phi = exp(-r t) phi for entries
that are eigenfunctions of the generator; sphere/torus rates follow from the
closed-form Laplacians of coordinate harmonics, and the rotation-group rates
are pinned by the finite-difference Laplacian oracle in spectral.py (the
test suite enforces agreement).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .geometry import left_mult_matrix, quat_conj


@dataclass(frozen=True)
class FormCatalogEntry:
    name: str
    degree: int
    value: Callable
    dvalue: Callable
    heat_rate: Optional[float] = None
    exact: bool = False          # the entry itself is d(something)

    def __repr__(self):
        return f"FormCatalogEntry({self.name!r}, q={self.degree})"


def _zero(x, tensor=None):
    return np.zeros(np.shape(x)[:-1])


def zero_form(degree):
    return FormCatalogEntry(f"zero{degree}", degree, _zero, _zero, heat_rate=0.0)


def derived_form(entry):
    """The (q+1)-form d(entry); its own derivative vanishes."""
    return FormCatalogEntry(
        name=f"d_{entry.name}",
        degree=entry.degree + 1,
        value=entry.dvalue,
        dvalue=_zero,
        heat_rate=entry.heat_rate,
        exact=True,
    )


def _pair2(coeff_rows, tensor):
    """Evaluate the 2-form a ^ b (rows a, b possibly batched) on a dense tensor."""
    a, b = coeff_rows
    at_b = np.einsum("...i,...ij,...j->...", a, tensor, b)
    bt_a = np.einsum("...i,...ij,...j->...", b, tensor, a)
    return 0.5 * (at_b - bt_a)


# -- sphere S^1 --------------------------------------------------------------

def _s1_entries():
    def cos_val(x, tensor=None):
        return x[..., 0]

    def cos_d(x, v):
        return v[..., 0]

    def angle_val(x, v):
        return x[..., 0] * v[..., 1] - x[..., 1] * v[..., 0]

    return [
        FormCatalogEntry("cos_angle", 0, cos_val, cos_d, heat_rate=0.5),
        FormCatalogEntry("angle_form", 1, angle_val, _zero, heat_rate=0.0),
        zero_form(0), zero_form(1),
    ]


# -- sphere S^2 --------------------------------------------------------------

def _s2_entries():
    def height(x, tensor=None):
        return x[..., 2]

    def height_d(x, v):
        return v[..., 2]

    def rotation(x, v):
        return x[..., 0] * v[..., 1] - x[..., 1] * v[..., 0]

    def rotation_d(x, t):
        # d(x dy - y dx) = 2 dx ^ dy
        return t[..., 0, 1] - t[..., 1, 0]

    def area(x, t):
        eps = np.zeros((3, 3, 3))
        for i, j, k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
            eps[i, j, k] = 1.0
            eps[i, k, j] = -1.0
        return 0.5 * np.einsum("ijk,...i,...jk->...", eps, x, t)

    return [
        FormCatalogEntry("height", 0, height, height_d, heat_rate=1.0),
        FormCatalogEntry("height_diff", 1, height_d, _zero, heat_rate=1.0, exact=True),
        FormCatalogEntry("rotation", 1, rotation, rotation_d, heat_rate=1.0),
        FormCatalogEntry("area", 2, area, _zero, heat_rate=0.0),
        zero_form(0), zero_form(1), zero_form(2),
    ]


# -- sphere S^3 --------------------------------------------------------------

def _s3_entries():
    def height(x, tensor=None):
        return x[..., 3]

    def height_d(x, v):
        return v[..., 3]

    return [
        FormCatalogEntry("height", 0, height, height_d, heat_rate=1.5),
        FormCatalogEntry("height_diff", 1, height_d, _zero, heat_rate=1.5, exact=True),
        zero_form(0), zero_form(1),
    ]


# -- Clifford torus ----------------------------------------------------------

def _torus_entries():
    def cos1(x, tensor=None):
        return x[..., 0]

    def cos1_d(x, v):
        return v[..., 0]

    def dtheta1(x, v):
        return x[..., 0] * v[..., 1] - x[..., 1] * v[..., 0]

    def dtheta2_at(x):
        b = np.zeros(np.shape(x))
        b[..., 2] = -x[..., 3]
        b[..., 3] = x[..., 2]
        return b

    def mixed(x, v):
        # x1 * dtheta2
        return x[..., 0] * (x[..., 2] * v[..., 3] - x[..., 3] * v[..., 2])

    def mixed_d(x, t):
        # dx1 ^ dtheta2
        a = np.zeros(np.shape(x))
        a[..., 0] = 1.0
        return _pair2((a, dtheta2_at(x)), t)

    def area12(x, t):
        a = np.zeros(np.shape(x))
        a[..., 0] = -x[..., 1]
        a[..., 1] = x[..., 0]
        return _pair2((a, dtheta2_at(x)), t)

    return [
        FormCatalogEntry("cos1", 0, cos1, cos1_d, heat_rate=0.5),
        FormCatalogEntry("exact_cos1", 1, cos1_d, _zero, heat_rate=0.5, exact=True),
        FormCatalogEntry("dtheta1", 1, dtheta1, _zero, heat_rate=0.0),
        FormCatalogEntry("mixed", 1, mixed, mixed_d),
        FormCatalogEntry("area12", 2, area12, _zero, heat_rate=0.0),
        zero_form(0), zero_form(1), zero_form(2),
    ]


# -- rotation group ----------------------------------------------------------

def _so3_entries(rate):
    def matrix12(x, tensor=None):
        return 2.0 * (x[..., 1] * x[..., 2] - x[..., 0] * x[..., 3])

    def matrix12_d(x, v):
        return 2.0 * (v[..., 1] * x[..., 2] + x[..., 1] * v[..., 2]
                      - v[..., 0] * x[..., 3] - x[..., 0] * v[..., 3])

    def matrix33(x, tensor=None):
        return 1.0 - 2.0 * (x[..., 1] ** 2 + x[..., 2] ** 2)

    def matrix33_d(x, v):
        return -4.0 * (x[..., 1] * v[..., 1] + x[..., 2] * v[..., 2])

    def _algebra_rows(x):
        # rows mapping ambient vectors to left-trivialized algebra coordinates
        return left_mult_matrix(quat_conj(x))[..., 1:, :]

    def mc3(x, v):
        c = _algebra_rows(x)
        return np.einsum("...j,...j->...", c[..., 2, :], v)

    def mc3_d(x, t):
        # structure equation: d omega^3 (u, v) = -2 (alpha_u x alpha_v)_3
        c = _algebra_rows(x)
        cx, cy = c[..., 0, :], c[..., 1, :]
        return -2.0 * _pair2((cx, cy), t)

    return [
        FormCatalogEntry("matrix12", 0, matrix12, matrix12_d, heat_rate=rate),
        FormCatalogEntry("matrix33", 0, matrix33, matrix33_d, heat_rate=rate),
        FormCatalogEntry("mc3", 1, mc3, mc3_d),
        zero_form(0), zero_form(1),
    ]


_BUILDERS = {
    "sphere1": _s1_entries,
    "sphere2": _s2_entries,
    "sphere3": _s3_entries,
    "clifford_torus": _torus_entries,
    "so3_left": lambda: _so3_entries(4.0),
    "so3_right": lambda: _so3_entries(4.0),
    "so3_biinvariant": lambda: _so3_entries(8.0),
}


def form_catalog(mf):
    """All catalogue entries for a manifold."""
    return _BUILDERS[mf.name]()


def catalog_entry(mf, name):
    for entry in form_catalog(mf):
        if entry.name == name:
            return entry
    names = ", ".join(e.name for e in form_catalog(mf))
    raise KeyError(f"no catalogue form {name!r} on {mf.name}; available: {names}")
