"""Independent spectral references via finite-difference Laplacians.

The heat decay rates used as estimator targets are not taken from tables:
they are measured by a geodesic finite-difference Laplace-Beltrami operator
(with Richardson extrapolation) at uniformly sampled points.  For the
rotation group this is the Haar-sampling quadrature oracle that pins the
Casimir decay rates; for spheres and the torus it cross-checks the
closed-form coordinate-harmonic rates.
"""

from __future__ import annotations

import numpy as np

from .flow import draw_increments  # noqa: F401  (re-exported for tests)


def uniform_points(mf, n, seed=0):
    """Uniform (Haar, for the group geometries) samples via projected Gaussians."""
    rng = np.random.Generator(np.random.Philox(key=[seed, 977]))
    return mf.project(rng.standard_normal((n, mf.point_dim)))


def fd_laplacian(mf, f, x, eps=2e-3):
    """Laplace-Beltrami of f at x by second differences along geodesic axes,
    Richardson-extrapolated in the step.
    """
    basis = mf.tangent_basis(x)

    def second_sum(e):
        total = 0.0
        for i in range(basis.shape[1]):
            v = basis[:, i]
            fp = float(f(mf.geodesic(x, v, e)))
            fm = float(f(mf.geodesic(x, -v, e)))
            total += (fp + fm - 2.0 * float(f(x))) / e ** 2
        return total

    coarse = second_sum(eps)
    fine = second_sum(eps / 2.0)
    return (4.0 * fine - coarse) / 3.0


def heat_rate_oracle(mf, entry, n_points=24, seed=0, eps=2e-3, spread_tol=5e-3):
    """Measured decay rate r with P_t f = exp(-r t) f for an eigenfunction f.

    Samples uniform points, evaluates -Laplacian(f) / (2 f) where |f| is
    bounded away from zero, and checks the values agree (otherwise f is not
    an eigenfunction and a ValueError is raised).
    """
    def f(x):
        return entry.value(np.asarray(x), None)

    pts = uniform_points(mf, 4 * n_points, seed=seed)
    vals = entry.value(pts, None)
    keep = np.abs(vals) > 0.3
    pts = pts[keep][:n_points]
    if pts.shape[0] < 8:
        raise ValueError(f"not enough sample points with |f| > 0.3 for {entry.name}")
    rates = []
    for x in pts:
        lap = fd_laplacian(mf, f, x, eps=eps)
        rates.append(-0.5 * lap / float(f(x)))
    rates = np.array(rates)
    rate = float(np.mean(rates))
    if np.max(np.abs(rates - rate)) > spread_tol * max(1.0, abs(rate)):
        raise ValueError(
            f"{entry.name} is not an eigenfunction: rate spread "
            f"{np.max(np.abs(rates - rate)):.2e} around {rate:.4f}")
    return rate
