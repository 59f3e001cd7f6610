"""Finite-difference operator tests: assembly structure, spectra, decay."""

import numpy as np
import pytest

import kramers_lab.expr as ex
from kramers_lab.landscape import Landscape, make_preset
from kramers_lab.discretize import (
    DiscretizationError,
    Grid,
    OperatorMatrix,
    assemble,
    remove_weighted_mean,
    semigroup_decay,
    small_spectrum,
)


def _flat_landscape(text, halfwidth, b=None):
    zero = ex.constant(0.0)
    return Landscape(
        dimension=2,
        V=ex.parse(text, 2),
        b=b if b is not None else (zero, zero),
        nu=(zero, zero),
        halfwidth=halfwidth,
    )


def _deep_interior(grid, depth=2):
    """Nodes whose stencil is untouched by the Dirichlet elimination."""
    m = np.zeros((grid.n, grid.n), dtype=bool)
    m[depth:-depth, depth:-depth] = True
    return m.ravel()


# ---------------------------------------------------------------------------
# Grid

def test_grid_layout():
    g = Grid(halfwidth=2.0, n=21)
    assert g.spacing == pytest.approx(0.2)
    assert g.size == 441
    pts = g.points()
    # row-major: index (i, j) holds (x_i, y_j)
    assert g.index(3, 5) == 3 * 21 + 5
    assert pts[g.index(3, 5)] == pytest.approx([-2.0 + 0.6, -2.0 + 1.0])
    assert g.node_of(pts[g.index(3, 5)]) == g.index(3, 5)
    assert g.boundary_mask().sum() == 4 * 21 - 4


def test_grid_guards():
    with pytest.raises(DiscretizationError):
        Grid(halfwidth=2.0, n=8)
    with pytest.raises(DiscretizationError):
        Grid(halfwidth=-1.0, n=32)


# ---------------------------------------------------------------------------
# Assembly structure

def test_flat_form_symmetric_without_drift():
    land = make_preset("tilted_double_well")
    op = assemble(land, 0.15, Grid(2.0, 64), "P-flat")
    A = op.matrix
    assert abs(A - A.T).max() <= 1e-12 * abs(A).max()
    # m_h weights are a normalized quadrature rule
    assert op.weights.sum() * op.quadrature == pytest.approx(1.0, abs=1e-12)


def test_constant_in_kernel_without_drift():
    # derivatives of constants vanish: rows whose stencil does not touch the
    # eliminated boundary columns annihilate the constant vector exactly
    land = make_preset("tilted_double_well")
    op = assemble(land, 0.15, Grid(2.0, 64), "L-weighted")
    r = op.matrix @ np.ones(op.grid.size)
    deep = _deep_interior(op.grid)
    res = np.sqrt(np.sum(r[deep] ** 2 * op.weights[deep]) * op.quadrature)
    assert res <= 1e-10


def test_constant_kernel_residual_is_second_order():
    # with a rotational drift the exponentially fitted row sums leave an
    # O(dx^2) defect; halving dx should shrink it about fourfold
    land = make_preset("tilted_double_well", c=1.0)
    res = []
    for n in (64, 128):
        op = assemble(land, 0.3, Grid(2.0, n), "L-weighted")
        r = op.matrix @ np.ones(op.grid.size)
        deep = _deep_interior(op.grid)
        res.append(np.sqrt(np.sum(r[deep] ** 2 * op.weights[deep])
                           * op.quadrature))
    assert 2.5 <= res[0] / res[1] <= 6.0


def test_weighted_and_flat_spectra_agree():
    # eig(P) = h * eig(L) through two independent shift-invert solves
    land = make_preset("tilted_double_well", c=1.0)
    g = Grid(2.0, 96)
    h = 0.2
    a = np.sort(small_spectrum(assemble(land, h, g, "P-flat"), 6)
                .eigenvalues.real) / h
    b = np.sort(small_spectrum(assemble(land, h, g, "L-weighted"), 6)
                .eigenvalues.real)
    rel = np.abs(a - b) / np.maximum(np.abs(b), 1e-8 * abs(b[-1]))
    assert rel.max() <= 1e-6


def test_accretivity_on_random_vectors():
    land = make_preset("tilted_double_well", c=1.0)
    op = assemble(land, 0.2, Grid(2.0, 96), "L-weighted")
    rng = np.random.default_rng(7)
    for _ in range(100):
        u = rng.standard_normal(op.grid.size)
        u /= op.norm(u)
        assert float(np.real(op.inner(op.matrix @ u, u))) >= -1e-10


def test_weighted_adjoint_is_drift_reversal():
    import scipy.sparse as sp

    g = Grid(2.0, 64)
    op_f = assemble(make_preset("tilted_double_well", c=1.0), 0.3, g,
                    "L-weighted")
    op_b = assemble(make_preset("tilted_double_well", c=-1.0), 0.3, g,
                    "L-weighted")
    W = sp.diags(op_f.weights)
    diff = abs((W @ op_f.matrix).T - W @ op_b.matrix).max()
    assert diff <= 1e-12 * abs(W @ op_f.matrix).max()
    # and the small spectra are complex conjugates of each other; ask for
    # six and compare five so a conjugate pair is never cut at the boundary
    sf = np.sort_complex(small_spectrum(op_f, 6).eigenvalues[:5])
    sb = np.sort_complex(np.conj(small_spectrum(op_b, 6).eigenvalues[:5]))
    assert np.max(np.abs(sf - sb)) <= 1e-8 * np.abs(sf[-1])


# ---------------------------------------------------------------------------
# Small spectrum

def test_single_well_against_dense_oracle():
    # V = x^2 + y^2: flat form is symmetric, so a dense symmetric eigensolve
    # is available as an oracle for the shift-invert path
    land = _flat_landscape("x^2 + y^2", 4.0)
    op = assemble(land, 0.15, Grid(4.0, 48), "P-flat")
    dense = np.sort(np.linalg.eigvalsh(op.matrix.toarray()))[:6]
    s = small_spectrum(op, 6)
    got = np.sort(s.eigenvalues.real)
    assert np.max(np.abs(got - dense)) <= 1e-10 * dense[-1]
    assert np.max(np.abs(s.eigenvalues.imag)) <= 1e-12
    # one well: a single eigenvalue ~ 0, the next at the harmonic scale h
    assert s.n0_observed == 1
    assert got[0] <= 1e-8
    assert 0.9 <= s.gap_witness / (0.15 * 2.0) <= 1.05


@pytest.mark.parametrize("name,n,expected_n0", [
    ("sym_double_well", 96, 2),
    ("tilted_double_well", 96, 2),
    ("triple_well", 128, 3),
])
def test_metastable_counting_matches_wells(name, n, expected_n0):
    land = make_preset(name)
    op = assemble(land, 0.15, Grid(land.halfwidth, n), "L-weighted")
    s = small_spectrum(op, count=expected_n0 + 4)
    assert s.n0_observed == expected_n0
    cluster = np.sort(s.eigenvalues.real)[:expected_n0]
    assert cluster.max() < 0.1
    assert s.gap_witness > 1.0


def test_explicit_threshold_overrides_calibration():
    land = make_preset("tilted_double_well")
    op = assemble(land, 0.15, Grid(2.0, 96), "L-weighted")
    s = small_spectrum(op, 6, threshold=0.5)
    assert s.n0_observed == 2
    assert s.threshold == 0.5
    assert s.gap_witness == pytest.approx(1.994, abs=0.05)


def test_grid_convergence_of_lambda2():
    land = make_preset("tilted_double_well")
    lam = []
    for n in (160, 224):
        op = assemble(land, 0.15, Grid(2.0, n), "L-weighted")
        lam.append(np.sort(small_spectrum(op, 4).eigenvalues.real)[1])
    assert abs(lam[1] / lam[0] - 1.0) < 0.02


# ---------------------------------------------------------------------------
# Semigroup decay

def test_ou_decay_rate_is_one():
    # exact OU generator spectrum is {0, 1, 2, ...} independent of h
    land = _flat_landscape("(x^2 + y^2) / 2", 4.0)
    op = assemble(land, 0.15, Grid(4.0, 96), "L-weighted")
    u0 = remove_weighted_mean(op, op.grid.points()[:, 0].copy())
    rate = semigroup_decay(op, u0, T=4.0, dt=0.02)
    assert rate == pytest.approx(1.0, abs=0.03)


def test_decay_rate_matches_lambda2_and_u0_independent():
    land = make_preset("tilted_double_well")
    op = assemble(land, 0.2, Grid(2.0, 64), "L-weighted")
    lam2 = np.sort(small_spectrum(op, 4).eigenvalues.real)[1]
    pts = op.grid.points()
    rates = []
    for raw in [(pts[:, 0] > 0.12).astype(float), np.tanh(3 * pts[:, 0])]:
        u0 = remove_weighted_mean(op, raw)
        rates.append(semigroup_decay(op, u0, T=3.0 / lam2, dt=0.02 / lam2))
    assert rates[0] == pytest.approx(lam2, rel=1e-3)
    assert rates[1] == pytest.approx(rates[0], rel=1e-5)


def test_semigroup_guards():
    land = make_preset("tilted_double_well")
    op = assemble(land, 0.2, Grid(2.0, 64), "L-weighted")
    rng = np.random.default_rng(0)
    rough = rng.standard_normal(op.grid.size)
    with pytest.raises(DiscretizationError, match="weighted mean"):
        semigroup_decay(op, np.ones(op.grid.size), T=10.0, dt=0.1)
    with pytest.raises(DiscretizationError, match="dt too large"):
        semigroup_decay(op, remove_weighted_mean(op, rough), T=60.0, dt=2.0)
    with pytest.raises(DiscretizationError, match="20 time steps"):
        semigroup_decay(op, remove_weighted_mean(op, rough), T=1.0, dt=0.5)
    op_p = assemble(land, 0.2, Grid(2.0, 64), "P-flat")
    with pytest.raises(DiscretizationError, match="L-weighted"):
        semigroup_decay(op_p, rough, T=10.0, dt=0.1)


# ---------------------------------------------------------------------------
# Refusals

def test_peclet_refusal_suggests_refinement():
    land = make_preset("tilted_double_well", c=1.0)
    with pytest.raises(DiscretizationError, match="Peclet"):
        assemble(land, 0.1, Grid(2.0, 64), "L-weighted")


def test_critical_point_near_boundary_refused():
    # left minimum sits at x ~ -1.057; a box of halfwidth 1.2 leaves less
    # than 4 grid steps of margin at n = 48
    land = _flat_landscape("(x^2 - 1)^2 + 0.5 * x + y^2", 1.2)
    with pytest.raises(DiscretizationError, match="boundary"):
        assemble(land, 0.2, Grid(1.2, 48), "L-weighted")


def test_non_stationary_drift_refused():
    bad = _flat_landscape("x^2 + y^2", 2.0,
                          b=(ex.parse("x", 2), ex.constant(0.0)))
    with pytest.raises(DiscretizationError, match="admissible"):
        assemble(bad, 0.2, Grid(2.0, 32), "L-weighted")


def test_parameter_validation():
    land = make_preset("sym_double_well")
    g = Grid(2.0, 32)
    with pytest.raises(ValueError, match="unknown operator"):
        assemble(land, 0.2, g, "Q-mystery")
    with pytest.raises(DiscretizationError, match="h must"):
        assemble(land, 0.0, g, "L-weighted")
    with pytest.raises(DiscretizationError, match="h must"):
        assemble(land, 1.5, g, "L-weighted")
    with pytest.raises(ValueError, match="counts above 20"):
        small_spectrum(assemble(land, 0.2, g, "L-weighted"), count=25)
