"""Finite-difference operators for the generator and its conjugated form.

Two matrices are assembled from one set of coefficient arrays:

* ``P-flat``: the conjugation of h L by the ground-state weight e^{-V/2h},
  acting on flat L^2.  The Laplacian part is the standard 5-point stencil
  -h^2 Delta; in place of the sampled Witten potential |grad V/2|^2
  - h Delta V/2 the diagonal carries the exponentially fitted sum
  (h^2/dx^2) sum_e e^{(V_i - V_{i+e})/2h}, which agrees with it to O(dx^2)
  and keeps the scheme positivity-structured at any mesh Peclet number in
  grad V; the drift contributes h b_h . (centered difference) plus the
  zeroth-order term b_h . grad V / 2 evaluated symbolically.

* ``L-weighted``: the generator -h Delta + grad V . grad + b_h . grad in
  the weighted space L^2(m_h), obtained from the *same* entries via the
  exact entrywise similarity L_ij = P_ij e^{(V_i - V_j)/2h} / h.  Spectra
  therefore satisfy eig(P) = h eig(L) to machine precision, boundary rows
  included, and for the preset drifts the weighted drift part is exactly
  antisymmetric, so Re<Lu, u>_w equals the (nonnegative) discrete
  Dirichlet form.

Boundary rows are identity (homogeneous Dirichlet); the truncation error
is exponentially small because e^{-V/2h} is negligible at the box edge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .landscape import Landscape, find_critical_points, validate_stationarity
from . import expr as ex


class DiscretizationError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on [-halfwidth, halfwidth]^2, row-major nodes."""

    halfwidth: float
    n: int

    def __post_init__(self):
        if self.n < 16:
            raise DiscretizationError("grid needs at least 16 nodes per axis")
        if not self.halfwidth > 0:
            raise DiscretizationError("halfwidth must be positive")

    @property
    def spacing(self) -> float:
        return 2.0 * self.halfwidth / (self.n - 1)

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.halfwidth, self.halfwidth, self.n)

    @property
    def size(self) -> int:
        return self.n * self.n

    def points(self) -> np.ndarray:
        X, Y = np.meshgrid(self.axis, self.axis, indexing="ij")
        return np.stack([X.ravel(), Y.ravel()], axis=-1)

    def index(self, i: int, j: int) -> int:
        return i * self.n + j

    def node_of(self, point) -> int:
        p = np.asarray(point, dtype=float)
        ij = np.clip(np.rint((p + self.halfwidth) / self.spacing).astype(int),
                     0, self.n - 1)
        return self.index(int(ij[0]), int(ij[1]))

    def boundary_mask(self) -> np.ndarray:
        m = np.zeros((self.n, self.n), dtype=bool)
        m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = True
        return m.ravel()


@dataclass(frozen=True)
class OperatorMatrix:
    matrix: sp.csr_matrix
    which: str                   # "L-weighted" or "P-flat"
    h: float
    grid: Grid
    weights: np.ndarray          # m_h node weights: sum w_i dx^2 = 1
    V_nodes: np.ndarray
    boundary: str = "dirichlet"

    @property
    def quadrature(self) -> float:
        return self.grid.spacing ** 2

    def inner(self, u, v):
        """<u, v> in L^2(m_h) (conjugate-linear in u)."""
        val = np.sum(np.conj(u) * v * self.weights) * self.quadrature
        return val if np.iscomplexobj(val) else float(val)

    def norm(self, u) -> float:
        return math.sqrt(max(float(np.real(self.inner(u, u))), 0.0))


def remove_weighted_mean(op: OperatorMatrix, u) -> np.ndarray:
    ones = np.ones(op.grid.size)
    return u - (op.inner(ones, u) / op.inner(ones, ones)) * ones


def _peclet_guard(land: Landscape, h: float, grid: Grid, V, pts, criticals):
    """Refuse when the centered-differenced drift is under-resolved.

    Only b_h is discretized by centered differences (the grad V transport
    sits in the fitted exponential weights), so the mesh Peclet number
    dx |b_h| / 2h is checked over the metastability region
    {V <= sigma_max + margin}; the potential far above every saddle only
    feeds the positive fitted diagonal.
    """
    values = [c.value for c in criticals]
    saddle_vals = [c.value for c in criticals if c.is_saddle]
    sigma_max = max(saddle_vals) if saddle_vals else max(values)
    margin = 0.25 * max(sigma_max - min(values), 1.0)
    region = V <= sigma_max + margin
    bh = land.b_h_at(pts[region], h)
    if bh.size == 0:
        return
    peak = float(np.max(np.linalg.norm(bh, axis=1)))
    pe = grid.spacing * peak / (2.0 * h)
    if pe > 1.0:
        need = int(math.ceil((grid.n - 1) * pe)) + 1
        raise DiscretizationError(
            f"mesh Peclet number {pe:.2f} > 1 for the drift term; "
            f"refine the grid to n >= {need} or increase h"
        )


def assemble(land: Landscape, h: float, grid: Grid, which: str,
             criticals=None) -> OperatorMatrix:
    """Build one of the two operator matrices on the given grid."""
    if which not in ("L-weighted", "P-flat"):
        raise ValueError(f"unknown operator kind {which!r}")
    if land.dimension != 2:
        raise DiscretizationError("PDE validation is two-dimensional only")
    if not 0 < h <= 1:
        raise DiscretizationError(f"h must lie in (0, 1], got {h}")
    report = validate_stationarity(land)
    if not report.passed:
        raise DiscretizationError(
            f"drift fields are not admissible: max |b.grad V| = "
            f"{report.max_b_dot_grad_V:.3g}, max |div nu| = "
            f"{report.max_div_nu:.3g}"
        )
    if criticals is None:
        criticals = find_critical_points(land)
    dx = grid.spacing
    for c in criticals:
        if np.max(np.abs(c.point)) > grid.halfwidth - 4 * dx:
            raise DiscretizationError(
                f"critical point at {c.point} is within 4 grid steps of the "
                "boundary; enlarge the box"
            )

    n, N = grid.n, grid.size
    pts = grid.points()
    V = land.V_at(pts)
    _peclet_guard(land, h, grid, V, pts, criticals)

    interior = ~grid.boundary_mask()
    idx = np.flatnonzero(interior)
    bh = land.b_h_at(pts[idx], h)

    diag = np.zeros(N)
    diag[~interior] = 1.0                       # Dirichlet rows
    rows, cols, pvals = [], [], []
    for off, axis, sign in ((n, 0, +1), (-n, 0, -1), (1, 1, +1), (-1, 1, -1)):
        nb = idx + off
        efac = np.exp((V[idx] - V[nb]) / (2.0 * h))
        diag[idx] += (h * h / dx**2) * efac
        # homogeneous Dirichlet: couplings into boundary columns are
        # eliminated, the fitted diagonal term stays
        keep = interior[nb]
        rows.append(idx[keep])
        cols.append(nb[keep])
        pvals.append(-h * h / dx**2
                     + sign * h * bh[keep, axis] / (2.0 * dx))
    # zeroth-order drift term b_h . grad phi = (b + h nu) . grad V / 2
    zo = (0.5 * ex.evaluate_many(land.b_dot_grad_V, pts[idx])
          + 0.5 * h * ex.evaluate_many(land.nu_dot_grad_V, pts[idx]))
    diag[idx] += zo

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    pvals = np.concatenate(pvals)
    if which == "P-flat":
        offdiag, dvals = pvals, diag
    else:
        offdiag = pvals * np.exp((V[rows] - V[cols]) / (2.0 * h)) / h
        dvals = diag / h

    M = sp.coo_matrix(
        (np.concatenate([offdiag, dvals]),
         (np.concatenate([rows, np.arange(N)]),
          np.concatenate([cols, np.arange(N)]))),
        shape=(N, N),
    ).tocsr()

    w = np.exp(-(V - V.min()) / h)
    w /= w.sum() * dx**2
    return OperatorMatrix(matrix=M, which=which, h=h, grid=grid,
                          weights=w, V_nodes=V)


# ---------------------------------------------------------------------------
# Small spectrum

@dataclass(frozen=True)
class SpectrumResult:
    eigenvalues: np.ndarray      # sorted by real part
    n0_observed: int
    gap_witness: float | None    # smallest excluded real part
    threshold: float
    vectors: np.ndarray | None = None


def _conjugate_to_flat(op: OperatorMatrix) -> sp.csr_matrix:
    """h * E^-1 L E with E = diag(e^{V/2h}); recovers the flat form P.

    The factors e^{(V_i - V_j)/2h} only involve neighbouring nodes, so they
    stay bounded; the weighted matrix itself is exponentially non-normal
    (departure ~ e^{(max V - min V)/2h}) and direct Krylov iteration on it
    is unreliable.
    """
    C = op.matrix.tocoo()
    V, h = op.V_nodes, op.h
    vals = op.h * C.data * np.exp((V[C.col] - V[C.row]) / (2.0 * h))
    return sp.coo_matrix((vals, (C.row, C.col)), shape=C.shape).tocsr()


def small_spectrum(op: OperatorMatrix, count: int = 6,
                   threshold: float | None = None, tol: float = 1e-10,
                   vectors: bool = False) -> SpectrumResult:
    """Eigenvalues of smallest real part by shift-invert around zero.

    For the weighted operator the solve runs on its exact conjugation to
    the flat form (symmetric when b = 0) and the spectrum is mapped back
    by the factor h; eigenvectors are unconjugated with a log-domain shift
    so the ground-state weight never overflows.  The metastable cluster is
    split from the rest at the largest jump in the sorted real parts when
    no explicit ``threshold`` is given; the first excluded real part is
    reported as the gap witness.
    """
    if count > 20:
        raise ValueError("small-spectrum counts above 20 are not supported")
    weighted = op.which == "L-weighted"
    A = (_conjugate_to_flat(op) if weighted else op.matrix).tocsc()
    ncv = min(A.shape[0] - 1, max(6 * count, 60))
    # fixed start vector: ARPACK's internal seed is stateful across calls,
    # which would make repeated runs in one process differ in the last bits
    v0 = np.ones(A.shape[0])
    try:
        out = spla.eigs(A, k=count, sigma=0.0, which="LM", tol=tol,
                        ncv=ncv, maxiter=400 * count, v0=v0,
                        return_eigenvectors=vectors)
    except RuntimeError:
        # the shift hit an eigenvalue; nudge it off zero
        out = spla.eigs(A, k=count, sigma=-1e-8, which="LM", tol=tol,
                        ncv=ncv, maxiter=400 * count, v0=v0,
                        return_eigenvectors=vectors)
    vals, vecs = (out if vectors else (out, None))
    if weighted:
        vals = vals / op.h
        if vecs is not None:
            logw = op.V_nodes / (2.0 * op.h)
            cols = []
            for k in range(vecs.shape[1]):
                x = vecs[:, k]
                mag = np.abs(x)
                t = np.log(mag + 1e-300) + logw
                phase = np.where(mag > 0, x / (mag + 1e-300), 0.0)
                v = phase * np.exp(t - t.max())
                cols.append(v / max(op.norm(v), 1e-300))
            vecs = np.stack(cols, axis=1)
    order = np.argsort(vals.real)
    vals = vals[order]
    if vecs is not None:
        vecs = vecs[:, order]

    re = vals.real
    if threshold is None:
        jumps = np.diff(re)
        k = int(np.argmax(jumps))
        threshold = 0.5 * (re[k] + re[k + 1])
    n0 = int(np.sum(re < threshold))
    excluded = re[re >= threshold]
    witness = float(excluded.min()) if excluded.size else None
    return SpectrumResult(eigenvalues=vals, n0_observed=n0,
                          gap_witness=witness, threshold=float(threshold),
                          vectors=vecs)


# ---------------------------------------------------------------------------
# Semigroup decay

def semigroup_decay(op: OperatorMatrix, u0, T: float, dt: float) -> float:
    """Fitted decay rate of ||e^{-tL} u0||_w over the final half of [0, T].

    Crank-Nicolson stepping with a single sparse factorization.  The kernel
    component is re-projected out at every step so the fit sees the slow
    metastable mode and not the numerical floor.
    """
    if op.which != "L-weighted":
        raise DiscretizationError("semigroup decay is defined for L-weighted")
    u = np.asarray(u0, dtype=float).copy()
    nrm = op.norm(u)
    if nrm == 0.0:
        raise DiscretizationError("u0 is zero")
    ones = np.ones(op.grid.size)
    if abs(op.inner(ones, u)) > 1e-8 * nrm:
        raise DiscretizationError("u0 must have zero weighted mean")
    steps = int(round(T / dt))
    if steps < 20:
        raise DiscretizationError("fewer than 20 time steps; decrease dt")
    # accuracy guard: the Rayleigh quotient of u0 sets the fastest rate the
    # fit needs to resolve (Crank-Nicolson is unconditionally stable)
    r0 = float(np.real(op.inner(op.matrix @ u, u))) / nrm**2
    if dt * r0 > 0.5:
        raise DiscretizationError(
            f"dt too large to resolve the initial decay rate "
            f"(dt * rate = {dt * r0:.3g} > 0.5); reduce dt"
        )

    L = op.matrix.tocsc()
    I = sp.identity(L.shape[0], format="csc")
    lu = spla.splu((I + 0.5 * dt * L).tocsc())
    right = (I - 0.5 * dt * L).tocsr()
    w11 = op.inner(ones, ones)

    times, lognorms = [], []
    for k in range(1, steps + 1):
        u = lu.solve(right @ u)
        u -= (op.inner(ones, u) / w11) * ones
        nu = op.norm(u)
        if nu <= 0.0 or not math.isfinite(nu):
            break
        times.append(k * dt)
        lognorms.append(math.log(nu))
    times_arr = np.array(times)
    sel = times_arr >= 0.5 * times_arr[-1]
    if int(np.sum(sel)) < 10:
        raise DiscretizationError("decay fit window too short")
    slope, _ = np.polyfit(times_arr[sel], np.array(lognorms)[sel], 1)
    return float(-slope)
