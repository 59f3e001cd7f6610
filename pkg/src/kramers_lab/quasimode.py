"""Quasimodes: sharp approximate eigenfunctions built from the well map.

For a non-global labelled minimum m the quasimode is psi = theta * (kappa+1)
where kappa is +1 on the m-side and -1 on the hat-side of the sublevel set
{V < sigma(m) + 3 delta0} with the saddle tubes removed, and interpolates
across each tube through the Gaussian error-function profile

    kappa(x) = C^-1 int_0^{xi.(x-s)} chi(eta/rho0) e^{-|mu(s)| eta^2 / 2h} deta,

with xi(s) the oriented transverse eigenvector and |mu(s)| the transverse
rate at the saddle; theta is a smooth bump on V-levels that confines the
support to {V < sigma(m) + 2 delta0} inside the enclosing component E_-(m).
The global minimum gets psi = 1 (the exact kernel direction).

All sets are realized as node masks on the operator grid via face-adjacency
flood fills; profile integrals use adaptive Simpson quadrature to 1e-12.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .discretize import Grid, OperatorMatrix
from .labelling import LabelledWell, WellMap, flood_component
from .landscape import CriticalPoint, Landscape
from .saddle import SaddleSpectralData


class QuasimodeError(ValueError):
    pass


class GeometryError(QuasimodeError):
    """Cutoff sets do not split as required; retry with smaller rho0/delta0."""


# ---------------------------------------------------------------------------
# Smooth glue

def _glue(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def smoothstep(t):
    """C^inf step: 0 for t <= 0, 1 for t >= 1, strictly increasing between."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    a = _glue(t)
    return a / (a + _glue(1.0 - t))


def plateau_bump(u):
    """Even C^inf cutoff: 1 on [-1, 1], 0 outside (-2, 2)."""
    return smoothstep(2.0 - np.abs(np.asarray(u, dtype=float)))


def _chi_scalar(u: float) -> float:
    a = abs(u)
    if a <= 1.0:
        return 1.0
    if a >= 2.0:
        return 0.0
    t = 2.0 - a
    g, gc = math.exp(-1.0 / t), math.exp(-1.0 / (1.0 - t))
    return g / (g + gc)


def _adaptive_simpson(f, a: float, b: float, tol: float = 1e-12) -> float:
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)

    def recurse(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        if depth >= 50 or abs(left + right - whole) <= 15.0 * tol:
            return left + right + (left + right - whole) / 15.0
        return (recurse(a, m, fa, flm, fm, left, 0.5 * tol, depth + 1)
                + recurse(m, b, fm, frm, fb, right, 0.5 * tol, depth + 1))

    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    return recurse(a, b, fa, fm, fb, whole, tol, 0)


# ---------------------------------------------------------------------------
# Cutoff geometry

@dataclass(frozen=True)
class SaddleTube:
    """Connected component through s of {V <= sigma+3 delta0, |xi.(x-s)| <= 3 rho0}."""

    saddle: CriticalPoint
    data: SaddleSpectralData
    mask: np.ndarray


@dataclass(frozen=True)
class CutoffGeometry:
    well: LabelledWell
    grid: Grid
    rho0: float
    delta0: float
    tubes: tuple[SaddleTube, ...]
    e_plus: np.ndarray          # component of the split set containing m
    e_minus: np.ndarray         # component containing the hat minimum
    e_lower: np.ndarray         # enclosing component E_-(m) of {V < sigma_prev}
    V_nodes: np.ndarray


def default_parameters(well: LabelledWell, wm: WellMap) -> tuple[float, float]:
    """(rho0, delta0) at 'sufficiently small' scales for this well.

    delta0 keeps the three V-level shells below every neighbouring critical
    value; rho0 keeps the tube slab short of the nearest other critical
    point.  Both are validated constructively by the two-component check.
    """
    room = [well.barrier, well.sigma - well.hat_minimum.value]
    if math.isfinite(well.prev_sigma):
        room.append(well.prev_sigma - well.sigma)
    delta0 = 0.2 * min(room)
    crits = {id(w.minimum): w.minimum for w in wm.wells}
    for w in wm.wells:
        for s in w.saddles:
            crits[id(s)] = s
    dmin = math.inf
    for s in well.saddles:
        for c in crits.values():
            if c is not s:
                dmin = min(dmin, float(np.linalg.norm(c.point - s.point)))
    rho0 = 0.15 * dmin
    return rho0, delta0


def _component_mask(values_2d, level, seed_ij):
    return flood_component(values_2d < level, seed_ij).ravel()


def build_cutoffs(
    well: LabelledWell,
    wm: WellMap,
    data: Mapping[int, SaddleSpectralData],
    land: Landscape,
    grid: Grid,
    rho0: float | None = None,
    delta0: float | None = None,
) -> CutoffGeometry:
    """Tube and plateau node sets for the quasimode of a non-global well."""
    if well.is_global:
        raise ValueError("the global minimum needs no cutoff geometry")
    if rho0 is None or delta0 is None:
        r_def, d_def = default_parameters(well, wm)
        rho0 = r_def if rho0 is None else rho0
        delta0 = d_def if delta0 is None else delta0
    if rho0 <= 0 or delta0 <= 0:
        raise ValueError("rho0 and delta0 must be positive")

    pts = grid.points()
    V2 = land.V_at(pts).reshape(grid.n, grid.n)
    V = V2.ravel()
    sigma = well.sigma

    # saddle-level drop making strict sublevel masks leak-proof on this grid
    eps = 0.5 * max(abs(d.lambda1) for d in data.values()) * grid.spacing**2

    if math.isfinite(well.prev_sigma):
        seed = np.unravel_index(grid.node_of(well.minimum.point),
                                (grid.n, grid.n))
        e_lower = _component_mask(V2, well.prev_sigma - eps, seed)
    else:
        e_lower = np.ones(grid.size, dtype=bool)

    tubes = []
    for sad, near, _far in well.saddle_sides:
        ds = data[id(sad)]
        if float(np.dot(ds.xi, near - sad.point)) <= 0:
            raise GeometryError(
                f"transverse vector at {sad.point} is not oriented toward "
                "the well side"
            )
        t = (pts - sad.point) @ ds.xi
        slab = (np.abs(t) <= 3.0 * rho0) & (V <= sigma + 3.0 * delta0)
        seed = np.unravel_index(grid.node_of(sad.point), (grid.n, grid.n))
        cmask = flood_component(slab.reshape(grid.n, grid.n), seed).ravel()
        tubes.append(SaddleTube(saddle=sad, data=ds, mask=cmask))

    tube_union = np.zeros(grid.size, dtype=bool)
    for i, tb in enumerate(tubes):
        if np.any(tube_union & tb.mask):
            raise GeometryError(
                "saddle tubes overlap; decrease rho0/delta0 (a bisection "
                "retry with halved parameters is suggested)"
            )
        tube_union |= tb.mask

    split = e_lower & (V < sigma + 3.0 * delta0) & ~tube_union
    labels, ncomp = ndimage.label(
        split.reshape(grid.n, grid.n),
        structure=ndimage.generate_binary_structure(2, 1),
    )
    labels = labels.ravel()
    lab_m = labels[grid.node_of(well.minimum.point)]
    lab_hat = labels[grid.node_of(well.hat_minimum.point)]
    if ncomp != 2 or lab_m == 0 or lab_hat == 0 or lab_m == lab_hat:
        raise GeometryError(
            f"removing the saddle tubes left {ncomp} components instead of "
            "two separating the minimum from its hat partner; rho0/delta0 "
            "too large or grid too coarse (bisection retry with halved "
            "parameters is suggested)"
        )
    e_plus = labels == lab_m
    e_minus = labels == lab_hat
    assert not np.any(tube_union & (e_plus | e_minus))

    return CutoffGeometry(well=well, grid=grid, rho0=float(rho0),
                          delta0=float(delta0), tubes=tuple(tubes),
                          e_plus=e_plus, e_minus=e_minus, e_lower=e_lower,
                          V_nodes=V)


# ---------------------------------------------------------------------------
# Quasimodes

@dataclass(frozen=True)
class Quasimode:
    """Node values of psi in [0, 2] with its weighted norm; phi = psi/norm."""

    well: LabelledWell
    h: float
    values: np.ndarray
    norm: float                  # ||psi|| in L^2(m_h)
    grid: Grid
    V_nodes: np.ndarray

    @property
    def phi(self) -> np.ndarray:
        return self.values / self.norm

    @property
    def support(self) -> np.ndarray:
        return self.values > 0.0


def _weighted_norm(values, V, h, dx) -> float:
    w = np.exp(-(V - V.min()) / h)
    w /= w.sum() * dx * dx
    return math.sqrt(float(np.sum(values * values * w) * dx * dx))


def _profile_integral(ts, rho0, abs_mu, h):
    """int_0^t chi(eta/rho0) e^{-|mu| eta^2/2h} deta per node, odd in t.

    On [0, rho0] chi = 1 and the integral is the exact Gaussian error
    function; the glue band [rho0, 2 rho0] is integrated per node by
    adaptive Simpson to 1e-12, cross-checked against the closed form on
    the plateau.
    """
    from scipy.special import erf

    def f(eta):
        return _chi_scalar(eta / rho0) * math.exp(
            -abs_mu * eta * eta / (2.0 * h))

    s = math.sqrt(abs_mu / (2.0 * h))
    amp = math.sqrt(math.pi) / (2.0 * s)

    def plateau_part(t):
        return amp * erf(s * t)

    check = abs(_adaptive_simpson(f, 0.0, rho0) - plateau_part(rho0))
    if check > 1e-9 * max(plateau_part(rho0), 1e-30):
        raise QuasimodeError("profile quadrature self-check failed")

    cap = 2.0 * rho0
    glue_full = _adaptive_simpson(f, rho0, cap)
    full = plateau_part(rho0) + glue_full

    ts = np.asarray(ts, dtype=float)
    out = np.empty(ts.shape)
    a = np.abs(ts)
    inner = a <= rho0
    out[inner] = plateau_part(a[inner])
    for i in np.flatnonzero(~inner):
        ai = min(float(a[i]), cap)
        out[i] = full if ai >= cap else (
            plateau_part(rho0) + _adaptive_simpson(f, rho0, ai))
    return np.copysign(out, ts), full


def build_quasimode(well: LabelledWell, geom: CutoffGeometry,
                    h: float) -> Quasimode:
    """psi = theta (kappa + 1) on the geometry's grid at parameter h."""
    if well is not geom.well:
        raise QuasimodeError("geometry was built for a different well")
    if not 0.0 < h <= 1.0:
        raise ValueError(f"h must lie in (0, 1], got {h}")
    grid, V = geom.grid, geom.V_nodes
    pts = grid.points()
    sigma, d0 = well.sigma, geom.delta0

    kappa = np.zeros(grid.size)
    kappa[geom.e_plus] = 1.0
    kappa[geom.e_minus] = -1.0
    for tb in geom.tubes:
        nodes = np.flatnonzero(tb.mask)
        t = (pts[nodes] - tb.saddle.point) @ tb.data.xi
        raw, full = _profile_integral(t, geom.rho0, tb.data.abs_mu, h)
        # quadrature dust can overshoot the plateau value by ~1e-12
        kappa[nodes] = np.clip(raw / full, -1.0, 1.0)

    theta = smoothstep((sigma + 2.0 * d0 - V) / (0.5 * d0))
    theta[~geom.e_lower] = 0.0
    psi = theta * (kappa + 1.0)
    if psi.min() < -1e-12 or psi.max() > 2.0 + 1e-12:
        raise QuasimodeError("quasimode values escaped [0, 2]")

    return Quasimode(well=well, h=h, values=psi,
                     norm=_weighted_norm(psi, V, h, grid.spacing),
                     grid=grid, V_nodes=V)


def constant_quasimode(well: LabelledWell, grid: Grid, land: Landscape,
                       h: float) -> Quasimode:
    """psi = 1 for the global minimum: the exact kernel direction."""
    if not well.is_global:
        raise ValueError("constant quasimode is reserved for the global well")
    V = land.V_at(grid.points())
    ones = np.ones(grid.size)
    return Quasimode(well=well, h=h, values=ones,
                     norm=_weighted_norm(ones, V, h, grid.spacing),
                     grid=grid, V_nodes=V)


# ---------------------------------------------------------------------------
# Weighted forms

@dataclass(frozen=True)
class QuadraticForms:
    dirichlet_psi: float         # <L psi, psi>_w
    dirichlet_phi: float         # <L phi, phi>_w
    residual_sq: float           # ||L psi||^2_w
    adjoint_residual_sq: float   # ||L* psi||^2_w


def _check_compatible(qm: Quasimode, op: OperatorMatrix):
    if op.which != "L-weighted":
        raise QuasimodeError("quadratic forms need the L-weighted operator")
    if (op.grid.n != qm.grid.n
            or op.grid.halfwidth != qm.grid.halfwidth
            or op.h != qm.h):
        raise QuasimodeError("operator grid or h does not match the quasimode")


def dirichlet_and_residuals(qm: Quasimode, op: OperatorMatrix) -> QuadraticForms:
    _check_compatible(qm, op)
    psi = qm.values
    Lpsi = op.matrix @ psi
    dir_psi = float(np.real(op.inner(psi, Lpsi)))
    # weighted adjoint: L* = W^-1 L^T W; nodes whose weight underflowed to
    # zero carry zero measure and are dropped from the quotient
    w = op.weights
    y = np.zeros_like(psi)
    np.divide(op.matrix.T @ (w * psi), w, out=y, where=w > 0)
    return QuadraticForms(
        dirichlet_psi=dir_psi,
        dirichlet_phi=dir_psi / qm.norm**2,
        residual_sq=float(np.real(op.inner(Lpsi, Lpsi))),
        adjoint_residual_sq=float(np.real(op.inner(y, y))),
    )


@dataclass(frozen=True)
class InteractionResult:
    interaction: np.ndarray      # K[j, k] = <L phi_j, phi_k>_w
    gram: np.ndarray             # G[j, k] = <phi_j, phi_k>_w


def interaction_matrix(quasimodes: Sequence[Quasimode],
                       op: OperatorMatrix) -> InteractionResult:
    """Pairwise weighted forms, after checking the support structure.

    Two quasimode supports must either be disjoint (equal saddle values) or
    nested with the higher-barrier psi constant (= 2) across the lower one;
    the constant global quasimode is exempt.
    """
    for qm in quasimodes:
        _check_compatible(qm, op)
    n = len(quasimodes)
    for j in range(n):
        for k in range(j + 1, n):
            a, b = quasimodes[j], quasimodes[k]
            if a.well.is_global or b.well.is_global:
                continue
            if a.well.sigma < b.well.sigma:
                a, b = b, a
            overlap = a.support & b.support
            if not np.any(overlap):
                continue
            if a.well.sigma == b.well.sigma:
                raise QuasimodeError(
                    "supports of equal-level quasimodes overlap; decrease "
                    "rho0/delta0"
                )
            if np.max(np.abs(a.values[b.support] - 2.0)) > 1e-9:
                raise QuasimodeError(
                    "nested quasimode is not constant across the inner "
                    "support; decrease rho0/delta0"
                )
    phis = [qm.phi for qm in quasimodes]
    K = np.empty((n, n))
    G = np.empty((n, n))
    for j in range(n):
        Lphi = op.matrix @ phis[j]
        for k in range(n):
            K[j, k] = float(np.real(op.inner(phis[k], Lphi)))
            G[j, k] = float(np.real(op.inner(phis[j], phis[k])))
    return InteractionResult(interaction=K, gram=G)


# ---------------------------------------------------------------------------
# Closed-form Laplace predictions (oracles for the quadrature checks)

def _D(cp: CriticalPoint) -> float:
    return math.sqrt(abs(float(np.linalg.det(cp.hessian))))


def predicted_norm_sq(well: LabelledWell, wm: WellMap, h: float) -> float:
    """Laplace asymptotics of ||psi||^2: 4 (D_mbar/D_m) e^{-(V(m)-V(mbar))/h}."""
    mbar = wm.global_well.minimum
    return (4.0 * _D(mbar) / _D(well.minimum)
            * math.exp(-(well.minimum.value - mbar.value) / h))


def predicted_dirichlet(well: LabelledWell, wm: WellMap,
                        data: Mapping[int, SaddleSpectralData],
                        h: float) -> tuple[float, float]:
    """(<L psi, psi>, <L phi, phi>) asymptotics.

    The phi form is the Eyring-Kramers rate
    sum_s |mu(s)|/(2 pi) (D_m/D_s) e^{-S(m)/h}; the psi form carries the
    global-minimum normalization instead.
    """
    mbar = wm.global_well.minimum
    psi_form = 0.0
    phi_form = 0.0
    for sad in well.saddles:
        mu = data[id(sad)].abs_mu
        psi_form += (2.0 * mu / math.pi) * _D(mbar) / _D(sad) * math.exp(
            -(sad.value - mbar.value) / h)
        phi_form += (mu / (2.0 * math.pi)) * _D(well.minimum) / _D(sad) \
            * math.exp(-(sad.value - well.minimum.value) / h)
    return psi_form, phi_form
