"""Sublevel-set topology and the recursive labelling of minima.

For a Morse potential the metastable hierarchy is encoded by *separating
saddles*: index-1 critical points s such that the two local descent pockets
of ``B(s, r) & {V < V(s)}`` lie in distinct connected components of the
global strict sublevel set.  Sweeping the separating saddle values
``sigma_2 > ... > sigma_N`` downwards (with a fictive ``sigma_1 = +inf``),
each round labels the new components of ``{V < sigma_i}`` that contain no
previously labelled minimum: the component E(m) is attached to its deepest
minimum m, to the boundary saddles j(m), to the saddle value sigma(m) and to
the barrier S(m) = sigma(m) - V(m).

Connectivity is computed on a uniform grid with face adjacency
(`scipy.ndimage.label`); levels are only ever probed just below critical
values, where the discrete topology is stable.  Components that contain no
critical minimum (sub-grid shards along a level set) are ignored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .landscape import CriticalPoint, Landscape

__all__ = [
    "SublevelTopology", "SaddleSeparation", "LabelledWell", "WellMap",
    "GenericityReport", "LabellingError", "separating_saddles",
    "label_minima", "check_generic", "flood_component",
]

VALUE_TIE_TOL = 1e-10   # two critical values closer than this count as equal


class LabellingError(RuntimeError):
    pass


def _cross(d: int) -> np.ndarray:
    return ndimage.generate_binary_structure(d, 1)


def flood_component(mask: np.ndarray, seed: tuple[int, ...]) -> np.ndarray:
    """Connected component (face adjacency) of ``mask`` containing ``seed``."""
    if not mask[seed]:
        raise LabellingError(f"seed node {seed} is not inside the mask")
    labels, _ = ndimage.label(mask, structure=_cross(mask.ndim))
    return labels == labels[seed]


class SublevelTopology:
    """V sampled on a uniform grid over the landscape box, with cached
    connected-component labellings of strict sublevel sets."""

    def __init__(self, land: Landscape, resolution: int = 256):
        if resolution < 16:
            raise ValueError("resolution too small to resolve sublevel sets")
        self.land = land
        self.resolution = resolution
        d, L = land.dimension, land.halfwidth
        self.axes = tuple(np.linspace(-L, L, resolution) for _ in range(d))
        self.spacing = 2 * L / (resolution - 1)
        mesh = np.meshgrid(*self.axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        self.values = land.V_at(pts).reshape((resolution,) * d)
        self._labels_cache: dict[float, tuple[np.ndarray, int]] = {}

    def node_of(self, point) -> tuple[int, ...]:
        point = np.asarray(point, dtype=float)
        L = self.land.halfwidth
        idx = np.rint((point + L) / self.spacing).astype(int)
        idx = np.clip(idx, 0, self.resolution - 1)
        return tuple(int(i) for i in idx)

    def components(self, level: float) -> tuple[np.ndarray, int]:
        """Labelled components of {V < level}; label 0 is the complement."""
        if level in self._labels_cache:
            return self._labels_cache[level]
        if math.isinf(level) and level > 0:
            labels = np.ones_like(self.values, dtype=np.int32)
            out = (labels, 1)
        else:
            mask = self.values < level
            labels, n = ndimage.label(mask, structure=_cross(self.values.ndim))
            out = (labels, n)
        self._labels_cache[level] = out
        return out

    def component_of(self, point, level: float) -> int:
        labels, _ = self.components(level)
        return int(labels[self.node_of(point)])


# ---------------------------------------------------------------------------
# Separating saddles

@dataclass(frozen=True)
class SaddleSeparation:
    """Local/global separation data for one index-1 saddle."""

    saddle: CriticalPoint
    level: float                     # V(s) - eps used for the test
    pocket_points: tuple[np.ndarray, np.ndarray]   # deepest node of each pocket
    separating: bool


def _local_pockets(topo: SublevelTopology, s: CriticalPoint, level: float,
                   ball_steps: int) -> list[tuple[int, ...]]:
    """Deepest node of each component of B(s, ball_steps*dx) & {V < level}."""
    center = topo.node_of(s.point)
    r = ball_steps
    slices = tuple(
        slice(max(0, c - r), min(topo.resolution, c + r + 1)) for c in center
    )
    sub = topo.values[slices]
    offsets = np.indices(sub.shape)
    dist2 = sum(
        (offsets[k] + slices[k].start - center[k]) ** 2
        for k in range(sub.ndim)
    )
    mask = (sub < level) & (dist2 <= r * r)
    labels, n = ndimage.label(mask, structure=_cross(sub.ndim))
    pockets = []
    for lab in range(1, n + 1):
        inside = labels == lab
        flat = np.argmin(np.where(inside, sub, np.inf))
        node = np.unravel_index(flat, sub.shape)
        pockets.append(tuple(node[k] + slices[k].start for k in range(sub.ndim)))
    return pockets


def separating_saddles(
    criticals: list[CriticalPoint],
    topo: SublevelTopology,
    ball_steps: int = 3,
) -> list[SaddleSeparation]:
    """Classify every index-1 critical point as separating or not.

    The local test looks at B(s, 3 grid steps) & {V < V(s) - eps} with eps one
    grid-quantum of descent (0.5 |lambda_1| dx^2); exactly two local pockets
    must appear, else the grid is declared too coarse.  The saddle separates
    iff the pockets fall in distinct global components of the sublevel set.
    """
    out = []
    for s in criticals:
        if not s.is_saddle:
            continue
        lam1 = np.linalg.eigvalsh(s.hessian)[0]        # the negative one
        eps = 0.5 * abs(lam1) * topo.spacing**2
        level = s.value - eps
        pockets = _local_pockets(topo, s, level, ball_steps)
        if len(pockets) != 2:
            raise LabellingError(
                f"ambiguous local structure at saddle {s.point} "
                f"({len(pockets)} pockets in the {ball_steps}-step ball); "
                "grid too coarse, increase the labelling resolution"
            )
        labels, _ = topo.components(level)
        la, lb = labels[pockets[0]], labels[pockets[1]]
        if la == 0 or lb == 0:
            raise LabellingError(
                f"pocket node fell outside the sublevel set at saddle "
                f"{s.point}; grid too coarse"
            )
        grid_pts = tuple(
            np.array([topo.axes[k][p[k]] for k in range(len(p))])
            for p in pockets
        )
        out.append(SaddleSeparation(
            saddle=s, level=level, pocket_points=grid_pts,
            separating=bool(la != lb),
        ))
    return out


# ---------------------------------------------------------------------------
# Recursive labelling

@dataclass(frozen=True)
class LabelledWell:
    """One minimum with its labelling data.

    ``sigma`` and ``barrier`` are +inf for the global well.  ``saddle_sides``
    gives, for each saddle in j(m), a sample point of the E(m)-side descent
    pocket and one of the far side (used downstream to orient the unstable
    direction and to seed component fills on other grids).
    """

    minimum: CriticalPoint
    round_index: int
    sigma: float
    barrier: float
    saddles: tuple[CriticalPoint, ...]
    saddle_sides: tuple[tuple[CriticalPoint, np.ndarray, np.ndarray], ...]
    level: float                 # grid level realizing E(m); +inf for round 1
    prev_sigma: float            # sigma_{i-1} (+inf for rounds 1 and 2)
    prev_level: float            # grid level realizing {V < sigma_{i-1}}
    hat_minimum: CriticalPoint | None

    @property
    def is_global(self) -> bool:
        return math.isinf(self.barrier)


@dataclass(frozen=True)
class WellMap:
    wells: tuple[LabelledWell, ...]
    separations: tuple[SaddleSeparation, ...]
    topo: SublevelTopology

    @property
    def global_well(self) -> LabelledWell:
        return next(w for w in self.wells if w.is_global)

    def well_for(self, minimum: CriticalPoint) -> LabelledWell:
        for w in self.wells:
            if np.array_equal(w.minimum.point, minimum.point):
                return w
        raise KeyError(f"no labelled well for minimum at {minimum.point}")

    def E_mask(self, well: LabelledWell) -> np.ndarray:
        """Grid mask of E(m) on the labelling grid."""
        if well.is_global:
            return np.ones_like(self.topo.values, dtype=bool)
        labels, _ = self.topo.components(well.level)
        return labels == labels[self.topo.node_of(well.minimum.point)]


def _deepest(minima: list[CriticalPoint]) -> CriticalPoint:
    """Minimum of smallest value; ties within VALUE_TIE_TOL broken
    lexicographically by coordinates."""
    best = min(m.value for m in minima)
    tied = [m for m in minima if m.value <= best + VALUE_TIE_TOL]
    return min(tied, key=lambda m: tuple(m.point))


def label_minima(
    criticals: list[CriticalPoint],
    topo: SublevelTopology,
    ball_steps: int = 3,
) -> WellMap:
    """Run the labelling recursion over decreasing separating saddle values."""
    minima = [c for c in criticals if c.is_minimum]
    if not minima:
        raise LabellingError("no minima to label")
    seps = separating_saddles(criticals, topo, ball_steps=ball_steps)
    separating = [s for s in seps if s.separating]

    # Distinct saddle values, descending; saddles tied within tolerance share
    # a round.
    rounds: list[list[SaddleSeparation]] = []
    for sep in sorted(separating, key=lambda s: -s.saddle.value):
        if rounds and rounds[-1][0].saddle.value - sep.saddle.value <= VALUE_TIE_TOL:
            rounds[-1].append(sep)
        else:
            rounds.append([sep])

    wells: list[LabelledWell] = []
    labelled: list[CriticalPoint] = []

    # Round 1: the global minimum, E = the whole space.
    m0 = _deepest(minima)
    wells.append(LabelledWell(
        minimum=m0, round_index=1, sigma=math.inf, barrier=math.inf,
        saddles=(), saddle_sides=(), level=math.inf, prev_sigma=math.inf,
        prev_level=math.inf, hat_minimum=None,
    ))
    labelled.append(m0)

    prev_sigma, prev_level = math.inf, math.inf
    for i, group in enumerate(rounds, start=2):
        sigma = group[0].saddle.value
        level = min(sep.level for sep in group)
        labels, _ = topo.components(level)

        labelled_comps = {labels[topo.node_of(m.point)] for m in labelled}
        remaining = [m for m in minima
                     if not any(m is x for x in labelled)]
        by_comp: dict[int, list[CriticalPoint]] = {}
        for m in remaining:
            lab = labels[topo.node_of(m.point)]
            if lab == 0:
                continue  # this minimum sits above the current level
            by_comp.setdefault(int(lab), []).append(m)

        for lab, comp_minima in sorted(by_comp.items()):
            if lab in labelled_comps:
                continue
            m = _deepest(comp_minima)
            adjacent = []
            sides = []
            for sep in group:
                pa, pb = sep.pocket_points
                la = labels[topo.node_of(pa)]
                lb = labels[topo.node_of(pb)]
                if la == lab:
                    adjacent.append(sep)
                    sides.append((sep.saddle, pa, pb))
                elif lb == lab:
                    adjacent.append(sep)
                    sides.append((sep.saddle, pb, pa))
            if not adjacent:
                raise LabellingError(
                    f"component of minimum {m.point} appeared at level "
                    f"{sigma:.6g} without an adjacent separating saddle"
                )
            # The far side of any boundary saddle identifies the adjacent
            # component; its deepest minimum is m-hat.
            far_labels = {labels[topo.node_of(far)] for _, _, far in sides}
            hat = None
            candidates = [mm for mm in minima
                          if labels[topo.node_of(mm.point)] in far_labels]
            if candidates:
                hat = _deepest(candidates)
            wells.append(LabelledWell(
                minimum=m, round_index=i, sigma=sigma,
                barrier=sigma - m.value,
                saddles=tuple(sep.saddle for sep in adjacent),
                saddle_sides=tuple(sides),
                level=level, prev_sigma=prev_sigma, prev_level=prev_level,
                hat_minimum=hat,
            ))
            labelled.append(m)
        prev_sigma, prev_level = sigma, level

    if len(labelled) != len(minima):
        missing = [m.point for m in minima if not any(m is x for x in labelled)]
        raise LabellingError(
            f"labelling incomplete; unreached minima at {missing} "
            "(no separating saddle isolates them; check the landscape or grid)"
        )
    return WellMap(wells=tuple(wells), separations=tuple(seps), topo=topo)


# ---------------------------------------------------------------------------
# Genericity checks

@dataclass(frozen=True)
class GenericityReport:
    generic: bool
    double_well_equal_depth: bool
    violations: tuple[str, ...]


def check_generic(wm: WellMap) -> GenericityReport:
    """Unique deepest minimum per labelled component and disjoint j(m) sets.

    The equal-depth double well (exactly two minima at the same value) is
    reported separately: the sharp prefactor still exists for it via the
    symmetrized formula.
    """
    violations: list[str] = []
    minima = [w.minimum for w in wm.wells]

    for w in wm.wells:
        labels, _ = wm.topo.components(w.level)
        if w.is_global:
            members = minima
        else:
            lab = labels[wm.topo.node_of(w.minimum.point)]
            members = [m for m in minima
                       if labels[wm.topo.node_of(m.point)] == lab]
        values = sorted(m.value for m in members)
        if len(values) > 1 and values[1] - values[0] <= VALUE_TIE_TOL:
            violations.append(
                f"component of minimum {w.minimum.point} has tied deepest "
                f"minima (values {values[0]:.12g}, {values[1]:.12g})"
            )

    for a in range(len(wm.wells)):
        for b in range(a + 1, len(wm.wells)):
            ja = {id(s) for s in wm.wells[a].saddles}
            jb = {id(s) for s in wm.wells[b].saddles}
            if ja & jb:
                violations.append(
                    f"j(m) sets of minima {wm.wells[a].minimum.point} and "
                    f"{wm.wells[b].minimum.point} overlap"
                )

    values = sorted(m.value for m in minima)
    double_well = (len(minima) == 2
                   and values[1] - values[0] <= VALUE_TIE_TOL)
    return GenericityReport(
        generic=not violations,
        double_well_equal_depth=double_well,
        violations=tuple(violations),
    )
