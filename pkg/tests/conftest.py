"""Shared fixtures: landscape bundles and a cached operator factory.

Building the well map and assembling 192-squared operators is the dominant
cost of the suite, so everything derived from a preset is computed once per
session and shared between the module tests and the acceptance suite.
"""

from dataclasses import dataclass, field

import pytest

from kramers_lab.discretize import Grid, OperatorMatrix, assemble
from kramers_lab.labelling import SublevelTopology, WellMap, label_minima
from kramers_lab.landscape import Landscape, find_critical_points, make_preset
from kramers_lab.saddle import transverse_map


@dataclass
class PresetBundle:
    land: Landscape
    criticals: list
    wm: WellMap
    data: dict
    _ops: dict = field(default_factory=dict)

    @property
    def shallow_well(self):
        return next(w for w in self.wm.wells if not w.is_global)

    def op(self, h: float, n: int, which: str = "L-weighted") -> OperatorMatrix:
        key = (h, n, which)
        if key not in self._ops:
            grid = Grid(halfwidth=self.land.halfwidth, n=n)
            self._ops[key] = assemble(self.land, h, grid, which,
                                      criticals=self.criticals)
        return self._ops[key]


def _bundle(name, **kwargs):
    land = make_preset(name, **kwargs)
    criticals = find_critical_points(land)
    wm = label_minima(criticals, SublevelTopology(land))
    return PresetBundle(land=land, criticals=criticals, wm=wm,
                        data=transverse_map(land, wm))


@pytest.fixture(scope="session")
def tilted_c0():
    return _bundle("tilted_double_well")


@pytest.fixture(scope="session")
def tilted_c1():
    return _bundle("tilted_double_well", c=1.0)


@pytest.fixture(scope="session")
def triple():
    return _bundle("triple_well")


@pytest.fixture(scope="session")
def sym_double():
    return _bundle("sym_double_well")


@pytest.fixture(scope="session")
def sde_tilted(tilted_c0, tilted_c1):
    """2000-trial hitting runs at h = 0.2 with their dt-halved twins.

    These take a few minutes combined, so both the module tests and the
    acceptance suite draw from this single set of runs.
    """
    from kramers_lab.sde import halved_dt, hitting_time_stats, make_config

    runs = {}
    for tag, bundle in (("c0", tilted_c0), ("c1", tilted_c1)):
        cfg = make_config(bundle.land, bundle.wm, 0.2, trials=2000, seed=0)
        runs[tag] = (cfg, hitting_time_stats(cfg))
        half = halved_dt(cfg)
        runs[tag + "_half"] = (half, hitting_time_stats(half))
    return runs


@pytest.fixture(scope="session")
def sde_arrhenius(tilted_c0):
    """2000-trial runs at h = 0.15 and h = 0.25 for the slowdown trend."""
    from kramers_lab.sde import hitting_time_stats, make_config

    out = {}
    for h in (0.15, 0.25):
        cfg = make_config(tilted_c0.land, tilted_c0.wm, h, trials=2000, seed=0)
        out[h] = hitting_time_stats(cfg)
    return out
