import os
from pathlib import Path

import numpy as np
import pytest

from adsplace import igso3
from adsplace.lattice import (
    AdslabSystem,
    AdsorbateTemplate,
    LatticeCell,
    Tag,
    minimum_image,
    place_adsorbate,
    to_cartesian,
)

# Acceptance outcomes collected by tests/test_acceptance.py, printed at the end of the run.
AC_RESULTS: dict[str, tuple[bool, str]] = {}


def record_ac(name: str, passed: bool, detail: str) -> None:
    AC_RESULTS[name] = (bool(passed), detail)
    print(f"{name}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not AC_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(AC_RESULTS, key=lambda s: int(s.split("-")[1])):
        ok, detail = AC_RESULTS[name]
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def table(request):
    """Default IGSO(3) table, cached across runs in the pytest cache directory."""
    cache = os.environ.get("ADSPLACE_TABLE_CACHE")
    if cache:
        path = Path(cache)
    elif getattr(request.config, "cache", None) is not None:
        path = Path(request.config.cache.mkdir("adsplace")) / "igso3_default.npz"
    else:
        path = Path(request.config.rootpath) / ".igso3_default.npz"
    return igso3.load_or_build_table(path)


@pytest.fixture(scope="session")
def small_table():
    return igso3.build_table(n_sigma=64, n_omega=512, l_max=600)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_slab(a=3.0, n=3, gap=2.0, free_top=True):
    """Two-layer square slab; bottom layer fixed, top layer free."""
    cell = LatticeCell.slab(n * a, n * a, 20.0)
    pos, tags = [], []
    for layer, z in enumerate([5.0, 5.0 + gap]):
        for i in range(n):
            for j in range(n):
                off = 0.0 if layer == 1 else 0.5 * a
                pos.append([i * a + off, j * a + off, z])
                tags.append(Tag.FREE_SLAB if (layer == 1 and free_top) else Tag.FIXED_SLAB)
    return AdslabSystem(np.array(pos), np.full(len(pos), 29), np.array(tags), cell)


@pytest.fixture
def slab():
    return toy_slab()


CO = AdsorbateTemplate("CO", [6, 8], [[0, 0, 0], [0, 0, 1.15]])


def co_adslab(site=(4.0, 4.0), height=9.0, rotvec=None):
    """CO on the toy slab with its COM at ``site`` and ``height``."""
    return place_adsorbate(toy_slab(), CO, [site[0], site[1], height], rotvec)


@pytest.fixture
def adslab():
    return co_adslab()


def fd_forces(calc, system, h=1e-5):
    """Central finite-difference forces of ``calc`` on every atom."""
    from adsplace.potentials import evaluate

    out = np.zeros_like(system.positions)
    for a in range(len(system)):
        for c in range(3):
            p = system.positions.copy()
            p[a, c] += h
            up = evaluate(calc, system.with_positions(p)).energy
            p[a, c] -= 2 * h
            down = evaluate(calc, system.with_positions(p)).energy
            out[a, c] = -(up - down) / (2 * h)
    return out


def random_lj_system(rng):
    """Random periodic cluster of mixed species with no close contacts."""
    from adsplace.potentials import LennardJonesPeriodic

    cell = LatticeCell.slab(rng.uniform(7, 9), rng.uniform(7, 9), 20.0)
    pos = []
    while len(pos) < 8:
        x = to_cartesian(cell, [rng.uniform(), rng.uniform(), 0]) + [0, 0, rng.uniform(5, 9)]
        if all(np.linalg.norm(minimum_image(cell, x - q)) > 2.0 for q in pos):
            pos.append(x)
    species = rng.choice([6, 8, 29], size=len(pos))
    tags = np.where(np.arange(len(pos)) < 4, int(Tag.FREE_SLAB), int(Tag.ADSORBATE))
    calc = LennardJonesPeriodic(epsilon=0.1, sigma=2.0, cutoff=5.0, pairs={"6-8": (0.2, 1.5), "8-29": (0.05, 2.2)})
    return AdslabSystem(np.array(pos), species, tags, cell), calc


def random_pes_system(rng, preset="multi_well"):
    """Preset synthetic PES with a randomly placed, rotated adsorbate and a jiggled top layer."""
    from adsplace.benchmark import preset_system

    slab, template, calc = preset_system(preset)
    f = rng.uniform(size=2)
    com = to_cartesian(slab.cell, [f[0], f[1], 0]) + [0, 0, calc.z_surface + rng.uniform(1.2, 3.5)]
    s = place_adsorbate(slab, template, com, rng.normal(size=3))
    # stretch the molecule and move surface atoms off their tether points
    p = s.positions.copy()
    p[s.free_mask] += rng.normal(scale=0.05, size=(int(s.free_mask.sum()), 3))
    return s.with_positions(p), calc
