import numpy as np
import pytest
from conftest import random_pes_system

from adsplace import relax as relax_mod
from adsplace.benchmark import PRESETS, oracle_minimum, preset_system
from adsplace.errors import NumericalBlowup
from adsplace.lattice import AdslabSystem, LatticeCell, place_adsorbate
from adsplace.potentials import EnergyForces, LennardJonesPeriodic, reference_energies
from adsplace.relax import RelaxConfig, max_force, relax
from adsplace.sampler import init_placement

BIG = LatticeCell.slab(20, 20, 20)


class Bowl:
    """E = k/2 |x - mu|^2 on the single free atom."""

    def __init__(self, k, mu):
        self.k, self.mu = k, np.asarray(mu, float)

    def __call__(self, spec, system):
        d = system.positions - self.mu
        d[system.free_mask == 0] = 0
        return EnergyForces(0.5 * self.k * float((d**2).sum()), -self.k * d)


def test_config_defaults():
    cfg = RelaxConfig()
    assert (cfg.maxstep, cfg.memory, cfg.damping, cfg.alpha, cfg.fmax, cfg.max_iterations) == (
        0.04, 50, 1.0, 70.0, 0.01, 300)
    with pytest.raises(ValueError):
        RelaxConfig(memory=0)


def test_quadratic_bowl(monkeypatch):
    mu = np.array([5.0, 5.0, 5.0])
    monkeypatch.setattr(relax_mod, "evaluate", Bowl(3.0, mu))
    s = AdslabSystem([mu + [0.02, -0.01, 0.015]], [8], [2], BIG)
    res = relax(s, None)
    assert res.converged and res.n_iterations <= 3
    assert res.fmax < 0.01
    assert np.linalg.norm(res.system.positions[0] - mu) < 0.01 / 3.0


def test_lj_dimer():
    calc = LennardJonesPeriodic(epsilon=1.0, sigma=1.0, cutoff=3.0)
    s = AdslabSystem([[5, 5, 5], [6.5, 5, 5]], [18, 18], [0, 2], BIG)
    res = relax(s, calc)
    r = np.linalg.norm(res.system.positions[1] - res.system.positions[0])
    assert res.converged
    assert r == pytest.approx(2 ** (1 / 6), abs=1e-3)


@pytest.mark.parametrize("seed", range(4))
def test_fixed_atoms_bitwise_and_maxstep(seed):
    s, calc = random_pes_system(np.random.default_rng(seed))
    res = relax(s, calc, record_trajectory=True)
    fixed = s.tags == 0
    assert np.array_equal(res.system.positions[fixed], s.positions[fixed])
    assert max(t["step"] for t in res.trajectory) <= 0.04 + 1e-12


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_energy_non_increasing(name):
    rng = np.random.default_rng(1)
    slab, template, calc = preset_system(name)
    for _ in range(3):
        res = relax(init_placement(slab, template, rng), calc, record_trajectory=True)
        e = np.array([t["energy"] for t in res.trajectory])
        assert np.all(np.diff(e) <= 1e-12 * np.maximum(1.0, np.abs(e[:-1])))


def test_deterministic():
    s, calc = random_pes_system(np.random.default_rng(9))
    a = relax(s, calc, record_trajectory=True)
    b = relax(s, calc, record_trajectory=True)
    assert np.array_equal(a.system.positions, b.system.positions) and a.trajectory == b.trajectory


def test_not_converged_flag():
    s, calc = random_pes_system(np.random.default_rng(2))
    res = relax(s, calc, RelaxConfig(max_iterations=2))
    assert not res.converged and res.n_iterations == 2


def test_blowup_returns_last_state(monkeypatch):
    calls = {"n": 0}
    bowl = Bowl(1.0, [5, 5, 5])

    def flaky(spec, system):
        calls["n"] += 1
        if calls["n"] > 3:
            raise NumericalBlowup("boom")
        return bowl(spec, system)

    monkeypatch.setattr(relax_mod, "evaluate", flaky)
    s = AdslabSystem([[6.0, 5.0, 5.0]], [8], [2], BIG)
    res = relax(s, None)
    assert res.failed and not res.converged and np.isfinite(res.system.positions).all()


def test_max_force_ignores_fixed():
    f = np.array([[10.0, 0, 0], [0.0, 0.3, 0.4]])
    assert max_force(f, np.array([False, True])) == pytest.approx(0.5)


@pytest.mark.parametrize("name", ["single_well", "three_well", "three_well_O", "multi_well", "multi_well_O"])
def test_random_starts_land_on_oracle_minima(name):
    # tight fmax: at fmax = 0.01 eV/Å soft modes leave up to ~5e-4 eV of residual energy
    slab, template, calc = preset_system(name)
    probe = place_adsorbate(slab, template, [0, 0, calc.z_surface + 2])
    e_slab, e_ads = reference_energies(calc, probe)
    minima = np.array([m.energy for m in oracle_minimum(slab, template, calc, e_slab=e_slab,
                                                        e_adsorbate=e_ads).local_minima])
    rng = np.random.default_rng(0)
    for _ in range(20):
        res = relax(init_placement(slab, template, rng), calc, RelaxConfig(fmax=1e-4, max_iterations=3000))
        assert res.converged
        assert np.abs(minima - (res.energy - e_slab - e_ads)).min() < 1e-4
