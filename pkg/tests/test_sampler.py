import numpy as np
import pytest
from conftest import CO, co_adslab, toy_slab
from scipy.stats import chisquare

from adsplace.errors import ContractViolation, NonFiniteScore
from adsplace.lattice import center_of_mass, minimum_image, to_fractional
from adsplace.noise import NoiseSchedule
from adsplace.sampler import (
    AnalyticWellScore,
    SamplerConfig,
    init_placement,
    read_trajectories,
    reverse_step,
    sample_many,
    sample_pose,
)
from adsplace.score_net import ScoreModelOutput

S = NoiseSchedule()


class ConstantScore:
    conditional = False

    def __init__(self, tr, rot):
        self.tr, self.rot = np.asarray(tr, float), np.asarray(rot, float)

    def predict(self, inputs):
        return [ScoreModelOutput(self.tr.copy(), self.rot.copy()) for _ in inputs]


class TestInitPlacement:
    def test_reproducible(self):
        a = init_placement(toy_slab(), CO, np.random.default_rng(3))
        b = init_placement(toy_slab(), CO, np.random.default_rng(3))
        assert np.array_equal(a.positions, b.positions)

    def test_gap(self):
        s = init_placement(toy_slab(), CO, np.random.default_rng(0), gap=2.0)
        ads_z = s.positions[s.adsorbate_mask, 2]
        assert ads_z.min() - s.positions[s.slab_mask, 2].max() == pytest.approx(2.0)

    def test_uniform_in_plane(self):
        rng = np.random.default_rng(4)
        slab = toy_slab()
        counts = np.zeros((8, 8))
        for _ in range(10_000):
            s = init_placement(slab, CO, rng)
            f = to_fractional(s.cell, center_of_mass(s))[:2]
            assert np.all((f >= 0) & (f < 1))
            counts[int(f[0] * 8), int(f[1] * 8)] += 1
        assert chisquare(counts.ravel()).pvalue > 0.01


class TestReverseStep:
    def test_zero_score_identity(self):
        s = co_adslab()
        new, steps = reverse_step(s, 0.5, 0.01, ConstantScore([0, 0], [0, 0, 0]), S, SamplerConfig(),
                                  np.random.default_rng(0))
        assert np.allclose(new.positions, s.positions, atol=1e-12)
        assert steps == (0.0, 0.0)

    def test_non_finite_score(self, tmp_path):
        model = ConstantScore([np.nan, 0], [0, 0, 0])
        with pytest.raises(NonFiniteScore) as err:
            sample_pose(toy_slab(), CO, model, SamplerConfig(n_steps=5), S, np.random.default_rng(0),
                        dump_path=tmp_path / "dump.jsonl")
        assert err.value.trajectory is not None
        assert len(read_trajectories(tmp_path / "dump.jsonl")) == 1


class TestSamplePose:
    def test_ode_bit_deterministic(self):
        model = AnalyticWellScore([2.0, 5.0], toy_slab().cell)
        cfg = SamplerConfig(n_steps=30)
        a, ta, na = sample_pose(toy_slab(), CO, model, cfg, S, np.random.default_rng(8))
        b, tb, nb = sample_pose(toy_slab(), CO, model, cfg, S, np.random.default_rng(8))
        assert np.array_equal(a.positions, b.positions) and na == nb
        assert all(np.array_equal(x.com, y.com) for x, y in zip(ta, tb))

    @pytest.mark.parametrize("seed", range(5))
    def test_analytic_well(self, seed):
        slab = toy_slab()
        mu = np.array([4.2, 1.7])
        model = AnalyticWellScore(mu, slab.cell)
        final, traj, n = sample_pose(slab, CO, model, SamplerConfig(), S, np.random.default_rng(seed))
        d = np.zeros(3)
        d[:2] = center_of_mass(final)[:2] - mu
        assert np.linalg.norm(minimum_image(slab.cell, d)) < 0.1

    def test_infinite_tolerance_runs_all_steps(self):
        model = ConstantScore([0, 0], [0, 0, 0])
        cfg = SamplerConfig(n_steps=17, tr_tol=np.inf, rot_tol=np.inf)
        _, traj, n = sample_pose(toy_slab(), CO, model, cfg, S, np.random.default_rng(0))
        assert n == 17 and len(traj) == 18

    def test_early_stop(self):
        _, traj, n = sample_pose(toy_slab(), CO, ConstantScore([0, 0], [0, 0, 0]), SamplerConfig(), S,
                                 np.random.default_rng(0))
        assert n == 1

    @pytest.mark.parametrize("mode", ["ODE", "SDE"])
    def test_height_fixed_and_length_bounded(self, mode):
        model = AnalyticWellScore([1.0, 1.0], toy_slab().cell)
        cfg = SamplerConfig(n_steps=40, mode=mode)
        _, traj, n = sample_pose(toy_slab(), CO, model, cfg, S, np.random.default_rng(1))
        z = [s.com[2] for s in traj]
        assert np.allclose(z, z[0], atol=1e-9)
        assert n <= cfg.n_steps and len(traj) == n + 1

    def test_grouping_does_not_matter(self):
        model = AnalyticWellScore([1.0, 1.0], toy_slab().cell)
        cfg = SamplerConfig(n_steps=20, mode="SDE")
        many = sample_many(toy_slab(), CO, model, cfg, S, [np.random.default_rng(k) for k in range(3)])
        one = sample_many(toy_slab(), CO, model, cfg, S, [np.random.default_rng(2)])
        assert np.array_equal(many[2].system.positions, one[0].system.positions)

    def test_config_validation(self):
        with pytest.raises(ContractViolation):
            SamplerConfig(n_steps=0)
        with pytest.raises(ContractViolation):
            SamplerConfig(tr_tol=0.0)
