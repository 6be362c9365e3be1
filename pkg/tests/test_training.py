import numpy as np
import pytest
from conftest import co_adslab

from adsplace.errors import ConfigError, GradientOverflow
from adsplace.noise import NoiseSchedule, TrainingSample
from adsplace.score_net import NetConfig, ReferenceScoreNet, read_checkpoint
from adsplace.training import (
    TrainConfig,
    epoch_steps,
    learning_rate,
    load_samples,
    save_samples,
    split_by_system,
    train,
)

NET = dict(species=(6, 8, 29), hidden_dim=8, n_rbf=6, n_message_rounds=1, n_freq=2)


def samples():
    out = []
    for k, sid in enumerate("abc"):
        for j, e in enumerate((0.0, -0.2, -0.7)):
            out.append(TrainingSample(co_adslab(site=(1.0 + 2 * k, 1.5 + 2 * j)), e, system_id=sid))
    return out


def small_cfg(**kw):
    base = dict(steps=12, batch_size=4, warmup_steps=3, val_every=4, val_draws=2)
    base.update(kw)
    return TrainConfig(**base)


class TestLearningRate:
    def test_warmup_and_decay(self):
        lrs = [learning_rate(s, 100, 1e-3, 10) for s in range(100)]
        assert lrs[0] == pytest.approx(1e-4)
        assert lrs[9] == pytest.approx(1e-3)
        assert lrs[10] == pytest.approx(1e-3)
        assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
        assert lrs[-1] < 1e-6

    def test_final_ratio(self):
        assert learning_rate(10**6, 100, 1.0, 0, final_ratio=0.1) == pytest.approx(0.1)


def test_split_by_system_no_leak():
    train_set, val_set = split_by_system(samples(), 0.34, np.random.default_rng(0))
    assert {s.system_id for s in train_set}.isdisjoint({s.system_id for s in val_set})
    assert len(val_set) == 3


def test_samples_round_trip(tmp_path):
    save_samples(samples(), tmp_path / "s.jsonl")
    back = load_samples(tmp_path / "s.jsonl")
    assert [s.relative_energy for s in back] == [s.relative_energy for s in samples()]
    assert np.array_equal(back[4].system.positions, samples()[4].system.positions)


class TestTrain:
    def test_smoke(self, tmp_path, small_table):
        cfg = small_cfg()
        res = train(samples(), NetConfig(**NET, conditional=True), cfg, NoiseSchedule(), small_table, out_dir=tmp_path)
        assert len(res.history) == 12
        assert all(np.isfinite(h["train_loss"]) for h in res.history)
        assert (tmp_path / "last.npz").exists() and (tmp_path / "best.npz").exists()
        assert (tmp_path / "loss_curve.tsv").read_text().count("\n") == 13
        assert res.n_train_samples == 9

    def test_unconditional_uses_global_minima(self, small_table):
        res = train(samples(), NetConfig(**NET), small_cfg(steps=2, mode="unconditional"), NoiseSchedule(), small_table)
        assert res.n_train_samples == 3

    def test_mode_mismatch(self, small_table):
        with pytest.raises(ConfigError):
            train(samples(), NetConfig(**NET), small_cfg(), NoiseSchedule(), small_table)

    def test_resume_matches_uninterrupted(self, tmp_path, small_table):
        net = NetConfig(**NET, conditional=True)
        cfg = small_cfg()
        train(samples(), net, cfg, NoiseSchedule(), small_table, out_dir=tmp_path / "full")
        train(samples(), net, cfg, NoiseSchedule(), small_table, out_dir=tmp_path / "part", stop_after=5)
        train(samples(), net, cfg, NoiseSchedule(), small_table, out_dir=tmp_path / "part",
              resume=str(tmp_path / "part" / "last.npz"))
        _, a = read_checkpoint(tmp_path / "full" / "last.npz")
        _, b = read_checkpoint(tmp_path / "part" / "last.npz")
        for k in a:
            if k.startswith("param/"):
                assert np.allclose(a[k], b[k], atol=1e-10, rtol=0)
        full = (tmp_path / "full" / "loss_curve.tsv").read_text()
        part = (tmp_path / "part" / "loss_curve.tsv").read_text()
        assert full == part

    def test_non_finite_loss_aborts_with_checkpoint(self, tmp_path, small_table, monkeypatch):
        original = ReferenceScoreNet.loss
        calls = {"n": 0}

        def flaky(self, *a, **kw):
            calls["n"] += 1
            out = original(self, *a, **kw)
            return out * float("nan") if calls["n"] == 7 else out

        monkeypatch.setattr(ReferenceScoreNet, "loss", flaky)
        with pytest.raises(GradientOverflow) as err:
            train(samples(), NetConfig(**NET, conditional=True), small_cfg(val_every=100), NoiseSchedule(),
                  small_table, out_dir=tmp_path)
        assert err.value.batch_id == 6
        meta, arrays = read_checkpoint(tmp_path / "last.npz")
        assert meta["step"] == 6
        assert all(np.isfinite(v).all() for k, v in arrays.items() if k.startswith("param/"))

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            TrainConfig(steps=0)
        with pytest.raises(ConfigError):
            TrainConfig(val_fraction=1.0)


def test_epochs_scale_with_dataset(small_table):
    assert epoch_steps(2, 9, 4) == 5 and epoch_steps(0.1, 3, 32) == 1
    cond = train(samples(), NetConfig(**NET, conditional=True), small_cfg(epochs=2), NoiseSchedule(), small_table)
    uncond = train(samples(), NetConfig(**NET), small_cfg(epochs=2, mode="unconditional"), NoiseSchedule(),
                   small_table)
    assert len(cond.history) == 5 and len(uncond.history) == 2


def test_resume_reproduces_next_step_loss(tmp_path, small_table):
    net = NetConfig(**NET, conditional=True)
    cfg = small_cfg(steps=8, val_every=100)
    full = train(samples(), net, cfg, NoiseSchedule(), small_table)
    train(samples(), net, cfg, NoiseSchedule(), small_table, out_dir=tmp_path, stop_after=4)
    resumed = train(samples(), net, cfg, NoiseSchedule(), small_table, out_dir=tmp_path,
                    resume=str(tmp_path / "last.npz"), stop_after=5)
    assert abs(resumed.history[4]["train_loss"] - full.history[4]["train_loss"]) < 1e-10
