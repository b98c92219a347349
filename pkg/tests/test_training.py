"""Schedules, AdamW semantics, train-step behavior, mixed-availability epochs."""

import numpy as np
import pytest

from channelvit import models, training
from channelvit import tensor as T
from channelvit.datagen import Dataset
from channelvit.errors import ConfigurationError, InputError, TrainingAbort
from channelvit.sampling import ChannelSampler, SamplerConfig
from channelvit.training import (AdamW, ScheduleConfig, accumulate_batch,
                                 clip_gradients, default_decay_filter, lr_at,
                                 mixed_train_epoch, train_model, train_step,
                                 upsample_weights, wd_at)


def tiny_config(**kw):
    base = dict(image_h=8, image_w=8, patch_size=4, channels=2, embed_dim=16,
                depth=2, heads=2, mlp_hidden=32, num_classes=2,
                variant="channelvit_tied")
    base.update(kw)
    return models.ModelConfig(**base)


class TestSchedules:
    SCHED = ScheduleConfig(peak_lr=5e-4, final_lr=1e-6, warmup_epochs=10,
                           total_epochs=100)

    def test_warmup_starts_at_zero(self):
        assert lr_at(0, 100, self.SCHED) == 0.0

    def test_warmup_ends_at_peak(self):
        assert lr_at(10 * 100, 100, self.SCHED) == pytest.approx(5e-4, abs=1e-18)

    def test_last_step_hits_final(self):
        assert lr_at(100 * 100 - 1, 100, self.SCHED) == pytest.approx(1e-6, abs=1e-18)

    def test_continuous_at_junction(self):
        warmup_steps = 10 * 100
        from_warmup = self.SCHED.peak_lr * warmup_steps / warmup_steps
        assert abs(lr_at(warmup_steps, 100, self.SCHED) - from_warmup) < 1e-12

    def test_monotone_decay_after_warmup(self):
        values = [lr_at(s, 100, self.SCHED) for s in range(1000, 10000, 500)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_wd_endpoints(self):
        sched = ScheduleConfig(total_epochs=101, warmup_epochs=0)
        assert wd_at(0, 100, sched) == pytest.approx(0.04, abs=1e-15)
        assert wd_at(101 * 100 - 1, 100, sched) == pytest.approx(0.4, abs=1e-15)

    def test_wd_midpoint(self):
        # 201 steps: midpoint index 100 sits exactly at t = 1/2
        sched = ScheduleConfig(total_epochs=201, warmup_epochs=0)
        assert wd_at(100, 1, sched) == pytest.approx(0.22, abs=1e-12)

    def test_validation(self):
        with pytest.raises(ConfigurationError):
            ScheduleConfig(warmup_epochs=20, total_epochs=10)
        with pytest.raises(ConfigurationError):
            ScheduleConfig(peak_lr=1e-5, final_lr=1e-3)
        with pytest.raises(ConfigurationError):
            ScheduleConfig(wd_start=0.5, wd_end=0.1)


class TestAdamW:
    def test_zero_grads_no_decay_is_identity(self):
        params = models.init_params(tiny_config(), seed=0)
        before = {k: v.value.copy() for k, v in params.named()}
        opt = AdamW(params)
        params.zero_grads()
        for _, node in params.named():
            node.grad = np.zeros_like(node.value)
        opt.step(lr=1e-3, wd=0.0)
        for name, node in params.named():
            assert np.array_equal(node.value, before[name]), name

    def test_scalar_step_matches_hand_computation(self):
        w = T.param(np.array([1.0]))
        params = models.ModelParams(tiny_config(), {"w": w})
        opt = AdamW(params)
        w.grad = np.array([0.5])
        opt.step(lr=0.1, wd=0.0)
        # hand-rolled single Adam update
        m = 0.1 * 0.5
        v = 0.001 * 0.25
        mhat = m / 0.1
        vhat = v / 0.001
        expect = 1.0 - 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
        assert abs(w.value[0] - expect) < 1e-12

    def test_decoupled_decay_shrinks_weights(self):
        w = T.param(np.array([[2.0]]))
        params = models.ModelParams(tiny_config(), {"head.w": w})
        opt = AdamW(params)
        w.grad = np.zeros((1, 1))
        opt.step(lr=0.1, wd=0.5)
        assert w.value[0, 0] == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-15)

    def test_nan_gradient_aborts_with_name(self):
        params = models.init_params(tiny_config(), seed=1)
        opt = AdamW(params)
        for _, node in params.named():
            node.grad = np.zeros_like(node.value)
        params.node("pos").grad = np.full_like(params.node("pos").value, np.nan)
        with pytest.raises(TrainingAbort, match="pos"):
            opt.step(lr=1e-3, wd=0.0)

    def test_bias_and_embeddings_not_decayed(self):
        params = models.init_params(tiny_config(), seed=2)
        frozen = {name: node.value.copy() for name, node in params.named()
                  if not default_decay_filter(name)}
        assert any(name.endswith("b1") for name in frozen)
        assert "chn" in frozen and "pos" in frozen and "cls" in frozen
        opt = AdamW(params)
        for _, node in params.named():
            node.grad = np.zeros_like(node.value)
        opt.step(lr=0.1, wd=0.5)
        for name, before in frozen.items():
            assert np.array_equal(params.node(name).value, before), name
        assert not np.array_equal(params.node("proj").value,
                                  params.node("proj").value * 0 + 0)
        # a decayed weight did shrink
        assert np.all(np.abs(params.node("proj").value) <
                      np.abs(params.node("proj").value) / (1 - 0.1 * 0.5) + 1e-12)


class _RecordingSampler:
    def __init__(self, inner):
        self.inner = inner
        self.draws = []

    def draw(self, available=None):
        comb = self.inner.draw(available)
        self.draws.append((available, comb))
        return comb


class TestTrainStep:
    def _setup(self, seed=0, n=8, config=None):
        cfg = config or tiny_config()
        rng = np.random.default_rng(seed)
        imgs = rng.normal(size=(n, cfg.channels, cfg.image_h, cfg.image_w))
        labels = rng.integers(0, cfg.num_classes, size=n)
        patches = models.patchify_batch(imgs, cfg.patch_size)
        params = models.init_params(cfg, seed=seed)
        return cfg, params, patches, labels

    def test_disabled_sampler_uses_full_set(self):
        cfg, params, patches, labels = self._setup()
        sampler = _RecordingSampler(ChannelSampler(SamplerConfig(mode="none"), 2))
        opt = AdamW(params)
        loss = train_step(params, patches, labels, sampler, opt, 1e-3, 0.0)
        assert all(comb.is_full() for _, comb in sampler.draws)
        res = models.logits_for_patches(params, patches)
        assert np.isfinite(loss)

    def test_loss_matches_full_batch_cross_entropy(self):
        cfg, params, patches, labels = self._setup(seed=3)
        frozen = params.copy()
        sampler = ChannelSampler(SamplerConfig(mode="none"), 2)
        opt = AdamW(params)
        loss = train_step(params, patches, labels, sampler, opt, 1e-3, 0.0)
        res = models.logits_for_patches(frozen, patches)
        expect = float(T.cross_entropy(res.logits, labels).value)
        assert loss == pytest.approx(expect, abs=1e-12)

    def test_dataset_not_mutated(self):
        cfg, params, patches, labels = self._setup(seed=4)
        snapshot = patches.copy()
        sampler = ChannelSampler(SamplerConfig(mode="hcs", seed=1), 2)
        opt = AdamW(params)
        for _ in range(3):
            train_step(params, patches, labels, sampler, opt, 1e-3, 0.01)
        assert np.array_equal(patches, snapshot)

    def test_grouped_gradient_equals_single_graph(self):
        # two groups whose weighted gradients must sum to the batch gradient
        cfg, params, patches, labels = self._setup(seed=5)
        comb_full = ChannelSampler(SamplerConfig(mode="none"), 2).draw()
        params.zero_grads()
        res = models.logits_for_patches(params, patches, comb_full)
        T.backward(T.cross_entropy(res.logits, labels))
        whole = {k: v.grad.copy() for k, v in params.named()}

        params.zero_grads()
        for half in (slice(0, 4), slice(4, 8)):
            res = models.logits_for_patches(params, patches[half], comb_full)
            T.backward(T.cross_entropy(res.logits, labels[half]), seed=0.5)
        for name, node in params.named():
            assert np.allclose(node.grad, whole[name], atol=1e-12), name

    def test_identical_seeds_identical_trajectories(self):
        losses = []
        for _ in range(2):
            cfg, params, patches, labels = self._setup(seed=6)
            sampler = ChannelSampler(SamplerConfig(mode="hcs", seed=9), 2)
            opt = AdamW(params)
            run = [train_step(params, patches, labels, sampler, opt, 1e-3, 0.01)
                   for _ in range(5)]
            losses.append(run)
        assert losses[0] == losses[1]

    def test_overfits_sixteen_images(self):
        cfg = tiny_config()
        rng = np.random.default_rng(7)
        imgs = rng.normal(size=(16, 2, 8, 8))
        labels = np.array([0, 1] * 8)
        patches = models.patchify_batch(imgs, cfg.patch_size)
        params = models.init_params(cfg, seed=7)
        sampler = ChannelSampler(SamplerConfig(mode="none"), 2)
        opt = AdamW(params)
        sched = ScheduleConfig(peak_lr=1e-2, final_lr=1e-3, warmup_epochs=10,
                               total_epochs=200, wd_start=0.0, wd_end=0.0)
        loss = None
        for step in range(200):
            lr = lr_at(step, 1, sched)
            loss = train_step(params, patches, labels, sampler, opt, lr, 0.0)
        assert loss < 0.01

    def test_empty_batch_rejected(self):
        cfg, params, patches, labels = self._setup()
        sampler = ChannelSampler(SamplerConfig(mode="none"), 2)
        with pytest.raises(InputError):
            accumulate_batch(params, patches[:0], labels[:0], sampler)

    def test_clip_gradients(self):
        cfg, params, patches, labels = self._setup(seed=8)
        params.zero_grads()
        res = models.logits_for_patches(params, patches)
        T.backward(T.cross_entropy(res.logits, labels))
        norm = clip_gradients(params, max_norm=1e-6)
        total = np.sqrt(sum(float(np.square(n.grad).sum())
                            for _, n in params.named()))
        assert total <= 1e-6 * (1 + 1e-9)
        assert norm > 0


class TestTrainModel:
    def _dataset(self, cfg, n, seed):
        rng = np.random.default_rng(seed)
        imgs = rng.normal(size=(n, cfg.channels, cfg.image_h, cfg.image_w)
                          ).astype(np.float32)
        labels = rng.integers(0, cfg.num_classes, size=n)
        return Dataset(imgs, labels, [f"ch{i}" for i in range(cfg.channels)],
                       cfg.num_classes)

    def test_bit_identical_checkpoints_and_logs(self, tmp_path):
        cfg = tiny_config()
        sched = ScheduleConfig(peak_lr=1e-3, final_lr=1e-5, warmup_epochs=1,
                               total_epochs=2)
        results = []
        for run in range(2):
            params = models.init_params(cfg, seed=5)
            ds = self._dataset(cfg, 12, seed=42)
            rows = train_model(params, ds, sched,
                               SamplerConfig(mode="hcs", seed=3),
                               batch_size=4, shuffle_seed=5)
            path = tmp_path / f"run{run}.chvt"
            models.save_checkpoint(params, path)
            results.append((rows, path.read_bytes()))
        rows_a, bytes_a = results[0]
        rows_b, bytes_b = results[1]
        assert [(r.step, r.epoch, r.lr, r.wd, r.loss) for r in rows_a] == \
               [(r.step, r.epoch, r.lr, r.wd, r.loss) for r in rows_b]
        assert bytes_a == bytes_b


class TestMixedAvailability:
    def _datasets(self, cfg, n_full, n_part, part_channels, seed=0):
        rng = np.random.default_rng(seed)
        names = [f"ch{i}" for i in range(cfg.channels)]
        full = Dataset(
            rng.normal(size=(n_full, cfg.channels, cfg.image_h, cfg.image_w)
                       ).astype(np.float32),
            rng.integers(0, cfg.num_classes, size=n_full), names,
            cfg.num_classes)
        part = Dataset(
            rng.normal(size=(n_part, part_channels, cfg.image_h, cfg.image_w)
                       ).astype(np.float32),
            rng.integers(0, cfg.num_classes, size=n_part),
            names[:part_channels], cfg.num_classes)
        return full, part

    def test_upsample_weights(self):
        assert upsample_weights(300, 100) == (pytest.approx(2 / 3), pytest.approx(2.0))
        assert upsample_weights(50, 50) == (1.0, 1.0)

    def test_prefix_mismatch_rejected(self):
        cfg = tiny_config()
        full, part = self._datasets(cfg, 8, 8, 1)
        part.channel_names = ["other"]
        opt = AdamW(models.init_params(cfg, seed=0))
        with pytest.raises(InputError):
            mixed_train_epoch(models.init_params(cfg, seed=0), full, part,
                              "average", SamplerConfig(mode="hcs"),
                              ScheduleConfig(total_epochs=1, warmup_epochs=0),
                              opt, epoch=0, batch_size=4)

    def test_sampler_restricted_to_available_channels(self):
        cfg = tiny_config(channels=3)
        rng = np.random.default_rng(1)
        patches = models.patchify_batch(rng.normal(size=(6, 3, 8, 8)), 4)
        labels = rng.integers(0, 2, size=6)
        params = models.init_params(cfg, seed=1)
        sampler = _RecordingSampler(ChannelSampler(SamplerConfig(mode="hcs", seed=2), 3))
        accumulate_batch(params, patches, labels, sampler,
                         available=[(0, 1)] * 6)
        assert sampler.draws
        for avail, comb in sampler.draws:
            assert set(comb.indices) <= {0, 1}

    def test_both_objectives_run_and_converge_shapes(self):
        cfg = tiny_config(channels=3)
        full, part = self._datasets(cfg, 12, 12, 2, seed=3)
        sched = ScheduleConfig(peak_lr=1e-3, final_lr=1e-5, warmup_epochs=0,
                               total_epochs=2)
        for objective in ("average", "upsample"):
            params = models.init_params(cfg, seed=3)
            opt = AdamW(params)
            loss = mixed_train_epoch(params, full, part, objective,
                                     SamplerConfig(mode="hcs", seed=4), sched,
                                     opt, epoch=0, batch_size=4)
            assert np.isfinite(loss)

    def test_partial_only_channels_reduce_to_plain_training(self):
        # when every image exposes all model channels, the availability wiring
        # must not change the draws
        cfg = tiny_config()
        rng = np.random.default_rng(5)
        patches = models.patchify_batch(rng.normal(size=(6, 2, 8, 8)), 4)
        labels = rng.integers(0, 2, size=6)
        draws = []
        for avail in (None, [(0, 1)] * 6):
            params = models.init_params(cfg, seed=5)
            sampler = _RecordingSampler(
                ChannelSampler(SamplerConfig(mode="hcs", seed=6), 2))
            accumulate_batch(params, patches, labels, sampler, available=avail)
            draws.append([comb.indices for _, comb in sampler.draws])
        assert draws[0] == draws[1]

    def test_unknown_objective_rejected(self):
        cfg = tiny_config()
        full, part = self._datasets(cfg, 4, 4, 2)
        params = models.init_params(cfg, seed=0)
        with pytest.raises(InputError):
            mixed_train_epoch(params, full, part, "median",
                              SamplerConfig(mode="hcs"),
                              ScheduleConfig(total_epochs=1, warmup_epochs=0),
                              AdamW(params), epoch=0)
