"""Supervised training: AdamW, warmup+cosine LR, cosine weight-decay ramp,
per-image channel sampling, and mixed-channel-availability objectives.

Each batch is split into groups of images that drew the same channel
combination; every group runs as one batched graph and contributes its share
of the gradient, so one optimizer step still sees the exact batch-mean loss.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import models
from . import tensor as T
from .errors import ConfigurationError, InputError, TrainingAbort
from .sampling import ChannelSampler, SamplerConfig


@dataclass
class ScheduleConfig:
    peak_lr: float = 5e-4
    final_lr: float = 1e-6
    warmup_epochs: int = 10
    total_epochs: int = 100
    wd_start: float = 0.04
    wd_end: float = 0.4

    def __post_init__(self):
        if self.warmup_epochs > self.total_epochs:
            raise ConfigurationError("warmup_epochs exceeds total_epochs")
        if self.final_lr > self.peak_lr:
            raise ConfigurationError("final_lr exceeds peak_lr")
        if self.wd_start > self.wd_end:
            raise ConfigurationError("wd_start exceeds wd_end")


def lr_at(step, steps_per_epoch, sched):
    """Linear 0 -> peak over warmup, then cosine peak -> final.

    The final training step (total_epochs*steps_per_epoch - 1) lands exactly
    on final_lr.
    """
    if step < 0:
        raise InputError("step must be >= 0")
    warmup = sched.warmup_epochs * steps_per_epoch
    total = sched.total_epochs * steps_per_epoch
    if step < warmup:
        return sched.peak_lr * step / warmup
    last = total - 1
    if last <= warmup:
        return sched.peak_lr if step <= warmup else sched.final_lr
    t = min((step - warmup) / (last - warmup), 1.0)
    return sched.final_lr + 0.5 * (sched.peak_lr - sched.final_lr) * (1.0 + math.cos(math.pi * t))


def wd_at(step, steps_per_epoch, sched):
    """Cosine ramp wd_start -> wd_end across all training steps."""
    if step < 0:
        raise InputError("step must be >= 0")
    last = sched.total_epochs * steps_per_epoch - 1
    if last <= 0:
        return sched.wd_end
    t = min(step / last, 1.0)
    return sched.wd_end + 0.5 * (sched.wd_start - sched.wd_end) * (1.0 + math.cos(math.pi * t))


def default_decay_filter(name):
    """Weight decay applies to weight matrices only: no biases, no layer-norm
    terms, no CLS/channel/positional embeddings."""
    last = name.rsplit(".", 1)[-1]
    return last not in ("gamma", "beta", "cls", "chn", "pos", "bias", "b", "b1", "b2")


class AdamW:
    """Adam with decoupled weight decay over a named parameter set."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, decay_filter=None):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.decay_filter = default_decay_filter if decay_filter is None else decay_filter
        self.m = {name: np.zeros_like(node.value) for name, node in params.named()}
        self.v = {name: np.zeros_like(node.value) for name, node in params.named()}
        self.t = 0

    def step(self, lr, wd):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, node in self.params.named():
            g = node.grad
            if g is None:
                g = 0.0
            elif not np.all(np.isfinite(g)):
                raise TrainingAbort(f"non-finite gradient in parameter {name!r}")
            if wd != 0.0 and self.decay_filter(name):
                node.value *= 1.0 - lr * wd
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            node.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_gradients(params, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, node in params.named():
        if node.grad is not None:
            total += float(np.square(node.grad).sum())
    total = math.sqrt(total)
    if total > max_norm > 0.0:
        factor = max_norm / total
        for _, node in params.named():
            if node.grad is not None:
                node.grad *= factor
    return total


def _group_by_combination(combos):
    groups = {}
    for i, comb in enumerate(combos):
        groups.setdefault(comb, []).append(i)
    return sorted(groups.items(), key=lambda kv: kv[0].indices)


def accumulate_batch(params, patches, labels, sampler, weight=1.0, available=None):
    """Forward/backward one batch, scaling its gradient contribution by
    `weight`. Returns the (unweighted) mean loss over the batch."""
    n = patches.shape[0]
    if n == 0:
        raise InputError("empty batch")
    combos = [sampler.draw(None if available is None else available[i])
              for i in range(n)]
    total = 0.0
    for comb, idx in _group_by_combination(combos):
        res = models.logits_for_patches(params, patches[idx], comb)
        loss = T.cross_entropy(res.logits, np.asarray(labels)[idx])
        share = len(idx) / n
        T.backward(loss, seed=weight * share)
        total += share * float(loss.value)
    return total


def train_step(params, patches, labels, sampler, opt, lr, wd,
               available=None, clip_norm=0.0):
    """One optimizer step: per-image combination draw, grouped forward,
    cross-entropy, backward, AdamW update. Returns the batch mean loss."""
    params.zero_grads()
    loss = accumulate_batch(params, patches, labels, sampler, 1.0, available)
    if clip_norm > 0.0:
        clip_gradients(params, clip_norm)
    opt.step(lr, wd)
    return loss


@dataclass
class LogRow:
    step: int
    epoch: int
    lr: float
    wd: float
    loss: float


def train_model(params, dataset, sched, sampler_cfg, batch_size=32,
                clip_norm=0.0, shuffle_seed=0, opt=None, on_step=None):
    """Full training run over `dataset`; returns the per-step log rows.

    Deterministic given (params init, dataset, sched, sampler_cfg, seeds).
    """
    cfg = params.config
    patches = models.patchify_batch(dataset.images, cfg.patch_size)
    labels = np.asarray(dataset.labels)
    sampler = ChannelSampler(sampler_cfg, cfg.channels)
    opt = AdamW(params) if opt is None else opt
    order = np.random.default_rng(shuffle_seed)
    n = patches.shape[0]
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    rows = []
    step = 0
    for epoch in range(sched.total_epochs):
        perm = order.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            lr = lr_at(step, steps_per_epoch, sched)
            wd = wd_at(step, steps_per_epoch, sched)
            loss = train_step(params, patches[idx], labels[idx], sampler, opt,
                              lr, wd, clip_norm=clip_norm)
            rows.append(LogRow(step, epoch, lr, wd, loss))
            if on_step is not None:
                on_step(rows[-1])
            step += 1
    return rows


def upsample_weights(n1, n2):
    """Loss weights giving each dataset equal pull regardless of size."""
    total = n1 + n2
    return total / (2.0 * n1), total / (2.0 * n2)


def _padded_patches(dataset, cfg):
    """Patchify and zero-pad the channel axis up to the model's channel count."""
    patches = models.patchify_batch(dataset.images, cfg.patch_size)
    n, c_ds, npatch, p2 = patches.shape
    if c_ds > cfg.channels:
        raise InputError(f"dataset has {c_ds} channels, model only {cfg.channels}")
    if c_ds < cfg.channels:
        pad = np.zeros((n, cfg.channels - c_ds, npatch, p2))
        patches = np.concatenate([patches, pad], axis=1)
    return patches, tuple(range(c_ds))


def mixed_train_epoch(params, dataset_full, dataset_partial, objective,
                      sampler_cfg, sched, opt, epoch, batch_size=32,
                      shuffle_seed=0, clip_norm=0.0):
    """One epoch over a full-channel and a partial-channel dataset.

    `objective="average"` shuffles the concatenated pool and forwards every
    image with its own available channels (the sampler draws from those only).
    `objective="upsample"` alternates one batch from each dataset per step and
    weights the two losses by (|D1|+|D2|)/(2|Di|).

    The partial dataset's channels must be a prefix of the full dataset's.
    Returns the mean per-step loss of the epoch.
    """
    cfg = params.config
    names_full = list(dataset_full.channel_names)
    names_partial = list(dataset_partial.channel_names)
    if names_full[:len(names_partial)] != names_partial:
        raise InputError(
            "partial dataset channels are not a prefix of the full dataset's: "
            f"{names_partial} vs {names_full}")
    if objective not in ("average", "upsample"):
        raise InputError(f"unknown objective {objective!r}")

    full_patches, full_avail = _padded_patches(dataset_full, cfg)
    part_patches, part_avail = _padded_patches(dataset_partial, cfg)
    labels_full = np.asarray(dataset_full.labels)
    labels_part = np.asarray(dataset_partial.labels)
    n1, n2 = full_patches.shape[0], part_patches.shape[0]
    sampler = ChannelSampler(sampler_cfg, cfg.channels)
    order = np.random.default_rng((shuffle_seed, epoch))

    losses = []
    if objective == "average":
        patches = np.concatenate([full_patches, part_patches], axis=0)
        labels = np.concatenate([labels_full, labels_part])
        avail = [full_avail] * n1 + [part_avail] * n2
        steps_per_epoch = max(1, math.ceil((n1 + n2) / batch_size))
        perm = order.permutation(n1 + n2)
        for i, start in enumerate(range(0, n1 + n2, batch_size)):
            idx = perm[start:start + batch_size]
            lr = lr_at(epoch * steps_per_epoch + i, steps_per_epoch, sched)
            wd = wd_at(epoch * steps_per_epoch + i, steps_per_epoch, sched)
            loss = train_step(params, patches[idx], labels[idx], sampler, opt,
                              lr, wd, available=[avail[j] for j in idx],
                              clip_norm=clip_norm)
            losses.append(loss)
        return float(np.mean(losses))

    w1, w2 = upsample_weights(n1, n2)
    steps_per_epoch = max(1, math.ceil(max(n1, n2) / batch_size))
    perm1 = order.permutation(n1)
    perm2 = order.permutation(n2)
    for i in range(steps_per_epoch):
        idx1 = np.take(perm1, np.arange(i * batch_size, (i + 1) * batch_size), mode="wrap")
        idx2 = np.take(perm2, np.arange(i * batch_size, (i + 1) * batch_size), mode="wrap")
        lr = lr_at(epoch * steps_per_epoch + i, steps_per_epoch, sched)
        wd = wd_at(epoch * steps_per_epoch + i, steps_per_epoch, sched)
        params.zero_grads()
        l1 = accumulate_batch(params, full_patches[idx1], labels_full[idx1],
                              sampler, w1, [full_avail] * len(idx1))
        l2 = accumulate_batch(params, part_patches[idx2], labels_part[idx2],
                              sampler, w2, [part_avail] * len(idx2))
        if clip_norm > 0.0:
            clip_gradients(params, clip_norm)
        opt.step(lr, wd)
        losses.append(w1 * l1 + w2 * l2)
    return float(np.mean(losses))
