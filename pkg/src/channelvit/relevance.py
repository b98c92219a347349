"""Per-channel attention attribution.

Two methods over recorded attention matrices:

* attention rollout — gradient-free: per layer, average heads, add the
  identity for the residual path, renormalize rows, multiply layers in order.
* gradient relevance — per layer, head-average gradient-weighted attention
  (negatives clamped to zero), identity residual, propagated multiplicatively
  from a one-hot seed on the target class logit.

For channel-token models the CLS row reshapes to [|S|, N]; for the per-patch
model it stays [N].
"""

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from . import models
from . import tensor as T
from .errors import InputError, StateError, UnsupportedVariantError
from .sampling import full_combination


@dataclass
class RelevanceMap:
    """Nonnegative attribution scores for one image and one method."""

    scores: np.ndarray          # raw: [|S|, N] (channel tokens) or [N] (vit)
    normalized: np.ndarray      # same shape, scaled so max == 1 (if max > 0)
    target_class: int | None
    combination: object
    method: str


def _normalize(scores):
    peak = scores.max() if scores.size else 0.0
    return scores / peak if peak > 0 else scores.copy()


def attention_rollout(attentions):
    """Roll recorded attentions ([heads, L, L] per block) into one [L, L] map.

    Every intermediate matrix is row-stochastic; the CLS row of the result is
    the per-token relevance.
    """
    if not attentions:
        raise StateError("no recorded attention matrices; forward with "
                         "record_attention=True first")
    rollout = None
    for layer in attentions:
        mean = np.asarray(layer).mean(axis=0)
        aug = mean + np.eye(mean.shape[-1])
        aug = aug / aug.sum(axis=-1, keepdims=True)
        rollout = aug if rollout is None else aug @ rollout
    return rollout


def _recorded_arrays(result):
    # forward records [1, heads, L, L] nodes for a single-image sequence
    return [node.value[0] for node in result.attentions]


def _map_from_cls_row(row, tokens, params, target, method):
    cfg = params.config
    n = cfg.num_patches
    if cfg.variant == "vit":
        scores = row.copy()
    else:
        scores = row.reshape(len(tokens.combination), n)
    scores = np.maximum(scores, 0.0)
    return RelevanceMap(scores, _normalize(scores), target, tokens.combination, method)


def rollout_relevance(params, img, combination=None):
    """Attention-rollout relevance of each token for one image."""
    tokens = models.embed_batch(
        models.patchify(img, params.config.patch_size)[None], params, combination)
    result = models.forward(params, tokens, record_attention=True)
    if params.config.depth == 0:
        length = tokens.length
        row = np.zeros(length - 1)
    else:
        row = attention_rollout(_recorded_arrays(result))[0, 1:]
    return _map_from_cls_row(row, tokens, params, None, "rollout")


def grad_relevance(params, img, combination=None, target_class=0):
    """Gradient-weighted relevance toward `target_class` for one image."""
    cfg = params.config
    if not 0 <= target_class < cfg.num_classes:
        raise InputError(f"target class {target_class} out of range "
                         f"[0, {cfg.num_classes})")
    tokens = models.embed_batch(
        models.patchify(img, cfg.patch_size)[None], params, combination)
    result = models.forward(params, tokens, record_attention=True)
    seed = T.take_scalar(T.reshape(result.logits, (cfg.num_classes,)), target_class)
    T.backward(seed)

    length = tokens.length
    rel = np.eye(length)
    for node in result.attentions:
        attn = node.value[0]
        grad = node.grad[0]
        cam = np.maximum(grad * attn, 0.0).mean(axis=0)
        rel = (np.eye(length) + cam) @ rel
    row = rel[0, 1:]
    return _map_from_cls_row(row, tokens, params, target_class, "grad")


def compute_relevance(params, img, combination=None, target_class=0, method="grad"):
    if method == "rollout":
        return rollout_relevance(params, img, combination)
    if method == "grad":
        return grad_relevance(params, img, combination, target_class)
    raise InputError(f"unknown relevance method {method!r}")


def channel_relevance_summary(params, images, labels, method="grad"):
    """Per (class, channel): mean over the class's images of the per-channel
    maximum relevance. Returns (matrix [len(present), C], present class ids);
    classes without images are omitted with a warning."""
    cfg = params.config
    if cfg.variant == "vit":
        raise UnsupportedVariantError(
            "per-channel relevance summary needs channel-token maps")
    labels = np.asarray(labels)
    per_class = {}
    for img, label in zip(images, labels):
        rmap = compute_relevance(params, img, None, int(label), method)
        per_channel_max = rmap.normalized.max(axis=1)
        per_class.setdefault(int(label), []).append(per_channel_max)
    present = sorted(per_class)
    missing = sorted(set(range(cfg.num_classes)) - set(present))
    if missing:
        warnings.warn(f"classes without images omitted from summary: {missing}")
    matrix = np.stack([np.mean(per_class[k], axis=0) for k in present])
    return matrix, present


def upsample_to_pixels(patch_scores, config):
    """Nearest-neighbor upsample of a per-patch score grid to pixel size."""
    gh = config.image_h // config.patch_size
    gw = config.image_w // config.patch_size
    grid = np.asarray(patch_scores).reshape(gh, gw)
    return grid.repeat(config.patch_size, axis=0).repeat(config.patch_size, axis=1)


def write_pgm(path, gray):
    """8-bit binary (P5) PGM."""
    arr = np.asarray(gray)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def save_relevance_outputs(rmap, params, out_prefix):
    """One PGM per channel (single map for the per-patch model) plus a CSV of
    raw scores. Returns the list of files written."""
    cfg = params.config
    written = []
    if rmap.scores.ndim == 1:
        img = upsample_to_pixels(rmap.normalized * 255.0, cfg)
        path = f"{out_prefix}_all.pgm"
        write_pgm(path, img)
        written.append(path)
    else:
        for row, channel in enumerate(rmap.combination.indices):
            img = upsample_to_pixels(rmap.normalized[row] * 255.0, cfg)
            path = f"{out_prefix}_ch{channel}.pgm"
            write_pgm(path, img)
            written.append(path)

    csv_path = f"{out_prefix}_scores.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["channel", "patch", "score"])
        if rmap.scores.ndim == 1:
            for patch, score in enumerate(rmap.scores):
                w.writerow(["all", patch, f"{score:.9g}"])
        else:
            for row, channel in enumerate(rmap.combination.indices):
                for patch, score in enumerate(rmap.scores[row]):
                    w.writerow([channel, patch, f"{score:.9g}"])
    written.append(csv_path)
    return written
