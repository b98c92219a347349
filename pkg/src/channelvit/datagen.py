"""Synthetic multi-channel classification data with controllable correlation.

Channel noise mixes a shared field, a per-group field, and a private field
with weights solving the two-parameter block correlation (rho_in within a
group, rho_out across groups). Label signal is added on top:

* redundant     — label signal added to every channel; any single channel
                  suffices to classify. Two label rules: ``pattern`` (one
                  pixel pattern per class; direction-coded) and ``amplitude``
                  (one shared pattern, classes are geometric magnitude levels;
                  scale-coded, so any readout must calibrate signal magnitude
                  against the active channel subset).
* complementary — two independent label bits; the first channel group carries
                  bit A, the second carries bit B, and the class is the
                  two-bit code, so no single group determines the label. Bits
                  modulate each group's pattern by sign (``pattern`` rule), by
                  magnitude level (``amplitude`` rule), or scale the group's
                  noise energy with no pattern at all (``variance`` rule; the
                  information is spread isotropically over the group's pixels,
                  so channel identity and per-channel energy are everything).

Generation is deterministic per (config, seed); files round-trip bit-exactly.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import (ConfigurationError, FormatError, InputError,
                     UnsupportedVariantError)

DATASET_MAGIC = b"MCDS"
DATASET_VERSION = 1


@dataclass
class Dataset:
    images: np.ndarray         # [n, C, H, W] float32
    labels: np.ndarray         # [n] int
    channel_names: list
    num_classes: int

    def __len__(self):
        return len(self.labels)


@dataclass
class SynthConfig:
    channels: int = 3
    image_h: int = 32
    image_w: int = 32
    num_classes: int = 4
    train_samples: int = 4000
    test_samples: int = 1000
    channel_groups: tuple = None   # defaults to one group with every channel
    rho_in: float = 0.9
    rho_out: float = 0.0
    info_mode: str = "redundant"   # redundant | complementary
    label_rule: str = "pattern"    # redundant mode: pattern | amplitude
    amplitude_ratio: float = 1.5   # spacing of amplitude-rule class levels
    # complementary mode: correlation between the two groups' signal patterns.
    # 1.0 means both groups modulate the same pattern, so a token's group is
    # unreadable from its content alone (channel identity must come from the
    # model side).
    pattern_overlap: float = 0.0
    noise_std: float = 1.0
    signal_strength: float = 0.3
    # per-channel gain on the class signal (redundant mode); None = all ones.
    # A zero entry makes that channel pure noise (single-informative-channel
    # setups); distinct nonzero gains make the jointly-optimal readout
    # channel-asymmetric.
    channel_signal_coeffs: tuple = None
    # class-independent per-channel intensity offsets (None = zeros), modeling
    # channels with very different base statistics (fluorescence vs
    # brightfield style). A nuisance for fusion models, invisible to the
    # per-channel Bayes readout.
    channel_offsets: tuple = None
    seed: int = 0

    def __post_init__(self):
        if self.channel_groups is None:
            self.channel_groups = (tuple(range(self.channels)),)
        self.channel_groups = tuple(tuple(g) for g in self.channel_groups)
        flat = sorted(c for g in self.channel_groups for c in g)
        if flat != list(range(self.channels)):
            raise ConfigurationError(
                f"channel_groups {self.channel_groups} do not partition "
                f"0..{self.channels - 1}")
        for rho in (self.rho_in, self.rho_out):
            if not -1.0 <= rho <= 1.0:
                raise ConfigurationError(f"correlation {rho} outside [-1, 1]")
        if self.info_mode not in ("redundant", "complementary"):
            raise ConfigurationError(f"unknown info_mode {self.info_mode!r}")
        if self.info_mode == "complementary":
            if len(self.channel_groups) < 2:
                raise ConfigurationError(
                    "complementary mode needs at least 2 channel groups")
            if self.num_classes != 4:
                raise ConfigurationError(
                    "complementary mode encodes a 2-bit class; num_classes must be 4")
            if self.channel_signal_coeffs is not None:
                raise ConfigurationError(
                    "channel_signal_coeffs applies to redundant mode only")
        if self.channel_signal_coeffs is not None:
            self.channel_signal_coeffs = tuple(float(x)
                                               for x in self.channel_signal_coeffs)
            if len(self.channel_signal_coeffs) != self.channels:
                raise ConfigurationError(
                    f"channel_signal_coeffs needs {self.channels} entries")
            if all(x == 0.0 for x in self.channel_signal_coeffs):
                raise ConfigurationError(
                    "channel_signal_coeffs must have at least one nonzero entry")
        if self.label_rule not in ("pattern", "amplitude", "variance"):
            raise ConfigurationError(f"unknown label_rule {self.label_rule!r}")
        if self.label_rule in ("amplitude", "variance") and self.amplitude_ratio <= 1.0:
            raise ConfigurationError("amplitude_ratio must exceed 1")
        if self.label_rule == "variance" and self.info_mode != "complementary":
            raise ConfigurationError("variance label rule is complementary-mode only")
        if not 0.0 <= self.pattern_overlap <= 1.0:
            raise ConfigurationError("pattern_overlap must lie in [0, 1]")
        if self.pattern_overlap > 0 and self.info_mode != "complementary":
            raise ConfigurationError("pattern_overlap is complementary-mode only")
        if self.channel_offsets is not None:
            self.channel_offsets = tuple(float(x) for x in self.channel_offsets)
            if len(self.channel_offsets) != self.channels:
                raise ConfigurationError(
                    f"channel_offsets needs {self.channels} entries")


def target_correlation(config):
    """The [C, C] block correlation matrix implied by the config."""
    c = config.channels
    group_of = np.empty(c, dtype=int)
    for gi, group in enumerate(config.channel_groups):
        for ch in group:
            group_of[ch] = gi
    same = group_of[:, None] == group_of[None, :]
    mat = np.where(same, config.rho_in, config.rho_out)
    np.fill_diagonal(mat, 1.0)
    return mat


def _mixing_weights(config):
    mat = target_correlation(config)
    eigs = np.linalg.eigvalsh(mat)
    representable = (0.0 <= config.rho_out <= config.rho_in <= 1.0)
    if eigs.min() < -1e-9 or not representable:
        raise ConfigurationError(
            "target correlation matrix is not PSD-representable by "
            f"shared/private mixing (needs 0 <= rho_out <= rho_in <= 1):\n{mat}\n"
            f"eigenvalues: {eigs}")
    return (np.sqrt(config.rho_out),
            np.sqrt(config.rho_in - config.rho_out),
            np.sqrt(1.0 - config.rho_in))


def _patterns(config, rng):
    """Zero-mean unit-RMS pixel patterns: one per class (redundant/pattern),
    a single shared one (redundant/amplitude), or one per label bit
    (complementary)."""
    if config.info_mode == "complementary":
        count = 2
    elif config.label_rule == "amplitude":
        count = 1
    else:
        count = config.num_classes
    pats = rng.normal(size=(count, config.image_h, config.image_w))
    pats -= pats.mean(axis=(1, 2), keepdims=True)
    pats /= np.sqrt((pats ** 2).mean(axis=(1, 2), keepdims=True))
    if config.info_mode == "complementary" and config.pattern_overlap > 0:
        alpha = config.pattern_overlap
        pats[1] = alpha * pats[0] + np.sqrt(1.0 - alpha ** 2) * pats[1]
    return pats


def _noise(config, rng, n, weights):
    a, b, c = weights
    h, w = config.image_h, config.image_w
    out = np.zeros((n, config.channels, h, w))
    if a > 0:
        out += a * rng.normal(size=(n, 1, h, w))
    if b > 0:
        group_fields = rng.normal(size=(n, len(config.channel_groups), h, w))
        for gi, group in enumerate(config.channel_groups):
            for ch in group:
                out[:, ch] += b * group_fields[:, gi]
    if c > 0:
        out += c * rng.normal(size=(n, config.channels, h, w))
    return config.noise_std * out


def _split(config, rng, n, patterns, weights):
    images = _noise(config, rng, n, weights)
    s = config.signal_strength
    if config.info_mode == "redundant":
        coeffs = config.channel_signal_coeffs
        gains = (np.ones(config.channels) if coeffs is None
                 else np.asarray(coeffs))[None, :, None, None]
        labels = rng.integers(config.num_classes, size=n)
        if config.label_rule == "amplitude":
            levels = config.amplitude_ratio ** np.arange(config.num_classes)
            content = levels[labels][:, None, None, None] * patterns[0]
        else:
            content = patterns[labels][:, None, :, :]
        images += s * gains * content
        latents = {"class": labels.copy()}
    else:
        bit_a = rng.integers(2, size=n)
        bit_b = rng.integers(2, size=n)
        labels = 2 * bit_a + bit_b
        if config.label_rule == "variance":
            # the bit scales the whole group's noise energy; no pattern added
            lvl_a = np.where(bit_a, config.amplitude_ratio, 1.0)[:, None, None]
            lvl_b = np.where(bit_b, config.amplitude_ratio, 1.0)[:, None, None]
            for ch in config.channel_groups[0]:
                images[:, ch] *= lvl_a
            for ch in config.channel_groups[1]:
                images[:, ch] *= lvl_b
        else:
            if config.label_rule == "amplitude":
                mod_a = np.where(bit_a, config.amplitude_ratio, 1.0)[:, None, None]
                mod_b = np.where(bit_b, config.amplitude_ratio, 1.0)[:, None, None]
            else:
                mod_a = (2.0 * bit_a - 1.0)[:, None, None]
                mod_b = (2.0 * bit_b - 1.0)[:, None, None]
            for ch in config.channel_groups[0]:
                images[:, ch] += s * mod_a * patterns[0]
            for ch in config.channel_groups[1]:
                images[:, ch] += s * mod_b * patterns[1]
        latents = {"bit_a": bit_a.copy(), "bit_b": bit_b.copy()}
    if config.channel_offsets is not None:
        images += np.asarray(config.channel_offsets)[None, :, None, None]
    ds = Dataset(images.astype(np.float32), labels.astype(np.int64),
                 [f"ch{i}" for i in range(config.channels)], config.num_classes)
    return ds, latents


@dataclass
class GenerationResult:
    train: Dataset
    test: Dataset
    patterns: np.ndarray       # signal patterns [count, H, W]
    train_latents: dict
    test_latents: dict
    correlation_target: np.ndarray


def generate(config):
    """Generate a (train, test) pair, returning generator internals alongside
    (patterns and per-sample latents) for analysis and oracle checks."""
    weights = _mixing_weights(config)
    rng = np.random.default_rng(config.seed)
    patterns = _patterns(config, rng)
    train, train_latents = _split(config, rng, config.train_samples, patterns, weights)
    test, test_latents = _split(config, rng, config.test_samples, patterns, weights)
    return GenerationResult(train, test, patterns, train_latents, test_latents,
                            target_correlation(config))


def empirical_channel_correlation(images):
    """Pearson correlation between channels over all (sample, pixel) pairs."""
    arr = np.asarray(images, dtype=np.float64)
    n, c = arr.shape[0], arr.shape[1]
    flat = arr.transpose(1, 0, 2, 3).reshape(c, -1)
    return np.corrcoef(flat)


def channel_embedding_correlation(params):
    """Pearson correlation between learned channel-embedding vectors."""
    if "chn" not in params.params:
        raise UnsupportedVariantError(
            f"variant {params.config.variant!r} has no channel embeddings")
    chn = params.node("chn").value
    centered = chn - chn.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered ** 2).sum(axis=1))
    if np.any(norms == 0):
        raise InputError("a channel embedding has zero variance; correlation undefined")
    corr = (centered @ centered.T) / np.outer(norms, norms)
    np.fill_diagonal(corr, 1.0)
    return corr


def save_dataset(dataset, path):
    """Binary dataset: magic MCDS, u16 version, header (u16 C, u32 H, u32 W,
    u16 K, u32 n, channel name strings), then per sample u16 label + C*H*W
    little-endian float32."""
    images = np.ascontiguousarray(dataset.images, dtype="<f4")
    labels = np.asarray(dataset.labels)
    n, c, h, w = images.shape
    if labels.size and (labels.min() < 0 or labels.max() >= dataset.num_classes):
        raise InputError("labels out of range for declared class count")
    if len(dataset.channel_names) != c:
        raise InputError("channel name count does not match image channels")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<H", DATASET_VERSION))
        f.write(struct.pack("<HIIHI", c, h, w, dataset.num_classes, n))
        for name in dataset.channel_names:
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
        record = np.dtype([("label", "<u2"), ("pixels", "<f4", (c, h, w))])
        payload = np.empty(n, dtype=record)
        payload["label"] = labels.astype("<u2")
        payload["pixels"] = images
        f.write(payload.tobytes())


def _read_exact(f, count, what):
    data = f.read(count)
    if len(data) != count:
        raise FormatError(f"dataset truncated reading {what}: expected {count} "
                          f"bytes, found {len(data)}")
    return data


def load_dataset(path):
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != DATASET_MAGIC:
            raise FormatError(f"bad dataset magic {magic!r}")
        (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
        if version != DATASET_VERSION:
            raise FormatError(f"unsupported dataset version {version}")
        c, h, w, k, n = struct.unpack("<HIIHI", _read_exact(f, 16, "header"))
        names = []
        for i in range(c):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, f"name length {i}"))
            names.append(_read_exact(f, nlen, f"channel name {i}").decode("utf-8"))
        record = np.dtype([("label", "<u2"), ("pixels", "<f4", (c, h, w))])
        expected = record.itemsize * n
        payload = f.read()
    if len(payload) != expected:
        raise FormatError(f"dataset payload length mismatch: expected {expected} "
                          f"bytes, found {len(payload)}")
    if n == 0:
        images = np.zeros((0, c, h, w), dtype=np.float32)
        labels = np.zeros(0, dtype=np.int64)
    else:
        records = np.frombuffer(payload, dtype=record)
        images = records["pixels"].copy()
        labels = records["label"].astype(np.int64)
    if labels.size and labels.max() >= k:
        raise FormatError(f"label {labels.max()} exceeds declared class count {k}")
    return Dataset(images, labels, names, k)
