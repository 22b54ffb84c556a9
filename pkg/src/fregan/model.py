"""Encoder-decoder generator and patch discriminator.

Parameters live in a flat :class:`ParameterSet` keyed by dot-delimited names such
as ``enc3.conv.weight``.  Batch-norm running statistics are stored alongside the
weights (as non-trainable entries) so that checkpoints capture them too.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import BatchNormParams, ConvParams, DimensionError, Tensor

FILTER_PLAN = (1, 2, 4, 8, 8, 8, 8, 8)
DISC_FILTER_PLAN = (1, 2, 4, 8)
LEAKY_SLOPE = 0.2
BN_MOMENTUM = 0.99
BN_EPSILON = 1e-5
INIT_STD = 0.02


class ConfigError(ValueError):
    pass


def _is_power_of_two(n):
    return isinstance(n, (int, np.integer)) and n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 64
    in_frames: int = 2
    frame_channels: int = 3
    base_filters: int = 16
    dropout_rate: float = 0.5

    def __post_init__(self):
        if not _is_power_of_two(self.image_size) or self.image_size < 32:
            raise ConfigError(f"image_size must be a power of two >= 32, got {self.image_size}")
        if self.base_filters < 1:
            raise ConfigError(f"base_filters must be positive, got {self.base_filters}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def down_layers(self) -> int:
        return int(self.image_size).bit_length() - 1

    @property
    def encoder_depth(self) -> int:
        return self.down_layers + 1

    @property
    def decoder_depth(self) -> int:
        return self.down_layers

    def encoder_filters(self) -> list[int]:
        plan = list(FILTER_PLAN) + [FILTER_PLAN[-1]] * max(0, self.down_layers - len(FILTER_PLAN))
        return [self.base_filters] + [self.base_filters * f for f in plan[: self.down_layers]]


@dataclass(frozen=True)
class DiscriminatorConfig:
    image_size: int = 64
    in_channels: int = 9
    base_filters: int = 16

    def __post_init__(self):
        if self.base_filters < 1:
            raise ConfigError(f"base_filters must be positive, got {self.base_filters}")
        if self.patch_size() < 1:
            raise ConfigError(f"image_size {self.image_size} is too small for the discriminator")

    def patch_size(self) -> int:
        s = self.image_size
        for stride in (2, 2, 2, 1, 1):
            s = (s + 2 - 4) // stride + 1
            if s < 1:
                return 0
        return s


class ParameterSet(Mapping):
    """Name -> Tensor map that always iterates in lexicographic order."""

    def __init__(self, tensors=None):
        self._tensors = dict(tensors or {})

    def __getitem__(self, name):
        return self._tensors[name]

    def __setitem__(self, name, tensor):
        self._tensors[name] = tensor

    def __iter__(self):
        return iter(sorted(self._tensors))

    def __len__(self):
        return len(self._tensors)

    def trainable(self) -> dict[str, Tensor]:
        return {k: self._tensors[k] for k in self if self._tensors[k].requires_grad}

    def count(self, trainable_only=True) -> int:
        return int(sum(t.data.size for k, t in self.items() if t.requires_grad or not trainable_only))

    def frozen(self) -> "ParameterSet":
        """Same arrays, no gradient tracking."""
        return ParameterSet({k: Tensor(t.data) for k, t in self._tensors.items()})

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: Tensor(t.data.copy(), t.requires_grad) for k, t in self._tensors.items()})

    def __repr__(self):
        return f"ParameterSet({len(self)} tensors, {self.count()} trainable values)"


def _conv(params, name, stride, padding):
    return ConvParams(params[f"{name}.weight"], params[f"{name}.bias"], stride, padding)


def _bn(params, name):
    return BatchNormParams(
        params[f"{name}.gamma"],
        params[f"{name}.beta"],
        params[f"{name}.running_mean"].data,
        params[f"{name}.running_var"].data,
        BN_MOMENTUM,
        BN_EPSILON,
    )


class _Builder:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.params = ParameterSet()

    def conv(self, name, shape):
        w = self.rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)
        out_ch = shape[1] if name.endswith("convt") else shape[0]
        self.params[f"{name}.weight"] = Tensor(w, requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(out_ch, np.float32), requires_grad=True)

    def bn(self, name, c):
        self.params[f"{name}.gamma"] = Tensor(np.ones(c, np.float32), requires_grad=True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(c, np.float32), requires_grad=True)
        self.params[f"{name}.running_mean"] = Tensor(np.zeros(c, np.float32))
        self.params[f"{name}.running_var"] = Tensor(np.ones(c, np.float32))


# ---------------------------------------------------------------------------
# generator


def _has_encoder_bn(index, config):
    # the 1x1 bottleneck cannot be batch-normalized with a batch of one
    return index < config.down_layers


def build_generator(config: GeneratorConfig, seed: int = 42) -> ParameterSet:
    enc = config.encoder_filters()
    b = _Builder(seed)
    in_ch = config.in_frames * config.frame_channels
    b.conv("enc0.conv", (enc[0], in_ch, 3, 3))
    b.bn("enc0.bn", enc[0])
    for i in range(1, config.encoder_depth):
        b.conv(f"enc{i}.conv", (enc[i], enc[i - 1], 4, 4))
        if _has_encoder_bn(i, config):
            b.bn(f"enc{i}.bn", enc[i])
    d = config.down_layers
    for j in range(d):
        # decoder j upsamples from the resolution of encoder (d - j) to that of encoder (d - j - 1)
        in_ch = enc[d] if j == 0 else 2 * enc[d - j]
        out_ch = config.frame_channels if j == d - 1 else enc[d - j - 1]
        b.conv(f"dec{j}.convt", (in_ch, out_ch, 4, 4))
    return b.params


def generator_config_from_params(params: Mapping) -> GeneratorConfig:
    depth = sum(1 for k in params if k.startswith("enc") and k.endswith(".conv.weight"))
    w0 = params["enc0.conv.weight"].shape
    out_ch = params[f"dec{depth - 2}.convt.weight"].shape[1]
    return GeneratorConfig(
        image_size=2 ** (depth - 1),
        in_frames=w0[1] // out_ch,
        frame_channels=out_ch,
        base_filters=w0[0],
    )


def _check_frames(frames, size=None):
    shape = frames[0].shape
    for f in frames:
        if f.data.ndim != 4:
            raise DimensionError(f"frames must be (N, C, H, W), got {f.shape}")
        if f.shape != shape:
            raise DimensionError(f"frame shape mismatch: {f.shape} vs {shape}")
    if size is not None and shape[2:] != (size, size):
        raise DimensionError(f"frames are {shape[2]}x{shape[3]}, model expects {size}x{size}")


def generator_forward(params, x_n, x_np2, training=False, seed=0, config=None, update_stats=True):
    """Predict the middle frame from its two neighbours; output lies in (-1, 1)."""
    x_n, x_np2 = nx._as_tensor(x_n), nx._as_tensor(x_np2)
    config = config or generator_config_from_params(params)
    _check_frames([x_n, x_np2], config.image_size)
    rng = np.random.default_rng(seed) if training else None
    h = nx.concat_channels(x_n, x_np2)
    skips = []
    for i in range(config.encoder_depth):
        stride, pad = (1, 1) if i == 0 else (2, 1)
        h = nx.conv2d(h, _conv(params, f"enc{i}.conv", stride, pad))
        if i == 0 or _has_encoder_bn(i, config):
            h = nx.batchnorm(h, _bn(params, f"enc{i}.bn"), training, update_stats)
        h = nx.leaky_relu(h, LEAKY_SLOPE)
        skips.append(h)
    d = config.down_layers
    for j in range(d):
        if j > 0:
            h = nx.concat_channels(h, skips[d - j])
        h = nx.conv2d_transpose(h, _conv(params, f"dec{j}.convt", 2, 1))
        if j == d - 1:
            h = nx.tanh(h)
        else:
            h = nx.relu(h)
            if training and j < 3:
                h = nx.dropout(h, config.dropout_rate, rng)
    return h


# ---------------------------------------------------------------------------
# discriminator


def build_discriminator(config: DiscriminatorConfig, seed: int = 43) -> ParameterSet:
    b = _Builder(seed)
    filters = [config.base_filters * f for f in DISC_FILTER_PLAN] + [1]
    prev = config.in_channels
    for i, f in enumerate(filters):
        b.conv(f"s{i}.conv", (f, prev, 4, 4))
        if i in (1, 2, 3):
            b.bn(f"s{i}.bn", f)
        prev = f
    return b.params


def discriminator_forward(params, x_n, x_np2, x_test, training=False, update_stats=True):
    """Per-patch probability that ``x_test`` is the real middle frame."""
    frames = [nx._as_tensor(x) for x in (x_n, x_np2, x_test)]
    _check_frames(frames)
    h = nx.concat_channels(nx.concat_channels(frames[0], frames[1]), frames[2])
    for i, stride in enumerate((2, 2, 2, 1, 1)):
        h = nx.conv2d(h, _conv(params, f"s{i}.conv", stride, 1))
        if i in (1, 2, 3):
            h = nx.batchnorm(h, _bn(params, f"s{i}.bn"), training, update_stats)
        h = nx.leaky_relu(h, LEAKY_SLOPE) if i < 4 else nx.sigmoid(h)
    return h


def discriminator_score(patches):
    """Scalar score used by the losses: the mean over the patch grid."""
    return nx.mean(patches)
