"""
Stacked-autoencoder segmentation network parameters
"""

from dataclasses import dataclass, field
from typing import List

import numpy as np

from app.core.errors import ChannelMismatchError

DHAC_CHANNELS = 4


@dataclass(eq=False)
class LayerParams:
    """One layer: k x k encoder to d hidden maps, 1 x 1 classifier head to K logits"""

    encoder_weight: np.ndarray  # (d, c_in, k, k)
    encoder_bias: np.ndarray  # (d,)
    head_weight: np.ndarray  # (K, d)
    head_bias: np.ndarray  # (K,)
    scale: int  # layer operates at 1 / 2**scale

    def __post_init__(self):
        d, _, k, k2 = self.encoder_weight.shape
        if k != k2 or k % 2 == 0:
            raise ValueError("encoder kernel must be square with odd size")
        if self.encoder_bias.shape != (d,) or self.head_weight.shape[1] != d:
            raise ValueError("hidden width mismatch between encoder and head")
        if self.head_bias.shape != (self.head_weight.shape[0],):
            raise ValueError("head bias must have one entry per class")

    @property
    def in_channels(self) -> int:
        return self.encoder_weight.shape[1]

    @property
    def hidden(self) -> int:
        return self.encoder_weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.encoder_weight.shape[2]

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[0]

    def tensors(self) -> List[np.ndarray]:
        """Parameter tensors in serialization order"""
        return [self.encoder_weight, self.encoder_bias, self.head_weight, self.head_bias]

    def copy(self) -> "LayerParams":
        return LayerParams(*(t.copy() for t in self.tensors()), scale=self.scale)

    def astype(self, dtype) -> "LayerParams":
        return LayerParams(*(t.astype(dtype) for t in self.tensors()), scale=self.scale)

    def check_input(self, channels: int) -> None:
        if channels != self.in_channels:
            raise ChannelMismatchError(f"layer expects {self.in_channels} channels, got {channels}")

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(t, dtype="<f4").tobytes() for t in self.tensors())

    @classmethod
    def initialize(cls, in_channels: int, hidden: int, kernel: int, num_classes: int,
                   scale: int, rng: np.random.Generator) -> "LayerParams":
        """Glorot-uniform weights, zero biases"""
        fan_in = in_channels * kernel * kernel
        limit = np.sqrt(6.0 / (fan_in + hidden))
        encoder = rng.uniform(-limit, limit, size=(hidden, in_channels, kernel, kernel))
        head_limit = np.sqrt(6.0 / (hidden + num_classes))
        head = rng.uniform(-head_limit, head_limit, size=(num_classes, hidden))
        return cls(
            encoder_weight=encoder.astype(np.float32),
            encoder_bias=np.zeros(hidden, dtype=np.float32),
            head_weight=head.astype(np.float32),
            head_bias=np.zeros(num_classes, dtype=np.float32),
            scale=scale,
        )


def layer_input_channels(index: int, hidden: int, num_classes: int) -> int:
    """Channels consumed by layer `index` (0-based)"""
    return DHAC_CHANNELS + (hidden + num_classes if index > 0 else 0)


@dataclass(eq=False)
class AutoencoderStack:
    """Ordered layers; layer i runs at scale first_scale + i"""

    num_classes: int
    hidden: int
    kernel: int
    num_layers: int = 4
    first_scale: int = 1
    layers: List[LayerParams] = field(default_factory=list)
    input_channels: int = DHAC_CHANNELS

    def __post_init__(self):
        scales = [layer.scale for layer in self.layers]
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ValueError("layer scales must be strictly increasing")
        for i, layer in enumerate(self.layers):
            expected = layer_input_channels(i, self.hidden, self.num_classes)
            if layer.in_channels != expected:
                raise ValueError(f"layer {i + 1} takes {layer.in_channels} channels, expected {expected}")

    def scale_of(self, index: int) -> int:
        return self.first_scale + index

    @property
    def trained_layers(self) -> int:
        return len(self.layers)

    def truncated(self, count: int) -> "AutoencoderStack":
        """Stack holding only the first `count` layers (shared parameter arrays)"""
        return AutoencoderStack(
            num_classes=self.num_classes,
            hidden=self.hidden,
            kernel=self.kernel,
            num_layers=self.num_layers,
            first_scale=self.first_scale,
            layers=list(self.layers[:count]),
        )
