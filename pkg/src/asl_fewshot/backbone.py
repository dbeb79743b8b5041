"""Four-block convolutional encoder in the Conv-64F style."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .nn import batch_norm, conv2d, he_uniform, max_pool2x2
from .tensor import Tensor, as_tensor, parameter, relu


class ConvEncoder:
    """conv3x3 -> batch norm -> ReLU -> 2x2 max-pool, repeated ``depth`` times.

    Output spatial extent is the input extent divided by ``2**depth``. The
    convolutions carry no bias because the following normalisation shift
    absorbs it.
    """

    def __init__(self, in_channels: int = 3, channels: int = 32, depth: int = 4, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.channels = channels
        self.depth = depth
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        cin = in_channels
        for b in range(1, depth + 1):
            self.params[f"block{b}.kernel"] = parameter(he_uniform(rng, (3, 3, cin, channels), 9 * cin))
            self.params[f"block{b}.gamma"] = parameter(np.ones(channels))
            self.params[f"block{b}.beta"] = parameter(np.zeros(channels))
            self.buffers[f"block{b}.running_mean"] = np.zeros(channels)
            self.buffers[f"block{b}.running_var"] = np.ones(channels)
            cin = channels

    def output_shape(self, image_shape: tuple[int, int, int]) -> tuple[int, int, int]:
        h, w, c = image_shape
        factor = 2**self.depth
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {c}")
        if h % factor or w % factor:
            raise ShapeError(f"image extent {h}x{w} is not divisible by {factor}")
        return h // factor, w // factor, self.channels

    def encode(self, images, training: bool = False) -> Tensor:
        """Map (B, H, W, 3) images to (B, H/2**depth, W/2**depth, C) feature maps."""
        x = as_tensor(images)
        self.output_shape(x.shape[-3:])
        for b in range(1, self.depth + 1):
            x = conv2d(x, self.params[f"block{b}.kernel"])
            x = batch_norm(
                x,
                self.params[f"block{b}.gamma"],
                self.params[f"block{b}.beta"],
                self.buffers[f"block{b}.running_mean"],
                self.buffers[f"block{b}.running_var"],
                training=training,
            )
            # relu and max-pool commute; pooling first touches 4x fewer cells
            x = relu(max_pool2x2(x))
        return x
