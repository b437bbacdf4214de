"""
LR-ASPP head and the recurrent decoder.

Convolutions run on frames flattened to (B·T)×C×H×W; each ConvGRU reshapes
its half of the channels back to B×T×C×H×W and steps through time, so every
layer processes all T frames before the next layer runs.
"""
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.shared.domain.exceptions import ShapeError
from src.shared.tensor import Conv2d, Module, Tensor, conv_bn_act
from src.shared.tensor import functional as F

from ..domain.entities import RecurrentState


class LRASPP(Module):
    """1×1 conv+BN+ReLU branch gated by a pooled 1×1 conv + hardsigmoid branch."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.aspp1 = conv_bn_act(in_channels, out_channels, 1, rng, "relu")
        self.aspp2 = Conv2d(in_channels, out_channels, 1, bias=False, rng=rng)
        self.aspp2.on_pooled = True

    def forward(self, x: Tensor) -> Tensor:
        gate = F.hardsigmoid(self.aspp2(F.global_avg_pool(x)))
        return self.aspp1(x) * gate


class ConvGRU(Module):
    """Convolutional GRU over C channels with 3×3 kernels and zero-initialized biases."""

    def __init__(self, channels: int, rng: np.random.Generator, kernel_size: int = 3):
        super().__init__()
        self.channels = channels
        # gate conv emits [z | r]
        self.gates = Conv2d(2 * channels, 2 * channels, kernel_size, rng=rng, zero_bias=True)
        self.candidate = Conv2d(2 * channels, channels, kernel_size, rng=rng, zero_bias=True)

    def forward(
        self,
        x: Tensor,
        h: Optional[Tensor] = None,
        recurrence: bool = True,
    ) -> Tuple[Tensor, Tensor, List[Tensor]]:
        """
        Run the cell over a B×T×C×H×W sequence.

        Args:
            x: input sequence
            h: B×C×H×W state, zeros when omitted
            recurrence: when False every step starts from the zero state

        Returns:
            (output sequence, last state, per-step states)
        """
        batch, time, channels, height, width = x.shape
        zero = Tensor(np.zeros((batch, channels, height, width), dtype=x.dtype))
        if h is None:
            h = zero
        outputs = []
        for t in range(time):
            step_in = h if recurrence else zero
            h = conv_gru_cell(x[:, t], step_in, self)
            outputs.append(h)
        return F.stack(outputs, axis=1), h, outputs


def conv_gru_cell(x: Tensor, h: Tensor, params: ConvGRU) -> Tensor:
    """
    One ConvGRU update.

    z, r = sigmoid(W_g * [x, h] + b_g)
    o = tanh(W_o * [x, r·h] + b_o)
    h' = z·h + (1 - z)·o
    """
    if x.shape != h.shape:
        raise ShapeError("ConvGRU input and state must have equal extents", x.shape, h.shape)
    channels = x.shape[1]
    if channels != params.channels:
        raise ShapeError("ConvGRU channel count differs from its parameters", x.shape, (params.channels,))
    gates = F.sigmoid(params.gates(F.concat([x, h], axis=1)))
    z, r = F.split(gates, [channels, channels], axis=1)
    candidate = F.tanh(params.candidate(F.concat([x, r * h], axis=1)))
    return z * h + (1.0 - z) * candidate


def _recurrent_half(
    gru: ConvGRU,
    x: Tensor,
    h: Optional[Tensor],
    batch: int,
    time: int,
    recurrence: bool,
) -> Tuple[Tensor, Tensor, List[Tensor]]:
    """Pass the first half of the channels through the GRU, keep the second half."""
    half = x.shape[1] // 2
    _, _, height, width = x.shape
    a, b = F.split(x, [half, half], axis=1)
    a, h, history = gru(a.reshape(batch, time, half, height, width), h, recurrence)
    return F.concat([a.reshape(batch * time, half, height, width), b], axis=1), h, history


class BottleneckBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.gru = ConvGRU(channels // 2, rng)

    def forward(self, x, h, batch, time, recurrence=True):
        return _recurrent_half(self.gru, x, h, batch, time, recurrence)


class UpsamplingBlock(Module):
    """Upsample, concat skip features and pooled frames, conv+BN+ReLU, half-channel GRU."""

    def __init__(self, in_channels: int, skip_channels: int, src_channels: int, out_channels: int,
                 rng: np.random.Generator):
        super().__init__()
        self.out_channels = out_channels
        self.conv = conv_bn_act(in_channels + skip_channels + src_channels, out_channels, 3, rng, "relu")
        self.gru = ConvGRU(out_channels // 2, rng)

    def forward(self, x, skip, src, h, batch, time, recurrence=True):
        x = F.bilinear_resize(x, skip.shape[2], skip.shape[3])
        x = self.conv(F.concat([x, skip, src], axis=1))
        return _recurrent_half(self.gru, x, h, batch, time, recurrence)


class OutputBlock(Module):
    """Two conv+BN+ReLU stacks at full network resolution."""

    def __init__(self, in_channels: int, src_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = conv_bn_act(in_channels + src_channels, out_channels, 3, rng, "relu")
        self.conv2 = conv_bn_act(out_channels, out_channels, 3, rng, "relu")

    def forward(self, x: Tensor, src: Tensor) -> Tensor:
        x = F.bilinear_resize(x, src.shape[2], src.shape[3])
        return self.conv2(self.conv1(F.concat([x, src], axis=1)))


class RecurrentDecoder(Module):
    """Bottleneck, three upsampling blocks and the output block."""

    def __init__(self, encoder_channels: Sequence[int], decoder_channels: Sequence[int],
                 rng: np.random.Generator):
        super().__init__()
        e2, e4, e8, _ = encoder_channels
        d16, d8, d4, d2, d1 = decoder_channels
        self.bottleneck = BottleneckBlock(d16, rng)
        self.decode8 = UpsamplingBlock(d16, e8, 3, d8, rng)
        self.decode4 = UpsamplingBlock(d8, e4, 3, d4, rng)
        self.decode2 = UpsamplingBlock(d4, e2, 3, d2, rng)
        self.output = OutputBlock(d2, 3, d1, rng)

    def forward(
        self,
        src: Tensor,
        features: Tuple[Tensor, Tensor, Tensor, Tensor],
        state: RecurrentState,
        batch: int,
        time: int,
        recurrence: bool = True,
    ) -> Tuple[Tensor, RecurrentState, List[RecurrentState]]:
        """
        Decode (B·T)-flattened features into final hidden features.

        ``features`` are the 1/2, 1/4, 1/8 encoder maps and the LR-ASPP output.
        """
        f2, f4, f8, f16 = features
        s2 = F.avg_pool_2x2(src)
        s4 = F.avg_pool_2x2(s2)
        s8 = F.avg_pool_2x2(s4)
        h16, h8, h4, h2 = state.hidden

        x16, h16, hist16 = self.bottleneck(f16, h16, batch, time, recurrence)
        x8, h8, hist8 = self.decode8(x16, f8, s8, h8, batch, time, recurrence)
        x4, h4, hist4 = self.decode4(x8, f4, s4, h4, batch, time, recurrence)
        x2, h2, hist2 = self.decode2(x4, f2, s2, h2, batch, time, recurrence)
        hidden = self.output(x2, src)

        history = [RecurrentState(hidden=list(step)) for step in zip(hist16, hist8, hist4, hist2)]
        return hidden, RecurrentState(hidden=[h16, h8, h4, h2]), history
